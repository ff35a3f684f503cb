//! Declarative experiment configuration: TOML files with flag overrides,
//! dataset presets, validation, and provenance echo.

use crate::augment::AugmentParams;
use crate::data::{self, CsvSchema, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::{AnchorAggregation, Bandwidth, DistanceMetric, LossWeights};
use crate::model::{ArchitectureSpec, ConvLayerSpec};
use crate::trainer::{SuiteSettings, TrainSettings};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Dsads,
    Pamap2,
    Uschad,
    Synthetic,
    CustomCsv,
}

impl DatasetKind {
    pub fn name(self) -> &'static str {
        match self {
            DatasetKind::Dsads => "dsads",
            DatasetKind::Pamap2 => "pamap2",
            DatasetKind::Uschad => "uschad",
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::CustomCsv => "custom-csv",
        }
    }
}

/// Protocol constants of the three benchmark datasets.
struct DatasetPreset {
    window_len: usize,
    channels: usize,
    n_classes: usize,
    n_subjects: usize,
    group_count: usize,
    arch: fn() -> ArchitectureSpec,
}

fn preset(kind: DatasetKind) -> Option<DatasetPreset> {
    match kind {
        DatasetKind::Dsads => Some(DatasetPreset {
            window_len: 125,
            channels: 45,
            n_classes: 19,
            n_subjects: 8,
            group_count: 4,
            arch: ArchitectureSpec::dsads,
        }),
        DatasetKind::Pamap2 => Some(DatasetPreset {
            window_len: 512,
            channels: 27,
            n_classes: 8,
            n_subjects: 8,
            group_count: 4,
            arch: ArchitectureSpec::pamap2,
        }),
        DatasetKind::Uschad => Some(DatasetPreset {
            window_len: 500,
            channels: 6,
            n_classes: 12,
            n_subjects: 14,
            group_count: 5,
            arch: ArchitectureSpec::uschad,
        }),
        DatasetKind::Synthetic | DatasetKind::CustomCsv => None,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub dataset: DatasetKind,
    #[serde(default)]
    pub data_path: Option<PathBuf>,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    #[serde(default)]
    pub export_embeddings: bool,
    /// Seed for synthetic data generation (independent of the run seeds).
    #[serde(default)]
    pub data_seed: u64,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn default_workers() -> usize {
    1
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub window_len: Option<usize>,
    pub overlap: Option<f64>,
    pub channels: Option<usize>,
    pub n_classes: Option<usize>,
    pub group_count: Option<usize>,
    pub low_resource_fraction: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub distance_metric: DistanceMetric,
    pub augment: bool,
    pub detach_dp_features: bool,
    pub supcon_aggregation: AnchorAggregation,
    /// Fixed Gaussian bandwidth for MMD; absent = median heuristic.
    pub mmd_bandwidth: Option<f64>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lr: 0.0008,
            batch_size: 64,
            epochs: 150,
            distance_metric: DistanceMetric::Discriminator,
            augment: true,
            detach_dp_features: false,
            supcon_aggregation: AnchorAggregation::Sum,
            mmd_bandwidth: None,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    /// One of `dsads`, `pamap2`, `uschad`; absent = dataset default.
    pub preset: Option<String>,
    pub conv_channels: Option<Vec<usize>>,
    pub kernel_width: Option<usize>,
    pub feature_dim: Option<usize>,
    pub projection_head: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub weights: LossWeights,
    #[serde(default)]
    pub augment_params: AugmentParams,
    #[serde(default)]
    pub arch: ArchSection,
    #[serde(default)]
    pub synthetic: Option<SyntheticConfig>,
}

/// Fully derived per-run constants after preset resolution.
#[derive(Clone, Debug)]
pub struct ResolvedData {
    pub window_len: usize,
    pub overlap: f64,
    pub channels: usize,
    pub n_classes: usize,
    pub group_count: usize,
    pub fraction: f64,
    pub arch: ArchitectureSpec,
}

impl ExperimentConfig {
    /// Parse a TOML file and apply `section.key=value` overrides on top
    /// (overrides win). Unknown keys are rejected.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config parse: {e}")))?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Write the fully-resolved config next to the run artifacts.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialize: {e}")))?;
        std::fs::write(dir.join("config.resolved.toml"), text)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("experiment.seeds: need at least one seed".into()));
        }
        if self.experiment.workers == 0 {
            return Err(Error::Config("experiment.workers: must be >= 1".into()));
        }
        if let Some(f) = self.data.low_resource_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!(
                    "data.low_resource_fraction: {f} outside accepted range (0, 1]"
                )));
            }
        }
        if let Some(o) = self.data.overlap {
            if !(0.0..1.0).contains(&o) {
                return Err(Error::Config(format!(
                    "data.overlap: {o} outside accepted range [0, 1)"
                )));
            }
        }
        if self.train.lr <= 0.0 || !self.train.lr.is_finite() {
            return Err(Error::Config(format!(
                "train.lr: {} outside accepted range (0, inf)",
                self.train.lr
            )));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(Error::Config("train.batch_size and train.epochs must be >= 1".into()));
        }
        if let Some(b) = self.train.mmd_bandwidth {
            if b <= 0.0 {
                return Err(Error::Config(format!(
                    "train.mmd_bandwidth: {b} outside accepted range (0, inf)"
                )));
            }
        }
        self.weights.validate()?;
        self.resolve()?; // preset consistency and architecture shape checks
        Ok(())
    }

    /// Resolve presets into concrete data and architecture constants.
    pub fn resolve(&self) -> Result<ResolvedData> {
        let kind = self.experiment.dataset;
        let fraction = self.data.low_resource_fraction.unwrap_or(1.0);
        let overlap = self.data.overlap.unwrap_or(0.5);

        let (window_len, channels, n_classes, group_count) = if let Some(p) = preset(kind) {
            for (key, have, want) in [
                ("data.window_len", self.data.window_len, p.window_len),
                ("data.channels", self.data.channels, p.channels),
                ("data.n_classes", self.data.n_classes, p.n_classes),
                ("data.group_count", self.data.group_count, p.group_count),
            ] {
                if let Some(v) = have {
                    if v != want {
                        return Err(Error::Config(format!(
                            "{key}: {v} conflicts with the {} preset value {want}",
                            kind.name()
                        )));
                    }
                }
            }
            (p.window_len, p.channels, p.n_classes, p.group_count)
        } else if kind == DatasetKind::Synthetic {
            let synth = self.synthetic.clone().unwrap_or_default();
            synth.validate()?;
            if let Some(c) = self.data.channels {
                if c != synth.channels {
                    return Err(Error::Config(format!(
                        "data.channels: {c} conflicts with synthetic.channels {}",
                        synth.channels
                    )));
                }
            }
            (
                self.data.window_len.unwrap_or(32),
                synth.channels,
                synth.n_classes,
                self.data.group_count.unwrap_or(2),
            )
        } else {
            let need = |name: &str, v: Option<usize>| {
                v.ok_or_else(|| Error::Config(format!("{name} is required for custom-csv")))
            };
            (
                need("data.window_len", self.data.window_len)?,
                need("data.channels", self.data.channels)?,
                need("data.n_classes", self.data.n_classes)?,
                need("data.group_count", self.data.group_count)?,
            )
        };

        let arch = self.build_arch(kind, channels, window_len, n_classes)?;
        arch.shape_trace()?;
        Ok(ResolvedData { window_len, overlap, channels, n_classes, group_count, fraction, arch })
    }

    fn build_arch(
        &self,
        kind: DatasetKind,
        channels: usize,
        window_len: usize,
        n_classes: usize,
    ) -> Result<ArchitectureSpec> {
        if let Some(name) = &self.arch.preset {
            let spec = match name.as_str() {
                "dsads" => ArchitectureSpec::dsads(),
                "pamap2" => ArchitectureSpec::pamap2(),
                "uschad" => ArchitectureSpec::uschad(),
                other => {
                    return Err(Error::Config(format!(
                        "arch.preset: unknown preset `{other}` (accepted: dsads, pamap2, uschad)"
                    )))
                }
            };
            if spec.input_channels != channels || spec.input_width != window_len {
                return Err(Error::Config(format!(
                    "arch.preset {name} expects input ({}, 1, {}), dataset provides ({channels}, 1, {window_len})",
                    spec.input_channels, spec.input_width
                )));
            }
            return Ok(ArchitectureSpec { projection_head: self.arch.projection_head, ..spec });
        }
        let explicit = self.arch.conv_channels.is_some()
            || self.arch.kernel_width.is_some()
            || self.arch.feature_dim.is_some();
        if !explicit {
            if let Some(p) = preset(kind) {
                let base = (p.arch)();
                return Ok(ArchitectureSpec { projection_head: self.arch.projection_head, ..base });
            }
        }
        // Desk-scale default, overridable field by field.
        let conv_channels = self.arch.conv_channels.clone().unwrap_or_else(|| vec![8, 16]);
        let kernel_width = self.arch.kernel_width.unwrap_or(9);
        Ok(ArchitectureSpec {
            input_channels: channels,
            input_width: window_len,
            conv_layers: conv_channels
                .into_iter()
                .map(|out_channels| ConvLayerSpec { out_channels, kernel_width })
                .collect(),
            fc_feature_dim: self.arch.feature_dim.unwrap_or(32),
            n_activity_classes: n_classes,
            projection_head: self.arch.projection_head,
        })
    }

    /// Load (or generate) the dataset, segment it, and assemble the full
    /// suite inputs.
    pub fn build_suite(&self) -> Result<SuiteSettings> {
        let resolved = self.resolve()?;
        let recordings = match self.experiment.dataset {
            DatasetKind::Synthetic => {
                let synth = self.synthetic.clone().unwrap_or_default();
                data::synth_generate(&synth, self.experiment.data_seed)?
            }
            kind => {
                let path = self.experiment.data_path.as_ref().ok_or_else(|| {
                    Error::Config(format!(
                        "experiment.data_path is required for dataset {}",
                        kind.name()
                    ))
                })?;
                let schema =
                    CsvSchema { channels: resolved.channels, n_classes: resolved.n_classes };
                let recs = data::load_dataset(path, &schema)?;
                if let Some(p) = preset(kind) {
                    let mut subjects: Vec<usize> = recs.iter().map(|r| r.subject_id).collect();
                    subjects.sort_unstable();
                    subjects.dedup();
                    if subjects.len() != p.n_subjects {
                        log::warn!(
                            "dataset {} provides {} subjects, protocol expects {}",
                            kind.name(),
                            subjects.len(),
                            p.n_subjects
                        );
                    }
                }
                recs
            }
        };
        let mut windows = Vec::new();
        for rec in &recordings {
            windows.extend(data::segment_windows(rec, resolved.window_len, resolved.overlap)?);
        }
        if windows.is_empty() {
            return Err(Error::Input("dataset produced no windows".into()));
        }

        let mut train = TrainSettings::new(resolved.arch.clone(), self.experiment.seeds[0]);
        train.lr = self.train.lr;
        train.batch_size = self.train.batch_size;
        train.epochs = self.train.epochs;
        train.weights = self.weights;
        train.metric = self.train.distance_metric;
        train.augment = self.train.augment;
        train.aug_params = self.augment_params.clone();
        train.detach_dp_features = self.train.detach_dp_features;
        train.supcon_aggregation = self.train.supcon_aggregation;
        train.mmd_bandwidth = match self.train.mmd_bandwidth {
            Some(b) => Bandwidth::Fixed(b),
            None => Bandwidth::Median,
        };

        Ok(SuiteSettings {
            dataset_name: self.experiment.dataset.name().to_string(),
            windows,
            group_count: resolved.group_count,
            fraction: resolved.fraction,
            seeds: self.experiment.seeds.clone(),
            n_classes: resolved.n_classes,
            train,
            output_dir: self.experiment.output_dir.clone(),
            workers: self.experiment.workers,
            export_embeddings: self.experiment.export_embeddings,
        })
    }
}

/// Apply one `section.key=value` override onto the parsed TOML tree.
fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not of the form key=value")))?;
    let segments: Vec<&str> = path.trim().split('.').collect();
    if segments.is_empty() || segments.iter().any(|s| s.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    // Parse the value as TOML; fall back to a plain string.
    let value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));

    let mut cursor = table;
    for seg in &segments[..segments.len() - 1] {
        cursor = cursor
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{spec}`: `{seg}` is not a table")))?;
    }
    cursor.insert(segments.last().unwrap().to_string(), value);
    Ok(())
}

//! Ingestion, windowing, normalization, task construction, and the
//! synthetic benchmark generator.
//!
//! Raw recordings are contiguous per-(subject, activity) multi-channel
//! streams. They are segmented into fixed-length windows with fractional
//! overlap, normalized per channel with a scaler fitted on source training
//! windows only, and organized into leave-one-group-out tasks with 6:2:2
//! per-subject splits and low-resource subsampling.

use crate::augment::AugmentationKind;
use crate::error::{Error, Result};
use crate::rng::{self, salt};
use crate::tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Train/val/test fractions of the per-subject split.
pub const SPLIT_FRACTIONS: (f64, f64, f64) = (0.6, 0.2, 0.2);

/// One contiguous recording of a subject performing one activity.
#[derive(Clone, Debug)]
pub struct RawRecording {
    pub subject_id: usize,
    pub activity_label: usize,
    /// `[c, L]` samples in sensor units.
    pub samples: Tensor,
}

impl RawRecording {
    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// One fixed-length `[c, 1, w]` segment with its labels.
#[derive(Clone, Debug)]
pub struct SensorWindow {
    pub data: Tensor,
    pub activity_label: usize,
    pub subject_id: usize,
    pub aug_kind: AugmentationKind,
}

impl SensorWindow {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn window_len(&self) -> usize {
        self.data.shape()[2]
    }
}

/// One leave-one-group-out task over a fixed subject grouping.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SplitSpec {
    /// Disjoint subject groups covering all subjects.
    pub groups: Vec<Vec<usize>>,
    pub target_group_index: usize,
    pub low_resource_fraction: f64,
}

impl SplitSpec {
    pub fn target_subjects(&self) -> &[usize] {
        &self.groups[self.target_group_index]
    }

    pub fn source_subjects(&self) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != self.target_group_index)
            .flat_map(|(_, g)| g.iter().copied())
            .collect()
    }
}

/// Closed-form window count for a recording of length `l`.
pub fn window_count(l: usize, window_len: usize, step: usize) -> usize {
    if window_len > l {
        0
    } else {
        (l - window_len) / step + 1
    }
}

/// Segmentation step for a window length and overlap fraction.
pub fn segment_step(window_len: usize, overlap: f64) -> Result<usize> {
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Input(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let step = (window_len as f64 * (1.0 - overlap)).floor() as usize;
    if step == 0 {
        return Err(Error::Input(format!(
            "overlap {overlap} leaves a zero step for window length {window_len}"
        )));
    }
    Ok(step)
}

/// Slice a recording into overlapping windows; each window inherits the
/// recording's labels. A window longer than the recording yields an empty
/// result with a warning rather than an error.
pub fn segment_windows(
    rec: &RawRecording,
    window_len: usize,
    overlap: f64,
) -> Result<Vec<SensorWindow>> {
    if window_len == 0 {
        return Err(Error::Input("window length must be >= 1".into()));
    }
    let step = segment_step(window_len, overlap)?;
    let (c, l) = (rec.channels(), rec.len());
    if window_len > l {
        log::warn!(
            "window length {window_len} exceeds recording length {l} \
             (subject {}, activity {}); emitting no windows",
            rec.subject_id,
            rec.activity_label
        );
        return Ok(Vec::new());
    }
    let src = rec.samples.data();
    let mut out = Vec::with_capacity(window_count(l, window_len, step));
    let mut start = 0;
    while start + window_len <= l {
        let mut data = vec![0.0; c * window_len];
        for ch in 0..c {
            data[ch * window_len..(ch + 1) * window_len]
                .copy_from_slice(&src[ch * l + start..ch * l + start + window_len]);
        }
        out.push(SensorWindow {
            data: Tensor::from_parts(vec![c, 1, window_len], data),
            activity_label: rec.activity_label,
            subject_id: rec.subject_id,
            aug_kind: AugmentationKind::Original,
        });
        start += step;
    }
    Ok(out)
}

/// Per-channel min/max statistics fitted on source training windows only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MinMaxScaler {
    mins: Vec<f64>,
    maxs: Vec<f64>,
}

impl MinMaxScaler {
    pub fn channels(&self) -> usize {
        self.mins.len()
    }

    pub fn channel_range(&self, ch: usize) -> (f64, f64) {
        (self.mins[ch], self.maxs[ch])
    }

    /// A channel whose training values were all identical.
    pub fn is_degenerate(&self, ch: usize) -> bool {
        self.maxs[ch] == self.mins[ch]
    }
}

pub fn fit_minmax(train_windows: &[SensorWindow]) -> Result<MinMaxScaler> {
    let first = train_windows
        .first()
        .ok_or_else(|| Error::Input("cannot fit a scaler on an empty training set".into()))?;
    let c = first.channels();
    let mut mins = vec![f64::INFINITY; c];
    let mut maxs = vec![f64::NEG_INFINITY; c];
    for win in train_windows {
        if win.channels() != c {
            return Err(Error::dim(
                "fit_minmax",
                format!("channel axis (0): expected {c}, got {}", win.channels()),
            ));
        }
        let w = win.window_len();
        for ch in 0..c {
            for &v in &win.data.data()[ch * w..(ch + 1) * w] {
                mins[ch] = mins[ch].min(v);
                maxs[ch] = maxs[ch].max(v);
            }
        }
    }
    let scaler = MinMaxScaler { mins, maxs };
    for ch in 0..c {
        if scaler.is_degenerate(ch) {
            log::warn!("channel {ch} is constant in the training set; it will normalize to 0");
        }
    }
    Ok(scaler)
}

/// `x' = (x − min) / (max − min)` clamped into `[0, 1]`; degenerate
/// channels map to 0.
pub fn apply_minmax(windows: &[SensorWindow], scaler: &MinMaxScaler) -> Result<Vec<SensorWindow>> {
    let mut out = Vec::with_capacity(windows.len());
    for win in windows {
        let c = win.channels();
        if c != scaler.channels() {
            return Err(Error::dim(
                "apply_minmax",
                format!("channel axis (0): scaler has {}, window has {c}", scaler.channels()),
            ));
        }
        let w = win.window_len();
        let mut data = win.data.data().to_vec();
        for ch in 0..c {
            let (lo, hi) = scaler.channel_range(ch);
            let span = hi - lo;
            for v in &mut data[ch * w..(ch + 1) * w] {
                *v = if span > 0.0 { ((*v - lo) / span).clamp(0.0, 1.0) } else { 0.0 };
            }
        }
        out.push(SensorWindow {
            data: Tensor::from_parts(vec![c, 1, w], data),
            ..win.clone()
        });
    }
    Ok(out)
}

/// Partition subjects (in id order) into `group_count` groups and emit one
/// leave-one-group-out task per group. Group sizes differ by at most one,
/// larger groups first.
pub fn make_tasks(
    subjects: &[usize],
    group_count: usize,
    low_resource_fraction: f64,
) -> Result<Vec<SplitSpec>> {
    if subjects.is_empty() {
        return Err(Error::Config("no subjects to group".into()));
    }
    if group_count == 0 || group_count > subjects.len() {
        return Err(Error::Config(format!(
            "group count {group_count} invalid for {} subjects",
            subjects.len()
        )));
    }
    if !(0.0..=1.0).contains(&low_resource_fraction) || low_resource_fraction == 0.0 {
        return Err(Error::Config(format!(
            "low_resource_fraction must lie in (0, 1], got {low_resource_fraction}"
        )));
    }
    let mut sorted = subjects.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    if sorted.len() != subjects.len() {
        return Err(Error::Config("duplicate subject ids".into()));
    }
    let base = sorted.len() / group_count;
    let rem = sorted.len() % group_count;
    let mut groups = Vec::with_capacity(group_count);
    let mut idx = 0;
    for g in 0..group_count {
        let len = base + usize::from(g < rem);
        groups.push(sorted[idx..idx + len].to_vec());
        idx += len;
    }
    Ok((0..group_count)
        .map(|target| SplitSpec {
            groups: groups.clone(),
            target_group_index: target,
            low_resource_fraction,
        })
        .collect())
}

/// Seeded uniform sample without replacement of `round(fraction · n)`
/// windows, unstratified; input order is preserved within the subset.
pub fn subsample_low_resource(
    windows: &[SensorWindow],
    fraction: f64,
    seed: u64,
) -> Result<Vec<SensorWindow>> {
    if !(0.0..=1.0).contains(&fraction) || fraction == 0.0 {
        return Err(Error::Config(format!("fraction must lie in (0, 1], got {fraction}")));
    }
    let n = windows.len();
    let keep = (fraction * n as f64).round() as usize;
    if keep == 0 {
        return Err(Error::Config(format!(
            "fraction {fraction} of {n} windows leaves an empty training set"
        )));
    }
    let mut rng = rng::stream(seed, &[salt::SUBSAMPLE]);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..keep.min(n.saturating_sub(1)) {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    let mut chosen = idx[..keep].to_vec();
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| windows[i].clone()).collect())
}

/// Split one subject set of windows 6:2:2 at the window level with a
/// seeded per-subject shuffle; every subject contributes to all splits.
pub fn split_per_subject(
    windows: &[SensorWindow],
    seed: u64,
) -> (Vec<SensorWindow>, Vec<SensorWindow>, Vec<SensorWindow>) {
    let mut subjects: Vec<usize> = windows.iter().map(|w| w.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();

    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for subject in subjects {
        let mut own: Vec<&SensorWindow> =
            windows.iter().filter(|w| w.subject_id == subject).collect();
        let mut rng = rng::stream(seed, &[salt::SPLIT, subject as u64]);
        for i in (1..own.len()).rev() {
            let j = rng.random_range(0..=i);
            own.swap(i, j);
        }
        let n = own.len();
        let n_train = (SPLIT_FRACTIONS.0 * n as f64).round() as usize;
        let n_val = ((SPLIT_FRACTIONS.1 * n as f64).round() as usize).min(n - n_train.min(n));
        for (i, w) in own.into_iter().enumerate() {
            if i < n_train {
                train.push(w.clone());
            } else if i < n_train + n_val {
                val.push(w.clone());
            } else {
                test.push(w.clone());
            }
        }
    }
    (train, val, test)
}

/// Stack windows into one `[b, c, 1, w]` batch tensor.
pub fn windows_to_batch(windows: &[SensorWindow]) -> Result<Tensor> {
    let first = windows
        .first()
        .ok_or_else(|| Error::Input("cannot batch zero windows".into()))?;
    let (c, w) = (first.channels(), first.window_len());
    let mut data = Vec::with_capacity(windows.len() * c * w);
    for win in windows {
        if win.channels() != c || win.window_len() != w {
            return Err(Error::dim(
                "windows_to_batch",
                format!(
                    "expected [{c}, 1, {w}] windows, got [{}, 1, {}]",
                    win.channels(),
                    win.window_len()
                ),
            ));
        }
        data.extend_from_slice(win.data.data());
    }
    Ok(Tensor::from_parts(vec![windows.len(), c, 1, w], data))
}

// ── CSV ingestion ───────────────────────────────────────────────────

/// Expected layout of a dataset CSV.
#[derive(Clone, Debug)]
pub struct CsvSchema {
    pub channels: usize,
    pub n_classes: usize,
}

/// Read `subject,activity,ch_0..ch_{c-1}` rows into recordings, one per
/// contiguous (subject, activity) run.
pub fn load_dataset(path: &Path, schema: &CsvSchema) -> Result<Vec<RawRecording>> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{}: empty file", path.display())))?
        .map_err(Error::Io)?;
    let expected = csv_header(schema.channels);
    if header.trim() != expected {
        return Err(Error::Schema(format!(
            "header mismatch: expected `{expected}`, got `{}`",
            header.trim()
        )));
    }

    let mut recordings: Vec<RawRecording> = Vec::new();
    let mut current: Option<(usize, usize, Vec<Vec<f64>>)> = None;

    let flush = |cur: &mut Option<(usize, usize, Vec<Vec<f64>>)>,
                 recs: &mut Vec<RawRecording>| {
        if let Some((subject, activity, channels)) = cur.take() {
            let l = channels[0].len();
            let mut data = Vec::with_capacity(channels.len() * l);
            for ch in &channels {
                data.extend_from_slice(ch);
            }
            recs.push(RawRecording {
                subject_id: subject,
                activity_label: activity,
                samples: Tensor::from_parts(vec![channels.len(), l], data),
            });
        }
    };

    for (i, line) in lines.enumerate() {
        let line_no = i + 2; // 1-based, after the header
        let line = line.map_err(Error::Io)?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != schema.channels + 2 {
            return Err(Error::Parse {
                line: line_no,
                detail: format!("expected {} fields, got {}", schema.channels + 2, fields.len()),
            });
        }
        let subject: usize = fields[0].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            detail: format!("bad subject id `{}`: {e}", fields[0]),
        })?;
        let activity: usize = fields[1].trim().parse().map_err(|e| Error::Parse {
            line: line_no,
            detail: format!("bad activity label `{}`: {e}", fields[1]),
        })?;
        if activity >= schema.n_classes {
            return Err(Error::Schema(format!(
                "line {line_no}: unknown activity label {activity} (label set is [0, {}))",
                schema.n_classes
            )));
        }
        let mut values = Vec::with_capacity(schema.channels);
        for (f_idx, f) in fields[2..].iter().enumerate() {
            let v: f64 = f.trim().parse().map_err(|e| Error::Parse {
                line: line_no,
                detail: format!("bad value `{f}` in ch_{f_idx}: {e}"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    detail: format!("non-finite value in ch_{f_idx}"),
                });
            }
            values.push(v);
        }
        let start_new = match &current {
            Some((s, a, _)) => *s != subject || *a != activity,
            None => true,
        };
        if start_new {
            flush(&mut current, &mut recordings);
            current = Some((subject, activity, vec![Vec::new(); schema.channels]));
        }
        let (_, _, channels) = current.as_mut().unwrap();
        for (ch, v) in values.into_iter().enumerate() {
            channels[ch].push(v);
        }
    }
    flush(&mut current, &mut recordings);
    if recordings.is_empty() {
        return Err(Error::Schema(format!("{}: no data rows", path.display())));
    }
    Ok(recordings)
}

pub fn csv_header(channels: usize) -> String {
    let mut h = String::from("subject,activity");
    for ch in 0..channels {
        h.push_str(&format!(",ch_{ch}"));
    }
    h
}

/// Write recordings in the dataset CSV schema.
pub fn write_dataset_csv(path: &Path, recordings: &[RawRecording]) -> Result<()> {
    let first = recordings
        .first()
        .ok_or_else(|| Error::Input("no recordings to write".into()))?;
    let c = first.channels();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{}", csv_header(c))?;
    for rec in recordings {
        if rec.channels() != c {
            return Err(Error::dim(
                "write_dataset_csv",
                format!("channel axis (0): expected {c}, got {}", rec.channels()),
            ));
        }
        let l = rec.len();
        let d = rec.samples.data();
        for t in 0..l {
            write!(out, "{},{}", rec.subject_id, rec.activity_label)?;
            for ch in 0..c {
                write!(out, ",{}", d[ch * l + t])?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

// ── synthetic benchmark generator ───────────────────────────────────

/// Desk-scale surrogate dataset: parametric class waveforms with
/// subject-level distribution shift.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_subjects: usize,
    pub n_classes: usize,
    /// Must be a multiple of 3 (triaxial groups).
    pub channels: usize,
    /// Samples per (subject, activity) recording.
    pub rec_length: usize,
    /// Subject amplitude scale drawn from `1 ± amp_scale_shift`.
    pub amp_scale_shift: f64,
    /// Per-channel additive bias drawn from `± bias_shift`.
    pub bias_shift: f64,
    /// Max subject rotation angle (radians) applied per triaxial group.
    pub rotation_shift: f64,
    pub noise_sigma: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_subjects: 4,
            n_classes: 6,
            channels: 9,
            rec_length: 4000,
            amp_scale_shift: 0.4,
            bias_shift: 0.3,
            rotation_shift: 1.5,
            noise_sigma: 0.15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || !self.channels.is_multiple_of(3) {
            return Err(Error::Config(format!(
                "synthetic channels must be a positive multiple of 3, got {}",
                self.channels
            )));
        }
        if self.n_subjects == 0 || self.n_classes == 0 || self.rec_length == 0 {
            return Err(Error::Config("subjects, classes, and length must be >= 1".into()));
        }
        for (name, v) in [
            ("amp_scale_shift", self.amp_scale_shift),
            ("bias_shift", self.bias_shift),
            ("rotation_shift", self.rotation_shift),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Generate one recording per (subject, class). Each class is a bank of
/// sinusoids with class-specific frequency and per-channel phases; each
/// subject applies a fixed amplitude scale, per-channel bias, one 3-D
/// rotation per triad, and observation noise.
pub fn synth_generate(cfg: &SyntheticConfig, seed: u64) -> Result<Vec<RawRecording>> {
    cfg.validate()?;
    let c = cfg.channels;
    let l = cfg.rec_length;

    // Class waveform bank, shared by all subjects.
    let mut class_rng = rng::stream(seed, &[salt::SYNTH, 0]);
    let mut amp = vec![vec![0.0; c]; cfg.n_classes];
    let mut phase = vec![vec![0.0; c]; cfg.n_classes];
    let mut phase2 = vec![vec![0.0; c]; cfg.n_classes];
    for k in 0..cfg.n_classes {
        for ch in 0..c {
            amp[k][ch] = class_rng.random_range(0.6..1.4);
            phase[k][ch] = class_rng.random_range(0.0..std::f64::consts::TAU);
            phase2[k][ch] = class_rng.random_range(0.0..std::f64::consts::TAU);
        }
    }

    // Fixed per-subject distortions.
    struct SubjectShift {
        scale: f64,
        bias: Vec<f64>,
        rotations: Vec<[[f64; 3]; 3]>,
    }
    let mut shifts = Vec::with_capacity(cfg.n_subjects);
    for u in 0..cfg.n_subjects {
        let mut srng = rng::stream(seed, &[salt::SYNTH, 1, u as u64]);
        let scale = 1.0 + cfg.amp_scale_shift * srng.random_range(-1.0..1.0);
        let bias: Vec<f64> =
            (0..c).map(|_| cfg.bias_shift * srng.random_range(-1.0..1.0)).collect();
        let rotations: Vec<[[f64; 3]; 3]> = (0..c / 3)
            .map(|_| {
                let axis = loop {
                    let v = [
                        srng.sample::<f64, _>(StandardNormal),
                        srng.sample::<f64, _>(StandardNormal),
                        srng.sample::<f64, _>(StandardNormal),
                    ];
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                    if n > 1e-12 {
                        break [v[0] / n, v[1] / n, v[2] / n];
                    }
                };
                let angle = cfg.rotation_shift * srng.random_range(0.0..1.0);
                crate::augment::rotation_matrix(axis, angle)
            })
            .collect();
        shifts.push(SubjectShift { scale, bias, rotations });
    }

    let mut recordings = Vec::with_capacity(cfg.n_subjects * cfg.n_classes);
    for (u, shift) in shifts.iter().enumerate() {
        for k in 0..cfg.n_classes {
            let omega = std::f64::consts::TAU * (k + 2) as f64 / 64.0;
            let mut noise_rng = rng::stream(seed, &[salt::SYNTH, 2, u as u64, k as u64]);
            let mut data = vec![0.0; c * l];
            for t in 0..l {
                // Base class waveform at this instant, then the subject's
                // rigid distortion of it.
                let mut v = vec![0.0; c];
                for (ch, vv) in v.iter_mut().enumerate() {
                    let ph = omega * t as f64;
                    *vv = amp[k][ch]
                        * ((ph + phase[k][ch]).sin() + 0.3 * (2.0 * ph + phase2[k][ch]).sin());
                }
                for (g, r) in shift.rotations.iter().enumerate() {
                    let tri = [v[3 * g], v[3 * g + 1], v[3 * g + 2]];
                    for row in 0..3 {
                        v[3 * g + row] =
                            r[row][0] * tri[0] + r[row][1] * tri[1] + r[row][2] * tri[2];
                    }
                }
                for ch in 0..c {
                    data[ch * l + t] = shift.scale * v[ch]
                        + shift.bias[ch]
                        + cfg.noise_sigma * noise_rng.sample::<f64, _>(StandardNormal);
                }
            }
            recordings.push(RawRecording {
                subject_id: u,
                activity_label: k,
                samples: Tensor::from_parts(vec![c, l], data),
            });
        }
    }
    Ok(recordings)
}

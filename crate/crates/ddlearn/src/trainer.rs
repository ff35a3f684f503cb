//! Joint training of the composite objective, validation-based model
//! selection, inference on unseen targets, metric computation, and the
//! leave-one-group-out suite runner.

use crate::augment::{augment_batch, AugmentParams, AugmentationKind};
use crate::checkpoint;
use crate::data::{
    apply_minmax, fit_minmax, make_tasks, split_per_subject, subsample_low_resource,
    windows_to_batch, SensorWindow, SplitSpec,
};
use crate::error::{Error, Result};
use crate::losses::{
    self, AnchorAggregation, Bandwidth, DistanceMetric, LossWeights,
};
use crate::model::{ArchitectureSpec, DDLearnModel};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{self, salt};
use crate::tape::Tape;
use serde::{Deserialize, Serialize};
use std::io::Write as _;
use std::path::{Path, PathBuf};

/// Normalized source windows a training run is allowed to see.
#[derive(Clone, Debug)]
pub struct TaskData {
    pub train: Vec<SensorWindow>,
    pub val: Vec<SensorWindow>,
}

/// Everything one training run needs besides its data.
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub arch: ArchitectureSpec,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub metric: DistanceMetric,
    pub augment: bool,
    pub aug_params: AugmentParams,
    /// Block gradients from the diversity-preservation term into the
    /// feature extractor (ablation switch).
    pub detach_dp_features: bool,
    pub supcon_aggregation: AnchorAggregation,
    pub mmd_bandwidth: Bandwidth,
    pub seed: u64,
}

impl TrainSettings {
    pub fn new(arch: ArchitectureSpec, seed: u64) -> Self {
        Self {
            arch,
            lr: 0.0008,
            batch_size: 64,
            epochs: 150,
            weights: LossWeights::default(),
            metric: DistanceMetric::Discriminator,
            augment: true,
            aug_params: AugmentParams::default(),
            detach_dp_features: false,
            supcon_aggregation: AnchorAggregation::Sum,
            mmd_bandwidth: Bandwidth::Median,
            seed,
        }
    }

    /// Plain classification: all auxiliary weights zero, no augmentation.
    /// Shares the exact same training code path.
    pub fn erm(mut self) -> Self {
        self.weights = LossWeights { tau: self.weights.tau, ..LossWeights::erm() };
        self.augment = false;
        self
    }

    fn validate(&self, window_len: usize) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        self.weights.validate()?;
        if self.augment {
            self.aug_params.validate(window_len)?;
        }
        Ok(())
    }
}

/// How one mixed batch is scored; shared by training, the self-check
/// suite, and the acceptance gradient checks.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveSpec<'a> {
    pub weights: &'a LossWeights,
    pub metric: DistanceMetric,
    pub mmd_bandwidth: Bandwidth,
    pub detach_dp_features: bool,
    pub supcon_aggregation: AnchorAggregation,
}

pub struct ObjectiveVars {
    pub total: crate::tape::Var,
    pub l_cls: crate::tape::Var,
    pub l_dg: Option<crate::tape::Var>,
    pub l_dp: Option<crate::tape::Var>,
    pub l_de: Option<crate::tape::Var>,
}

/// Forward a mixed batch (originals first, augmented counterparts after)
/// and combine the weighted loss components.
pub fn assemble_objective(
    model: &DDLearnModel,
    tape: &mut Tape,
    bind: &crate::model::ModelBinding,
    all: &[SensorWindow],
    n_original: usize,
    spec: &ObjectiveSpec,
) -> Result<ObjectiveVars> {
    if n_original == 0 || n_original > all.len() {
        return Err(Error::Input(format!(
            "batch claims {n_original} originals out of {} windows",
            all.len()
        )));
    }
    let n_aug = all.len() - n_original;
    let activity_labels: Vec<usize> = all.iter().map(|w| w.activity_label).collect();
    let aug_kinds: Vec<AugmentationKind> = all.iter().map(|w| w.aug_kind).collect();
    let domain_labels: Vec<usize> = all
        .iter()
        .map(|w| usize::from(w.aug_kind != AugmentationKind::Original))
        .collect();

    let x = tape.leaf(windows_to_batch(all)?);
    let features = model.forward_features(tape, bind, x)?;
    let act_logits = model.activity_logits(tape, bind, features)?;
    let l_cls = losses::softmax_cross_entropy(tape, act_logits, &activity_labels)?;

    let w = spec.weights;
    let l_dg = if w.lambda > 0.0 && n_aug > 0 {
        let aug_logits = model.aug_logits(tape, bind, features)?;
        Some(losses::selfsup_loss(tape, aug_logits, &aug_kinds)?)
    } else {
        None
    };
    let l_dp = if w.beta > 0.0 && n_aug > 0 {
        let dp_features = if spec.detach_dp_features { tape.detach(features) } else { features };
        Some(match spec.metric {
            DistanceMetric::Discriminator => {
                let dom_logits = model.domain_logits(tape, bind, dp_features)?;
                losses::domain_disc_loss(tape, dom_logits, &domain_labels)?
            }
            DistanceMetric::Mmd => {
                let f_ori = tape.slice_rows(dp_features, 0, n_original)?;
                let f_aug = tape.slice_rows(dp_features, n_original, all.len())?;
                let dist = losses::mmd(tape, f_ori, f_aug, spec.mmd_bandwidth)?;
                tape.neg(dist)
            }
            DistanceMetric::Kl => {
                let f_ori = tape.slice_rows(dp_features, 0, n_original)?;
                let f_aug = tape.slice_rows(dp_features, n_original, all.len())?;
                let dist = losses::kl_gaussian(tape, f_ori, f_aug)?;
                tape.neg(dist)
            }
        })
    } else {
        None
    };
    let l_de = if w.gamma > 0.0 && all.len() >= 2 {
        let z = model.contrastive_input(tape, bind, features)?;
        Some(losses::supcon_loss_agg(
            tape,
            z,
            &activity_labels,
            w.tau,
            spec.supcon_aggregation,
        )?)
    } else {
        None
    };

    let total = losses::total_loss(tape, l_cls, l_dg, l_dp, l_de, w)?;
    Ok(ObjectiveVars { total, l_cls, l_dg, l_dp, l_de })
}

/// Per-epoch mean loss components and validation accuracy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    pub l_cls: f64,
    pub l_dg: f64,
    pub l_dp: f64,
    pub l_de: f64,
    pub total: f64,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainState {
    pub traces: Vec<EpochTrace>,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
}

pub struct TrainOutcome {
    pub model: DDLearnModel,
    pub state: TrainState,
    pub val_report: MetricsReport,
}

/// Per-class precision/recall/F1 with an explicit absent-class flag.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// False when the class appears in neither truth nor predictions;
    /// its metrics are then defined as 0.
    pub present: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    /// `confusion[true][predicted]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub per_class: Vec<ClassMetrics>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Confusion matrix and class-wise precision, recall, and F1.
pub fn evaluate(predictions: &[usize], labels: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if predictions.is_empty() {
        return Err(Error::Input("evaluate requires at least one prediction".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut confusion = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= n_classes || y >= n_classes {
            return Err(Error::Input(format!(
                "class {} out of range [0, {n_classes})",
                p.max(y)
            )));
        }
        confusion[y][p] += 1;
    }
    let total = predictions.len();
    let correct: usize = (0..n_classes).map(|k| confusion[k][k]).sum();
    let mut per_class = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let tp = confusion[k][k];
        let support: usize = confusion[k].iter().sum();
        let predicted: usize = (0..n_classes).map(|r| confusion[r][k]).sum();
        let present = support > 0 || predicted > 0;
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics { precision, recall, f1, support, present });
    }
    let k = n_classes as f64;
    Ok(MetricsReport {
        accuracy: correct as f64 / total as f64,
        confusion,
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        macro_f1: per_class.iter().map(|c| c.f1).sum::<f64>() / k,
        per_class,
    })
}

/// Argmax activity predictions over a frozen model; no augmentation, no
/// fine-tuning. Ties break toward the lowest class index.
pub fn infer(model: &DDLearnModel, windows: &[SensorWindow]) -> Result<Vec<usize>> {
    if windows.is_empty() {
        return Err(Error::Input("infer requires at least one window".into()));
    }
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(256) {
        let batch = windows_to_batch(chunk)?;
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let x = tape.leaf(batch);
        let features = model.forward_features(&mut tape, &bind, x)?;
        let logits = model.activity_logits(&mut tape, &bind, features)?;
        let k = tape.value(logits).shape()[1];
        let data = tape.value(logits).data();
        for i in 0..chunk.len() {
            let row = &data[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

fn accuracy_of(predictions: &[usize], labels: &[usize]) -> f64 {
    let hits = predictions.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// One joint optimization run: per step, sample originals, pair them 1:1
/// with augmented counterparts, compute the weighted objective, backprop,
/// and take an Adam step; per epoch, evaluate source-validation accuracy
/// with the activity head only and retain the best checkpoint.
pub fn train(settings: &TrainSettings, task: &TaskData) -> Result<TrainOutcome> {
    let first = task
        .train
        .first()
        .ok_or_else(|| Error::Input("training set is empty".into()))?;
    let window_len = first.window_len();
    settings.validate(window_len)?;
    if first.channels() != settings.arch.input_channels || window_len != settings.arch.input_width {
        return Err(Error::dim(
            "train",
            format!(
                "windows are [{}, 1, {}] but the architecture expects [{}, 1, {}]",
                first.channels(),
                window_len,
                settings.arch.input_channels,
                settings.arch.input_width
            ),
        ));
    }
    let k_act = settings.arch.n_activity_classes;
    for w in task.train.iter().chain(&task.val) {
        if w.activity_label >= k_act {
            return Err(Error::Input(format!(
                "activity label {} out of range [0, {k_act})",
                w.activity_label
            )));
        }
    }
    if task.val.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }

    let mut model =
        DDLearnModel::build(settings.arch.clone(), &mut rng::stream(settings.seed, &[salt::INIT]))?;
    let mut adam: Vec<AdamState> = model.parameters().iter().map(AdamState::for_param).collect();
    let adam_cfg = AdamConfig::new(settings.lr);
    let val_labels: Vec<usize> = task.val.iter().map(|w| w.activity_label).collect();

    let mut traces = Vec::with_capacity(settings.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut best_snapshot = model.snapshot();

    let n = task.train.len();
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut shuffle_rng = rng::stream(settings.seed, &[salt::BATCH, epoch as u64]);
        for i in (1..n).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            order.swap(i, j);
        }

        let mut sums = [0.0f64; 5]; // l_cls, l_dg, l_dp, l_de, total
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(settings.batch_size).enumerate() {
            let originals: Vec<SensorWindow> =
                chunk.iter().map(|&i| task.train[i].clone()).collect();
            let b = originals.len();

            let mut all = originals;
            if settings.augment {
                let aug_seed = rng::mix(settings.seed, &[salt::AUGMENT, epoch as u64, step as u64]);
                let augmented = augment_batch(&all, &settings.aug_params, aug_seed)?;
                all.extend(augmented);
            }

            let mut tape = Tape::new();
            let bind = model.bind(&mut tape);
            let objective_spec = ObjectiveSpec {
                weights: &settings.weights,
                metric: settings.metric,
                mmd_bandwidth: settings.mmd_bandwidth,
                detach_dp_features: settings.detach_dp_features,
                supcon_aggregation: settings.supcon_aggregation,
            };
            let obj = assemble_objective(&model, &mut tape, &bind, &all, b, &objective_spec)?;
            let total_value = tape.value(obj.total).item();
            if !total_value.is_finite() {
                let comp =
                    |v: Option<crate::tape::Var>| v.map(|v| tape.value(v).item()).unwrap_or(0.0);
                return Err(Error::Training(format!(
                    "non-finite loss at epoch {epoch} step {step}: \
                     l_cls={} l_dg={} l_dp={} l_de={} total={total_value}",
                    tape.value(obj.l_cls).item(),
                    comp(obj.l_dg),
                    comp(obj.l_dp),
                    comp(obj.l_de),
                )));
            }
            sums[0] += tape.value(obj.l_cls).item();
            sums[1] += obj.l_dg.map(|v| tape.value(v).item()).unwrap_or(0.0);
            sums[2] += obj.l_dp.map(|v| tape.value(v).item()).unwrap_or(0.0);
            sums[3] += obj.l_de.map(|v| tape.value(v).item()).unwrap_or(0.0);
            sums[4] += total_value;
            steps += 1;

            tape.backward(obj.total)?;
            for p in model.parameters_mut() {
                p.zero_grad();
            }
            model.accumulate_grads(&tape, &bind)?;
            for (p, s) in model.parameters_mut().iter_mut().zip(adam.iter_mut()) {
                adam_step(p, s, &adam_cfg)?;
            }
        }

        let val_acc = accuracy_of(&infer(&model, &task.val)?, &val_labels);
        traces.push(EpochTrace {
            epoch,
            l_cls: sums[0] / steps as f64,
            l_dg: sums[1] / steps as f64,
            l_dp: sums[2] / steps as f64,
            l_de: sums[3] / steps as f64,
            total: sums[4] / steps as f64,
            val_accuracy: val_acc,
        });
        if val_acc > best_val {
            best_val = val_acc;
            best_epoch = epoch;
            best_snapshot = model.snapshot();
        }
    }

    model.restore(&best_snapshot)?;
    let val_report = evaluate(&infer(&model, &task.val)?, &val_labels, k_act)?;
    Ok(TrainOutcome {
        model,
        state: TrainState { traces, best_val_accuracy: best_val, best_epoch },
        val_report,
    })
}

/// Write `(feature vector, activity label, augmentation code, domain
/// flag)` rows for external embedding analysis.
pub fn export_embeddings(model: &DDLearnModel, windows: &[SensorWindow], path: &Path) -> Result<()> {
    if windows.is_empty() {
        return Err(Error::Input("no windows to export".into()));
    }
    let d = model.spec().fc_feature_dim;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for i in 0..d {
        write!(out, "f_{i},")?;
    }
    writeln!(out, "activity,aug_kind,domain")?;
    for chunk in windows.chunks(256) {
        let batch = windows_to_batch(chunk)?;
        let mut tape = Tape::new();
        let bind = model.bind(&mut tape);
        let x = tape.leaf(batch);
        let features = model.forward_features(&mut tape, &bind, x)?;
        let data = tape.value(features).data();
        for (i, w) in chunk.iter().enumerate() {
            for j in 0..d {
                write!(out, "{},", data[i * d + j])?;
            }
            writeln!(
                out,
                "{},{},{}",
                w.activity_label,
                w.aug_kind.code(),
                usize::from(w.aug_kind != AugmentationKind::Original)
            )?;
        }
    }
    Ok(())
}

// ── suite runner ────────────────────────────────────────────────────

/// Inputs for a full leave-one-group-out × seeds sweep.
#[derive(Clone, Debug)]
pub struct SuiteSettings {
    pub dataset_name: String,
    /// Segmented, un-normalized windows for the whole dataset.
    pub windows: Vec<SensorWindow>,
    pub group_count: usize,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub n_classes: usize,
    pub train: TrainSettings,
    pub output_dir: Option<PathBuf>,
    pub workers: usize,
    pub export_embeddings: bool,
}

pub const SUMMARY_VERSION: &str = "ddlearn.summary.v1";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub task_index: usize,
    pub seed: u64,
    pub target_accuracy: f64,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub metrics: MetricsReport,
    pub traces: Vec<EpochTrace>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_index: usize,
    pub target_subjects: Vec<usize>,
    pub runs: Vec<RunReport>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SuiteReport {
    pub version: String,
    pub dataset: String,
    pub fraction: f64,
    pub seeds: Vec<u64>,
    pub tasks: Vec<TaskReport>,
    pub per_seed_average_accuracy: Vec<f64>,
    pub overall_mean_accuracy: f64,
    pub overall_std_accuracy: f64,
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Split, subsample, normalize, and train one (task, seed) run. Returns
/// the outcome together with the normalized target test windows; target
/// data never reaches the training path.
pub fn train_for_task(
    suite: &SuiteSettings,
    task: &SplitSpec,
    seed: u64,
) -> Result<(TrainOutcome, Vec<SensorWindow>)> {
    let target: Vec<usize> = task.target_subjects().to_vec();
    let (source_windows, target_windows): (Vec<SensorWindow>, Vec<SensorWindow>) =
        suite.windows.iter().cloned().partition(|w| !target.contains(&w.subject_id));
    if source_windows.is_empty() || target_windows.is_empty() {
        return Err(Error::Input("task has an empty source or target side".into()));
    }

    let (train_full, val_raw, _source_test) = split_per_subject(&source_windows, seed);
    let subsample_seed = rng::mix(seed, &[task.target_group_index as u64]);
    let train_raw = subsample_low_resource(&train_full, suite.fraction, subsample_seed)?;

    // Unstratified sampling can empty a class at small fractions; that is
    // a warning, not a failure.
    for k in 0..suite.n_classes {
        let before = train_full.iter().any(|w| w.activity_label == k);
        let after = train_raw.iter().any(|w| w.activity_label == k);
        if before && !after {
            log::warn!(
                "low-resource sampling at fraction {} left class {k} empty for task {}",
                suite.fraction,
                task.target_group_index
            );
        }
    }

    let scaler = fit_minmax(&train_raw)?;
    let task_data = TaskData {
        train: apply_minmax(&train_raw, &scaler)?,
        val: apply_minmax(&val_raw, &scaler)?,
    };
    let (_, _, target_test) = split_per_subject(&target_windows, seed);
    let target_test = apply_minmax(&target_test, &scaler)?;

    let mut settings = suite.train.clone();
    settings.seed = seed;
    let outcome = train(&settings, &task_data)?;
    Ok((outcome, target_test))
}

fn run_one(suite: &SuiteSettings, task: &SplitSpec, seed: u64) -> Result<RunReport> {
    let (outcome, target_test) = train_for_task(suite, task, seed)?;
    let labels: Vec<usize> = target_test.iter().map(|w| w.activity_label).collect();
    let predictions = infer(&outcome.model, &target_test)?;
    let metrics = evaluate(&predictions, &labels, suite.n_classes)?;

    if let Some(dir) = &suite.output_dir {
        let tag = format!(
            "task{}_seed{}_frac{}",
            task.target_group_index, seed, suite.fraction
        );
        let mut trace = std::io::BufWriter::new(std::fs::File::create(
            dir.join(format!("trace_{tag}.csv")),
        )?);
        writeln!(trace, "epoch,l_cls,l_dg,l_dp,l_de,total,val_accuracy")?;
        for t in &outcome.state.traces {
            writeln!(
                trace,
                "{},{},{},{},{},{},{}",
                t.epoch, t.l_cls, t.l_dg, t.l_dp, t.l_de, t.total, t.val_accuracy
            )?;
        }
        checkpoint::save(&outcome.model, &dir.join(format!("checkpoint_{tag}.json")))?;
        if suite.export_embeddings {
            export_embeddings(
                &outcome.model,
                &target_test,
                &dir.join(format!("embeddings_{tag}.csv")),
            )?;
        }
    }

    Ok(RunReport {
        task_index: task.target_group_index,
        seed,
        target_accuracy: metrics.accuracy,
        best_val_accuracy: outcome.state.best_val_accuracy,
        best_epoch: outcome.state.best_epoch,
        metrics,
        traces: outcome.state.traces,
    })
}

/// Run every leave-one-group-out task for every seed and aggregate
/// accuracies as per-task mean ± sample std plus an overall average.
pub fn run_task_suite(suite: &SuiteSettings) -> Result<SuiteReport> {
    if suite.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let mut subjects: Vec<usize> = suite.windows.iter().map(|w| w.subject_id).collect();
    subjects.sort_unstable();
    subjects.dedup();
    let tasks = make_tasks(&subjects, suite.group_count, suite.fraction)?;
    if let Some(dir) = &suite.output_dir {
        std::fs::create_dir_all(dir)?;
    }

    let jobs: Vec<(usize, u64)> = tasks
        .iter()
        .map(|t| t.target_group_index)
        .flat_map(|ti| suite.seeds.iter().map(move |&s| (ti, s)))
        .collect();

    let run_reports: Vec<Result<RunReport>> = if suite.workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(suite.workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| {
            use rayon::prelude::*;
            jobs.par_iter().map(|&(ti, s)| run_one(suite, &tasks[ti], s)).collect()
        })
    } else {
        jobs.iter().map(|&(ti, s)| run_one(suite, &tasks[ti], s)).collect()
    };

    let mut by_task: Vec<Vec<RunReport>> = vec![Vec::new(); tasks.len()];
    let mut failures = Vec::new();
    for (job, report) in jobs.iter().zip(run_reports) {
        match report {
            Ok(r) => by_task[job.0].push(r),
            Err(e) => failures.push(format!("task {} seed {}: {e}", job.0, job.1)),
        }
    }
    if !failures.is_empty() {
        // Partial results are preserved on disk; the suite itself fails.
        return Err(Error::Training(format!(
            "{} run(s) aborted: {}",
            failures.len(),
            failures.join("; ")
        )));
    }

    let mut task_reports = Vec::with_capacity(tasks.len());
    for (task, runs) in tasks.iter().zip(by_task) {
        let accs: Vec<f64> = runs.iter().map(|r| r.target_accuracy).collect();
        let (mean, std) = mean_std(&accs);
        task_reports.push(TaskReport {
            task_index: task.target_group_index,
            target_subjects: task.target_subjects().to_vec(),
            runs,
            mean_accuracy: mean,
            std_accuracy: std,
        });
    }
    let per_seed: Vec<f64> = suite
        .seeds
        .iter()
        .enumerate()
        .map(|(si, _)| {
            task_reports.iter().map(|t| t.runs[si].target_accuracy).sum::<f64>()
                / task_reports.len() as f64
        })
        .collect();
    let (overall_mean, overall_std) = mean_std(&per_seed);

    let report = SuiteReport {
        version: SUMMARY_VERSION.to_string(),
        dataset: suite.dataset_name.clone(),
        fraction: suite.fraction,
        seeds: suite.seeds.clone(),
        tasks: task_reports,
        per_seed_average_accuracy: per_seed,
        overall_mean_accuracy: overall_mean,
        overall_std_accuracy: overall_std,
    };
    if let Some(dir) = &suite.output_dir {
        let out = std::fs::File::create(dir.join("summary.json"))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(out), &report)?;
    }
    Ok(report)
}

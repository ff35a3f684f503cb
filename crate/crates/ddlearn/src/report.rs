//! Consolidation of completed run directories into comparison tables.

use crate::error::{Error, Result};
use crate::trainer::{mean_std, SuiteReport, SUMMARY_VERSION};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

/// One run directory's summary plus re-derived aggregates.
#[derive(Clone, Debug)]
pub struct RunRow {
    pub dir: PathBuf,
    pub dataset: String,
    pub fraction: f64,
    /// `(task index, mean, sample std)` recomputed from per-seed values.
    pub per_task: Vec<(usize, f64, f64)>,
    pub overall_mean: f64,
    pub overall_std: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Consolidated {
    pub rows: Vec<RunRow>,
}

/// Load every `summary.json`, recompute the mean ± std aggregates from the
/// raw per-run accuracies, and sort rows by dataset then fraction.
pub fn consolidate(run_dirs: &[PathBuf]) -> Result<Consolidated> {
    if run_dirs.is_empty() {
        return Err(Error::Report("no run directories given".into()));
    }
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for dir in run_dirs {
        match load_row(dir) {
            Ok(row) => rows.push(row),
            Err(e) => bad.push(format!("{}: {e}", dir.display())),
        }
    }
    if !bad.is_empty() {
        return Err(Error::Report(format!(
            "incompatible or unreadable runs: {}",
            bad.join("; ")
        )));
    }
    rows.sort_by(|a, b| {
        (a.dataset.as_str(), a.fraction)
            .partial_cmp(&(b.dataset.as_str(), b.fraction))
            .unwrap()
    });
    Ok(Consolidated { rows })
}

fn load_row(dir: &Path) -> Result<RunRow> {
    let path = dir.join("summary.json");
    let file = std::fs::File::open(&path)
        .map_err(|e| Error::Report(format!("missing summary.json ({e})")))?;
    let report: SuiteReport = serde_json::from_reader(std::io::BufReader::new(file))?;
    if report.version != SUMMARY_VERSION {
        return Err(Error::Report(format!(
            "summary version `{}` (expected `{SUMMARY_VERSION}`)",
            report.version
        )));
    }
    let per_task = report
        .tasks
        .iter()
        .map(|t| {
            let accs: Vec<f64> = t.runs.iter().map(|r| r.target_accuracy).collect();
            let (m, s) = mean_std(&accs);
            (t.task_index, m, s)
        })
        .collect();
    let per_seed: Vec<f64> = (0..report.seeds.len())
        .map(|si| {
            report.tasks.iter().map(|t| t.runs[si].target_accuracy).sum::<f64>()
                / report.tasks.len() as f64
        })
        .collect();
    let (overall_mean, overall_std) = mean_std(&per_seed);
    Ok(RunRow {
        dir: dir.to_path_buf(),
        dataset: report.dataset,
        fraction: report.fraction,
        per_task,
        overall_mean,
        overall_std,
    })
}

impl Consolidated {
    /// Plain-text table with one row per task and an average row per run.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            let _ = writeln!(
                out,
                "{} (fraction {}) — {}",
                row.dataset,
                row.fraction,
                row.dir.display()
            );
            for (task, mean, std) in &row.per_task {
                let _ = writeln!(
                    out,
                    "  T{task:<3} {:6.2} (±{:.2})",
                    100.0 * mean,
                    100.0 * std
                );
            }
            let _ = writeln!(
                out,
                "  Avg  {:6.2} (±{:.2})",
                100.0 * row.overall_mean,
                100.0 * row.overall_std
            );
        }
        out
    }

    /// CSV table: `dataset,fraction,task,mean_accuracy,std_accuracy`
    /// with `avg` rows for the per-run averages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,fraction,task,mean_accuracy,std_accuracy\n");
        for row in &self.rows {
            for (task, mean, std) in &row.per_task {
                let _ = writeln!(out, "{},{},T{task},{mean},{std}", row.dataset, row.fraction);
            }
            let _ = writeln!(
                out,
                "{},{},avg,{},{}",
                row.dataset, row.fraction, row.overall_mean, row.overall_std
            );
        }
        out
    }
}

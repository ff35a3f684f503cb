//! Command-line entry point: batch experiments, synthetic dataset
//! generation, report consolidation, and the built-in self-test suite.

use clap::{Parser, Subcommand};
use ddlearn::config::ExperimentConfig;
use ddlearn::data::{synth_generate, write_dataset_csv, SyntheticConfig};
use ddlearn::report;
use ddlearn::selfcheck;
use ddlearn::trainer::run_task_suite;
use std::path::PathBuf;
use std::process::ExitCode;

/// Environment variable naming the default root for run outputs.
const OUT_ROOT_ENV: &str = "DDLEARN_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "ddlearn",
    version,
    about = "Diverse and discriminative representation learning for \
             low-resource cross-subject activity recognition"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a leave-one-group-out experiment suite from a config file.
    Run {
        /// Experiment config (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Output directory (beats the config and DDLEARN_OUT_ROOT).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seed list override.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Low-resource fraction override (0 < f ≤ 1).
        #[arg(long)]
        fraction: Option<f64>,
        /// Epoch budget override.
        #[arg(long)]
        epochs: Option<usize>,
        /// Parallel workers across (task, seed) runs.
        #[arg(long)]
        workers: Option<usize>,
        /// Arbitrary `section.key=value` config override (repeatable).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Generate a synthetic benchmark dataset as CSV.
    Synth {
        /// Optional config file supplying a [synthetic] section.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        channels: Option<usize>,
        #[arg(long)]
        length: Option<usize>,
    },
    /// Consolidate completed run directories into one table.
    Report {
        /// Run directories containing summary.json.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the gradient/oracle self-test suite.
    Check {
        /// Trim the expensive sweeps.
        #[arg(long)]
        quick: bool,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> ddlearn::Result<ExitCode> {
    match cli.cmd {
        Cmd::Run { config, out, seeds, fraction, epochs, workers, set } => {
            let mut overrides = Vec::new();
            if let Some(seeds) = seeds {
                let list: Vec<String> = seeds.iter().map(u64::to_string).collect();
                overrides.push(format!("experiment.seeds=[{}]", list.join(", ")));
            }
            if let Some(f) = fraction {
                overrides.push(format!("data.low_resource_fraction={f}"));
            }
            if let Some(e) = epochs {
                overrides.push(format!("train.epochs={e}"));
            }
            if let Some(w) = workers {
                overrides.push(format!("experiment.workers={w}"));
            }
            overrides.extend(set);

            let mut cfg = ExperimentConfig::load(&config, &overrides)?;
            let out_dir = resolve_out_dir(&cfg, out);
            cfg.experiment.output_dir = Some(out_dir.clone());

            // Data problems (missing path, malformed CSV) abort before any
            // artifact is written.
            let suite = cfg.build_suite()?;
            cfg.echo(&out_dir)?;
            log::info!(
                "running {} tasks × {} seeds on `{}` (fraction {}) into {}",
                suite.group_count,
                suite.seeds.len(),
                suite.dataset_name,
                suite.fraction,
                out_dir.display()
            );
            let report = run_task_suite(&suite)?;
            for task in &report.tasks {
                println!(
                    "T{:<3} accuracy {:6.2}% (±{:.2})",
                    task.task_index,
                    100.0 * task.mean_accuracy,
                    100.0 * task.std_accuracy
                );
            }
            println!(
                "Avg  accuracy {:6.2}% (±{:.2})  → {}",
                100.0 * report.overall_mean_accuracy,
                100.0 * report.overall_std_accuracy,
                out_dir.join("summary.json").display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Synth { config, out, seed, subjects, classes, channels, length } => {
            let mut synth = match config {
                Some(path) => ExperimentConfig::load(&path, &[])?.synthetic.unwrap_or_default(),
                None => SyntheticConfig::default(),
            };
            if let Some(v) = subjects {
                synth.n_subjects = v;
            }
            if let Some(v) = classes {
                synth.n_classes = v;
            }
            if let Some(v) = channels {
                synth.channels = v;
            }
            if let Some(v) = length {
                synth.rec_length = v;
            }
            let recordings = synth_generate(&synth, seed)?;
            write_dataset_csv(&out, &recordings)?;
            println!(
                "wrote {} recordings ({} subjects × {} classes, {} channels × {} samples) to {}",
                recordings.len(),
                synth.n_subjects,
                synth.n_classes,
                synth.channels,
                synth.rec_length,
                out.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Report { runs, csv } => {
            let consolidated = report::consolidate(&runs)?;
            print!("{}", consolidated.to_text());
            if let Some(path) = csv {
                std::fs::write(&path, consolidated.to_csv())?;
                println!("wrote {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Check { quick } => {
            let results = selfcheck::run_all(quick);
            let mut all_ok = true;
            for r in &results {
                println!("[{}] {} — {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                all_ok &= r.passed;
            }
            Ok(if all_ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

fn resolve_out_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    if let Some(dir) = flag {
        return dir;
    }
    if let Some(dir) = &cfg.experiment.output_dir {
        return dir.clone();
    }
    let root = std::env::var_os(OUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"));
    let fraction = cfg.data.low_resource_fraction.unwrap_or(1.0);
    root.join(format!("{}_frac{}", cfg.experiment.dataset.name(), fraction))
}

//! End-to-end checks of the command-line surface: synthetic data
//! generation, experiment runs with overrides, report consolidation,
//! config provenance, and byte-level rerun determinism.

use std::path::{Path, PathBuf};
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_ddlearn"))
}

fn tmp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ddlearn-cli-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

const SMOKE_CONFIG: &str = r#"
[experiment]
dataset = "synthetic"
seeds = [0, 1]

[data]
window_len = 32
low_resource_fraction = 0.5

[synthetic]
rec_length = 400

[train]
epochs = 3
batch_size = 32
"#;

fn write_config(dir: &Path) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, SMOKE_CONFIG).unwrap();
    path
}

#[test]
fn synth_writes_reproducible_csv() {
    let dir = tmp_dir("synth");
    let a = dir.join("a.csv");
    let b = dir.join("b.csv");
    for out in [&a, &b] {
        let status = bin()
            .args(["synth", "--out"])
            .arg(out)
            .args(["--seed", "7", "--subjects", "4", "--classes", "6", "--channels", "9"])
            .args(["--length", "120"])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap());
    let text = String::from_utf8(bytes_a).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "subject,activity,ch_0,ch_1,ch_2,ch_3,ch_4,ch_5,ch_6,ch_7,ch_8");
    assert_eq!(lines.count(), 4 * 6 * 120);

    // Non-triaxial channel counts are rejected.
    let status = bin()
        .args(["synth", "--out"])
        .arg(dir.join("bad.csv"))
        .args(["--channels", "8"])
        .status()
        .unwrap();
    assert!(!status.success());
    assert!(!dir.join("bad.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn run_is_byte_identical_across_processes_and_report_consolidates() {
    let dir = tmp_dir("run");
    let cfg = write_config(&dir);
    let (out1, out2) = (dir.join("r1"), dir.join("r2"));
    for out in [&out1, &out2] {
        let status = bin()
            .arg("run")
            .args(["--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .status()
            .unwrap();
        assert!(status.success(), "run failed");
    }
    let s1 = std::fs::read(out1.join("summary.json")).unwrap();
    let s2 = std::fs::read(out2.join("summary.json")).unwrap();
    assert_eq!(s1, s2, "rerun with identical config and seeds must be byte-identical");

    // The echoed config makes the run reconstructible and shows overrides.
    let echoed = std::fs::read_to_string(out1.join("config.resolved.toml")).unwrap();
    assert!(echoed.contains("epochs = 3"));
    // Per-run artifacts carry task, seed, and fraction in their names.
    assert!(out1.join("trace_task0_seed0_frac0.5.csv").exists());
    assert!(out1.join("checkpoint_task0_seed0_frac0.5.json").exists());

    // Consolidation re-derives the same averages from the summaries.
    let csv = dir.join("table.csv");
    let output = bin()
        .arg("report")
        .arg(&out1)
        .arg(&out2)
        .arg("--csv")
        .arg(&csv)
        .output()
        .unwrap();
    assert!(output.status.success());
    let text = String::from_utf8(output.stdout).unwrap();
    assert!(text.contains("synthetic (fraction 0.5)"), "{text}");
    let table = std::fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("dataset,fraction,task,mean_accuracy,std_accuracy"));
    // One avg row per run directory.
    assert_eq!(table.matches(",avg,").count(), 2);

    // The report's mean ± std must match an independent recomputation
    // from the per-run accuracies in the summary JSON.
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out1.join("summary.json")).unwrap()).unwrap();
    let seeds = summary["seeds"].as_array().unwrap().len();
    let tasks = summary["tasks"].as_array().unwrap();
    let per_seed: Vec<f64> = (0..seeds)
        .map(|si| {
            tasks
                .iter()
                .map(|t| t["runs"][si]["target_accuracy"].as_f64().unwrap())
                .sum::<f64>()
                / tasks.len() as f64
        })
        .collect();
    let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
    let var = per_seed.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
        / (per_seed.len() - 1) as f64;
    let avg_line = table
        .lines()
        .find(|l| l.contains(",avg,"))
        .expect("avg row present");
    let fields: Vec<&str> = avg_line.split(',').collect();
    let (rep_mean, rep_std): (f64, f64) = (fields[3].parse().unwrap(), fields[4].parse().unwrap());
    assert!((rep_mean - mean).abs() < 1e-9, "{rep_mean} vs {mean}");
    assert!((rep_std - var.sqrt()).abs() < 1e-9, "{rep_std} vs {}", var.sqrt());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn flag_overrides_beat_file_values() {
    let dir = tmp_dir("override");
    let cfg = write_config(&dir);
    let out = dir.join("r");
    let status = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--fraction", "0.4", "--epochs", "2", "--set", "train.lr=0.003"])
        .status()
        .unwrap();
    assert!(status.success());
    let echoed = std::fs::read_to_string(out.join("config.resolved.toml")).unwrap();
    assert!(echoed.contains("low_resource_fraction = 0.4"), "{echoed}");
    assert!(echoed.contains("epochs = 2"));
    assert!(echoed.contains("lr = 0.003"));
    assert!(out.join("trace_task0_seed0_frac0.4.csv").exists());
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn config_errors_leave_no_partial_outputs() {
    let dir = tmp_dir("errors");

    // Fraction outside (0, 1] is rejected up front.
    let cfg = write_config(&dir);
    let out = dir.join("never");
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .args(["--fraction", "0.0"])
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("accepted range"));
    assert!(!out.exists(), "failed run must not create the output directory");

    // A preset dataset without a data path fails before any artifact.
    let missing = dir.join("missing.toml");
    std::fs::write(&missing, "[experiment]\ndataset = \"dsads\"\n").unwrap();
    let output = bin()
        .arg("run")
        .arg("--config")
        .arg(&missing)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("data_path"));
    assert!(!out.exists());

    // Unknown config keys are named in the error.
    let unknown = dir.join("unknown.toml");
    std::fs::write(&unknown, "[experiment]\ndataset = \"synthetic\"\ntypo_key = 1\n").unwrap();
    let output = bin().arg("run").arg("--config").arg(&unknown).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("typo_key"));

    // Report on an empty directory names the offender.
    let empty = dir.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let output = bin().arg("report").arg(&empty).output().unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("summary.json"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn check_subcommand_passes() {
    let output = bin().args(["check", "--quick"]).output().unwrap();
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(output.status.success(), "{stdout}");
    assert_eq!(stdout.matches("[PASS]").count(), 5, "{stdout}");
}

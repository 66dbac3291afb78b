use std::fs;
use std::path::Path;
use std::process::Command;

use vssam_harness::config::parse_config;
use vssam_harness::metrics::RunStatus;
use vssam_harness::runner::{CONFIG_ECHO_FILE, METRICS_FILE, SUMMARY_FILE};
use vssam_harness::{run_experiment, ExperimentConfig, MetricRecord};

const SMALL: &str = r#"
seeds = [3, 1]

[model]
kind = "logistic-regression"

[data]
num_classes = 3
input_dim = 4
samples_per_class = 20
num_devices = 4

[algorithm]
algorithms = ["fedvssam", "fedavg"]
rounds = 12
local_steps = 3
devices_per_round = 2
batch_size = 4

[metrics]
cadence = 5
target_accuracy = 0.6
"#;

fn config_in(dir: &Path, text: &str) -> ExperimentConfig {
    let mut c = parse_config(text, Path::new("small.toml")).unwrap();
    c.output.dir = dir.to_path_buf();
    c
}

fn records(dir: &Path) -> Vec<MetricRecord> {
    fs::read_to_string(dir.join(METRICS_FILE))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn records_are_grouped_by_algorithm_then_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let report = run_experiment(&config_in(tmp.path(), SMALL)).unwrap();
    assert_eq!(report.failures(), 0);
    let rs = records(tmp.path());
    let keys: Vec<(String, u64, usize)> = rs.iter().map(|r| (r.algorithm.clone(), r.seed, r.round)).collect();
    let mut expected = Vec::new();
    for algo in ["fedvssam", "fedavg"] {
        for seed in [3, 1] {
            for round in [0, 5, 10, 12] {
                expected.push((algo.to_string(), seed, round));
            }
        }
    }
    assert_eq!(keys, expected);
    assert!(rs.iter().all(|r| r.wall_clock_ms.is_none() && r.delta_fi.is_some()));
    assert!(rs.iter().all(|r| (r.algorithm == "fedvssam") == r.tracking_error.is_some()));
    assert!(tmp.path().join(CONFIG_ECHO_FILE).exists());
    assert_eq!(report.summaries.len(), 4);
    assert_eq!(report.table.rows.len(), 2);
}

#[test]
fn rerun_is_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    run_experiment(&config_in(a.path(), SMALL)).unwrap();
    run_experiment(&config_in(b.path(), SMALL)).unwrap();
    for f in [METRICS_FILE, SUMMARY_FILE] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    // The echoed config differs only in the output directory.
    let echo = fs::read_to_string(a.path().join(CONFIG_ECHO_FILE)).unwrap();
    let back = parse_config(&echo, Path::new("echo")).unwrap();
    assert_eq!(back, config_in(a.path(), SMALL));
}

#[test]
fn zero_rounds_evaluates_only_the_start() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("rounds = 12", "rounds = 0");
    let report = run_experiment(&config_in(tmp.path(), &text)).unwrap();
    let rs = records(tmp.path());
    assert_eq!(rs.len(), 4);
    assert!(rs.iter().all(|r| r.round == 0));
    assert!(report.summaries.iter().all(|s| s.final_round == Some(0)));
}

#[test]
fn failing_runs_are_recorded_and_others_continue() {
    let tmp = tempfile::tempdir().unwrap();
    // On a quadratic a huge step size grows the iterate geometrically, so the
    // loss overflows within the first round for every seed.
    let text = SMALL
        .replace(
            "kind = \"logistic-regression\"",
            "kind = \"quadratic\"\nquadratic_center = [1.0, 0.0, -1.0, 2.0]",
        )
        .replace("batch_size = 4", "batch_size = 4\nlocal_lr = 1e200");
    let report = run_experiment(&config_in(tmp.path(), &text)).unwrap();
    assert_eq!(report.failures(), 4);
    for s in &report.summaries {
        assert_eq!(s.status, RunStatus::Failed);
        assert_eq!(s.final_round, Some(0), "round-0 evaluation survives");
        assert!(s.error.as_ref().unwrap().contains("round 0"), "{:?}", s.error);
    }
    assert_eq!(records(tmp.path()).len(), 4);
}

fn vssam() -> Command {
    Command::new(env!("CARGO_BIN_EXE_vssam"))
}

#[test]
fn cli_run_compare_and_partition_stats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("small.toml");
    fs::write(&cfg, SMALL).unwrap();
    let out = tmp.path().join("out");

    let run = vssam()
        .args(["run", cfg.to_str().unwrap(), "--out-dir", out.to_str().unwrap(), "--threads", "2"])
        .args(["--seed-override", "7", "--cadence", "4"])
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", String::from_utf8_lossy(&run.stderr));
    let stdout = String::from_utf8(run.stdout).unwrap();
    assert!(stdout.starts_with("algorithm"), "{stdout}");
    let rs = records(&out);
    assert!(rs.iter().all(|r| r.seed == 7));
    assert_eq!(rs.iter().filter(|r| r.algorithm == "fedavg").map(|r| r.round).collect::<Vec<_>>(), vec![0, 4, 8, 12]);

    let summary = out.join(SUMMARY_FILE);
    let cmp = vssam().args(["compare", "--csv"]).arg(&summary).arg(&summary).output().unwrap();
    assert!(cmp.status.success());
    let text = String::from_utf8(cmp.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "algorithm,runs,final_acc_mean,final_acc_sd,rounds_to_target_median");
    assert!(lines[1].starts_with("fedavg,2,") && lines[2].starts_with("fedvssam,2,"), "{text}");

    let stats = vssam().args(["partition-stats", cfg.to_str().unwrap()]).output().unwrap();
    assert!(stats.status.success());
    let text = String::from_utf8(stats.stdout).unwrap();
    // Two seeds, each a title, a header and four device rows.
    assert_eq!(text.lines().count(), 12, "{text}");
}

#[test]
fn cli_reports_config_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, SMALL.replace("rounds = 12", "rounds = 12\nlearning_rte = 0.1")).unwrap();
    let out = vssam().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("learning_rte") && err.contains("bad.toml:"), "{err}");

    fs::write(&cfg, SMALL.replace("rounds = 12", "rounds = 12\ngamma_global = 1.5")).unwrap();
    let out = vssam().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("algorithm.gamma_global"), "{err}");

    let out = vssam().args(["run", "does-not-exist.toml"]).output().unwrap();
    assert!(!out.status.success());
}

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::json;

fn tiny_config() -> serde_json::Value {
    json!({
        "system": {"train_count": 2, "test_count": 2, "steps": 80, "test_steps": 60},
        "model": {"layers": 1, "heads": 1, "embed_dim": 8, "context_len": 8, "tt_rank": 2},
        "train": {"schedule": [2, 3], "steps_per_stage": 4, "batch_size": 2, "seq_len": 8,
                  "probe_windows": 4, "checkpoint_every": 2},
        "eval": {"prefix_len": 10, "horizon": 20, "accuracy_windows": 10},
        "paths": {"data_dir": "d", "checkpoint_dir": "c", "report_dir": "r"}
    })
}

fn ttdyn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ttdyn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = ttdyn(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn setup(config: &serde_json::Value) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.json"), config.to_string()).unwrap();
    dir
}

fn full_run(dir: &Path) {
    for cmd in ["simulate", "train", "generate", "evaluate"] {
        ok(dir, &["--config", "run.json", cmd]);
    }
}

const OUTPUTS: &[&str] = &[
    "d/train.bin",
    "d/test.bin",
    "d/simulate.config.json",
    "c/final.ckpt",
    "c/latest.ckpt",
    "c/stage0_M2.ckpt",
    "c/stage1_M3.ckpt",
    "c/stage0_step2.ckpt",
    "r/stage_reports.json",
    "r/loss.csv",
    "r/train.config.json",
    "r/generated_0.csv",
    "r/generated_0.bin",
    "r/rmse.csv",
    "r/divergence.csv",
    "r/compare.csv",
    "r/evaluation.json",
    "r/evaluate.config.json",
];

#[test]
fn pipeline_writes_every_output() {
    let dir = setup(&tiny_config());
    full_run(dir.path());
    for f in OUTPUTS {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
    let rmse = fs::read_to_string(dir.path().join("r/rmse.csv")).unwrap();
    assert!(rmse.starts_with("t,rmse\n"));
    assert_eq!(rmse.lines().count(), 21);
    let generated = fs::read_to_string(dir.path().join("r/generated_0.csv")).unwrap();
    assert!(generated.starts_with("t,x0,x1,x2\n"));
    let reports: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/stage_reports.json")).unwrap()).unwrap();
    assert_eq!(reports.as_array().unwrap().len(), 2);
    let eval: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("r/evaluation.json")).unwrap()).unwrap();
    assert_eq!(eval["containment"], json!(1.0));
}

#[test]
fn reruns_are_byte_identical() {
    let a = setup(&tiny_config());
    let b = setup(&tiny_config());
    full_run(a.path());
    full_run(b.path());
    for f in OUTPUTS {
        let x = fs::read(a.path().join(f)).unwrap();
        let y = fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn seed_flag_changes_the_data() {
    let a = setup(&tiny_config());
    let b = setup(&tiny_config());
    ok(a.path(), &["--config", "run.json", "simulate"]);
    ok(b.path(), &["--config", "run.json", "--seed", "9", "simulate"]);
    assert_ne!(
        fs::read(a.path().join("d/train.bin")).unwrap(),
        fs::read(b.path().join("d/train.bin")).unwrap()
    );
}

#[test]
fn existing_outputs_need_force() {
    let dir = setup(&tiny_config());
    ok(dir.path(), &["--config", "run.json", "simulate"]);
    let again = ttdyn(dir.path(), &["--config", "run.json", "simulate"]);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(dir.path(), &["--config", "run.json", "--force", "simulate"]);
}

#[test]
fn config_errors_exit_with_two() {
    let mut typo = tiny_config();
    typo["train"]["step_per_stage"] = json!(3);
    let dir = setup(&typo);
    assert_eq!(ttdyn(dir.path(), &["--config", "run.json", "simulate"]).status.code(), Some(2));

    let dir = setup(&tiny_config());
    assert_eq!(ttdyn(dir.path(), &["--config", "run.json", "train"]).status.code(), Some(2));
    assert_eq!(ttdyn(dir.path(), &["--config", "missing.json", "simulate"]).status.code(), Some(2));
    assert_eq!(ttdyn(dir.path(), &["--bogus-flag", "simulate"]).status.code(), Some(2));
}

#[test]
fn numeric_failures_exit_with_three() {
    let mut cfg = tiny_config();
    cfg["system"]["init"] = json!({"kind": "fixed", "center": [1e200, 1e200, 1e200]});
    let dir = setup(&cfg);
    let out = ttdyn(dir.path(), &["--config", "run.json", "simulate"]);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn resume_after_interruption_is_bit_identical() {
    let dir = setup(&tiny_config());
    ok(dir.path(), &["--config", "run.json", "simulate"]);
    ok(dir.path(), &["--config", "run.json", "train"]);
    let reference = fs::read(dir.path().join("c/final.ckpt")).unwrap();
    let reports = fs::read(dir.path().join("r/stage_reports.json")).unwrap();

    // pretend the run stopped after two steps of the first stage
    let c = dir.path().join("c");
    fs::copy(c.join("stage0_step2.ckpt"), c.join("latest.ckpt")).unwrap();
    fs::remove_file(c.join("final.ckpt")).unwrap();
    ok(dir.path(), &["--config", "run.json", "--force", "train", "--resume"]);
    assert_eq!(fs::read(c.join("final.ckpt")).unwrap(), reference);
    assert_eq!(fs::read(dir.path().join("r/stage_reports.json")).unwrap(), reports);
}

#[test]
fn resume_without_checkpoint_is_a_config_error() {
    let dir = setup(&tiny_config());
    ok(dir.path(), &["--config", "run.json", "simulate"]);
    let out = ttdyn(dir.path(), &["--config", "run.json", "train", "--resume"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn generate_checks_index_and_checkpoint() {
    let dir = setup(&tiny_config());
    ok(dir.path(), &["--config", "run.json", "simulate"]);
    let out = ttdyn(dir.path(), &["--config", "run.json", "generate"]);
    assert_eq!(out.status.code(), Some(2));
    ok(dir.path(), &["--config", "run.json", "train"]);
    let out = ttdyn(dir.path(), &["--config", "run.json", "generate", "--index", "5"]);
    assert_eq!(out.status.code(), Some(2));
    ok(dir.path(), &["--config", "run.json", "generate", "--index", "1", "--horizon", "30"]);
    let csv = fs::read_to_string(dir.path().join("r/generated_1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 31);
}

#[test]
fn resolved_config_is_complete_and_reloadable() {
    let dir = setup(&tiny_config());
    ok(dir.path(), &["--config", "run.json", "simulate"]);
    let resolved = fs::read_to_string(dir.path().join("d/simulate.config.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&resolved).unwrap();
    assert_eq!(v["model"]["system_dim"], json!(3));
    assert_eq!(v["train"]["optimizer"]["beta2"], json!(0.999));
    fs::write(dir.path().join("resolved.json"), &resolved).unwrap();
    ok(dir.path(), &["--config", "resolved.json", "--force", "simulate"]);
    assert_eq!(fs::read_to_string(dir.path().join("d/simulate.config.json")).unwrap(), resolved);
}

//! End-to-end runs of the `qcest` binary.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn qcest(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qcest"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

const SMALL: &str = r#"
version = 1
seed = 7

[scenario]
antennas = 8
clusters = 1

[frontend]
pilots = 1
bits = 1
snr_db = [-5.0, 5.0, 15.0]

[data]
train_samples = 600
test_samples = 200
observation_snr_db = 10.0

[model]
kind = "gmm"
components = 2
max_iter = 5

[eval]
estimators = ["buss_genie"]
scov_samples = 600
"#;

fn setup(config: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("run.toml"), config).unwrap();
    dir
}

#[test]
fn evaluate_writes_one_row_per_snr_and_is_reproducible() {
    let dir = setup(SMALL);
    let out = qcest(dir.path(), &["evaluate", "--config", "run.toml", "--out", "a"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = fs::read_to_string(dir.path().join("a/results.csv")).unwrap();
    assert_eq!(first.lines().count(), 1 + 3, "{first}");
    assert!(out.stdout.is_empty());

    let again = qcest(dir.path(), &["evaluate", "--config", "run.toml", "--out", "b", "--threads", "2"]);
    assert!(again.status.success());
    assert_eq!(fs::read(dir.path().join("a/results.csv")).unwrap(), fs::read(dir.path().join("b/results.csv")).unwrap());
}

#[test]
fn missing_model_file_exits_with_config_status() {
    let config = format!("{SMALL}\n[[eval.models]]\nname = \"bgmm\"\npath = \"nowhere/model.qcm\"\n");
    let dir = setup(&config);
    let out = qcest(dir.path(), &["evaluate", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere/model.qcm"));
}

#[test]
fn unknown_keys_are_rejected() {
    let dir = setup("version = 1\n[model]\nkomponents = 3\n");
    let out = qcest(dir.path(), &["train", "--config", "run.toml"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("komponents"));
}

#[test]
fn generate_train_inspect_and_evaluate_a_model() {
    let dir = setup(SMALL);
    assert!(qcest(dir.path(), &["generate", "--config", "run.toml"]).status.success());
    let info = qcest(dir.path(), &["inspect", "out/r_train.qce"]);
    let text = String::from_utf8_lossy(&info.stdout);
    assert!(text.contains("quantized observations") && text.contains("samples: 600"), "{text}");

    let out = qcest(dir.path(), &["train", "--config", "run.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let info = qcest(dir.path(), &["inspect", "out/model.qcm"]);
    assert!(String::from_utf8_lossy(&info.stdout).contains("components: 2"));

    let config = format!("{SMALL}\n[[eval.models]]\nname = \"bgmm\"\npath = \"out/model.qcm\"\n");
    fs::write(dir.path().join("eval.toml"), config).unwrap();
    let out = qcest(dir.path(), &["evaluate", "--config", "eval.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/results.csv")).unwrap();
    assert_eq!(csv.lines().filter(|l| l.starts_with("bgmm,")).count(), 3);
}

#[test]
fn print_config_echoes_overrides() {
    let dir = setup(SMALL);
    let out = qcest(dir.path(), &["inspect", "missing.qce", "--config", "run.toml", "--seed", "99", "--print-config"]);
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("seed = 99"), "{err}");
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn recover_writes_one_row_per_trial() {
    let config = format!("{SMALL}\n[recover]\nbits = [2]\nsamples = [200, 2000]\ntrials = 3\n");
    let dir = setup(&config);
    let out = qcest(dir.path(), &["recover", "--config", "run.toml"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.path().join("out/recovery.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}

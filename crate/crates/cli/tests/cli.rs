//! CLI contract tests: exit codes, fail-closed config parsing, and edge
//! cases of the emitted files.

use neurosleep::network::{init_params, save_checkpoint, ModelConfig};
use neurosleep::signal_io::{encode_nsig, Recording};
use std::path::Path;
use std::process::Command;

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_neurosleep")
}

fn run_cli(args: &[&str]) -> (String, String, i32) {
    let out = Command::new(bin()).args(args).output().unwrap();
    (
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
        out.status.code().unwrap_or(-1),
    )
}

fn write_signal(path: &Path, samples: Vec<f64>, fs: f64) {
    let rec = Recording {
        samples,
        fs,
        channel: "c".into(),
        subject_id: "s".into(),
        session_id: String::new(),
        start_offset: None,
    };
    std::fs::write(path, encode_nsig(&rec).unwrap()).unwrap();
}

const NO_PREP: &str = "[preprocess]\nenabled = false\n";

#[test]
fn unknown_config_key_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[encoder]\nk_slow = 1.6\nk_turbo = 9\n").unwrap();
    let (_, err, code) = run_cli(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "synth",
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("k_turbo"), "error should name the bad key: {err}");
    // fail-closed: nothing was written
    assert!(std::fs::read_dir(dir.path()).unwrap().count() == 1, "only bad.toml");
}

#[test]
fn encode_constant_signal_emits_no_events() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, NO_PREP).unwrap();
    let sig = dir.path().join("flat.nsig");
    write_signal(&sig, vec![0.7; 3000], 100.0);
    let (stdout, err, code) = run_cli(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "encode",
        sig.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("rho_combined=0.000000"), "{stdout}");
    assert!(dir.path().join("flat.nevt").exists());
}

#[test]
fn infer_short_recording_yields_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, format!("{NO_PREP}\n[model]\nt_b = 300\nwindow_radius = 0\n")).unwrap();
    let mut cfg = ModelConfig::desk();
    cfg.t_b = 300;
    cfg.window_radius = 0;
    let ckpt = dir.path().join("m.nckp");
    save_checkpoint(&ckpt, &init_params(&cfg, 0).unwrap(), &cfg).unwrap();
    let sig = dir.path().join("short.nsig");
    write_signal(&sig, vec![0.1; 200], 10.0); // 20 s < one epoch
    let (_, err, code) = run_cli(&[
        "--config",
        config.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
        "infer",
        sig.to_str().unwrap(),
        "--checkpoint",
        ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    let csv = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    assert_eq!(
        csv,
        "epoch_index,predicted_stage,prob_W,prob_N1,prob_N2,prob_N3,prob_REM\n"
    );
}

#[test]
fn infer_probabilities_sum_to_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, format!("{NO_PREP}\n[model]\nt_b = 300\nwindow_radius = 1\n")).unwrap();
    let mut cfg = ModelConfig::desk();
    cfg.t_b = 300;
    cfg.window_radius = 1;
    let ckpt = dir.path().join("m.nckp");
    save_checkpoint(&ckpt, &init_params(&cfg, 1).unwrap(), &cfg).unwrap();
    let corpus = dir.path().join("corpus");
    let (_, _, code) = run_cli(&[
        "--out", corpus.to_str().unwrap(), "synth",
        "--subjects", "1", "--epochs", "4", "--fs", "10",
    ]);
    assert_eq!(code, 0);
    let (stdout, err, code) = run_cli(&[
        "--config", config.to_str().unwrap(),
        "--out", dir.path().to_str().unwrap(),
        "infer", corpus.join("s000.nsig").to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "{err}");
    assert!(stdout.contains("insd="), "insd must be logged: {stdout}");
    let csv = std::fs::read_to_string(dir.path().join("predictions.csv")).unwrap();
    let mut rows = 0;
    for line in csv.lines().skip(1) {
        let probs: f64 = line.split(',').skip(2).map(|v| v.parse::<f64>().unwrap()).sum();
        assert!((probs - 1.0).abs() <= 1e-3, "row sums to {probs}"); // 6-decimal cells
        rows += 1;
    }
    assert_eq!(rows, 4);
}

#[test]
fn sweep_impossible_thresholds_exit_one_table_written() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, "[thresholds]\nsnr_db = 1e9\n").unwrap();
    let corpus = dir.path().join("corpus");
    let (_, _, code) = run_cli(&[
        "--out", corpus.to_str().unwrap(), "synth",
        "--subjects", "1", "--epochs", "2", "--fs", "100",
    ]);
    assert_eq!(code, 0);
    let (stdout, _, code) = run_cli(&[
        "--config", config.to_str().unwrap(),
        "--out", dir.path().to_str().unwrap(),
        "sweep", corpus.join("s000.nsig").to_str().unwrap(),
    ]);
    assert_eq!(code, 1, "infeasible sweep must exit 1: {stdout}");
    let table = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 46, "header + 45 candidate rows");
}

#[test]
fn train_fewer_subjects_than_folds_errors() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let (_, _, code) = run_cli(&[
        "--out", corpus.to_str().unwrap(), "synth",
        "--subjects", "3", "--epochs", "2", "--fs", "100",
    ]);
    assert_eq!(code, 0);
    let (_, err, code) = run_cli(&[
        "--out", dir.path().to_str().unwrap(),
        "train", "--manifest", corpus.join("manifest.csv").to_str().unwrap(),
    ]);
    assert_eq!(code, 2, "3 subjects cannot fill 5 folds: {err}");
}

#[test]
fn checkpoint_config_mismatch_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.nckp");
    let cfg = ModelConfig::desk(); // t_b = 3000
    save_checkpoint(&ckpt, &init_params(&cfg, 0).unwrap(), &cfg).unwrap();
    let sig = dir.path().join("s.nsig");
    write_signal(&sig, vec![0.1; 600], 10.0); // yields t_b = 300 epochs
    let config = dir.path().join("run.toml");
    std::fs::write(&config, NO_PREP).unwrap();
    let (_, err, code) = run_cli(&[
        "--config", config.to_str().unwrap(),
        "--out", dir.path().to_str().unwrap(),
        "infer", sig.to_str().unwrap(),
        "--checkpoint", ckpt.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(err.contains("t_b"), "mismatch should mention t_b: {err}");
}

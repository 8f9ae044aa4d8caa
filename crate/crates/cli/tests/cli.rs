use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn quick_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.conf")
}

fn lps(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lps"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_writes_run_directory() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let res = lps(&[
        "train",
        "--config",
        path_str(&quick_config()),
        "--seed",
        "4",
        "--no-uc",
        "--set",
        "epochs=2",
        "--out",
        path_str(&out),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    for name in [
        "metrics.jsonl",
        "summary.csv",
        "checkpoint.bin",
        "config.echo",
        "dataset.csv",
        "dataset.meta",
    ] {
        assert!(out.join(name).exists(), "{name}");
    }
    let metrics = fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    let echo = fs::read_to_string(out.join("config.echo")).unwrap();
    assert!(echo.contains("no_uc = true"), "{echo}");
    assert!(
        echo.contains("seed = 4") || echo.contains("data_seed = 4"),
        "{echo}"
    );
}

#[test]
fn dump_reads_back_a_trained_checkpoint() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let train = lps(&[
        "train",
        "--config",
        path_str(&quick_config()),
        "--set",
        "epochs=1",
        "--out",
        path_str(&out),
    ]);
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );

    let csv = dir.path().join("logits.csv");
    let res = lps(&[
        "dump",
        "--checkpoint",
        path_str(&out.join("checkpoint.bin")),
        "--data",
        path_str(&out.join("dataset.csv")),
        "--out",
        path_str(&csv),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let text = fs::read_to_string(&csv).unwrap();
    let rows = fs::read_to_string(out.join("dataset.csv"))
        .unwrap()
        .lines()
        .count();
    assert_eq!(text.lines().count(), rows);
    assert!(text.starts_with("id,label,pred,z0,"));
}

#[test]
fn sweep_prints_one_row_per_point() {
    let dir = TempDir::new().unwrap();
    let res = lps(&[
        "sweep",
        "--config",
        path_str(&quick_config()),
        "--set",
        "epochs=1",
        "--grid",
        "C=1,5,10,15,20",
        "--out",
        path_str(dir.path()),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 6);
    assert_eq!(
        fs::read_to_string(dir.path().join("summary.csv")).unwrap(),
        stdout
    );
}

#[test]
fn generate_writes_a_loadable_dataset() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("syn.csv");
    let res = lps(&[
        "generate",
        "--config",
        path_str(&quick_config()),
        "--path",
        path_str(&csv),
    ]);
    assert!(
        res.status.success(),
        "{}",
        String::from_utf8_lossy(&res.stderr)
    );
    assert!(dir.path().join("syn.meta").exists());
    // 8 classes x 50 samples plus the header.
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 401);
}

#[test]
fn errors_exit_nonzero_with_a_message() {
    let dir = TempDir::new().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "tau = -1\n").unwrap();
    for args in [
        vec!["train", "--config", path_str(&bad)],
        vec![
            "train",
            "--config",
            path_str(&dir.path().join("missing.conf")),
        ],
        vec!["train", "--set", "no_such_key=1"],
        vec!["sweep", "--grid", ""],
        vec!["dump", "--checkpoint", "nope.bin", "--data", "nope.csv"],
    ] {
        let res = lps(&args);
        assert!(!res.status.success(), "{args:?}");
        let stderr = String::from_utf8_lossy(&res.stderr);
        assert!(stderr.starts_with("error: "), "{args:?}: {stderr}");
    }
}

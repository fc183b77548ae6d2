use std::path::Path;
use std::process::{Command, Output};

fn tden(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tden")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

const SMALL_RUN: [&str; 10] = [
    "--config", "tiny", "--set", "n_train=32", "--set", "n_val=8", "--set", "n_test=16", "--set", "eval_size=8",
];

fn pretrain(dir: &Path, steps: &str, extra: &[&str]) -> Output {
    let mut args = vec!["pretrain", "--steps", steps];
    args.extend_from_slice(&SMALL_RUN);
    args.extend_from_slice(&["--run-dir", dir.to_str().unwrap()]);
    args.extend_from_slice(extra);
    tden(&args)
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&tden(&["frobnicate"])), 1);
    assert_eq!(code(&tden(&[])), 1);
    let dir = tempfile::tempdir().unwrap();
    let o = pretrain(dir.path(), "6", &["--set", "no_such_key=3"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));
    assert_eq!(code(&tden(&["finetune", "--config", "tiny", "--task", "dancing", "--run-dir", "x"])), 1);
    assert_eq!(code(&tden(&["--help"])), 0);
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("absent.bin");
    assert_eq!(code(&tden(&["eval", "--checkpoint", ck.to_str().unwrap()])), 2);
}

#[test]
fn gradcheck_on_tiny_passes() {
    let o = tden(&["gradcheck", "--config", "tiny"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).contains("max relative error"));
}

#[test]
fn pretrain_is_reproducible_and_fills_the_run_directory() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(code(&pretrain(a.path(), "6", &[])), 0);
    assert_eq!(code(&pretrain(b.path(), "6", &[])), 0);
    for f in ["config.txt", "metrics.jsonl", "checkpoint.bin"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(a.path().join("metrics.jsonl")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\"kind\":\"step\"")).count(), 6);
}

#[test]
fn resume_continues_the_log() {
    let whole = tempfile::tempdir().unwrap();
    let parts = tempfile::tempdir().unwrap();
    assert_eq!(code(&pretrain(whole.path(), "8", &[])), 0);
    assert_eq!(code(&pretrain(parts.path(), "4", &[])), 0);
    assert_eq!(code(&pretrain(parts.path(), "8", &["--resume"])), 0);
    let steps = |d: &Path| -> Vec<String> {
        std::fs::read_to_string(d.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .filter(|l| l.contains("\"kind\":\"step\""))
            .map(String::from)
            .collect()
    };
    assert_eq!(steps(whole.path()), steps(parts.path()));
    assert_eq!(
        std::fs::read(whole.path().join("checkpoint.bin")).unwrap(),
        std::fs::read(parts.path().join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn generated_data_feeds_finetune_and_eval() {
    let root = tempfile::tempdir().unwrap();
    let data = root.path().join("data");
    let o = tden(&[
        "gen-data", "--config", "tiny", "--set", "n_train=24", "--set", "n_val=4", "--set", "n_test=12", "--out",
        data.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0);
    for f in ["train.bin", "val.bin", "test.bin", "train.ann.jsonl", "test.ann.jsonl"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    let ft = root.path().join("ft");
    let data_dir = format!("data_dir={}", data.display());
    let o = tden(&[
        "finetune", "--config", "tiny", "--set", &data_dir, "--set", "ft_steps=3", "--set", "ft_batch_size=4", "--task",
        "classification", "--run-dir", ft.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let tuned = String::from_utf8_lossy(&o.stdout).lines().last().unwrap().to_string();
    assert!(tuned.contains("\"accuracy\""));
    let o = tden(&["eval", "--checkpoint", ft.join("checkpoint.bin").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), tuned);
}

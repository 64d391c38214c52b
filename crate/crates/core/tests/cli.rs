use std::path::Path;
use std::process::{Command, Output};

fn comatch(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_comatch"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    assert_eq!(comatch(&["--help"]).status.code(), Some(0));
    assert_eq!(comatch(&["train"]).status.code(), Some(1));
    assert_eq!(comatch(&["frobnicate"]).status.code(), Some(1));
}

#[test]
fn invalid_parameter_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"alpha": 0.5}"#).unwrap();
    let out = comatch(&[
        "gen",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("alpha"));
}

#[test]
fn unknown_config_key_and_missing_data_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("typo.json");
    std::fs::write(&cfg, r#"{"sed": 3}"#).unwrap();
    let out = comatch(&[
        "gen",
        "--config",
        p(&cfg),
        "--out",
        p(&dir.path().join("d")),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let missing = dir.path().join("nowhere");
    let out = comatch(&[
        "train",
        "--data",
        p(&missing),
        "--out",
        p(&dir.path().join("x.ckpt")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gen_train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("small.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 3, "n_scenes": 8, "n_eval_scenes": 3, "max_iters": 5, "batch_pairs": 2}"#,
    )
    .unwrap();
    let data = root.join("data");
    assert!(comatch(&["gen", "--config", p(&cfg), "--out", p(&data)])
        .status
        .success());
    assert!(data.join("train").join("labels.csv").exists());
    assert!(data.join("eval").join("labels.csv").exists());

    let ckpt = root.join("run.ckpt");
    let train = comatch(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&data.join("train")),
        "--out",
        p(&ckpt),
    ]);
    assert!(
        train.status.success(),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    assert!(root.join("run.ckpt.report.json").exists());
    assert!(root.join("run.ckpt.timings.json").exists());

    let report = root.join("eval.csv");
    let masks = root.join("masks");
    let eval = comatch(&[
        "eval",
        "--ckpt",
        p(&ckpt),
        "--data",
        p(&data.join("eval")),
        "--report",
        p(&report),
        "--masks",
        p(&masks),
    ]);
    assert!(
        eval.status.success(),
        "{}",
        String::from_utf8_lossy(&eval.stderr)
    );
    let table = std::fs::read_to_string(&report).unwrap();
    assert!(table.starts_with("threshold,miou,best"));
    assert_eq!(table.lines().count(), 13);
    assert_eq!(table.lines().filter(|l| l.ends_with("true")).count(), 1);
    assert!(std::fs::read_dir(&masks).unwrap().count() >= 3);

    let corrupt = root.join("corrupt.ckpt");
    std::fs::write(&corrupt, b"COMN\x01\x00\x00\x00\x05").unwrap();
    let out = comatch(&[
        "eval",
        "--ckpt",
        p(&corrupt),
        "--data",
        p(&data.join("eval")),
        "--report",
        p(&report),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn bench_group_writes_one_row_per_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let run = comatch(&[
        "bench-group",
        "--n",
        "2..4",
        "--trials",
        "2",
        "--out",
        p(&out),
    ]);
    assert!(run.status.success());
    let table = std::fs::read_to_string(&out).unwrap();
    assert_eq!(table.lines().count(), 4);
    assert!(table.starts_with("group_n,median_ms"));
}

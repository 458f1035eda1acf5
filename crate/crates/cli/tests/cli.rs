use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rdc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rdc"))
        .args(args)
        .output()
        .unwrap()
}

fn gen_tiny(dir: &Path, seed: &str) {
    let out = rdc(&[
        "gen",
        "--out",
        dir.to_str().unwrap(),
        "--count",
        "5",
        "--seed",
        seed,
        "--height",
        "16",
        "--width",
        "16",
        "--num-classes",
        "3",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn train_tiny(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch",
        "2",
    ];
    args.extend_from_slice(extra);
    rdc(&args)
}

#[test]
fn train_twice_gives_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "1");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert_eq!(train_tiny(&data, &a, &[]).status.code(), Some(0));
    assert_eq!(
        train_tiny(&data, &b, &["--threads", "2"]).status.code(),
        Some(0)
    );
    let ma = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, fs::read(b.join("metrics.csv")).unwrap());
    assert!(String::from_utf8(ma)
        .unwrap()
        .starts_with("epoch,split,miou,aerr,merr,loss_sup,loss_rc,regions_used,regions_skipped\n"));
}

#[test]
fn eval_matches_last_training_row() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "2");
    let out = tmp.path().join("out");
    assert!(train_tiny(&data, &out, &[]).status.success());
    let ev = rdc(&[
        "eval",
        "--checkpoint",
        out.join("checkpoint.rdc").to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
    ]);
    assert!(ev.status.success());
    let stdout = String::from_utf8(ev.stdout).unwrap();
    let metrics = fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert_eq!(stdout.lines().nth(1), metrics.lines().last());
}

#[test]
fn config_file_and_flag_precedence() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "3");
    let cfg = tmp.path().join("run.cfg");
    let out = tmp.path().join("out");
    fs::write(
        &cfg,
        format!("data_dir = {}\ntau = 0.5\nepochs = 1\n", data.display()),
    )
    .unwrap();
    let o = rdc(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--tau",
        "2.0",
        "--out-dir",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let written = fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(written.contains("tau = 2\n"), "{written}");
    assert!(written.contains("epochs = 1\n"));
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen_tiny(&data, "4");
    let bad = train_tiny(&data, &tmp.path().join("o"), &["--strategy", "gaussianish"]);
    assert_eq!(bad.status.code(), Some(2));
    let err = String::from_utf8(bad.stderr).unwrap();
    assert!(err.contains("gaussian, vector, pixel"), "{err}");
    assert_eq!(rdc(&["train", "--epochs", "1"]).status.code(), Some(2));
    let missing = train_tiny(&tmp.path().join("nope"), &tmp.path().join("o"), &[]);
    assert_eq!(missing.status.code(), Some(3));
    assert_eq!(
        rdc(&["report", tmp.path().to_str().unwrap()]).status.code(),
        Some(3)
    );
}

#[test]
fn ablate_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    gen_tiny(&tmp.path().join("d1"), "1");
    gen_tiny(&tmp.path().join("d2"), "2");
    let grid = tmp.path().join("grid");
    let data = tmp.path().join("d{seed}");
    let o = rdc(&[
        "ablate",
        "--data-dir",
        data.to_str().unwrap(),
        "--out-dir",
        grid.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch",
        "4",
        "--axis",
        "extraction",
        "--seeds",
        "1,2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report = fs::read_to_string(grid.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 4 + 2);
    fs::remove_file(grid.join("report.csv")).unwrap();
    let r = rdc(&["report", grid.to_str().unwrap()]);
    assert!(r.status.success());
    assert_eq!(fs::read_to_string(grid.join("report.csv")).unwrap(), report);
}

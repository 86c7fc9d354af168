use std::path::Path;
use std::process::Command;

fn stochnorm(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stochnorm"))
        .args(args)
        .output()
        .unwrap()
}

fn tiny(out: &str) -> Vec<&str> {
    vec![
        "--seed",
        "0",
        "--out-dir",
        out,
        "--set",
        "dataset.samples=80",
        "--set",
        "model.width_divisor=16",
        "--set",
        "train.epochs=1",
        "--set",
        "train.batch_size=16",
    ]
}

#[test]
fn train_writes_every_output_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let mut args = vec!["train"];
    args.extend(tiny(out));
    let o = stochnorm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "metrics.csv",
        "elbo.csv",
        "timing.csv",
        "summary.json",
        "checkpoint.bin",
        "config.toml",
    ] {
        assert!(Path::new(out).join(f).exists(), "{f}");
    }

    let eval_dir = tempfile::tempdir().unwrap();
    let ckpt = Path::new(out).join("checkpoint.bin");
    let mut args = vec!["evaluate", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(tiny(eval_dir.path().to_str().unwrap()));
    let o = stochnorm(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(eval_dir.path().join("coverage.csv").exists());

    let mut args = vec!["evaluate", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(tiny(eval_dir.path().to_str().unwrap()));
    args.extend(["--set", "model.norm=weight"]);
    assert_eq!(stochnorm(&args).status.code(), Some(1));
}

#[test]
fn invalid_configuration_exits_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend(tiny(dir.path().to_str().unwrap()));
    args.extend(["--set", "train.batch_size=1"]);
    let o = stochnorm(&args);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert_eq!(stochnorm(&["train", "--out-dir", "x"]).status.code(), Some(2));
}

#[test]
fn divergence_exits_with_code_3() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["train"];
    args.extend(tiny(dir.path().to_str().unwrap()));
    args.extend(["--set", "model.norm=none", "--set", "optimizer.lr0=1e6"]);
    assert_eq!(stochnorm(&args).status.code(), Some(3));
}

#[test]
fn unreadable_config_file_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = stochnorm(&[
        "train",
        "--seed",
        "0",
        "--out-dir",
        dir.path().to_str().unwrap(),
        "--config",
        "/nonexistent/config.toml",
    ]);
    assert_eq!(o.status.code(), Some(2));
}

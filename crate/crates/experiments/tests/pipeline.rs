use stochnorm::NormKind;
use stochnorm_experiments::checkpoint;
use stochnorm_experiments::config::{LrSetting, NoiseSetting};
use stochnorm_experiments::data::SyntheticDataset;
use stochnorm_experiments::output::{write_run, CHECKPOINT_FILE, ELBO_FILE, METRICS_FILE, SUMMARY_FILE};
use stochnorm_experiments::train::{build_network, run_training, train_with, MetricsRecord};
use stochnorm_experiments::{ExpError, ExperimentConfig};

fn small(extra: &[&str]) -> ExperimentConfig {
    let mut o: Vec<String> = [
        "dataset.samples=120",
        "model.width_divisor=16",
        "train.epochs=2",
        "train.batch_size=16",
        "train.mc_eval_samples=3",
        "optimizer.lr0=0.02",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    ExperimentConfig::from_toml_with_overrides("", &o).unwrap()
}

fn data(cfg: &ExperimentConfig, seed: u64) -> SyntheticDataset {
    SyntheticDataset::generate(&cfg.dataset, cfg.val_samples(), seed).unwrap()
}

#[test]
fn defaults_give_512_training_samples() {
    let cfg = ExperimentConfig::from_toml_with_overrides("", &[]).unwrap();
    assert_eq!(cfg.train_samples(), 512);
    assert_eq!(cfg.model.norm, NormKind::Batch);
    assert_eq!(cfg.optimizer.lr0, LrSetting::Fixed(0.05));
}

#[test]
fn overrides_take_precedence_over_the_file() {
    let text = "[train]\nepochs = 7\n[model]\nnoise = \"variational\"\n";
    let cfg = ExperimentConfig::from_toml_with_overrides(text, &["train.epochs=3".into()]).unwrap();
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.model.noise, NoiseSetting::Variational);
    let auto = ExperimentConfig::from_toml_with_overrides("", &["optimizer.lr0=auto".into()]).unwrap();
    assert!(matches!(auto.optimizer.lr0, LrSetting::Auto(_)));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = small(&["model.norm=weight", "model.noise=variational"]);
    let back = ExperimentConfig::from_toml_with_overrides(&cfg.to_toml(), &[]).unwrap();
    assert_eq!(cfg, back);
}

#[test]
fn invalid_configs_are_config_errors() {
    for bad in [
        "train.batch_size=1",
        "train.norm_batch_size=8",
        "optimizer.lr0=-1.0",
        "model.init_sigma=0.0",
        "dataset.classes=1",
        "nonexistent.key=3",
        "train.epochs=\"many\"",
        "schema_version=9",
        "missing_equals_sign",
    ] {
        let err = ExperimentConfig::from_toml_with_overrides("", &[bad.into()]).unwrap_err();
        assert!(matches!(err, ExpError::Config(_)), "{bad}: {err}");
        assert_eq!(err.exit_code(), 2);
    }
}

#[test]
fn splits_are_disjoint_and_reproducible() {
    let cfg = small(&[]);
    let a = data(&cfg, 5);
    assert_eq!(a, data(&cfg, 5));
    assert_ne!(a.train.x, data(&cfg, 6).train.x);
    assert_eq!(a.train.len() + a.val.len(), cfg.dataset.samples);
    let per = a.train.x.len() / a.train.len();
    let rows = |s: &stochnorm_experiments::data::Split| -> Vec<Vec<u64>> {
        s.x.data()
            .chunks(per)
            .map(|r| r.iter().map(|v| v.to_bits()).collect())
            .collect()
    };
    let train = rows(&a.train);
    for v in rows(&a.val) {
        assert!(!train.contains(&v));
    }
    assert!(a.train.y.iter().chain(&a.val.y).all(|&y| y < a.classes));
}

#[test]
fn zero_epochs_writes_header_only_metrics() {
    let cfg = small(&["train.epochs=0"]);
    let run = run_training(&cfg, 1).unwrap();
    assert!(run.metrics.is_empty() && run.elbo.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let summary = write_run(dir.path(), &cfg, &data(&cfg, 1), &run).unwrap();
    assert_eq!(summary.epochs_completed, 0);
    let metrics = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(metrics.trim_end(), MetricsRecord::CSV_HEADER);
}

#[test]
fn same_seed_gives_identical_outputs() {
    let cfg = small(&["model.norm=weight", "model.noise=variational"]);
    let write = || {
        let dir = tempfile::tempdir().unwrap();
        let run = run_training(&cfg, 3).unwrap();
        write_run(dir.path(), &cfg, &data(&cfg, 3), &run).unwrap();
        [METRICS_FILE, ELBO_FILE, SUMMARY_FILE, CHECKPOINT_FILE].map(|f| std::fs::read(dir.path().join(f)).unwrap())
    };
    assert_eq!(write(), write());
}

#[test]
fn norm_batch_equal_to_batch_matches_standard_training() {
    let cfg = small(&[]);
    let d = data(&cfg, 2);
    let mut same = cfg.clone();
    same.train.norm_batch_size = cfg.train.batch_size;
    let a = train_with(&cfg, &d, 2, 0.02).unwrap();
    let b = train_with(&same, &d, 2, 0.02).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.network, b.network);
    let mut larger = cfg.clone();
    larger.train.norm_batch_size = 48;
    let c = train_with(&larger, &d, 2, 0.02).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn checkpoint_round_trip_preserves_predictions() {
    for extra in [
        &["model.norm=batch"][..],
        &["model.norm=weight", "model.noise=variational"],
        &["model.norm=analytic"],
    ] {
        let cfg = small(extra);
        let run = run_training(&cfg, 4).unwrap();
        let bytes = checkpoint::to_bytes(&run.network, cfg.train.epochs, Some(&run.rng));
        let arch = cfg.architecture();
        let noise = cfg.noise_mode().unwrap();
        let ck = checkpoint::from_bytes(&bytes, Some((&arch, cfg.model.norm, &noise))).unwrap();
        assert_eq!(ck.epoch, cfg.train.epochs);
        assert_eq!(ck.rng.as_ref(), Some(&run.rng));
        let x = &data(&cfg, 4).val.x;
        let (p, q) = (run.network.predict(x).unwrap(), ck.network.predict(x).unwrap());
        let worst = p
            .data()
            .iter()
            .zip(q.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst <= 1e-12, "{extra:?}: {worst}");
    }
}

#[test]
fn damaged_or_mismatched_checkpoints_are_rejected() {
    let cfg = small(&[]);
    let net = build_network(&cfg, &data(&cfg, 0), 0).unwrap();
    let bytes = checkpoint::to_bytes(&net, 0, None);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1], None).is_err());
    assert!(checkpoint::from_bytes(&bytes[..20], None).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(checkpoint::from_bytes(&extra, None).is_err());
    let mut magic = bytes.clone();
    magic[0] ^= 1;
    assert!(checkpoint::from_bytes(&magic, None).is_err());
    let mut version = bytes.clone();
    version[8] = 99;
    assert!(checkpoint::from_bytes(&version, None).is_err());

    let other = small(&["model.norm=weight"]);
    let arch = other.architecture();
    let err = checkpoint::from_bytes(&bytes, Some((&arch, other.model.norm, &other.noise_mode().unwrap())));
    assert!(matches!(err, Err(ExpError::Checkpoint(_))));
    let wider = small(&["model.width_divisor=8"]);
    let arch = wider.architecture();
    assert!(checkpoint::from_bytes(&bytes, Some((&arch, NormKind::Batch, &wider.noise_mode().unwrap()))).is_err());
}

#[test]
fn divergence_is_reported_with_its_epoch() {
    let cfg = small(&["model.norm=none", "optimizer.lr0=1e6"]);
    let run = run_training(&cfg, 0).unwrap();
    let d = run.diverged.expect("huge step size diverges");
    assert_eq!(d.epoch, 1);
    assert!(run.metrics.is_empty());
}

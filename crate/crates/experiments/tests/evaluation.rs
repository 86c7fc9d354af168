use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stochnorm_experiments::data::SyntheticDataset;
use stochnorm_experiments::eval::{
    error_at, error_coverage, perturbation_sweep, seed_stability_report, smoothed_non_increasing, PerturbationKind,
};
use stochnorm_experiments::train::{evaluate, run_training, MetricsRecord};
use stochnorm_experiments::ExperimentConfig;

fn one_hot(labels: &[usize], classes: usize) -> Vec<f64> {
    labels
        .iter()
        .flat_map(|&y| (0..classes).map(move |c| if c == y { 0.97 } else { 0.01 }))
        .collect()
}

#[test]
fn perfect_classifier_has_zero_error_at_every_coverage() {
    let labels: Vec<usize> = (0..50).map(|i| i % 4).collect();
    let curve = error_coverage(&one_hot(&labels, 4), &labels, 4);
    assert_eq!(curve.len(), 50);
    assert!(curve.iter().all(|p| p.error == 0.0));
    assert_eq!(curve.last().unwrap().completeness, 1.0);
}

#[test]
fn full_coverage_error_is_the_overall_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, c) = (300, 5);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let probs: Vec<f64> = (0..n * c).map(|_| rng.random::<f64>()).collect();
    let wrong = probs
        .chunks(c)
        .zip(&labels)
        .filter(|(r, &y)| (0..c).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap() != y)
        .count();
    let curve = error_coverage(&probs, &labels, c);
    assert_eq!(error_at(&curve, 1.0), Some(wrong as f64 / n as f64));
}

#[test]
fn confident_mistakes_come_first() {
    // Two confident errors, two uncertain correct predictions.
    let probs = [0.9, 0.1, 0.1, 0.9, 0.6, 0.4, 0.45, 0.55];
    let labels = [1, 0, 0, 1];
    let curve = error_coverage(&probs, &labels, 2);
    let errs: Vec<f64> = curve.iter().map(|p| p.error).collect();
    assert_eq!(errs, vec![1.0, 1.0, 2.0 / 3.0, 0.5]);
}

#[test]
fn random_guessing_gives_a_flat_curve() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c) = (4000, 4);
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..c)).collect();
    let probs: Vec<f64> = (0..n)
        .flat_map(|_| {
            let r: Vec<f64> = (0..c).map(|_| rng.random::<f64>()).collect();
            let s: f64 = r.iter().sum();
            r.into_iter().map(move |v| v / s)
        })
        .collect();
    let curve = error_coverage(&probs, &labels, c);
    let p = 1.0 - 1.0 / c as f64;
    for frac in [0.1, 0.25, 0.5, 0.75, 1.0] {
        let m = frac * n as f64;
        let tol = 4.0 * (p * (1.0 - p) / m).sqrt();
        let e = error_at(&curve, frac).unwrap();
        assert!((e - p).abs() < tol, "coverage {frac}: {e} vs {p} ± {tol}");
    }
}

fn trained() -> (stochnorm_experiments::train::RunOutput, SyntheticDataset) {
    let cfg = ExperimentConfig::from_toml_with_overrides(
        "",
        &[
            "dataset.samples=300".into(),
            "model.width_divisor=16".into(),
            "train.epochs=6".into(),
            "optimizer.lr0=0.03".into(),
        ],
    )
    .unwrap();
    let data = SyntheticDataset::generate(&cfg.dataset, cfg.val_samples(), 7).unwrap();
    (run_training(&cfg, 7).unwrap(), data)
}

#[test]
fn perturbation_sweeps_start_at_the_clean_accuracy_and_degrade() {
    let (run, data) = trained();
    let (_, clean) = evaluate(&run.network, &data.val).unwrap();
    let mags = [0.0, 0.1, 0.2, 0.4, 0.8, 1.6, 3.2];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for kind in [PerturbationKind::Gaussian, PerturbationKind::GradSign] {
        let sweep = perturbation_sweep(&run.network, &data.val, kind, &mags, &mut rng).unwrap();
        assert_eq!(sweep[0].accuracy, clean, "{kind:?}");
        let acc: Vec<f64> = sweep.iter().map(|p| p.accuracy).collect();
        assert!(acc.last().unwrap() < &clean, "{kind:?}: {acc:?}");
        if kind == PerturbationKind::GradSign {
            assert!(smoothed_non_increasing(&acc, 0.02), "{acc:?}");
        }
    }
}

fn record(epoch: usize, acc: f64, loss: f64) -> MetricsRecord {
    MetricsRecord {
        epoch,
        train_loss: 0.0,
        train_loss_eval_mode: 0.0,
        val_loss: loss,
        val_acc: acc,
        evidence: 0.0,
        kl: 0.0,
        lr: 0.1,
    }
}

#[test]
fn identical_runs_have_zero_spread() {
    let run: Vec<MetricsRecord> = (1..=6)
        .map(|e| record(e, 0.5 + 0.01 * e as f64, 1.0 / e as f64))
        .collect();
    let rows = seed_stability_report(&[run.clone(), run.clone(), run], 3).unwrap();
    assert_eq!(rows.len(), 6);
    assert!(rows
        .iter()
        .all(|r| r.val_acc_std < 1e-15 && r.val_loss_std < 1e-15 && r.seeds == 3));
    assert_eq!(rows[0].within_run_std, 0.0);
    assert!(rows[5].within_run_std > 0.0);
}

#[test]
fn spread_matches_the_sample_standard_deviation() {
    let runs: Vec<Vec<MetricsRecord>> = [0.6, 0.7, 0.8].iter().map(|&a| vec![record(1, a, 1.0)]).collect();
    let row = &seed_stability_report(&runs, 1).unwrap()[0];
    assert!((row.val_acc_mean - 0.7).abs() < 1e-12);
    assert!((row.val_acc_std - 0.1).abs() < 1e-12);
    assert!(seed_stability_report(&runs[..2], 1).is_err());
}

#[test]
fn distinct_seeds_give_distinct_trajectories() {
    let cfg = ExperimentConfig::from_toml_with_overrides(
        "",
        &[
            "dataset.samples=120".into(),
            "model.width_divisor=16".into(),
            "train.epochs=2".into(),
        ],
    )
    .unwrap();
    let runs: Vec<Vec<MetricsRecord>> = (0..3).map(|s| run_training(&cfg, s).unwrap().metrics).collect();
    assert_ne!(runs[0], runs[1]);
    assert_ne!(runs[1], runs[2]);
    let rows = seed_stability_report(&runs, 2).unwrap();
    assert!(rows.iter().any(|r| r.val_loss_std > 0.0));
}

//! Post-training evaluation: error-coverage curves, perturbation sweeps and
//! seed-stability summaries.

use rand::Rng;
use serde::{Deserialize, Serialize};
use stochnorm::tensor::Tensor;
use stochnorm::{ForwardOptions, Network, Tape};

use crate::data::Split;
use crate::error::{ExpError, ExpResult};
use crate::train::{nll_and_accuracy, MetricsRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoveragePoint {
    pub completeness: f64,
    pub error: f64,
}

/// Shannon entropy (nats) of one probability row.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&q| q > 0.0).map(|q| q * q.ln()).sum::<f64>()
}

/// Error rate among the `i` lowest-entropy samples, for every `i`. `probs`
/// holds one row of class probabilities per sample; ties in entropy keep
/// sample order.
pub fn error_coverage(probs: &[f64], labels: &[usize], classes: usize) -> Vec<CoveragePoint> {
    let rows: Vec<&[f64]> = probs.chunks(classes).collect();
    let mut order: Vec<usize> = (0..labels.len()).collect();
    let ent: Vec<f64> = rows.iter().map(|r| entropy(r)).collect();
    order.sort_by(|&a, &b| ent[a].total_cmp(&ent[b]));
    let n = labels.len() as f64;
    let mut wrong = 0usize;
    order
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let r = rows[s];
            let pred = (0..classes).max_by(|&a, &b| r[a].total_cmp(&r[b])).unwrap_or(0);
            wrong += usize::from(pred != labels[s]);
            CoveragePoint {
                completeness: (i + 1) as f64 / n,
                error: wrong as f64 / (i + 1) as f64,
            }
        })
        .collect()
}

/// Error at the smallest completeness `≥ c`.
pub fn error_at(curve: &[CoveragePoint], c: f64) -> Option<f64> {
    curve.iter().find(|p| p.completeness >= c - 1e-12).map(|p| p.error)
}

pub fn coverage_csv(curve: &[CoveragePoint]) -> String {
    let mut out = String::from("completeness,error\n");
    for p in curve {
        out.push_str(&format!("{},{}\n", p.completeness, p.error));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerturbationKind {
    /// `x + σ·ξ` with standard normal `ξ`.
    Gaussian,
    /// `x + ε·sign(∇ₓ NLL)`, with `sign(0) = 0`.
    GradSign,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub magnitude: f64,
    pub accuracy: f64,
}

pub fn sweep_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("magnitude,accuracy\n");
    for p in points {
        out.push_str(&format!("{},{}\n", p.magnitude, p.accuracy));
    }
    out
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of the mean evaluation-mode NLL with respect to the inputs.
pub fn input_gradient(net: &Network, x: &Tensor, labels: &[usize]) -> ExpResult<Tensor> {
    let tape = Tape::new();
    let p = net.bind_frozen(&tape);
    let xv = tape.leaf(x);
    let mut idle = crate::rng::stream(0, crate::rng::Stream::Eval);
    let t = net.forward(&p, xv, ForwardOptions::EVAL, &mut idle)?;
    let loss = t.logp.nll_loss(labels)?;
    Ok(tape.backward(loss)?.wrt(xv))
}

/// Deterministic-prediction accuracy on `split` under perturbations of each
/// magnitude. Gaussian draws come from `rng`; gradient-sign directions are
/// computed once at the clean inputs.
pub fn perturbation_sweep(
    net: &Network,
    split: &Split,
    kind: PerturbationKind,
    magnitudes: &[f64],
    rng: &mut impl Rng,
) -> ExpResult<Vec<SweepPoint>> {
    let direction = match kind {
        PerturbationKind::GradSign => Some(input_gradient(net, &split.x, &split.y)?.map(sign)),
        PerturbationKind::Gaussian => None,
    };
    magnitudes
        .iter()
        .map(|&eps| {
            let d = match &direction {
                Some(d) => d.clone(),
                None => Tensor::randn(split.x.shape(), rng),
            };
            let data = split.x.data().iter().zip(d.data()).map(|(x, d)| x + eps * d).collect();
            let xp = Tensor::new(split.x.shape().to_vec(), data)?;
            let logp = net.predict(&xp)?;
            let (_, accuracy) = nll_and_accuracy(logp.data(), &split.y, net.classes());
            Ok(SweepPoint {
                magnitude: eps,
                accuracy,
            })
        })
        .collect()
}

/// Whether the 3-point moving average of `values` never rises by more than
/// `tol`.
pub fn smoothed_non_increasing(values: &[f64], tol: f64) -> bool {
    let smooth: Vec<f64> = (0..values.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 2).min(values.len());
            values[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect();
    smooth.windows(2).all(|w| w[1] <= w[0] + tol)
}

/// Per-epoch statistics across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub epoch: usize,
    pub seeds: usize,
    pub val_acc_mean: f64,
    pub val_acc_std: f64,
    pub val_loss_mean: f64,
    pub val_loss_std: f64,
    /// Mean over runs of the standard deviation of validation accuracy over
    /// the trailing window of epochs.
    pub within_run_std: f64,
}

pub const MIN_STABILITY_SEEDS: usize = 3;

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Cross-seed mean and sample standard deviation per epoch, over the epochs
/// every run completed.
pub fn seed_stability_report(runs: &[Vec<MetricsRecord>], window: usize) -> ExpResult<Vec<StabilityRow>> {
    if runs.len() < MIN_STABILITY_SEEDS {
        return Err(ExpError::Config(format!(
            "seed stability needs at least {MIN_STABILITY_SEEDS} runs, got {}",
            runs.len()
        )));
    }
    let epochs = runs.iter().map(Vec::len).min().unwrap_or(0);
    let window = window.max(1);
    Ok((0..epochs)
        .map(|e| {
            let acc: Vec<f64> = runs.iter().map(|r| r[e].val_acc).collect();
            let loss: Vec<f64> = runs.iter().map(|r| r[e].val_loss).collect();
            let within: Vec<f64> = runs
                .iter()
                .map(|r| {
                    let lo = (e + 1).saturating_sub(window);
                    let w: Vec<f64> = r[lo..=e].iter().map(|m| m.val_acc).collect();
                    mean_std(&w).1
                })
                .collect();
            let (am, asd) = mean_std(&acc);
            let (lm, lsd) = mean_std(&loss);
            StabilityRow {
                epoch: runs[0][e].epoch,
                seeds: runs.len(),
                val_acc_mean: am,
                val_acc_std: asd,
                val_loss_mean: lm,
                val_loss_std: lsd,
                within_run_std: within.iter().sum::<f64>() / within.len() as f64,
            }
        })
        .collect())
}

pub fn stability_csv(rows: &[StabilityRow]) -> String {
    let mut out = String::from("epoch,seeds,val_acc_mean,val_acc_std,val_loss_mean,val_loss_std,within_run_std\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.seeds, r.val_acc_mean, r.val_acc_std, r.val_loss_mean, r.val_loss_std, r.within_run_std
        ));
    }
    out
}

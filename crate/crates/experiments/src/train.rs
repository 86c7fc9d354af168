//! Training loop, learning-rate search and the normalization-batch
//! experiment.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stochnorm::norm::DatasetMoments;
use stochnorm::optim::{log_grid, lr_search, LrSearch, Optimizer};
use stochnorm::variational::{evidence_objective, kl_scale_constant, mc_predict, u_from_sigma};
use stochnorm::{ForwardOptions, Network, NormKind, Tape, Tensor};

use crate::config::{ExperimentConfig, LrSetting};
use crate::data::{augment, Split, SyntheticDataset};
use crate::error::{ExpError, ExpResult};
use crate::rng::{stream, RngState, Stream};

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;
/// Losses above this count as divergence.
const DIVERGENCE_LOSS: f64 = 1e6;

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    /// Mean mini-batch NLL in training mode (batch statistics, noise and
    /// sampled scales active), averaged over the epoch.
    pub train_loss: f64,
    /// NLL over the training set in evaluation mode after the epoch.
    pub train_loss_eval_mode: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Running mean over the epoch of the scaled evidence term `|D|·NLL`.
    pub evidence: f64,
    /// KL of the scale posterior to the prior at the end of the epoch.
    pub kl: f64,
    pub lr: f64,
}

impl MetricsRecord {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_loss_eval_mode,val_loss,val_acc,evidence,kl,lr";

    fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.train_loss_eval_mode,
            self.val_loss,
            self.val_acc,
            self.evidence,
            self.kl,
            self.lr
        )
    }
}

/// One row of `elbo.csv`, per optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElboRecord {
    pub step: usize,
    pub evidence: f64,
    pub kl: f64,
    pub total: f64,
}

impl ElboRecord {
    pub const CSV_HEADER: &'static str = "step,evidence,kl,total";
}

pub fn metrics_csv(records: &[MetricsRecord]) -> String {
    let mut out = format!("{}\n", MetricsRecord::CSV_HEADER);
    for r in records {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}

pub fn elbo_csv(records: &[ElboRecord]) -> String {
    let mut out = format!("{}\n", ElboRecord::CSV_HEADER);
    for r in records {
        out.push_str(&format!("{},{},{},{}\n", r.step, r.evidence, r.kl, r.total));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub epoch: usize,
    pub step: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub seed: u64,
    pub lr0: f64,
    pub lr_search: Option<LrSearch>,
    pub metrics: Vec<MetricsRecord>,
    pub elbo: Vec<ElboRecord>,
    /// Wall-clock seconds per epoch; kept apart from the metrics so those
    /// stay reproducible.
    pub epoch_seconds: Vec<f64>,
    pub network: Network,
    pub rng: RngState,
    pub diverged: Option<Divergence>,
}

/// Final-epoch values and the Monte Carlo evaluation, written as
/// `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub seed: u64,
    pub lr0: f64,
    pub epochs_completed: usize,
    pub final_metrics: Option<MetricsRecord>,
    /// Validation NLL of the MC posterior prediction (variational runs).
    pub mc_val_loss: Option<f64>,
    pub mc_val_acc: Option<f64>,
    pub mc_samples: usize,
    pub diverged: Option<Divergence>,
}

/// Mean NLL and accuracy of the deterministic prediction.
pub fn evaluate(net: &Network, split: &Split) -> ExpResult<(f64, f64)> {
    let n = split.len();
    let mut logp = Vec::with_capacity(n * net.classes());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        logp.extend_from_slice(net.predict(&split.x.select_rows(&idx))?.data());
    }
    Ok(nll_and_accuracy(&logp, &split.y, net.classes()))
}

/// Mean NLL and accuracy of row-major log-probabilities.
pub fn nll_and_accuracy(logp: &[f64], labels: &[usize], classes: usize) -> (f64, f64) {
    let n = labels.len();
    let (mut nll, mut correct) = (0.0, 0usize);
    for (row, &y) in logp.chunks(classes).zip(labels) {
        nll -= row[y];
        let best = (0..classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
        correct += usize::from(best == y);
    }
    (nll / n as f64, correct as f64 / n as f64)
}

/// Network initialized for `cfg`: weights from the init stream, dataset
/// moments for analytic normalization, and data-dependent initialization of
/// non-batch-normalized networks.
pub fn build_network(cfg: &ExperimentConfig, data: &SyntheticDataset, seed: u64) -> ExpResult<Network> {
    let mut rng = stream(seed, Stream::Init);
    let mut net = Network::new(cfg.architecture(), cfg.model.norm, cfg.noise_mode()?, &mut rng)?;
    net.prior = cfg.prior();
    net.eps = cfg.model.eps;
    net.momentum = cfg.model.bn_momentum;
    let u0 = u_from_sigma(cfg.model.init_sigma);
    for u in net.blocks.iter_mut().filter_map(|b| b.u.as_mut()) {
        u.data_mut().fill(u0);
    }
    if cfg.model.norm == NormKind::Analytic {
        net = net.with_moments(DatasetMoments::from_data(&data.train.x)?);
    }
    let k = cfg.train.init_batch_size.min(data.train.len());
    if cfg.model.norm != NormKind::Batch && k >= 2 {
        let mut idx: Vec<usize> = (0..data.train.len()).collect();
        idx.shuffle(&mut rng);
        net.data_dependent_init(&data.train.x.select_rows(&idx[..k]))?;
    }
    if cfg.model.norm.is_scale_invariant() && cfg.optimizer.project {
        net.project_weights();
    }
    Ok(net)
}

/// Generates the dataset, resolves the learning rate and trains.
pub fn run_training(cfg: &ExperimentConfig, seed: u64) -> ExpResult<RunOutput> {
    cfg.validate()?;
    let data = SyntheticDataset::generate(&cfg.dataset, cfg.val_samples(), seed)?;
    let (lr0, search) = resolve_lr(cfg, &data, seed)?;
    let mut out = train_with(cfg, &data, seed, lr0)?;
    out.lr_search = search;
    Ok(out)
}

/// The configured learning rate, or the grid value minimizing the training
/// loss after `search_epochs` epochs.
pub fn resolve_lr(cfg: &ExperimentConfig, data: &SyntheticDataset, seed: u64) -> ExpResult<(f64, Option<LrSearch>)> {
    match cfg.optimizer.lr0 {
        LrSetting::Fixed(lr) => Ok((lr, None)),
        LrSetting::Auto(_) => {
            let o = &cfg.optimizer;
            let grid = log_grid(o.search_lo, o.search_hi, o.search_points);
            let mut short = cfg.clone();
            short.train.epochs = o.search_epochs;
            let mut failure = None;
            let search = lr_search(
                |lr| match train_with(&short, data, seed, lr) {
                    Ok(run) if run.diverged.is_none() => run.metrics.last().map_or(f64::NAN, |m| m.train_loss),
                    Ok(_) => f64::NAN,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                },
                &grid,
            );
            if let Some(e) = failure {
                return Err(e);
            }
            let search = search?;
            Ok((search.best, Some(search)))
        }
    }
}

struct StepOutcome {
    nll: f64,
    kl_raw: Option<f64>,
}

/// Trains a freshly built network for `cfg.train.epochs` epochs at `lr0`.
/// Divergence ends the run early and is reported in the output.
pub fn train_with(cfg: &ExperimentConfig, data: &SyntheticDataset, seed: u64, lr0: f64) -> ExpResult<RunOutput> {
    let mut net = build_network(cfg, data, seed)?;
    let mut rng = stream(seed, Stream::Train);
    let mut opt = Optimizer::new(cfg.optimizer_config(lr0))?;
    let t = &cfg.train;
    let (m, nb) = (t.batch_size, t.effective_norm_batch());
    let n = data.train.len();
    let scale_count: usize = if net.noise.is_variational() {
        net.blocks.iter().map(|b| b.s.len()).sum()
    } else {
        0
    };
    let kl_const = scale_count as f64 * kl_scale_constant(&net.prior);

    let mut out = RunOutput {
        seed,
        lr0,
        lr_search: None,
        metrics: vec![],
        elbo: vec![],
        epoch_seconds: vec![],
        network: net.clone(),
        rng: RngState::capture(&rng),
        diverged: None,
    };
    let mut step = 0usize;
    'epochs: for epoch in 0..t.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let (mut nll_sum, mut evidence_sum, mut steps) = (0.0, 0.0, 0usize);
        for chunk in order.chunks_exact(m) {
            let mut idx = chunk.to_vec();
            if nb > m {
                idx.extend(extra_rows(n, chunk, nb - m, &mut rng));
            }
            let (mut x, y) = data.train.rows(&idx);
            if cfg.dataset.augment {
                x = augment(&x, &mut rng);
            }
            let outcome = match sgd_step(cfg, &mut net, &mut opt, &x, &y[..m], n, epoch, &mut rng) {
                Ok(o) => o,
                Err(reason) => {
                    out.diverged = Some(Divergence {
                        epoch: epoch + 1,
                        step,
                        reason,
                    });
                    break 'epochs;
                }
            };
            let kl = outcome.kl_raw.map_or(0.0, |k| k + kl_const);
            let elbo = evidence_objective(outcome.nll * m as f64, n, m, &[kl], &net.prior)?;
            out.elbo.push(ElboRecord {
                step,
                evidence: elbo.evidence_term,
                kl: elbo.kl_term,
                total: elbo.total,
            });
            nll_sum += outcome.nll;
            evidence_sum += elbo.evidence_term;
            steps += 1;
            step += 1;
        }
        let (train_eval, _) = evaluate(&net, &data.train)?;
        let (val_loss, val_acc) = evaluate(&net, &data.val)?;
        let kl = current_kl(&net)?.map_or(0.0, |k| k + kl_const);
        let steps = steps.max(1) as f64;
        out.metrics.push(MetricsRecord {
            epoch: epoch + 1,
            train_loss: nll_sum / steps,
            train_loss_eval_mode: train_eval,
            val_loss,
            val_acc,
            evidence: evidence_sum / steps,
            kl,
            lr: opt.config.lr_at(epoch),
        });
        out.epoch_seconds.push(started.elapsed().as_secs_f64());
    }
    out.rng = RngState::capture(&rng);
    out.network = net;
    Ok(out)
}

/// `count` training rows outside `batch`, drawn without replacement.
fn extra_rows(n: usize, batch: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let taken: std::collections::BTreeSet<usize> = batch.iter().copied().collect();
    let mut pool: Vec<usize> = (0..n).filter(|i| !taken.contains(i)).collect();
    let (chosen, _) = pool.partial_shuffle(rng, count);
    chosen.to_vec()
}

/// Forward, backward and update on one batch. The loss covers the first
/// `labels.len()` rows of `x`; any further rows only enter the batch
/// statistics. Returns `Err` with a reason when the step diverges.
#[allow(clippy::too_many_arguments)]
fn sgd_step(
    cfg: &ExperimentConfig,
    net: &mut Network,
    opt: &mut Optimizer,
    x: &Tensor,
    labels: &[usize],
    dataset_size: usize,
    epoch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome, String> {
    let fail = |e: stochnorm::Error| e.to_string();
    let tape = Tape::with_precision(cfg.model.precision.into());
    let p = net.bind(&tape);
    let trace = net
        .forward(&p, tape.constant(x), ForwardOptions::TRAIN, rng)
        .map_err(fail)?;
    let mut logp = trace.logp;
    if labels.len() < x.shape()[0] {
        logp = logp.slice_rows(0, labels.len()).map_err(|e| e.to_string())?;
    }
    let nll = logp.nll_loss(labels).map_err(|e| e.to_string())?;
    let kl = net.kl(&p).map_err(fail)?;
    let loss = match kl {
        Some(k) => nll
            .add(k.scale(cfg.train.kl_factor / dataset_size as f64))
            .map_err(|e| e.to_string())?,
        None => nll,
    };
    let value = loss.item();
    if !value.is_finite() || value > DIVERGENCE_LOSS {
        return Err(format!("loss {value}"));
    }
    let outcome = StepOutcome {
        nll: nll.item(),
        kl_raw: kl.map(|k| k.item()),
    };
    let grads = tape.backward(loss).map_err(|e| e.to_string())?;
    let grads = net.collect_grads(&p, &grads);
    if let Some(g) = grads.iter().position(|g| !g.is_finite()) {
        return Err(format!("non-finite gradient for parameter {g}"));
    }
    net.update_running(&trace.batch_stats).map_err(fail)?;
    opt.step(&mut net.params_mut(), &grads, epoch).map_err(fail)?;
    Ok(outcome)
}

fn current_kl(net: &Network) -> ExpResult<Option<f64>> {
    let tape = Tape::new();
    let p = net.bind_frozen(&tape);
    Ok(net.kl(&p)?.map(|k| k.item()))
}

/// Validation NLL and accuracy of the `samples`-draw posterior prediction.
pub fn mc_evaluate(net: &Network, split: &Split, samples: usize, seed: u64) -> ExpResult<(f64, f64)> {
    let mut rng = stream(seed, Stream::Eval);
    let n = split.len();
    let mut logp = Vec::with_capacity(n * net.classes());
    for start in (0..n).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(n)).collect();
        let probs = mc_predict(net, &split.x.select_rows(&idx), samples, &mut rng)?;
        logp.extend(probs.data().iter().map(|p| p.ln()));
    }
    Ok(nll_and_accuracy(&logp, &split.y, net.classes()))
}

pub fn summarize(cfg: &ExperimentConfig, data: &SyntheticDataset, run: &RunOutput) -> ExpResult<Summary> {
    let mc = if run.network.noise.is_variational() && cfg.train.mc_eval_samples > 0 {
        Some(mc_evaluate(
            &run.network,
            &data.val,
            cfg.train.mc_eval_samples,
            run.seed,
        )?)
    } else {
        None
    };
    Ok(Summary {
        schema_version: crate::config::SCHEMA_VERSION,
        seed: run.seed,
        lr0: run.lr0,
        epochs_completed: run.metrics.len(),
        final_metrics: run.metrics.last().cloned(),
        mc_val_loss: mc.map(|m| m.0),
        mc_val_acc: mc.map(|m| m.1),
        mc_samples: if mc.is_some() { cfg.train.mc_eval_samples } else { 0 },
        diverged: run.diverged.clone(),
    })
}

/// Batch-normalized runs with statistics over `norm_batches[i]` samples per
/// step and the loss over `cfg.train.batch_size` of them.
pub fn normalization_batch_experiment(
    cfg: &ExperimentConfig,
    seed: u64,
    norm_batches: &[usize],
) -> ExpResult<Vec<(usize, RunOutput)>> {
    if cfg.model.norm != NormKind::Batch {
        return Err(ExpError::Config(
            "the normalization-batch experiment needs model.norm = \"batch\"".into(),
        ));
    }
    let data = SyntheticDataset::generate(&cfg.dataset, cfg.val_samples(), seed)?;
    let (lr0, _) = resolve_lr(cfg, &data, seed)?;
    norm_batches
        .iter()
        .map(|&nb| {
            let mut c = cfg.clone();
            c.train.norm_batch_size = nb;
            c.validate()?;
            Ok((nb, train_with(&c, &data, seed, lr0)?))
        })
        .collect()
}

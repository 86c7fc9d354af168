//! Variational learning of stochastic post-normalization scales.
//!
//! Each normalized unit computes `((wᵀx − μ̂)/σ̂ + b) · S` with a scale
//! `S ~ q(S) = N(s, σ²)` drawn afresh for every training example, a prior
//! `p(S) = N(1, σ₀²)` and point estimates for `w` and `b`. The deviation is
//! parametrized through [`sigma_from_u`] so that both `σ` and `log σ` have
//! bounded derivatives.

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::network::{ForwardOptions, Network};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `σ(u) = eᵘ` for `u < 0`, `u + 1` otherwise.
pub fn sigma_from_u(u: f64) -> f64 {
    if u < 0.0 {
        u.exp()
    } else {
        u + 1.0
    }
}

pub fn sigma_from_u_deriv(u: f64) -> f64 {
    if u < 0.0 {
        u.exp()
    } else {
        1.0
    }
}

/// `log σ(u)`, computed without forming `σ` for negative `u`.
pub fn log_sigma_from_u(u: f64) -> f64 {
    if u < 0.0 {
        u
    } else {
        (u + 1.0).ln()
    }
}

/// Inverse of [`sigma_from_u`].
pub fn u_from_sigma(sigma: f64) -> f64 {
    if sigma < 1.0 {
        sigma.ln()
    } else {
        sigma - 1.0
    }
}

/// Initial posterior deviation of a freshly created scale.
pub const INITIAL_SIGMA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerChannel,
    PerLayer,
}

/// Posterior `N(s, σ(u)²)` over the scales of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariationalScale {
    pub s: Tensor,
    pub u: Tensor,
    pub granularity: Granularity,
}

impl VariationalScale {
    pub fn new(channels: usize, granularity: Granularity) -> Self {
        let nu = match granularity {
            Granularity::PerChannel => channels,
            Granularity::PerLayer => 1,
        };
        VariationalScale {
            s: Tensor::ones(&[channels]),
            u: Tensor::full(&[nu], u_from_sigma(INITIAL_SIGMA)),
            granularity,
        }
    }

    pub fn channels(&self) -> usize {
        self.s.len()
    }

    /// Posterior deviation per channel.
    pub fn sigma(&self) -> Vec<f64> {
        (0..self.channels())
            .map(|c| sigma_from_u(self.u.data()[c.min(self.u.len() - 1)]))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub s0: f64,
    pub sigma0: f64,
    /// Weight of the KL term per example.
    pub kl_factor: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            s0: 1.0,
            sigma0: 10.0,
            kl_factor: 1.0,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma0 > 0.0) {
            return Err(Error::InvalidArgument("prior sigma0 must be > 0".into()));
        }
        if !(self.kl_factor >= 0.0) {
            return Err(Error::InvalidArgument("kl_factor must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// `−log σ² + σ²/σ₀² + (s − s₀)²/σ₀²` with `σ = σ(u)`.
///
/// This equals `2·KL(N(s, σ²) ‖ N(s₀, σ₀²)) − 2 log σ₀ + 1`; see
/// [`kl_scale_constant`].
pub fn kl_scale(s: f64, u: f64, prior: &PriorConfig) -> f64 {
    let sigma = sigma_from_u(u);
    let s02 = prior.sigma0 * prior.sigma0;
    -2.0 * log_sigma_from_u(u) + sigma * sigma / s02 + (s - prior.s0).powi(2) / s02
}

/// The part of the Gaussian KL that [`kl_scale`] leaves out:
/// `KL = ½·kl_scale + kl_scale_constant`.
pub fn kl_scale_constant(prior: &PriorConfig) -> f64 {
    prior.sigma0.ln() - 0.5
}

/// `(∂/∂s, ∂/∂u)` of [`kl_scale`].
pub fn kl_scale_grad(s: f64, u: f64, prior: &PriorConfig) -> (f64, f64) {
    let sigma = sigma_from_u(u);
    let ds = sigma_from_u_deriv(u);
    let s02 = prior.sigma0 * prior.sigma0;
    let dlog = ds / sigma;
    (2.0 * (s - prior.s0) / s02, -2.0 * dlog + 2.0 * sigma * ds / s02)
}

/// Differentiable `σ(u)`.
pub fn sigma_var(u: Var<'_>) -> Var<'_> {
    u.map(sigma_from_u, |u, _| sigma_from_u_deriv(u))
}

/// Sum over channels of the Gaussian KL to the prior, without its additive
/// constant: `½ Σ_c kl_scale(s_c, u_c)`. A one-element `u` is shared by all
/// channels.
pub fn kl_scale_var<'t>(s: Var<'t>, u: Var<'t>, prior: &PriorConfig) -> Result<Var<'t>> {
    let c = s.shape().iter().product::<usize>();
    let u = broadcast_to_channels(u, c)?;
    let p = *prior;
    let raw = s.zip_map(u, move |s, u| kl_scale(s, u, &p), move |s, u| kl_scale_grad(s, u, &p))?;
    Ok(raw.sum().scale(0.5))
}

/// Repeats a one-element vector to `c` entries (identity when already `[c]`).
pub(crate) fn broadcast_to_channels(u: Var<'_>, c: usize) -> Result<Var<'_>> {
    let n = u.shape().iter().product::<usize>();
    if n == c {
        return Ok(u.reshape(&[c])?);
    }
    if n != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "broadcast_to_channels",
            lhs: u.shape(),
            rhs: vec![c],
        }
        .into());
    }
    let ones = u.tape().constant(&Tensor::ones(&[c, 1]));
    Ok(ones.matmul(u.reshape(&[1, 1])?)?.reshape(&[c])?)
}

/// Standard-normal draws `ξ` of shape `[k, c]`, one per example and channel.
pub fn draw_scale_noise<R: Rng + ?Sized>(k: usize, c: usize, rng: &mut R) -> Tensor {
    let data = (0..k * c).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![k, c], data).expect("draw shape")
}

/// `S = s + σ(u)·ξ` for `[k, c]` noise `ξ`. The gradient reaches `s` with
/// coefficient 1 and `u` with coefficient `ξ·σ'(u)`.
pub fn scale_from_noise<'t>(s: Var<'t>, u: Var<'t>, xi: &Tensor) -> Result<Var<'t>> {
    let c = s.shape().iter().product::<usize>();
    let sigma = sigma_var(broadcast_to_channels(u, c)?);
    let xi = s.tape().constant(xi);
    Ok(xi.channel_mul(sigma)?.channel_add(s)?)
}

/// Draws `[k, c]` scales for a batch of `k` examples.
pub fn sample_scale<'t, R: Rng + ?Sized>(s: Var<'t>, u: Var<'t>, k: usize, rng: &mut R) -> Result<Var<'t>> {
    let c = s.shape().iter().product::<usize>();
    scale_from_noise(s, u, &draw_scale_noise(k, c, rng))
}

/// `(z + b) · S` for an exactly normalized `z`. `scale` is either `[c]`
/// (mean scales, evaluation) or `[k, c]` (one draw per example).
pub fn bayes_norm_forward<'t>(z: Var<'t>, b: Var<'t>, scale: Var<'t>) -> Result<Var<'t>> {
    Ok(z.channel_add(b)?.channel_mul(scale)?)
}

/// Terms of the variational objective for one mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    /// `(|D|/M) Σ_m NLL_m`.
    pub evidence_term: f64,
    pub kl_term: f64,
    /// `evidence_term + kl_factor · kl_term`.
    pub total: f64,
    pub dataset_size: usize,
    pub batch_size: usize,
}

/// Unbiased mini-batch estimate of the negative evidence lower bound.
pub fn evidence_objective(
    batch_nll_sum: f64,
    dataset_size: usize,
    batch_size: usize,
    kl_terms: &[f64],
    prior: &PriorConfig,
) -> Result<ElboBreakdown> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("mini-batch size must be ≥ 1".into()));
    }
    prior.validate()?;
    let evidence = dataset_size as f64 / batch_size as f64 * batch_nll_sum;
    let kl: f64 = kl_terms.iter().sum();
    Ok(ElboBreakdown {
        evidence_term: evidence,
        kl_term: kl,
        total: evidence + prior.kl_factor * kl,
        dataset_size,
        batch_size,
    })
}

/// Scale and bias `(S, B) = (U·s, V + b/(U·s))` under which
/// `(x + B)·S = (x + V)·U·s + b`.
pub fn bn_equivalence_map(s: f64, b: f64, v: f64, u: f64) -> Result<(f64, f64)> {
    let us = u * s;
    if us == 0.0 {
        return Err(Error::InvalidArgument("U·s must be non-zero".into()));
    }
    Ok((us, v + b / us))
}

/// Checks `Σ_j W_ij (x_j S_j) + b_i = Σ_j (W_ij S_j) x_j + b_i` for a
/// `[o, i]` matrix, i.e. scaling a layer's inputs equals scaling its weight
/// columns. Returns the largest absolute discrepancy.
pub fn dropout_equivalence_gap(w: &Tensor, b: &[f64], x: &[f64], scales: &[f64]) -> Result<f64> {
    let [o, i] = w.shape()[..] else {
        return Err(Error::InvalidArgument(format!("weight shape {:?}", w.shape())));
    };
    if b.len() != o || x.len() != i || scales.len() != i {
        return Err(TensorError::ShapeMismatch {
            op: "dropout_equivalence",
            lhs: vec![o, i],
            rhs: vec![b.len(), x.len(), scales.len()],
        }
        .into());
    }
    let wd = w.data();
    let mut gap: f64 = 0.0;
    for r in 0..o {
        let row = &wd[r * i..(r + 1) * i];
        let scaled_inputs: f64 = (0..i).map(|j| row[j] * (x[j] * scales[j])).sum::<f64>() + b[r];
        let scaled_weights: f64 = (0..i).map(|j| (row[j] * scales[j]) * x[j]).sum::<f64>() + b[r];
        gap = gap.max((scaled_inputs - scaled_weights).abs());
    }
    Ok(gap)
}

/// Whether both sides of [`dropout_equivalence_gap`] agree to `1e-12`
/// relative to the output magnitude.
pub fn dropout_equivalence_check(w: &Tensor, b: &[f64], x: &[f64], scales: &[f64]) -> Result<bool> {
    let gap = dropout_equivalence_gap(w, b, x, scales)?;
    let scale: f64 = w.data().iter().map(|v| v.abs()).sum::<f64>()
        * x.iter().chain(scales).map(|v| v.abs()).fold(1.0, f64::max).powi(2)
        + b.iter().map(|v| v.abs()).fold(0.0, f64::max);
    Ok(gap <= 1e-12 * scale.max(1.0))
}

/// Monte-Carlo predictive distribution: class probabilities averaged over
/// `n_samples` forward passes with freshly drawn scales (and injected noise,
/// if the network has any).
pub fn mc_predict<R: Rng + ?Sized>(net: &Network, x: &Tensor, n_samples: usize, rng: &mut R) -> Result<Tensor> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng.random());
    let mut acc: Option<Tensor> = None;
    for _ in 0..n_samples {
        let tape = Tape::new();
        let p = net.bind_frozen(&tape);
        let logp = net
            .forward(&p, tape.constant(x), ForwardOptions::SAMPLED, &mut rng)?
            .logp
            .to_tensor();
        let probs = logp.map(f64::exp);
        acc = Some(match acc {
            None => probs,
            Some(mut a) => {
                a.data_mut().iter_mut().zip(probs.data()).for_each(|(s, p)| *s += p);
                a
            }
        });
    }
    Ok(acc.expect("n_samples > 0").scaled(1.0 / n_samples as f64))
}

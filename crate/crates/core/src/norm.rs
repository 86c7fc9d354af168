//! Normalization layers written in the common form
//! `(wᵀx − μ̂(w)) / σ̂(w) · s + b`.
//!
//! * batch: `μ̂, σ̂` are the batch mean and standard deviation over the batch
//!   and spatial axes in training mode, running averages in evaluation mode;
//! * weight: `μ̂ = 0`, `σ̂ = ‖w‖` per output channel;
//! * analytic: `μ̂, σ̂` come from propagating dataset moments through the
//!   preceding layers (see [`conv_moments`] and [`leaky_relu_moments`]).
//!
//! All three choices satisfy `μ̂(γw) = γ μ̂(w)` and `σ̂(γw) = |γ| σ̂(w)`, so
//! the layer output does not depend on the scale of `w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result, TensorError};
use crate::stats::{normal_cdf, normal_pdf};
use crate::tape::Var;
use crate::tensor::Tensor;

/// Guard added (squared) under the square root of variances.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Weight of the newest batch in the running averages.
pub const DEFAULT_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    None,
    Batch,
    Weight,
    Analytic,
}

impl NormKind {
    /// Whether the layer output is invariant to rescaling `w`.
    pub fn is_scale_invariant(self) -> bool {
        !matches!(self, NormKind::None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-channel mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl NormStats {
    pub fn new(mu: Vec<f64>, sigma: Vec<f64>) -> Result<Self> {
        if mu.len() != sigma.len() {
            return Err(TensorError::ShapeMismatch {
                op: "NormStats",
                lhs: vec![mu.len()],
                rhs: vec![sigma.len()],
            }
            .into());
        }
        Ok(NormStats { mu, sigma })
    }

    pub fn channels(&self) -> usize {
        self.mu.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.sigma.iter().map(|s| s * s).collect()
    }

    /// Denominator actually used for normalization, `√(σ² + eps²)`.
    pub fn guarded_sigma(&self, eps: f64) -> Vec<f64> {
        self.sigma.iter().map(|s| (s * s + eps * eps).sqrt()).collect()
    }
}

/// Per-input-channel mean and variance of a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl DatasetMoments {
    /// Moments over batch and spatial axes of a `[k, c, h, w]` data tensor.
    pub fn from_data(x: &Tensor) -> Result<Self> {
        let stats = batch_stats(x)?;
        Ok(DatasetMoments {
            var: stats.variance(),
            mean: stats.mu,
        })
    }
}

/// Sample mean and (1/n) standard deviation per channel over the batch and
/// spatial axes of a `[k, c, h, w]` (or `[k, c]`) tensor.
pub fn batch_stats(x: &Tensor) -> Result<NormStats> {
    let shape = x.shape();
    if shape.len() < 2 {
        return Err(TensorError::InvalidArgument(format!("batch_stats on shape {shape:?}")).into());
    }
    let (k, c) = (shape[0], shape[1]);
    let z: usize = shape[2..].iter().product();
    let n = k * z;
    if n < 2 {
        return Err(Error::DegenerateStatistics(format!(
            "need at least two values per channel, got {n}"
        )));
    }
    let data = x.data();
    let mut mu = vec![0.0; c];
    for i in 0..k {
        for (ch, m) in mu.iter_mut().enumerate() {
            let base = (i * c + ch) * z;
            *m += data[base..base + z].iter().sum::<f64>();
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; c];
    for i in 0..k {
        for ch in 0..c {
            let base = (i * c + ch) * z;
            var[ch] += data[base..base + z]
                .iter()
                .map(|v| (v - mu[ch]) * (v - mu[ch]))
                .sum::<f64>();
        }
    }
    let sigma = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    Ok(NormStats { mu, sigma })
}

/// Differentiable per-channel batch mean and variance over axes `0, 2, 3, ..`.
pub fn batch_moments<'t>(x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let rank = x.shape().len();
    let dims: Vec<usize> = std::iter::once(0).chain(2..rank).collect();
    Ok((x.reduce_mean(&dims)?, x.reduce_var(&dims)?))
}

/// Exponential moving average of mean and variance. `momentum` weighs the
/// new batch.
pub fn update_running(running: &NormStats, batch: &NormStats, momentum: f64) -> Result<NormStats> {
    if !(momentum > 0.0 && momentum <= 1.0) {
        return Err(Error::InvalidArgument(format!("momentum {momentum} not in (0, 1]")));
    }
    if running.channels() != batch.channels() {
        return Err(TensorError::ShapeMismatch {
            op: "update_running",
            lhs: vec![running.channels()],
            rhs: vec![batch.channels()],
        }
        .into());
    }
    let mix = |r: f64, b: f64| (1.0 - momentum) * r + momentum * b;
    let mu = running.mu.iter().zip(&batch.mu).map(|(&r, &b)| mix(r, b)).collect();
    let sigma = running
        .sigma
        .iter()
        .zip(&batch.sigma)
        .map(|(&r, &b)| mix(r * r, b * b).sqrt())
        .collect();
    Ok(NormStats { mu, sigma })
}

/// `(0, ‖w_o‖)` per output channel of a `[o, ...]` weight.
pub fn weight_norm_stats(w: &Tensor) -> Result<NormStats> {
    let (o, per) = w.rows();
    let mut sigma = Vec::with_capacity(o);
    for ch in 0..o {
        let n = w.data()[ch * per..(ch + 1) * per]
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if n == 0.0 {
            return Err(Error::ZeroWeight { layer: 0, channel: ch });
        }
        sigma.push(n);
    }
    Ok(NormStats {
        mu: vec![0.0; o],
        sigma,
    })
}

/// Differentiable per-output-channel norms of a `[o, c, kh, kw]` weight.
pub fn weight_row_norms<'t>(w: Var<'t>) -> Result<Var<'t>> {
    let rank = w.shape().len();
    let dims: Vec<usize> = (1..rank).collect();
    Ok(w.square().reduce_sum(&dims)?.sqrt())
}

/// `(x − μ̂)/σ̂ · s + b` with per-channel `μ̂, σ̂, s, b`.
pub fn normalized_forward<'t>(x: Var<'t>, mu: Var<'t>, sigma: Var<'t>, s: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    if sigma.value().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::NonPositiveSigma(0));
    }
    Ok(x.channel_sub(mu)?.channel_div(sigma)?.channel_mul(s)?.channel_add(b)?)
}

/// Output of a batch-normalization layer, plus the raw batch statistics in
/// training mode.
pub struct BnOutput<'t> {
    pub output: Var<'t>,
    pub batch: Option<NormStats>,
}

/// Batch normalization: batch statistics (differentiated through) in
/// training mode, running statistics in evaluation mode.
pub fn bn_forward<'t>(
    x: Var<'t>,
    mode: Mode,
    running: Option<&NormStats>,
    s: Var<'t>,
    b: Var<'t>,
    eps: f64,
) -> Result<BnOutput<'t>> {
    let z = bn_standardize(x, mode, running, eps, 0)?;
    Ok(BnOutput {
        output: z.output.channel_mul(s)?.channel_add(b)?,
        batch: z.batch,
    })
}

/// The pre-affine part of [`bn_forward`].
pub(crate) fn bn_standardize<'t>(
    x: Var<'t>,
    mode: Mode,
    running: Option<&NormStats>,
    eps: f64,
    layer: usize,
) -> Result<BnOutput<'t>> {
    let tape = x.tape();
    match mode {
        Mode::Train => {
            let (m, v) = batch_moments(x)?;
            let n: usize = {
                let s = x.shape();
                s[0] * s[2..].iter().product::<usize>()
            };
            if n < 2 {
                return Err(Error::DegenerateStatistics(format!(
                    "layer {layer}: {n} value(s) per channel"
                )));
            }
            let batch = NormStats {
                mu: m.value().to_vec(),
                sigma: v.value().iter().map(|v| v.sqrt()).collect(),
            };
            let d = v.add_scalar(eps * eps).sqrt();
            Ok(BnOutput {
                output: x.channel_sub(m)?.channel_div(d)?,
                batch: Some(batch),
            })
        }
        Mode::Eval => {
            let r = running.ok_or(Error::MissingRunningStats(layer))?;
            let m = tape.constant(&Tensor::from_vec(r.mu.clone()));
            let d = tape.constant(&Tensor::from_vec(r.guarded_sigma(eps)));
            Ok(BnOutput {
                output: x.channel_sub(m)?.channel_div(d)?,
                batch: None,
            })
        }
    }
}

/// Mean and variance propagated through a bias-free convolution under
/// independence of all inputs: `Σ w m` and `Σ w² v`.
pub fn conv_moments<'t>(w: Var<'t>, mean: Var<'t>, var: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
    let shape = w.shape();
    let [o, c, _, _] = shape[..] else {
        return Err(TensorError::InvalidArgument(format!("conv weight shape {shape:?}")).into());
    };
    let w_sum = w.reduce_sum(&[2, 3])?;
    let w2_sum = w.square().reduce_sum(&[2, 3])?;
    let m = w_sum.matmul(mean.reshape(&[c, 1])?)?.reshape(&[o])?;
    let v = w2_sum.matmul(var.reshape(&[c, 1])?)?.reshape(&[o])?;
    Ok((m, v))
}

/// Mean and variance of `leaky_relu(X)` for `X ~ N(mean, var)`.
///
/// With `α = m/σ`, the rectified part has `E[relu X] = mΦ(α) + σφ(α)` and
/// `E[relu(X)²] = (m² + v)Φ(α) + mσφ(α)`; the leaky unit is
/// `slope·x + (1 − slope)·relu(x)`.
pub fn leaky_relu_moments(mean: f64, var: f64, slope: f64) -> (f64, f64) {
    let p = relu_parts(mean, var);
    let m1 = slope * mean + (1.0 - slope) * p.m1;
    let m2 = (1.0 - slope * slope) * p.m2 + slope * slope * (mean * mean + var);
    (m1, (m2 - m1 * m1).max(0.0))
}

struct ReluParts {
    m1: f64,
    m2: f64,
    cdf: f64,
    pdf_over_sd: f64,
}

fn relu_parts(mean: f64, var: f64) -> ReluParts {
    let sd = var.max(0.0).sqrt();
    if sd < 1e-150 {
        let r = mean.max(0.0);
        let cdf = if mean >= 0.0 { 1.0 } else { 0.0 };
        return ReluParts {
            m1: r,
            m2: r * r,
            cdf,
            pdf_over_sd: 0.0,
        };
    }
    let a = mean / sd;
    let cdf = normal_cdf(a);
    let pdf = normal_pdf(a);
    ReluParts {
        m1: mean * cdf + sd * pdf,
        m2: (mean * mean + var) * cdf + mean * sd * pdf,
        cdf,
        pdf_over_sd: pdf / sd,
    }
}

/// Partial derivatives of [`leaky_relu_moments`]:
/// `((∂m'/∂m, ∂m'/∂v), (∂v'/∂m, ∂v'/∂v))`.
pub fn leaky_relu_moments_grad(mean: f64, var: f64, slope: f64) -> ((f64, f64), (f64, f64)) {
    let p = relu_parts(mean, var);
    // d E[relu]/dm = Φ, d E[relu]/dv = φ/(2σ)
    // d E[relu²]/dm = 2 E[relu], d E[relu²]/dv = Φ
    let a = 1.0 - slope;
    let dm1_dm = slope + a * p.cdf;
    let dm1_dv = a * 0.5 * p.pdf_over_sd;
    let a2 = 1.0 - slope * slope;
    let s2 = slope * slope;
    let dm2_dm = a2 * 2.0 * p.m1 + s2 * 2.0 * mean;
    let dm2_dv = a2 * p.cdf + s2;
    let m1 = slope * mean + a * p.m1;
    (
        (dm1_dm, dm1_dv),
        (dm2_dm - 2.0 * m1 * dm1_dm, dm2_dv - 2.0 * m1 * dm1_dv),
    )
}

/// Differentiable version of [`leaky_relu_moments`] on per-channel vectors.
pub fn leaky_relu_moments_var<'t>(mean: Var<'t>, var: Var<'t>, slope: f64) -> Result<(Var<'t>, Var<'t>)> {
    let m = mean.zip_map(
        var,
        move |m, v| leaky_relu_moments(m, v, slope).0,
        move |m, v| leaky_relu_moments_grad(m, v, slope).0,
    )?;
    let v = mean.zip_map(
        var,
        move |m, v| leaky_relu_moments(m, v, slope).1,
        move |m, v| leaky_relu_moments_grad(m, v, slope).1,
    )?;
    Ok((m, v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Tape;

    #[test]
    fn constant_input_has_zero_spread() {
        let x = Tensor::full(&[4, 2, 3, 3], 1.5);
        let st = batch_stats(&x).unwrap();
        assert_eq!(st.mu, vec![1.5, 1.5]);
        assert_eq!(st.sigma, vec![0.0, 0.0]);
    }

    #[test]
    fn two_samples_population_variance() {
        let x = Tensor::new(vec![2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let st = batch_stats(&x).unwrap();
        assert_eq!(st.mu, vec![1.0]);
        assert_eq!(st.variance(), vec![1.0]);
    }

    #[test]
    fn singleton_batch_without_spatial_extent_is_degenerate() {
        let x = Tensor::zeros(&[1, 3, 1, 1]);
        assert!(matches!(batch_stats(&x), Err(Error::DegenerateStatistics(_))));
    }

    #[test]
    fn running_update_examples() {
        let r = NormStats::new(vec![0.0], vec![0.0]).unwrap();
        let b = NormStats::new(vec![1.0], vec![1.0]).unwrap();
        let u = update_running(&r, &b, 0.1).unwrap();
        assert!((u.mu[0] - 0.1).abs() < 1e-15);
        let copy = update_running(&r, &b, 1.0).unwrap();
        assert_eq!(copy, b);
        let mut cur = r.clone();
        for _ in 0..500 {
            cur = update_running(&cur, &b, 0.1).unwrap();
        }
        assert!((cur.mu[0] - 1.0).abs() < 1e-12 && (cur.sigma[0] - 1.0).abs() < 1e-12);
        assert!(update_running(&r, &b, 0.0).is_err());
    }

    #[test]
    fn weight_norm_of_unit_vector() {
        let w = Tensor::new(vec![1, 3, 1, 1], vec![1.0, 0.0, 0.0]).unwrap();
        let st = weight_norm_stats(&w).unwrap();
        assert_eq!((st.mu[0], st.sigma[0]), (0.0, 1.0));
        let w3 = w.scaled(-3.0);
        assert_eq!(weight_norm_stats(&w3).unwrap().sigma[0], 3.0);
        assert!(weight_norm_stats(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn eval_mode_without_running_stats_fails() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 1, 2, 2]));
        let s = tape.constant(&Tensor::ones(&[1]));
        let b = tape.constant(&Tensor::zeros(&[1]));
        assert!(matches!(
            bn_forward(x, Mode::Eval, None, s, b, DEFAULT_EPS),
            Err(Error::MissingRunningStats(_))
        ));
    }

    #[test]
    fn normalized_forward_rejects_non_positive_sigma() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[2, 1]));
        let one = tape.constant(&Tensor::ones(&[1]));
        let zero = tape.constant(&Tensor::zeros(&[1]));
        assert!(normalized_forward(x, zero, zero, one, zero).is_err());
    }

    #[test]
    fn relu_moments_at_zero_mean_unit_variance() {
        // E[relu] = 1/√(2π), E[relu²] = 1/2
        let (m, v) = leaky_relu_moments(0.0, 1.0, 0.0);
        let e1 = 1.0 / (2.0 * std::f64::consts::PI).sqrt();
        assert!((m - e1).abs() < 1e-15);
        assert!((v - (0.5 - e1 * e1)).abs() < 1e-15);
        // slope 1 is the identity
        let (m, v) = leaky_relu_moments(0.3, 2.0, 1.0);
        assert!((m - 0.3).abs() < 1e-14 && (v - 2.0).abs() < 1e-14);
    }
}

//! Convolutional networks built from normalized blocks.
//!
//! A block is `conv → normalization → [noise] → affine → [leaky ReLU] →
//! [avg pool]`; the network ends with global average pooling and a
//! log-softmax over the channels of the last block.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{noisy_normalize, NoiseConfig};
use crate::norm::{
    batch_stats, bn_standardize, conv_moments, leaky_relu_moments_var, weight_row_norms, DatasetMoments, Mode,
    NormKind, NormStats, DEFAULT_EPS, DEFAULT_MOMENTUM,
};
use crate::ops::{Conv2dGeometry, DEFAULT_LEAKY_SLOPE};
use crate::optim::{init_weights, project_rows, ParamSlot};
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;
use crate::variational::{
    bayes_norm_forward, kl_scale_var, sample_scale, sigma_from_u, u_from_sigma, Granularity, PriorConfig, INITIAL_SIGMA,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub ksize: usize,
    pub stride: usize,
    pub pad: usize,
    /// Leaky ReLU after the affine transform; `None` for a linear output.
    pub leaky_slope: Option<f64>,
    /// Non-overlapping average pooling after the activation.
    #[serde(default)]
    pub pool: Option<usize>,
}

impl ConvSpec {
    /// `ksize × ksize` convolution with "same" padding and a leaky ReLU.
    pub fn hidden(out_channels: usize, ksize: usize, stride: usize) -> Self {
        ConvSpec {
            out_channels,
            ksize,
            stride,
            pad: ksize / 2,
            leaky_slope: Some(DEFAULT_LEAKY_SLOPE),
            pool: None,
        }
    }

    /// Linear `1 × 1` classifier layer.
    pub fn head(classes: usize) -> Self {
        ConvSpec {
            out_channels: classes,
            ksize: 1,
            stride: 1,
            pad: 0,
            leaky_slope: None,
            pool: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub layers: Vec<ConvSpec>,
}

impl Architecture {
    /// The nine-layer all-convolutional pattern (kernel sizes
    /// `3,3,3,3,3,3,3,1,1`, strides `1,1,2,1,1,2,1,1,1`, depths
    /// `96,96,96,192,192,192,192,192,classes`) with hidden widths divided by
    /// `width_divisor`.
    pub fn all_cnn(in_channels: usize, height: usize, width: usize, classes: usize, width_divisor: usize) -> Self {
        let ksize = [3, 3, 3, 3, 3, 3, 3, 1];
        let stride = [1, 1, 2, 1, 1, 2, 1, 1];
        let depth = [96, 96, 96, 192, 192, 192, 192, 192];
        let div = width_divisor.max(1);
        let mut layers: Vec<ConvSpec> = (0..8)
            .map(|i| ConvSpec::hidden((depth[i] / div).max(1), ksize[i], stride[i]))
            .collect();
        layers.push(ConvSpec::head(classes));
        Architecture {
            in_channels,
            height,
            width,
            layers,
        }
    }

    pub fn classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// `[c, h, w]` after each block.
    pub fn output_shapes(&self) -> Result<Vec<[usize; 3]>> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("architecture has no layers".into()));
        }
        let (mut c, mut h, mut w) = (self.in_channels, self.height, self.width);
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            let g = Conv2dGeometry::new(&[1, c, h, w], &[l.out_channels, c, l.ksize, l.ksize], l.stride, l.pad)
                .map_err(|e| Error::InvalidArgument(format!("layer {i}: {e}")))?;
            c = l.out_channels;
            h = g.out_height();
            w = g.out_width();
            if let Some(p) = l.pool {
                if p == 0 || p > h || p > w {
                    return Err(Error::InvalidArgument(format!("layer {i}: pool {p} on {h}x{w}")));
                }
                h /= p;
                w /= p;
            }
            out.push([c, h, w]);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes() < 2 {
            return Err(Error::InvalidArgument("need at least two classes".into()));
        }
        self.output_shapes().map(|_| ())
    }
}

/// Randomness injected after normalization during training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    None,
    /// `(z + V)·U` before the affine transform.
    Injected(NoiseConfig),
    /// Learned Gaussian posterior over the scales, `(z + b)·S`.
    Variational { granularity: Granularity },
}

impl NoiseMode {
    pub fn is_variational(&self) -> bool {
        matches!(self, NoiseMode::Variational { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// `[o, c, k, k]` convolution weight.
    pub w: Tensor,
    /// Scale (posterior mean of the scale for variational blocks).
    pub s: Tensor,
    pub b: Tensor,
    /// Pre-sigma of the variational scale posterior.
    pub u: Option<Tensor>,
    pub running: Option<NormStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub arch: Architecture,
    pub norm: NormKind,
    pub noise: NoiseMode,
    pub prior: PriorConfig,
    pub eps: f64,
    pub momentum: f64,
    pub blocks: Vec<Block>,
    pub moments: Option<DatasetMoments>,
}

/// Network parameters recorded on a tape.
pub struct Bound<'t> {
    pub w: Vec<Var<'t>>,
    pub s: Vec<Var<'t>>,
    pub b: Vec<Var<'t>>,
    pub u: Vec<Option<Var<'t>>>,
}

impl<'t> Bound<'t> {
    /// All parameters, in the order of [`Network::params_mut`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut out = Vec::new();
        for i in 0..self.w.len() {
            out.extend([self.w[i], self.s[i], self.b[i]]);
            out.extend(self.u[i]);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Inject noise / sample variational scales.
    pub stochastic: bool,
}

impl ForwardOptions {
    pub const TRAIN: ForwardOptions = ForwardOptions {
        mode: Mode::Train,
        stochastic: true,
    };
    pub const EVAL: ForwardOptions = ForwardOptions {
        mode: Mode::Eval,
        stochastic: false,
    };
    /// Evaluation-mode normalization with sampled scales and noise.
    pub const SAMPLED: ForwardOptions = ForwardOptions {
        mode: Mode::Eval,
        stochastic: true,
    };
}

pub struct Trace<'t> {
    /// `[k, classes]` log-probabilities.
    pub logp: Var<'t>,
    /// Convolution outputs before normalization.
    pub pre_norm: Vec<Var<'t>>,
    /// Block outputs after the affine transform, before the activation.
    pub outputs: Vec<Var<'t>>,
    /// Raw batch statistics of batch-normalized blocks in training mode.
    pub batch_stats: Vec<Option<NormStats>>,
}

impl Network {
    pub fn new<R: Rng + ?Sized>(arch: Architecture, norm: NormKind, noise: NoiseMode, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        if let NoiseMode::Injected(cfg) = &noise {
            cfg.validate()?;
        }
        let mut blocks = Vec::with_capacity(arch.layers.len());
        let mut c = arch.in_channels;
        for l in &arch.layers {
            let fan_in = c * l.ksize * l.ksize;
            let w = init_weights(&[l.out_channels, c, l.ksize, l.ksize], fan_in, rng)?;
            let u = match &noise {
                NoiseMode::Variational { granularity } => {
                    let n = match granularity {
                        Granularity::PerChannel => l.out_channels,
                        Granularity::PerLayer => 1,
                    };
                    Some(Tensor::full(&[n], u_from_sigma(INITIAL_SIGMA)))
                }
                _ => None,
            };
            blocks.push(Block {
                w,
                s: Tensor::ones(&[l.out_channels]),
                b: Tensor::zeros(&[l.out_channels]),
                u,
                running: None,
            });
            c = l.out_channels;
        }
        Ok(Network {
            arch,
            norm,
            noise,
            prior: PriorConfig::default(),
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
            blocks,
            moments: None,
        })
    }

    pub fn with_moments(mut self, moments: DatasetMoments) -> Self {
        self.moments = Some(moments);
        self
    }

    pub fn classes(&self) -> usize {
        self.arch.classes()
    }

    /// Renormalizes every scale-invariant weight to unit norm per channel.
    pub fn project_weights(&mut self) {
        if self.norm.is_scale_invariant() {
            for b in &mut self.blocks {
                project_rows(&mut b.w);
            }
        }
    }

    /// Records the parameters as differentiable leaves.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, true)
    }

    /// Records the parameters as constants.
    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind_with(tape, false)
    }

    fn bind_with<'t>(&self, tape: &'t Tape, grad: bool) -> Bound<'t> {
        let put = |t: &Tensor| if grad { tape.leaf(t) } else { tape.constant(t) };
        Bound {
            w: self.blocks.iter().map(|b| put(&b.w)).collect(),
            s: self.blocks.iter().map(|b| put(&b.s)).collect(),
            b: self.blocks.iter().map(|b| put(&b.b)).collect(),
            u: self.blocks.iter().map(|b| b.u.as_ref().map(put)).collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<ParamSlot<'_>> {
        let projected = self.norm.is_scale_invariant();
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push(ParamSlot {
                name: format!("blocks.{i}.w"),
                value: &mut b.w,
                projected,
            });
            out.push(ParamSlot {
                name: format!("blocks.{i}.s"),
                value: &mut b.s,
                projected: false,
            });
            out.push(ParamSlot {
                name: format!("blocks.{i}.b"),
                value: &mut b.b,
                projected: false,
            });
            if let Some(u) = b.u.as_mut() {
                out.push(ParamSlot {
                    name: format!("blocks.{i}.u"),
                    value: u,
                    projected: false,
                });
            }
        }
        out
    }

    /// Gradients aligned with [`Network::params_mut`].
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &Gradients) -> Vec<Tensor> {
        bound.vars().into_iter().map(|v| grads.wrt(v)).collect()
    }

    /// Analytic per-layer `(μ̂, σ̂²)` as tape values, differentiable in all
    /// parameters.
    pub fn analytic_moments<'t>(&self, p: &Bound<'t>) -> Result<Vec<(Var<'t>, Var<'t>)>> {
        let moments = self
            .moments
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("analytic normalization needs dataset moments".into()))?;
        if moments.mean.len() != self.arch.in_channels || moments.var.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument("dataset moments do not match the input".into()));
        }
        let tape = p.w[0].tape();
        let mut m = tape.constant(&Tensor::from_vec(moments.mean.clone()));
        let mut v = tape.constant(&Tensor::from_vec(moments.var.clone()));
        let eps2 = self.eps * self.eps;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, spec) in self.arch.layers.iter().enumerate() {
            let (mu, var) = conv_moments(p.w[i], m, v)?;
            out.push((mu, var));
            let zvar = var.div(var.add_scalar(eps2))?;
            let s2 = p.s[i].square();
            (m, v) = if self.noise.is_variational() {
                (p.b[i].mul(p.s[i])?, s2.mul(zvar)?)
            } else {
                (p.b[i], s2.mul(zvar)?)
            };
            if let Some(slope) = spec.leaky_slope {
                (m, v) = leaky_relu_moments_var(m, v, slope)?;
            }
            if let Some(k) = spec.pool {
                v = v.scale(1.0 / (k * k) as f64);
            }
        }
        Ok(out)
    }

    /// Analytic normalization statistics `(μ̂(w), σ̂(w))` of every layer.
    pub fn analytic_norm_stats(&self) -> Result<Vec<NormStats>> {
        let tape = Tape::new();
        let p = self.bind_frozen(&tape);
        self.analytic_moments(&p)?
            .into_iter()
            .map(|(m, v)| NormStats::new(m.value().to_vec(), v.value().iter().map(|x| x.sqrt()).collect()))
            .collect()
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        opts: ForwardOptions,
        rng: &mut dyn RngCore,
    ) -> Result<Trace<'t>> {
        let tape = x.tape();
        let analytic = match self.norm {
            NormKind::Analytic => Some(self.analytic_moments(p)?),
            _ => None,
        };
        let eps2 = self.eps * self.eps;
        let mut h = x;
        let mut trace = Trace {
            logp: x,
            pre_norm: Vec::with_capacity(self.blocks.len()),
            outputs: Vec::with_capacity(self.blocks.len()),
            batch_stats: Vec::with_capacity(self.blocks.len()),
        };
        for (i, spec) in self.arch.layers.iter().enumerate() {
            let xc = h.conv2d(p.w[i], spec.stride, spec.pad)?;
            trace.pre_norm.push(xc);
            let mut batch = None;
            let z = match self.norm {
                NormKind::None => xc,
                NormKind::Batch => {
                    let out = bn_standardize(xc, opts.mode, self.blocks[i].running.as_ref(), self.eps, i)?;
                    batch = out.batch;
                    out.output
                }
                NormKind::Weight => {
                    let norms = weight_row_norms(p.w[i])?;
                    if let Some(ch) = norms.value().iter().position(|&n| !(n > 0.0)) {
                        return Err(Error::ZeroWeight { layer: i, channel: ch });
                    }
                    xc.channel_div(norms)?
                }
                NormKind::Analytic => {
                    let (mu, var) = analytic.as_ref().expect("analytic moments")[i];
                    xc.channel_sub(mu)?.channel_div(var.add_scalar(eps2).sqrt())?
                }
            };
            trace.batch_stats.push(batch);
            let z = match (&self.noise, opts.stochastic) {
                (NoiseMode::Injected(cfg), true) => {
                    let (v, u) = cfg.draw(i, &z.shape(), rng)?;
                    noisy_normalize(z, &v, &u)?
                }
                _ => z,
            };
            let y = match &self.noise {
                NoiseMode::Variational { .. } => {
                    let u =
                        p.u[i].ok_or_else(|| Error::InvalidArgument(format!("block {i} has no scale posterior")))?;
                    let degenerate = u.value().iter().all(|&v| sigma_from_u(v) == 0.0);
                    let scale = if opts.stochastic && !degenerate {
                        sample_scale(p.s[i], u, z.shape()[0], rng)?
                    } else {
                        p.s[i]
                    };
                    bayes_norm_forward(z, p.b[i], scale)?
                }
                _ => z.channel_mul(p.s[i])?.channel_add(p.b[i])?,
            };
            trace.outputs.push(y);
            h = match spec.leaky_slope {
                Some(slope) => y.leaky_relu(slope),
                None => y,
            };
            if let Some(k) = spec.pool {
                h = h.avg_pool2d(k)?;
            }
        }
        let _ = tape;
        trace.logp = h.reduce_mean(&[2, 3])?.log_softmax()?;
        Ok(trace)
    }

    /// Sum of the per-channel scale KL terms (without additive constants).
    pub fn kl<'t>(&self, p: &Bound<'t>) -> Result<Option<Var<'t>>> {
        if !self.noise.is_variational() {
            return Ok(None);
        }
        let mut total: Option<Var<'t>> = None;
        for i in 0..self.blocks.len() {
            let u = p.u[i].ok_or_else(|| Error::InvalidArgument(format!("block {i} has no scale posterior")))?;
            let kl = kl_scale_var(p.s[i], u, &self.prior)?;
            total = Some(match total {
                Some(t) => t.add(kl)?,
                None => kl,
            });
        }
        Ok(total)
    }

    /// Folds training-mode batch statistics into the running averages.
    pub fn update_running(&mut self, batch_stats: &[Option<NormStats>]) -> Result<()> {
        for (block, stats) in self.blocks.iter_mut().zip(batch_stats) {
            let Some(stats) = stats else { continue };
            block.running = Some(match &block.running {
                Some(r) => crate::norm::update_running(r, stats, self.momentum)?,
                None => stats.clone(),
            });
        }
        Ok(())
    }

    /// Deterministic log-probabilities (running statistics, mean scales, no
    /// noise).
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.bind_frozen(&tape);
        let mut rng = idle_rng();
        let t = self.forward(&p, tape.constant(x), ForwardOptions::EVAL, &mut rng)?;
        Ok(t.logp.to_tensor())
    }

    /// Standardizes every block's outputs on `batch`, one block at a time,
    /// by folding the observed per-channel mean and deviation into `s` and
    /// `b`. Afterwards the network computes on `batch` what a training-mode
    /// batch-normalized network with `s = 1, b = 0` would. Returns the scale
    /// multipliers applied, layer by layer.
    pub fn data_dependent_init(&mut self, batch: &Tensor) -> Result<Vec<Vec<f64>>> {
        if self.norm == NormKind::Batch {
            return Err(Error::InvalidArgument(
                "batch-normalized networks are initialized by their own statistics".into(),
            ));
        }
        let mut multipliers = Vec::with_capacity(self.blocks.len());
        let mut rng = idle_rng();
        for i in 0..self.blocks.len() {
            let y = {
                let tape = Tape::new();
                let p = self.bind_frozen(&tape);
                let t = self.forward(&p, tape.constant(batch), ForwardOptions::EVAL, &mut rng)?;
                t.outputs[i].to_tensor()
            };
            let st = batch_stats(&y)?;
            let sd = st.guarded_sigma(self.eps);
            if let Some(ch) = st.sigma.iter().position(|s| !(*s > 1e-12)) {
                return Err(Error::DegenerateStatistics(format!(
                    "layer {i}, channel {ch}: zero spread on the initialization batch"
                )));
            }
            let variational = self.noise.is_variational();
            let block = &mut self.blocks[i];
            let (s, b) = (block.s.data_mut(), block.b.data_mut());
            for ch in 0..sd.len() {
                if variational {
                    // (z + b)·s  →  (z + b − M/s)·s/σ
                    b[ch] -= st.mu[ch] / s[ch];
                } else {
                    // z·s + b  →  (z·s + b − M)/σ
                    b[ch] = (b[ch] - st.mu[ch]) / sd[ch];
                }
                s[ch] /= sd[ch];
            }
            multipliers.push(sd.iter().map(|d| 1.0 / d).collect());
        }
        Ok(multipliers)
    }
}

/// Source of randomness for passes that never draw from it.
pub(crate) fn idle_rng() -> rand_chacha::ChaCha8Rng {
    rand::SeedableRng::seed_from_u64(0)
}

/// Draws `k` distinct row indices out of `n`.
pub fn random_batch<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> Vec<usize> {
    sample_indices(rng, n, k.min(n)).into_vec()
}

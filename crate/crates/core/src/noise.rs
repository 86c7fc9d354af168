//! Stochastic model of batch-normalization noise.
//!
//! For i.i.d. Gaussian activations with population statistics `(μ, σ)` and a
//! normalization batch of `n = k·z` values (batch size times spatial size),
//! the training-mode output decomposes as
//!
//! ```text
//! (x − M)/S = ((x − μ)/σ + V) · U,   V = (μ − M)/σ ~ N(0, 1/n),
//!                                     U = σ/S ~ √n · χ⁻¹_{n−1}
//! ```
//!
//! with `V` and `U` independent of each other and of the network parameters.
//! This module samples `(V, U)`, injects them after an exact normalization
//! and measures the empirical counterparts in a batch-normalized network.

use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{random_batch, ForwardOptions, Network};
use crate::norm::{Mode, NormKind, NormStats};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Standard deviation of the multiplicative noise measured layer by layer in
/// a trained nine-layer batch-normalized convolutional network.
pub const MEASURED_SIGMA_U: [f64; 9] = [0.05, 0.03, 0.026, 0.023, 0.02, 0.026, 0.041, 0.045, 0.071];

/// Above this many degrees of freedom χ² draws use a gamma sampler instead of
/// summing squared normals.
const CHI2_DIRECT_MAX_DOF: usize = 64;

/// One draw of the additive (`v`) and multiplicative (`u`) noise generated by
/// a normalization batch of `n` values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSample {
    pub v: f64,
    pub u: f64,
    pub n: usize,
}

pub fn sample_chi_squared<R: Rng + ?Sized>(dof: usize, rng: &mut R) -> f64 {
    if dof <= CHI2_DIRECT_MAX_DOF {
        (0..dof)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * z
            })
            .sum()
    } else {
        // Marsaglia–Tsang
        Gamma::new(dof as f64 / 2.0, 2.0)
            .expect("valid gamma parameters")
            .sample(rng)
    }
}

/// `V = ξ/√n`, `U = √n / √χ²_{n−1}`.
pub fn sample_bn_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<NoiseSample> {
    if n < 2 {
        return Err(Error::InvalidArgument(format!("noise model needs n ≥ 2, got {n}")));
    }
    let sqrt_n = (n as f64).sqrt();
    let xi: f64 = StandardNormal.sample(rng);
    let chi2 = sample_chi_squared(n - 1, rng);
    Ok(NoiseSample {
        v: xi / sqrt_n,
        u: sqrt_n / chi2.sqrt(),
        n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// `V`, `U` from the exact batch model with `n = k·z` of the current layer.
    ExactChi,
    /// `V ~ N(0, σ_V²)`, `U ~ N(1, σ_U²)`. `U` is not truncated and may be
    /// non-positive for large `σ_U`.
    Gaussian,
}

/// Noise injected after a deterministic normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Per-layer standard deviations; the last entry is reused for deeper
    /// layers. Ignored by [`NoiseKind::ExactChi`].
    #[serde(default)]
    pub sigma_v: Vec<f64>,
    #[serde(default)]
    pub sigma_u: Vec<f64>,
    /// One draw per sample and channel, shared by all spatial positions.
    #[serde(default = "default_true")]
    pub spatial_correlated: bool,
}

fn default_true() -> bool {
    true
}

impl NoiseConfig {
    pub fn exact_chi() -> Self {
        NoiseConfig {
            kind: NoiseKind::ExactChi,
            sigma_v: vec![],
            sigma_u: vec![],
            spatial_correlated: true,
        }
    }

    /// Gaussian noise with the measured `σ_U` profile. `σ_V` follows from the
    /// batch model, where `Var V = 1/n ≈ 2 Var U`.
    pub fn measured_bn_profile() -> Self {
        NoiseConfig {
            kind: NoiseKind::Gaussian,
            sigma_v: MEASURED_SIGMA_U.iter().map(|s| s * std::f64::consts::SQRT_2).collect(),
            sigma_u: MEASURED_SIGMA_U.to_vec(),
            spatial_correlated: true,
        }
    }

    pub fn gaussian(sigma_v: f64, sigma_u: f64) -> Self {
        NoiseConfig {
            kind: NoiseKind::Gaussian,
            sigma_v: vec![sigma_v],
            sigma_u: vec![sigma_u],
            spatial_correlated: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sigma_v.iter().chain(&self.sigma_u).any(|s| !(*s >= 0.0)) {
            return Err(Error::InvalidArgument("noise deviations must be ≥ 0".into()));
        }
        if self.kind == NoiseKind::Gaussian && (self.sigma_v.is_empty() || self.sigma_u.is_empty()) {
            return Err(Error::InvalidArgument(
                "gaussian noise needs sigma_v and sigma_u".into(),
            ));
        }
        Ok(())
    }

    fn pick(v: &[f64], layer: usize) -> f64 {
        v.get(layer).or(v.last()).copied().unwrap_or(0.0)
    }

    pub fn sigmas(&self, layer: usize) -> (f64, f64) {
        (Self::pick(&self.sigma_v, layer), Self::pick(&self.sigma_u, layer))
    }

    /// Draws `(V, U)` for a `[k, c, h, w]` activation of layer `layer`:
    /// shape `[k, c]` when spatially correlated, the full shape otherwise.
    pub fn draw<R: Rng + ?Sized>(&self, layer: usize, shape: &[usize], rng: &mut R) -> Result<(Tensor, Tensor)> {
        let (k, c) = (shape[0], shape[1]);
        let z: usize = shape[2..].iter().product();
        let draw_shape = if self.spatial_correlated {
            vec![k, c]
        } else {
            shape.to_vec()
        };
        let count: usize = draw_shape.iter().product();
        let (mut v, mut u) = (Vec::with_capacity(count), Vec::with_capacity(count));
        match self.kind {
            NoiseKind::ExactChi => {
                for _ in 0..count {
                    let s = sample_bn_noise(k * z, rng)?;
                    v.push(s.v);
                    u.push(s.u);
                }
            }
            NoiseKind::Gaussian => {
                let (sv, su) = self.sigmas(layer);
                let nv = Normal::new(0.0, sv).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                let nu = Normal::new(1.0, su).map_err(|e| Error::InvalidArgument(e.to_string()))?;
                for _ in 0..count {
                    v.push(nv.sample(rng));
                    u.push(nu.sample(rng));
                }
            }
        }
        Ok((Tensor::new(draw_shape.clone(), v)?, Tensor::new(draw_shape, u)?))
    }
}

/// `(x_norm + V) · U`. `V` and `U` either match `x_norm`'s shape or are
/// `[k, c]` draws shared across spatial positions.
pub fn noisy_normalize<'t>(x_norm: Var<'t>, v: &Tensor, u: &Tensor) -> Result<Var<'t>> {
    let tape = x_norm.tape();
    let (vv, uu) = (tape.constant(v), tape.constant(u));
    if v.shape() == x_norm.shape().as_slice() {
        Ok(x_norm.add(vv)?.mul(uu)?)
    } else {
        Ok(x_norm.channel_add(vv)?.channel_mul(uu)?)
    }
}

/// Measured noise of one batch-normalized layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerNoiseStats {
    pub layer_index: usize,
    /// Batch size.
    pub k: usize,
    /// Spatial size of the layer output.
    pub z: usize,
    /// Sample variance of `(μ − M)/σ`, averaged over channels.
    pub var_v: f64,
    /// Sample variance of `σ/S`, averaged over channels.
    pub var_u: f64,
    pub n_draws: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EmpiricalNoiseStats {
    pub layers: Vec<LayerNoiseStats>,
}

/// Minimum number of batch draws behind any reported variance.
pub const MIN_NOISE_DRAWS: usize = 100;

impl EmpiricalNoiseStats {
    pub const CSV_HEADER: &'static str = "layer_index,k,z,var_V,var_U,n_draws";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{:.10e},{:.10e},{}\n",
                l.layer_index, l.k, l.z, l.var_v, l.var_u, l.n_draws
            ));
        }
        out
    }

    /// Per-layer `(σ_V, σ_U)` as a Gaussian noise configuration.
    pub fn to_noise_config(&self) -> NoiseConfig {
        NoiseConfig {
            kind: NoiseKind::Gaussian,
            sigma_v: self.layers.iter().map(|l| l.var_v.sqrt()).collect(),
            sigma_u: self.layers.iter().map(|l| l.var_u.sqrt()).collect(),
            spatial_correlated: true,
        }
    }
}

/// Sample variance (1/(m−1)) of each column of row-major draws.
pub(crate) fn column_variances(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len() as f64;
    let c = rows.first().map_or(0, Vec::len);
    (0..c)
        .map(|j| {
            let mean = rows.iter().map(|r| r[j]).sum::<f64>() / m;
            rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (m - 1.0)
        })
        .collect()
}

/// Measures `V = (μ − M)/σ` and `U = σ/S` in every batch-normalized layer
/// of `net`. Population statistics `(μ, σ)` come from one training-mode pass
/// over all of `data`; `(M, S)` from `draws` random batches of `k` rows.
pub fn measure_bn_noise<R: Rng + ?Sized>(
    net: &Network,
    data: &Tensor,
    k: usize,
    draws: usize,
    rng: &mut R,
) -> Result<EmpiricalNoiseStats> {
    if net.norm != NormKind::Batch {
        return Err(Error::InvalidArgument(
            "noise is measured in batch-normalized networks".into(),
        ));
    }
    if draws < MIN_NOISE_DRAWS {
        return Err(Error::TooFewSamples {
            needed: MIN_NOISE_DRAWS,
            got: draws,
        });
    }
    let (rows, _) = data.rows();
    if k < 2 || k > rows {
        return Err(Error::InvalidArgument(format!("batch size {k} for {rows} rows")));
    }
    let opts = ForwardOptions {
        mode: Mode::Train,
        stochastic: false,
    };
    let mut idle = crate::network::idle_rng();
    let pass = |x: &Tensor, rng: &mut dyn rand::RngCore| -> Result<Vec<NormStats>> {
        let tape = Tape::new();
        let p = net.bind_frozen(&tape);
        let t = net.forward(&p, tape.constant(x), opts, rng)?;
        Ok(t.batch_stats.into_iter().flatten().collect())
    };
    let population = pass(data, &mut idle)?;
    let shapes = net.arch.output_shapes()?;
    let mut v_rows = vec![Vec::with_capacity(draws); population.len()];
    let mut u_rows = vec![Vec::with_capacity(draws); population.len()];
    for _ in 0..draws {
        let idx = random_batch(rows, k, rng);
        let batch = pass(&data.select_rows(&idx), &mut idle)?;
        for (l, (pop, b)) in population.iter().zip(&batch).enumerate() {
            let mut v = Vec::with_capacity(pop.channels());
            let mut u = Vec::with_capacity(pop.channels());
            for c in 0..pop.channels() {
                if !(pop.sigma[c] > 0.0 && b.sigma[c] > 0.0) {
                    return Err(Error::DegenerateStatistics(format!(
                        "layer {l}, channel {c}: zero spread"
                    )));
                }
                v.push((pop.mu[c] - b.mu[c]) / pop.sigma[c]);
                u.push(pop.sigma[c] / b.sigma[c]);
            }
            v_rows[l].push(v);
            u_rows[l].push(u);
        }
    }
    let mean = |xs: Vec<f64>| xs.iter().sum::<f64>() / xs.len() as f64;
    let layers = (0..population.len())
        .map(|l| {
            // Pre-pooling spatial size of the layer output.
            let spec = &net.arch.layers[l];
            let [_, h, w] = shapes[l];
            let z = match spec.pool {
                Some(p) => h * w * p * p,
                None => h * w,
            };
            LayerNoiseStats {
                layer_index: l,
                k,
                z,
                var_v: mean(column_variances(&v_rows[l])),
                var_u: mean(column_variances(&u_rows[l])),
                n_draws: draws,
            }
        })
        .collect();
    Ok(EmpiricalNoiseStats { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn small_n_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_bn_noise(1, &mut rng).is_err());
        assert!(sample_bn_noise(2, &mut rng).unwrap().u > 0.0);
    }

    #[test]
    fn large_n_concentrates() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ok = 0;
        for _ in 0..200 {
            let s = sample_bn_noise(1_000_000, &mut rng).unwrap();
            if s.v.abs() < 0.01 && (s.u - 1.0).abs() < 0.01 {
                ok += 1;
            }
        }
        assert!(ok >= 198);
    }

    #[test]
    fn zero_gaussian_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = NoiseConfig::gaussian(0.0, 0.0);
        let (v, u) = cfg.draw(0, &[3, 2, 2, 2], &mut rng).unwrap();
        let tape = crate::Tape::new();
        let x = tape.constant(&Tensor::randn(&[3, 2, 2, 2], &mut rng));
        let y = noisy_normalize(x, &v, &u).unwrap();
        assert_eq!(&y.value()[..], &x.value()[..]);
    }

    #[test]
    fn measured_profile_ships_as_default() {
        let cfg = NoiseConfig::measured_bn_profile();
        assert_eq!(cfg.sigma_u, MEASURED_SIGMA_U.to_vec());
        assert_eq!(cfg.sigmas(20).1, 0.071);
        cfg.validate().unwrap();
    }

    #[test]
    fn csv_has_fixed_header() {
        let s = EmpiricalNoiseStats {
            layers: vec![LayerNoiseStats {
                layer_index: 0,
                k: 32,
                z: 64,
                var_v: 0.5,
                var_u: 0.25,
                n_draws: 100,
            }],
        };
        let csv = s.to_csv();
        assert!(csv.starts_with("layer_index,k,z,var_V,var_U,n_draws\n0,32,64,"));
    }
}

//! Checks of the batch-statistics noise model on synthetic inputs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use stochnorm::noise::measure_bn_noise;
use stochnorm::norm::batch_stats;
use stochnorm::stats::{ks_test_chi2, variance_scaling_fit, KsResult};
use stochnorm::{Architecture, ConvSpec, Network, NoiseMode, NormKind, Tensor};

use crate::error::ExpResult;

/// `n·S²/σ²` from the batch statistics of `[k, 1, side, side]` Gaussian
/// batches with mean `mu` and deviation `sigma`, where `n = k·side²`.
pub fn scaled_batch_variances(
    k: usize,
    side: usize,
    samples: usize,
    mu: f64,
    sigma: f64,
    rng: &mut impl Rng,
) -> ExpResult<Vec<f64>> {
    let n = (k * side * side) as f64;
    (0..samples)
        .map(|_| {
            let x = Tensor::randn(&[k, 1, side, side], rng).map(|v| mu + sigma * v);
            Ok(n * batch_stats(&x)?.variance()[0] / (sigma * sigma))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Chi2Check {
    pub n: usize,
    pub samples: usize,
    pub statistic: f64,
    pub p_value: f64,
}

/// Kolmogorov–Smirnov test of real batch variances against `χ²ₙ₋₁`.
pub fn chi2_check(k: usize, side: usize, samples: usize, rng: &mut impl Rng) -> ExpResult<Chi2Check> {
    let xs = scaled_batch_variances(k, side, samples, -0.7, 1.9, rng)?;
    let n = k * side * side;
    let KsResult { statistic, p_value, .. } = ks_test_chi2(&xs, n)?;
    Ok(Chi2Check {
        n,
        samples,
        statistic,
        p_value,
    })
}

/// One 1×1 batch-normalized layer and a linear head on `side × side`
/// single-channel input.
pub fn bn_probe(side: usize, rng: &mut impl Rng) -> ExpResult<Network> {
    let arch = Architecture {
        in_channels: 1,
        height: side,
        width: side,
        layers: vec![
            ConvSpec {
                out_channels: 2,
                ksize: 1,
                stride: 1,
                pad: 0,
                leaky_slope: Some(0.01),
                pool: None,
            },
            ConvSpec::head(2),
        ],
    };
    Ok(Network::new(arch, NormKind::Batch, NoiseMode::None, rng)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Batch sizes `k` or spatial sizes `z`.
    pub sizes: Vec<f64>,
    /// Variance of the first layer's additive noise `V` at each size.
    pub var_v: Vec<f64>,
    pub slope: f64,
}

impl ScalingFit {
    pub fn to_csv(&self, size_name: &str) -> String {
        let mut out = format!("{size_name},var_V\n");
        for (s, v) in self.sizes.iter().zip(&self.var_v) {
            out.push_str(&format!("{s},{v}\n"));
        }
        out
    }
}

/// `Var V` against the batch size on i.i.d. Gaussian `4×4` images.
pub fn batch_size_scaling(ks: &[usize], draws: usize, rng: &mut ChaCha8Rng) -> ExpResult<ScalingFit> {
    let side = 4;
    let net = bn_probe(side, rng)?;
    let data = Tensor::randn(&[4096, 1, side, side], rng);
    let var_v = ks
        .iter()
        .map(|&k| Ok(measure_bn_noise(&net, &data, k, draws, rng)?.layers[0].var_v))
        .collect::<ExpResult<Vec<f64>>>()?;
    let sizes: Vec<f64> = ks.iter().map(|&k| k as f64).collect();
    let slope = variance_scaling_fit(&sizes, &var_v)?;
    Ok(ScalingFit { sizes, var_v, slope })
}

/// `Var V` against the spatial size at batch size `k`, with every image
/// carrying a random offset shared by all its pixels.
pub fn spatial_size_scaling(sides: &[usize], k: usize, draws: usize, rng: &mut ChaCha8Rng) -> ExpResult<ScalingFit> {
    let var_v = sides
        .iter()
        .map(|&side| {
            let mut data = Tensor::randn(&[1024, 1, side, side], rng);
            for img in data.data_mut().chunks_mut(side * side) {
                let offset: f64 = 0.5 * Tensor::randn(&[1], rng).item();
                img.iter_mut().for_each(|v| *v += offset);
            }
            let net = bn_probe(side, rng)?;
            Ok(measure_bn_noise(&net, &data, k, draws, rng)?.layers[0].var_v)
        })
        .collect::<ExpResult<Vec<f64>>>()?;
    let sizes: Vec<f64> = sides.iter().map(|&s| (s * s) as f64).collect();
    let slope = variance_scaling_fit(&sizes, &var_v)?;
    Ok(ScalingFit { sizes, var_v, slope })
}

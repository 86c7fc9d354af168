//! Synthetic image classification data.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use stochnorm::Tensor;

use crate::config::{DatasetConfig, DatasetKind};
use crate::error::{ExpError, ExpResult};
use crate::rng::{stream, Stream};

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// `[n, c, h, w]`.
    pub x: Tensor,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn rows(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.x.select_rows(idx), idx.iter().map(|&i| self.y[i]).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Split,
    pub val: Split,
    pub classes: usize,
}

impl SyntheticDataset {
    /// Deterministic in `(cfg, seed)`.
    pub fn generate(cfg: &DatasetConfig, val_samples: usize, seed: u64) -> ExpResult<Self> {
        if val_samples >= cfg.samples {
            return Err(ExpError::Config("validation split leaves no training data".into()));
        }
        let mut rng = stream(seed, Stream::Data);
        let (c, s) = (cfg.channels, cfg.image_size);
        let pix = c * s * s;
        let protos: Vec<Vec<f64>> = (0..cfg.classes * cfg.clusters_per_class)
            .map(|_| prototype(c, s, cfg.separation, &mut rng))
            .collect();
        let mut data = Vec::with_capacity(cfg.samples * pix);
        let mut labels = Vec::with_capacity(cfg.samples);
        for i in 0..cfg.samples {
            let class = i % cfg.classes;
            let proto = &protos[class * cfg.clusters_per_class + rng.random_range(0..cfg.clusters_per_class)];
            let noise = match cfg.kind {
                DatasetKind::GaussianClusters => white(pix, &mut rng),
                DatasetKind::CorrelatedSpatial => correlated(c, s, &mut rng),
            };
            let amp: f64 = rng.random_range(0.7..1.3);
            data.extend(proto.iter().zip(&noise).map(|(p, n)| amp * p + n));
            let label = if rng.random::<f64>() < cfg.label_noise {
                let other = rng.random_range(0..cfg.classes - 1);
                if other >= class {
                    other + 1
                } else {
                    other
                }
            } else {
                class
            };
            labels.push(label);
        }
        let mut order: Vec<usize> = (0..cfg.samples).collect();
        order.shuffle(&mut rng);
        let all = Tensor::new(vec![cfg.samples, c, s, s], data)?;
        let pick = |idx: &[usize]| Split {
            x: all.select_rows(idx),
            y: idx.iter().map(|&i| labels[i]).collect(),
        };
        Ok(SyntheticDataset {
            val: pick(&order[..val_samples]),
            train: pick(&order[val_samples..]),
            classes: cfg.classes,
        })
    }
}

/// A few Gaussian blobs of random sign, normalized to RMS `amplitude`.
fn prototype(c: usize, s: usize, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut img = vec![0.0; c * s * s];
    for ch in 0..c {
        for _ in 0..4 {
            let (cy, cx) = (rng.random_range(0.0..s as f64), rng.random_range(0.0..s as f64));
            let width = rng.random_range(0.8..2.0) * s as f64 / 8.0;
            let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
            for y in 0..s {
                for x in 0..s {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    img[(ch * s + y) * s + x] += sign * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    let rms = (img.iter().map(|v| v * v).sum::<f64>() / img.len() as f64).sqrt();
    img.iter().map(|v| v * amplitude / rms.max(1e-12)).collect()
}

fn white(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    Tensor::randn(&[n], rng).into_data()
}

/// Unit-variance noise: a per-image offset plus a 3×3 box blur of white
/// noise.
fn correlated(c: usize, s: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let offset = white(1, rng)[0] * 0.5;
    let base = white(c * s * s, rng);
    let mut out = vec![0.0; c * s * s];
    for ch in 0..c {
        for y in 0..s {
            for x in 0..s {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (yy, xx) = (y as i64 + dy, x as i64 + dx);
                        if (0..s as i64).contains(&yy) && (0..s as i64).contains(&xx) {
                            acc += base[(ch * s + yy as usize) * s + xx as usize];
                        }
                    }
                }
                // Interior sums of 9 unit-variance values have variance 9.
                out[(ch * s + y) * s + x] = offset + acc / 3.0 * (0.75f64).sqrt();
            }
        }
    }
    out
}

/// Random shifts of up to ±2 pixels (zero fill) and horizontal flips.
pub fn augment(x: &Tensor, rng: &mut impl Rng) -> Tensor {
    let shape = x.shape().to_vec();
    let (k, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for n in 0..k {
        let (dy, dx) = (rng.random_range(-2i64..=2), rng.random_range(-2i64..=2));
        let flip = rng.random::<bool>();
        for ch in 0..c {
            let plane = (n * c + ch) * h * w;
            for y in 0..h {
                let sy = y as i64 - dy;
                if !(0..h as i64).contains(&sy) {
                    continue;
                }
                for xo in 0..w {
                    let xs = if flip { w - 1 - xo } else { xo };
                    let sx = xs as i64 - dx;
                    if (0..w as i64).contains(&sx) {
                        out[plane + y * w + xo] = src[plane + sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    Tensor::new(shape, out).expect("same shape")
}

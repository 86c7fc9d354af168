//! SGD with Nesterov momentum, Adam, the `lr·γᵏ` schedule, learning-rate
//! search and projection of scale-invariant weights onto the unit sphere.
//!
//! There is no weight decay. For a normalized layer the objective depends on
//! `w` only through `w/σ̂(w)`, so adding `λ‖w‖` gives a problem with no
//! minimizer: shrinking `w` always decreases the penalty while the loss stays
//! put, and the layer is undefined at `w = 0`. Instead, scale-invariant
//! weights are renormalized to `‖w‖ = 1` per output channel after each step.
//! Without that projection, plain gradient steps are orthogonal to `w`
//! (`∇_w f = g⊥/‖w‖`) and the norm grows monotonically.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    SgdNesterov,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr0: f64,
    pub momentum: f64,
    /// Per-epoch decay factor of the learning rate.
    pub gamma: f64,
    /// Renormalize scale-invariant weights after every step.
    pub project: bool,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::SgdNesterov,
            lr0: 0.01,
            momentum: 0.9,
            gamma: gamma_for_tenth_after(600.0),
            project: true,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

/// `γ` such that `γ^epochs = 0.1`.
pub fn gamma_for_tenth_after(epochs: f64) -> f64 {
    0.1f64.powf(1.0 / epochs)
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidArgument(format!("lr0 must be > 0, got {}", self.lr0)));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidArgument(format!("gamma {} not in (0, 1]", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum {} not in [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }

    /// `lr0 · γ^epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.gamma.powi(epoch as i32)
    }
}

/// A mutable view of one parameter handed to [`Optimizer::step`].
pub struct ParamSlot<'a> {
    pub name: String,
    pub value: &'a mut Tensor,
    /// Constrained to unit norm per output channel.
    pub projected: bool,
}

/// Divides every leading-axis row of `w` by its Euclidean norm. Zero rows
/// are left untouched.
pub fn project_rows(w: &mut Tensor) {
    let (rows, per) = w.rows();
    let data = w.data_mut();
    for r in 0..rows {
        let row = &mut data[r * per..(r + 1) * per];
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    /// Momentum (SGD) or first-moment (Adam) buffers.
    first: Vec<Vec<f64>>,
    /// Adam second-moment buffers.
    second: Vec<Vec<f64>>,
    steps: usize,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Self> {
        config.validate()?;
        Ok(Optimizer {
            config,
            first: vec![],
            second: vec![],
            steps: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// One update with learning rate `lr0·γ^epoch`, followed by projection
    /// of the constrained parameters.
    pub fn step(&mut self, params: &mut [ParamSlot<'_>], grads: &[Tensor], epoch: usize) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.value.shape() != g.shape() {
                return Err(Error::InvalidArgument(format!(
                    "gradient shape {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    p.name,
                    p.value.shape()
                )));
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient {
                    name: p.name.clone(),
                    step: self.steps,
                });
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        let lr = self.config.lr_at(epoch);
        self.steps += 1;
        match self.config.kind {
            OptimizerKind::SgdNesterov => {
                let mu = self.config.momentum;
                for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((x, &gi), v) in p.value.data_mut().iter_mut().zip(g.data()).zip(buf.iter_mut()) {
                        *v = mu * *v + gi;
                        *x -= lr * (gi + mu * *v);
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (self.config.adam_beta1, self.config.adam_beta2, self.config.adam_eps);
                let t = self.steps as i32;
                let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
                for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (i, (x, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = b1 * m[i] + (1.0 - b1) * gi;
                        v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                        *x -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                    }
                }
            }
        }
        if self.config.project {
            for p in params.iter_mut().filter(|p| p.projected) {
                project_rows(p.value);
            }
        }
        Ok(())
    }
}

/// `n` log-spaced values from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}

/// Outcome of a learning-rate search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSearch {
    pub best: f64,
    /// `(lr, loss)` for every candidate, in grid order.
    pub trials: Vec<(f64, f64)>,
}

/// Returns the grid value minimizing `train_fn(lr)`, the training loss after
/// a short run. Non-finite losses count as divergence.
pub fn lr_search(mut train_fn: impl FnMut(f64) -> f64, grid: &[f64]) -> Result<LrSearch> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty learning-rate grid".into()));
    }
    let trials: Vec<(f64, f64)> = grid.iter().map(|&lr| (lr, train_fn(lr))).collect();
    let best = trials
        .iter()
        .filter(|(_, l)| l.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|t| t.0)
        .ok_or(Error::AllCandidatesDiverged)?;
    Ok(LrSearch { best, trials })
}

/// Uniform draws in `[−1/√c, 1/√c]` where `c` is the number of inputs per
/// output.
pub fn init_weights<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("fan-in must be positive".into()));
    }
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Ok(Tensor::new(shape.to_vec(), data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sgd(lr: f64, momentum: f64, project: bool) -> Optimizer {
        Optimizer::new(OptimizerConfig {
            lr0: lr,
            momentum,
            gamma: 1.0,
            project,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn quadratic_bowl_without_momentum_contracts() {
        let mut opt = sgd(0.1, 0.0, false);
        let mut x = Tensor::from_vec(vec![1.0, -2.0]);
        for step in 1..=5 {
            let g = x.clone();
            let mut slots = [ParamSlot {
                name: "x".into(),
                value: &mut x,
                projected: false,
            }];
            opt.step(&mut slots, &[g], 0).unwrap();
            let expect = 0.9f64.powi(step);
            assert!((x.data()[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn schedule_reaches_a_tenth() {
        let cfg = OptimizerConfig {
            lr0: 0.5,
            gamma: gamma_for_tenth_after(600.0),
            ..Default::default()
        };
        assert!((cfg.lr_at(600) - 0.05).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_halts() {
        let mut opt = sgd(0.1, 0.9, false);
        let mut x = Tensor::from_vec(vec![1.0]);
        let mut slots = [ParamSlot {
            name: "blocks.0.w".into(),
            value: &mut x,
            projected: false,
        }];
        let err = opt.step(&mut slots, &[Tensor::from_vec(vec![f64::NAN])], 0);
        assert!(matches!(err, Err(Error::NonFiniteGradient { .. })));
    }

    #[test]
    fn config_validation() {
        let bad = OptimizerConfig {
            lr0: 0.0,
            ..Default::default()
        };
        assert!(Optimizer::new(bad).is_err());
        let bad = OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn lr_search_edge_cases() {
        assert_eq!(lr_search(|lr| lr, &[0.3]).unwrap().best, 0.3);
        assert!(matches!(
            lr_search(|_| f64::NAN, &[0.1, 0.2]),
            Err(Error::AllCandidatesDiverged)
        ));
    }

    #[test]
    fn init_range_and_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let wa = init_weights(&[8, 4], 4, &mut a).unwrap();
        let wb = init_weights(&[8, 4], 4, &mut b).unwrap();
        assert_eq!(wa, wb);
        assert!(wa.data().iter().all(|x| x.abs() <= 0.5));
        assert!(init_weights(&[1], 0, &mut a).is_err());
    }
}

use crate::error::TensorError;
use crate::tape::Var;

/// Slope of the negative branch used throughout the networks.
pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;

impl<'t> Var<'t> {
    /// `x` for `x ≥ 0`, `slope·x` otherwise. The derivative at 0 is 1.
    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.map(
            move |x| if x >= 0.0 { x } else { slope * x },
            move |x, _| if x >= 0.0 { 1.0 } else { slope },
        )
    }

    /// Row-wise log-softmax of a `[k, c]` tensor, stabilised by subtracting
    /// the row maximum.
    pub fn log_softmax(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let [k, c] = shape[..] else {
            return Err(TensorError::InvalidArgument(format!(
                "log_softmax expects [k, c], got {shape:?}"
            )));
        };
        if c < 2 {
            return Err(TensorError::InvalidArgument("log_softmax needs c ≥ 2".into()));
        }
        let x = self.value();
        let mut out = vec![0.0; k * c];
        for r in 0..k {
            let row = &x[r * c..(r + 1) * c];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for j in 0..c {
                out[r * c + j] = row[j] - lse;
            }
        }
        Ok(self.tape.record(
            shape,
            out,
            vec![self.id],
            Some(Box::new(move |g, _, y| {
                let mut gx = vec![0.0; k * c];
                for r in 0..k {
                    let gs: f64 = g[r * c..(r + 1) * c].iter().sum();
                    for j in 0..c {
                        let i = r * c + j;
                        gx[i] = g[i] - y[i].exp() * gs;
                    }
                }
                vec![Some(gx)]
            })),
            false,
        ))
    }

    /// Mean negative log-likelihood of `labels` under row log-probabilities.
    pub fn nll_loss(self, labels: &[usize]) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let [k, c] = shape[..] else {
            return Err(TensorError::InvalidArgument(format!(
                "nll_loss expects [k, c], got {shape:?}"
            )));
        };
        if labels.len() != k {
            return Err(TensorError::ShapeMismatch {
                op: "nll_loss",
                lhs: shape,
                rhs: vec![labels.len()],
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::LabelOutOfRange { label, classes: c });
        }
        if k == 0 {
            return Err(TensorError::Empty("nll_loss"));
        }
        let lp = self.value();
        let loss = -labels.iter().enumerate().map(|(r, &l)| lp[r * c + l]).sum::<f64>() / k as f64;
        let labels = labels.to_vec();
        Ok(self.tape.record(
            vec![],
            vec![loss],
            vec![self.id],
            Some(Box::new(move |g, _, _| {
                let mut gx = vec![0.0; k * c];
                for (r, &l) in labels.iter().enumerate() {
                    gx[r * c + l] = -g[0] / k as f64;
                }
                vec![Some(gx)]
            })),
            false,
        ))
    }
}

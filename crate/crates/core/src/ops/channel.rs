//! Per-channel broadcasting.
//!
//! `x` has shape `[k, c, ...]`; the broadcast operand `t` has shape `[c]`
//! (shared across the batch) or `[k, c]` (one value per sample and channel,
//! shared across spatial positions). This is the only broadcasting the
//! engine supports.

use crate::error::TensorError;
use crate::tape::Var;

#[derive(Clone, Copy)]
struct Layout {
    c: usize,
    inner: usize,
    per_sample: bool,
}

impl Layout {
    /// Broadcast slot of the `j`-th contiguous block of `inner` elements.
    #[inline]
    fn slot(&self, j: usize) -> usize {
        if self.per_sample {
            j
        } else {
            j % self.c
        }
    }
}

fn layout(x: &[usize], t: &[usize]) -> Result<Layout, TensorError> {
    let mismatch = || TensorError::ShapeMismatch {
        op: "channel broadcast",
        lhs: x.to_vec(),
        rhs: t.to_vec(),
    };
    if x.len() < 2 {
        return Err(mismatch());
    }
    let (k, c) = (x[0], x[1]);
    let inner = x[2..].iter().product();
    let per_sample = match t {
        [tc] if *tc == c => false,
        [tk, tc] if *tk == k && *tc == c => true,
        _ => return Err(mismatch()),
    };
    Ok(Layout { c, inner, per_sample })
}

#[derive(Clone, Copy)]
enum Kind {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'t> Var<'t> {
    /// `x + t` with `t` broadcast per channel.
    pub fn channel_add(self, t: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.channel_op(t, Kind::Add)
    }

    pub fn channel_sub(self, t: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.channel_op(t, Kind::Sub)
    }

    pub fn channel_mul(self, t: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.channel_op(t, Kind::Mul)
    }

    pub fn channel_div(self, t: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.channel_op(t, Kind::Div)
    }

    fn channel_op(self, t: Var<'t>, kind: Kind) -> Result<Var<'t>, TensorError> {
        self.same_tape(&t);
        let lay = layout(&self.shape(), &t.shape())?;
        let (xv, tv) = (self.value(), t.value());
        let inner = lay.inner.max(1);
        let mut value = Vec::with_capacity(xv.len());
        for (j, block) in xv.chunks(inner).enumerate() {
            let b = tv[lay.slot(j)];
            match kind {
                Kind::Add => value.extend(block.iter().map(|x| x + b)),
                Kind::Sub => value.extend(block.iter().map(|x| x - b)),
                Kind::Mul => value.extend(block.iter().map(|x| x * b)),
                Kind::Div => value.extend(block.iter().map(|x| x / b)),
            }
        }
        let t_len = tv.len();
        Ok(self.tape.record(
            self.shape(),
            value,
            vec![self.id, t.id],
            Some(Box::new(move |g, p, out| {
                let (x, tv) = (p[0], p[1]);
                let mut gt = vec![0.0; t_len];
                let mut gx = Vec::with_capacity(g.len());
                for (j, gb) in g.chunks(inner).enumerate() {
                    let slot = lay.slot(j);
                    let range = j * inner..(j + 1) * inner;
                    match kind {
                        Kind::Add => {
                            gt[slot] += gb.iter().sum::<f64>();
                            gx.extend_from_slice(gb);
                        }
                        Kind::Sub => {
                            gt[slot] -= gb.iter().sum::<f64>();
                            gx.extend_from_slice(gb);
                        }
                        Kind::Mul => {
                            let b = tv[slot];
                            gt[slot] += gb.iter().zip(&x[range]).map(|(a, b)| a * b).sum::<f64>();
                            gx.extend(gb.iter().map(|gi| gi * b));
                        }
                        Kind::Div => {
                            let b = tv[slot];
                            gt[slot] -= gb.iter().zip(&out[range]).map(|(a, o)| a * o).sum::<f64>() / b;
                            gx.extend(gb.iter().map(|gi| gi / b));
                        }
                    }
                }
                vec![Some(gx), Some(gt)]
            })),
            false,
        ))
    }
}

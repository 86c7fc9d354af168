//! Reductions over a subset of axes. Reduced axes are removed from the
//! output shape. Variance uses the population (1/n) convention.

use std::rc::Rc;

use crate::error::TensorError;
use crate::tape::Var;

struct Plan {
    out_shape: Vec<usize>,
    out_len: usize,
    /// Output slot of every input element.
    target: Rc<[usize]>,
    count: usize,
}

fn plan(shape: &[usize], dims: &[usize]) -> Result<Plan, TensorError> {
    if dims.is_empty() {
        return Err(TensorError::EmptyReduction);
    }
    let mut reduced = vec![false; shape.len()];
    for &d in dims {
        if d >= shape.len() || reduced[d] {
            return Err(TensorError::InvalidArgument(format!(
                "bad reduction axis {d} for shape {shape:?}"
            )));
        }
        reduced[d] = true;
    }
    let count: usize = dims.iter().map(|&d| shape[d]).product();
    if count == 0 {
        return Err(TensorError::EmptyReduction);
    }
    let out_shape: Vec<usize> = shape
        .iter()
        .zip(&reduced)
        .filter(|(_, r)| !**r)
        .map(|(s, _)| *s)
        .collect();
    let out_len = out_shape.iter().product();
    let total: usize = shape.iter().product();
    // Strides of each input axis in the output layout (0 for reduced axes).
    let mut out_strides = vec![0usize; shape.len()];
    let mut acc = 1;
    for ax in (0..shape.len()).rev() {
        if !reduced[ax] {
            out_strides[ax] = acc;
            acc *= shape[ax];
        }
    }
    let mut target = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut cur = 0usize;
    for _ in 0..total {
        target.push(cur);
        for ax in (0..shape.len()).rev() {
            idx[ax] += 1;
            cur += out_strides[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            cur -= out_strides[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    Ok(Plan {
        out_shape,
        out_len,
        target: target.into(),
        count,
    })
}

impl<'t> Var<'t> {
    pub fn reduce_sum(self, dims: &[usize]) -> Result<Var<'t>, TensorError> {
        self.reduce_scaled(dims, false)
    }

    pub fn reduce_mean(self, dims: &[usize]) -> Result<Var<'t>, TensorError> {
        self.reduce_scaled(dims, true)
    }

    fn reduce_scaled(self, dims: &[usize], mean: bool) -> Result<Var<'t>, TensorError> {
        let p = plan(&self.shape(), dims)?;
        let k = if mean { 1.0 / p.count as f64 } else { 1.0 };
        let mut out = vec![0.0; p.out_len];
        for (x, &t) in self.value().iter().zip(p.target.iter()) {
            out[t] += x;
        }
        out.iter_mut().for_each(|v| *v *= k);
        let target = p.target;
        Ok(self.tape.record(
            p.out_shape,
            out,
            vec![self.id],
            Some(Box::new(move |g, _, _| {
                vec![Some(target.iter().map(|&t| g[t] * k).collect())]
            })),
            false,
        ))
    }

    /// Population variance `1/n Σ (x − mean)²` over `dims`.
    pub fn reduce_var(self, dims: &[usize]) -> Result<Var<'t>, TensorError> {
        let p = plan(&self.shape(), dims)?;
        let n = p.count as f64;
        let x = self.value();
        let mut mean = vec![0.0; p.out_len];
        for (v, &t) in x.iter().zip(p.target.iter()) {
            mean[t] += v;
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; p.out_len];
        for (v, &t) in x.iter().zip(p.target.iter()) {
            let d = v - mean[t];
            var[t] += d * d;
        }
        var.iter_mut().for_each(|s| *s /= n);
        let target = p.target;
        Ok(self.tape.record(
            p.out_shape,
            var,
            vec![self.id],
            Some(Box::new(move |g, _, _| {
                vec![Some(
                    x.iter()
                        .zip(target.iter())
                        .map(|(v, &t)| g[t] * 2.0 * (v - mean[t]) / n)
                        .collect(),
                )]
            })),
            false,
        ))
    }
}

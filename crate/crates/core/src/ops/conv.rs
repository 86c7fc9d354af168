use crate::error::TensorError;
use crate::ops::linalg::{gemm, Layout};
use crate::tape::Var;

/// Geometry of a 2-d cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dGeometry {
    pub fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Result<Self, TensorError> {
        let bad = || TensorError::ShapeMismatch {
            op: "conv2d",
            lhs: x.to_vec(),
            rhs: w.to_vec(),
        };
        let ([k, c, h, wd], [o, c2, kh, kw]) = (x, w) else {
            return Err(bad());
        };
        if c != c2 || *kh > h + 2 * pad || *kw > wd + 2 * pad || *kh == 0 || *kw == 0 {
            return Err(bad());
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument("conv2d stride must be ≥ 1".into()));
        }
        Ok(Conv2dGeometry {
            batch: *k,
            in_channels: *c,
            height: *h,
            width: *wd,
            out_channels: *o,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
        })
    }

    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_channels, self.out_height(), self.out_width()]
    }
}

/// Output indices `o` with `0 ≤ o·stride + tap − pad < size`, clipped to `out`.
#[inline]
fn valid(tap: usize, pad: usize, stride: usize, size: usize, out: usize) -> (usize, usize) {
    let lo = if tap >= pad { 0 } else { (pad - tap).div_ceil(stride) };
    let hi = if size + pad < tap + 1 {
        0
    } else {
        ((size - 1 + pad - tap) / stride + 1).min(out)
    };
    (lo, hi.max(lo))
}

/// Unfolds `[k, c, h, w]` input into a `[c·kh·kw, k·oh·ow]` patch matrix.
fn im2col(g: &Conv2dGeometry, x: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let np = g.batch * oh * ow;
    let mut cols = vec![0.0; g.in_channels * g.kh * g.kw * np];
    for c in 0..g.in_channels {
        for ky in 0..g.kh {
            let (ylo, yhi) = valid(ky, g.pad, g.stride, g.height, oh);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid(kx, g.pad, g.stride, g.width, ow);
                let row = ((c * g.kh + ky) * g.kw + kx) * np;
                for n in 0..g.batch {
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src = ((n * g.in_channels + c) * g.height + iy) * g.width;
                        let dst = row + (n * oh + oy) * ow;
                        for ox in xlo..xhi {
                            cols[dst + ox] = x[src + ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
fn col2im(g: &Conv2dGeometry, cols: &[f64]) -> Vec<f64> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let np = g.batch * oh * ow;
    let mut x = vec![0.0; g.batch * g.in_channels * g.height * g.width];
    for c in 0..g.in_channels {
        for ky in 0..g.kh {
            let (ylo, yhi) = valid(ky, g.pad, g.stride, g.height, oh);
            for kx in 0..g.kw {
                let (xlo, xhi) = valid(kx, g.pad, g.stride, g.width, ow);
                let row = ((c * g.kh + ky) * g.kw + kx) * np;
                for n in 0..g.batch {
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst = ((n * g.in_channels + c) * g.height + iy) * g.width;
                        let src = row + (n * oh + oy) * ow;
                        for ox in xlo..xhi {
                            x[dst + ox * g.stride + kx - g.pad] += cols[src + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[k, o, p]` ↔ `[o, k·p]` where `p = oh·ow`.
fn swap_batch_channel(data: &[f64], a: usize, b: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for i in 0..a {
        for j in 0..b {
            out[(j * a + i) * p..(j * a + i + 1) * p].copy_from_slice(&data[(i * b + j) * p..(i * b + j + 1) * p]);
        }
    }
    out
}

impl<'t> Var<'t> {
    /// Cross-correlation of `[k, c, h, w]` input with `[o, c, kh, kw]`
    /// weights, zero padding `pad` on every side.
    pub fn conv2d(self, weight: Var<'t>, stride: usize, pad: usize) -> Result<Var<'t>, TensorError> {
        self.same_tape(&weight);
        let geo = Conv2dGeometry::new(&self.shape(), &weight.shape(), stride, pad)?;
        let (x, w) = (self.value(), weight.value());
        let (oh, ow) = (geo.out_height(), geo.out_width());
        let (cin, kh, kw, cout) = (geo.in_channels, geo.kh, geo.kw, geo.out_channels);
        let kdim = cin * kh * kw;
        let np = geo.batch * oh * ow;
        let cols = im2col(&geo, &x);
        let mut out_t = vec![0.0; cout * np];
        gemm(
            cout,
            kdim,
            np,
            &w,
            Layout::row_major(kdim),
            &cols,
            Layout::row_major(np),
            &mut out_t,
            false,
        );
        let out = swap_batch_channel(&out_t, cout, geo.batch, oh * ow);
        Ok(self.tape.record(
            geo.out_shape(),
            out,
            vec![self.id, weight.id],
            Some(Box::new(move |g, parents, _| {
                let (x, w) = (parents[0], parents[1]);
                let g_t = swap_batch_channel(g, geo.batch, cout, oh * ow);
                let cols = im2col(&geo, x);
                // dW = Gᵀ·colsᵀ, dcols = Wᵀ·Gᵀ
                let mut gw = vec![0.0; w.len()];
                gemm(
                    cout,
                    np,
                    kdim,
                    &g_t,
                    Layout::row_major(np),
                    &cols,
                    Layout::transposed(np),
                    &mut gw,
                    false,
                );
                let mut gcols = vec![0.0; kdim * np];
                gemm(
                    kdim,
                    cout,
                    np,
                    w,
                    Layout::transposed(kdim),
                    &g_t,
                    Layout::row_major(np),
                    &mut gcols,
                    false,
                );
                let gx = col2im(&geo, &gcols);
                vec![Some(gx), Some(gw)]
            })),
            false,
        ))
    }

    /// Non-overlapping average pooling with window and stride `ksize`.
    pub fn avg_pool2d(self, ksize: usize) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let [k, c, h, w] = shape[..] else {
            return Err(TensorError::InvalidArgument(format!(
                "avg_pool2d expects rank 4, got {shape:?}"
            )));
        };
        if ksize == 0 || ksize > h || ksize > w {
            return Err(TensorError::InvalidArgument(format!(
                "pool size {ksize} for spatial {h}x{w}"
            )));
        }
        let (oh, ow) = (h / ksize, w / ksize);
        let norm = 1.0 / (ksize * ksize) as f64;
        let x = self.value();
        let mut out = vec![0.0; k * c * oh * ow];
        for plane in 0..k * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for dy in 0..ksize {
                        for dx in 0..ksize {
                            s += x[(plane * h + oy * ksize + dy) * w + ox * ksize + dx];
                        }
                    }
                    out[(plane * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        let total = x.len();
        Ok(self.tape.record(
            vec![k, c, oh, ow],
            out,
            vec![self.id],
            Some(Box::new(move |g, _, _| {
                let mut gx = vec![0.0; total];
                for plane in 0..k * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(plane * oh + oy) * ow + ox] * norm;
                            for dy in 0..ksize {
                                for dx in 0..ksize {
                                    gx[(plane * h + oy * ksize + dy) * w + ox * ksize + dx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            })),
            false,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{Tape, Tensor};

    #[test]
    fn stride_two_with_padding_halves_spatial_size() {
        let g = Conv2dGeometry::new(&[1, 1, 4, 4], &[1, 1, 3, 3], 2, 1).unwrap();
        assert_eq!((g.out_height(), g.out_width()), (2, 2));
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        assert!(Conv2dGeometry::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0).is_err());
        assert!(Conv2dGeometry::new(&[1, 2, 4, 4], &[1, 1, 3, 3], 1, 0).is_err());
    }

    #[test]
    fn padding_counts_zeros() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::ones(&[1, 1, 3, 3]));
        let w = tape.constant(&Tensor::ones(&[1, 1, 3, 3]));
        let y = x.conv2d(w, 1, 1).unwrap();
        assert_eq!(&y.value()[..], &[4., 6., 4., 6., 9., 6., 4., 6., 4.]);
    }

    #[test]
    fn avg_pool_averages_blocks() {
        let tape = Tape::new();
        let data: Vec<f64> = (0..16).map(f64::from).collect();
        let x = tape.constant(&Tensor::new(vec![1, 1, 4, 4], data).unwrap());
        let y = x.avg_pool2d(2).unwrap();
        assert_eq!(&y.value()[..], &[2.5, 4.5, 10.5, 12.5]);
    }
}

use crate::error::TensorError;
use crate::tape::Var;

/// Row and column strides of a row-major `[rows, cols]` matrix, optionally
/// read transposed.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    rs: isize,
    cs: isize,
}

impl Layout {
    pub(crate) fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub(crate) fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c (+)= a · b` with `a: [m, k]`, `b: [k, n]`, `c: [m, n]` row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold at least the extents addressed through the
    // given strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'t> Var<'t> {
    /// `[m, k] · [k, n] -> [m, n]`.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "matmul",
                    lhs: sa,
                    rhs: sb,
                })
            }
        };
        let mut value = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.value(),
            Layout::row_major(k),
            &other.value(),
            Layout::row_major(n),
            &mut value,
            false,
        );
        Ok(self.tape.record(
            vec![m, n],
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g, p, _| {
                let (a, b) = (p[0], p[1]);
                // dA = G Bᵀ, dB = Aᵀ G
                let mut ga = vec![0.0; m * k];
                gemm(
                    m,
                    n,
                    k,
                    g,
                    Layout::row_major(n),
                    b,
                    Layout::transposed(n),
                    &mut ga,
                    false,
                );
                let mut gb = vec![0.0; k * n];
                gemm(
                    k,
                    m,
                    n,
                    a,
                    Layout::transposed(k),
                    g,
                    Layout::row_major(n),
                    &mut gb,
                    false,
                );
                vec![Some(ga), Some(gb)]
            })),
            false,
        ))
    }
}

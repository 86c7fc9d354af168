use crate::error::TensorError;
use crate::tape::Var;

fn check_same(op: &'static str, a: &Var<'_>, b: &Var<'_>) -> Result<Vec<usize>, TensorError> {
    a.same_tape(b);
    let (sa, sb) = (a.shape(), b.shape());
    if sa != sb {
        return Err(TensorError::ShapeMismatch { op, lhs: sa, rhs: sb });
    }
    Ok(sa)
}

impl<'t> Var<'t> {
    /// Elementwise function with an explicit derivative `df(x, y)` where
    /// `y = f(x)`.
    pub fn map<F, D>(self, f: F, df: D) -> Var<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let value: Vec<f64> = self.value().iter().map(|&x| f(x)).collect();
        self.tape.record(
            self.shape(),
            value,
            vec![self.id],
            Some(Box::new(move |g, p, out| {
                vec![Some(
                    g.iter().zip(p[0]).zip(out).map(|((g, &x), &y)| g * df(x, y)).collect(),
                )]
            })),
            false,
        )
    }

    /// Elementwise binary function with explicit partial derivatives
    /// `grad(a, b) -> (df/da, df/db)`.
    pub fn zip_map<F, D>(self, other: Var<'t>, f: F, grad: D) -> Result<Var<'t>, TensorError>
    where
        F: Fn(f64, f64) -> f64,
        D: Fn(f64, f64) -> (f64, f64) + 'static,
    {
        let shape = check_same("zip_map", &self, &other)?;
        let (va, vb) = (self.value(), other.value());
        let value = va.iter().zip(vb.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(self.tape.record(
            shape,
            value,
            vec![self.id, other.id],
            Some(Box::new(move |g, p, _| {
                let mut ga = Vec::with_capacity(g.len());
                let mut gb = Vec::with_capacity(g.len());
                for i in 0..g.len() {
                    let (da, db) = grad(p[0][i], p[1][i]);
                    ga.push(g[i] * da);
                    gb.push(g[i] * db);
                }
                vec![Some(ga), Some(gb)]
            })),
            false,
        ))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = check_same("add", &self, &other)?;
        let value = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(self.tape.record(
            shape,
            value,
            vec![self.id, other.id],
            Some(Box::new(|g, _, _| vec![Some(g.to_vec()), Some(g.to_vec())])),
            false,
        ))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = check_same("sub", &self, &other)?;
        let value = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a - b)
            .collect();
        Ok(self.tape.record(
            shape,
            value,
            vec![self.id, other.id],
            Some(Box::new(|g, _, _| {
                vec![Some(g.to_vec()), Some(g.iter().map(|x| -x).collect())]
            })),
            false,
        ))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = check_same("mul", &self, &other)?;
        let value = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a * b)
            .collect();
        Ok(self.tape.record(
            shape,
            value,
            vec![self.id, other.id],
            Some(Box::new(|g, p, _| {
                let ga = g.iter().zip(p[1]).map(|(g, b)| g * b).collect();
                let gb = g.iter().zip(p[0]).map(|(g, a)| g * a).collect();
                vec![Some(ga), Some(gb)]
            })),
            false,
        ))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        let shape = check_same("div", &self, &other)?;
        let value = self
            .value()
            .iter()
            .zip(other.value().iter())
            .map(|(a, b)| a / b)
            .collect();
        Ok(self.tape.record(
            shape,
            value,
            vec![self.id, other.id],
            Some(Box::new(|g, p, out| {
                let ga = g.iter().zip(p[1]).map(|(g, b)| g / b).collect();
                let gb = g.iter().zip(p[1]).zip(out).map(|((g, b), y)| -g * y / b).collect();
                vec![Some(ga), Some(gb)]
            })),
            false,
        ))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, k: f64) -> Var<'t> {
        self.map(move |x| k * x, move |_, _| k)
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        self.map(move |x| x + c, |_, _| 1.0)
    }

    pub fn square(self) -> Var<'t> {
        self.map(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(self) -> Var<'t> {
        self.map(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn exp(self) -> Var<'t> {
        self.map(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Var<'t> {
        self.map(f64::ln, |x, _| 1.0 / x)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(self) -> Var<'t> {
        let n = self.value().len();
        let s = self.value().iter().sum();
        self.tape.record(
            vec![],
            vec![s],
            vec![self.id],
            Some(Box::new(move |g, _, _| vec![Some(vec![g[0]; n])])),
            false,
        )
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(self) -> Var<'t> {
        let n = self.value().len().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        let old = self.shape();
        if shape.iter().product::<usize>() != old.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: old,
                rhs: shape.to_vec(),
            });
        }
        Ok(self.tape.record(
            shape.to_vec(),
            self.value().to_vec(),
            vec![self.id],
            Some(Box::new(|g, _, _| vec![Some(g.to_vec())])),
            false,
        ))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice_rows(self, start: usize, len: usize) -> Result<Var<'t>, TensorError> {
        let mut shape = self.shape();
        let rows = *shape.first().ok_or(TensorError::Empty("slice_rows"))?;
        if start + len > rows {
            return Err(TensorError::InvalidArgument(format!(
                "rows {start}..{} out of {rows}",
                start + len
            )));
        }
        let per = self.value().len().checked_div(rows).unwrap_or(0);
        let total = rows * per;
        let value = self.value()[start * per..(start + len) * per].to_vec();
        shape[0] = len;
        Ok(self.tape.record(
            shape,
            value,
            vec![self.id],
            Some(Box::new(move |g, _, _| {
                let mut full = vec![0.0; total];
                full[start * per..(start + len) * per].copy_from_slice(g);
                vec![Some(full)]
            })),
            false,
        ))
    }
}

//! Scalar activations and the small dense linear algebra the rest of the crate needs.
//!
//! Everything is `f64`. Matrices are indexed row-major: `m.get(r, c)` is the
//! entry in row `r`, column `c`, and layer weights are stored `(out, in)`.

use std::fmt;

use crate::error::{Error, Result};

/// Hidden-layer activation of a surrogate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ActivationKind {
    Softplus,
}

impl ActivationKind {
    pub fn value(self, x: f64) -> f64 {
        match self {
            ActivationKind::Softplus => softplus(x),
        }
    }

    pub fn first(self, x: f64) -> f64 {
        match self {
            ActivationKind::Softplus => softplus_prime(x),
        }
    }

    /// `(value(x), first(x))`.
    pub fn value_and_first(self, x: f64) -> (f64, f64) {
        match self {
            ActivationKind::Softplus => softplus_with_slope(x),
        }
    }

    pub fn second(self, x: f64) -> f64 {
        match self {
            ActivationKind::Softplus => softplus_double_prime(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ActivationKind::Softplus => "softplus",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "softplus" => Some(ActivationKind::Softplus),
            _ => None,
        }
    }
}

impl fmt::Display for ActivationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `log(exp(x) + 1)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// The logistic sigmoid `exp(x) / (exp(x) + 1)`.
pub fn softplus_prime(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `(softplus(x), softplus_prime(x))` from a single exponential; bit-identical
/// to calling the two separately.
pub fn softplus_with_slope(x: f64) -> (f64, f64) {
    let e = (-x.abs()).exp();
    let value = if x > 0.0 { x + e.ln_1p() } else { e.ln_1p() };
    let slope = if x >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (value, slope)
}

/// `exp(x) / (exp(x) + 1)^2`, evaluated through `exp(-|x|)` (the function is even).
pub fn softplus_double_prime(x: f64) -> f64 {
    let e = (-x.abs()).exp();
    let d = 1.0 + e;
    e / (d * d)
}

/// Third derivative of softplus, `σ''(x) (1 - 2σ'(x))`.
///
/// Only the tape needs this, as the local partial of a `σ''` node.
pub fn softplus_triple_prime(x: f64) -> f64 {
    // 1 - 2σ'(x) = tanh(-x/2), which stays accurate in both tails.
    softplus_double_prime(x) * (-0.5 * x).tanh()
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "matrix data length",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    context: "matrix row length",
                    expected: cols,
                    found: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        assert!(r < self.rows && c < self.cols, "matrix index out of bounds");
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        assert!(r < self.rows && c < self.cols, "matrix index out of bounds");
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::DimensionMismatch {
            context: "matmul inner dimension",
            expected: a.cols,
            found: b.rows,
        });
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

pub fn matvec(a: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if a.cols != v.len() {
        return Err(Error::DimensionMismatch {
            context: "matvec",
            expected: a.cols,
            found: v.len(),
        });
    }
    Ok((0..a.rows).map(|r| dot(a.row(r), v)).collect())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Median of a non-empty slice; mean of the two middle values for even lengths.
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty(), "median of an empty slice");
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

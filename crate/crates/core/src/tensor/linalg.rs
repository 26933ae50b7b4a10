use super::Array;
use crate::error::{Error, Result};

/// Lower-triangular Cholesky factor `L` with `A = L·Lᵀ`.
#[derive(Clone, Debug)]
pub struct Cholesky {
    n: usize,
    lower: Vec<f64>,
}

impl Cholesky {
    pub fn factor(a: &Array) -> Result<Self> {
        if a.shape().len() != 2 || a.rows() != a.cols() {
            return Err(Error::Shape(format!(
                "cholesky needs a square matrix, got {:?}",
                a.shape()
            )));
        }
        let n = a.rows();
        let scale = a.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                if (a.at(i, j) - a.at(j, i)).abs() > 1e-12 * scale {
                    return Err(Error::Contract(format!(
                        "cholesky input is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        let diag_ratio = {
            let (lo, hi) = (0..n).fold((f64::INFINITY, 0.0_f64), |(lo, hi), i| {
                (lo.min(a.at(i, i)), hi.max(a.at(i, i)))
            });
            if lo > 0.0 {
                hi / lo
            } else {
                f64::INFINITY
            }
        };

        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = a.at(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= 0.0 || !d.is_finite() {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: d,
                    diag_ratio,
                });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = a.at(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Solve `A·x = b` for one right-hand side.
    pub fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        assert_eq!(b.len(), n, "rhs length");
        let l = &self.lower;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[i * n + k] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= l[k * n + i] * y[k];
            }
            y[i] = s / l[i * n + i];
        }
        y
    }

    /// Solve `A·X = B` column by column.
    pub fn solve(&self, b: &Array) -> Result<Array> {
        if b.shape().len() != 2 || b.rows() != self.n {
            return Err(Error::Shape(format!(
                "rhs shape {:?} does not match a {}×{} system",
                b.shape(),
                self.n,
                self.n
            )));
        }
        let d = b.cols();
        let mut out = vec![0.0; self.n * d];
        let mut col = vec![0.0; self.n];
        for c in 0..d {
            for (r, v) in col.iter_mut().enumerate() {
                *v = b.at(r, c);
            }
            let x = self.solve_vec(&col);
            for (r, v) in x.into_iter().enumerate() {
                out[r * d + c] = v;
            }
        }
        Array::new(vec![self.n, d], out)
    }
}

/// Solve `A·X = B` for symmetric positive definite `A` via Cholesky.
pub fn solve_spd(a: &Array, b: &Array) -> Result<Array> {
    Cholesky::factor(a)?.solve(b)
}

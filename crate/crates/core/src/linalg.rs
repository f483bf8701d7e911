//! Dense `f64` Cholesky factorization for small symmetric systems.

use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `S = L Lᵀ`, row-major `n × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    /// Factors the lower triangle of `s`. Returns `None` when a pivot is not
    /// strictly positive and finite.
    pub fn factor(s: &[f64], n: usize) -> Option<Self> {
        debug_assert_eq!(s.len(), n * n);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = s[j * n + j];
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            l[j * n + j] = d;
            for i in j + 1..n {
                let mut v = s[i * n + j];
                for k in 0..j {
                    v -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = v / d;
            }
        }
        Some(Self { n, l })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn factor_data(&self) -> &[f64] {
        &self.l
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.l[i * self.n + i]).collect()
    }

    /// Solves `S X = B` for row-major `B` of shape `n × cols`.
    pub fn solve(&self, b: &[f64], cols: usize) -> Result<Vec<f64>> {
        let n = self.n;
        if b.len() != n * cols {
            return Err(Error::Dimension {
                op: "cholesky_solve",
                lhs: vec![n, n],
                rhs: vec![b.len() / cols.max(1), cols],
            });
        }
        let mut x = b.to_vec();
        // Forward substitution L Z = B.
        for i in 0..n {
            for k in 0..i {
                let lik = self.l[i * n + k];
                if lik != 0.0 {
                    for c in 0..cols {
                        x[i * cols + c] -= lik * x[k * cols + c];
                    }
                }
            }
            let d = self.l[i * n + i];
            for c in 0..cols {
                x[i * cols + c] /= d;
            }
        }
        // Back substitution Lᵀ X = Z.
        for i in (0..n).rev() {
            for k in i + 1..n {
                let lki = self.l[k * n + i];
                if lki != 0.0 {
                    for c in 0..cols {
                        x[i * cols + c] -= lki * x[k * cols + c];
                    }
                }
            }
            let d = self.l[i * n + i];
            for c in 0..cols {
                x[i * cols + c] /= d;
            }
        }
        Ok(x)
    }
}

/// `S X` for row-major square `s` (`n × n`) and `x` (`n × cols`).
pub fn sym_matmul(s: &[f64], n: usize, x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * cols];
    for i in 0..n {
        for k in 0..n {
            let sik = s[i * n + k];
            for c in 0..cols {
                out[i * cols + c] += sik * x[k * cols + c];
            }
        }
    }
    out
}

pub fn frobenius(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factors_known_matrix() {
        let s = [4.0, 2.0, 2.0, 5.0];
        let c = Cholesky::factor(&s, 2).unwrap();
        assert_eq!(c.factor_data(), &[2.0, 0.0, 1.0, 2.0]);
        let x = c.solve(&[8.0, 9.0], 1).unwrap();
        assert!((x[0] - 1.375).abs() < 1e-15 && (x[1] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn rejects_indefinite() {
        assert!(Cholesky::factor(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        assert!(Cholesky::factor(&[f64::NAN], 1).is_none());
        assert!(Cholesky::factor(&[0.0], 1).is_none());
    }
}

//! Element-wise, reduction and matrix operations on [`Var`].

use crate::error::{Error, Result};
use crate::tensor::{matmul_op, Real, Tensor};

use super::tape::Var;

impl<'t, T: Real> Var<'t, T> {
    fn check_tape(&self, other: &Var<'t, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::contract("operands live on different tapes"))
        }
    }

    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let value = self.value().add(&other.value())?;
        self.tape
            .custom("add", &[self, other], value, |g| Ok(vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let value = self.value().sub(&other.value())?;
        self.tape.custom("sub", &[self, other], value, |g| {
            Ok(vec![Some(g.clone()), Some(g.scale(-T::ONE))])
        })
    }

    /// Element-wise product.
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let value = a.mul(&b)?;
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.tape.custom("mul", &[self, other], value, move |g| {
            Ok(vec![
                if need_a { Some(g.mul(&b)?) } else { None },
                if need_b { Some(g.mul(&a)?) } else { None },
            ])
        })
    }

    pub fn scale(self, s: T) -> Result<Var<'t, T>> {
        let value = self.value().scale(s);
        self.tape
            .custom("scale", &[self], value, move |g| Ok(vec![Some(g.scale(s))]))
    }

    pub fn neg(self) -> Result<Var<'t, T>> {
        self.scale(-T::ONE)
    }

    pub fn add_scalar(self, s: T) -> Result<Var<'t, T>> {
        let value = self.value().map(|x| x + s);
        self.tape
            .custom("add_scalar", &[self], value, |g| Ok(vec![Some(g.clone())]))
    }

    pub fn square(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = x.map(|v| v * v);
        self.tape.custom("square", &[self], value, move |g| {
            Ok(vec![Some(g.zip_map(&x, "square", |g, x| g * (x + x))?)])
        })
    }

    pub fn relu(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = x.map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.tape.custom("relu", &[self], value, move |g| {
            Ok(vec![Some(g.zip_map(&x, "relu", |g, x| {
                if x > T::ZERO {
                    g
                } else {
                    T::ZERO
                }
            })?)])
        })
    }

    /// Adds `bias` (length = last extent) to every row.
    pub fn add_bias(self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&bias)?;
        let (x, b) = (self.value(), bias.value());
        let shape = x.shape().to_vec();
        let c = *shape.last().unwrap_or(&0);
        if b.shape() != [c] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: shape,
                rhs: b.shape().to_vec(),
            });
        }
        let mut out = x.to_vec();
        for row in out.chunks_mut(c) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let value = Tensor::new(shape, out)?;
        self.tape.custom("add_bias", &[self, bias], value, move |g| {
            let mut gb = vec![T::ZERO; c];
            for row in g.data().chunks(c) {
                for (acc, &v) in gb.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            Ok(vec![Some(g.clone()), Some(Tensor::new(vec![c], gb)?)])
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let old = self.shape();
        let value = self.value().reshape(shape)?;
        self.tape
            .custom("reshape", &[self], value, move |g| Ok(vec![Some(g.reshape(old.clone())?)]))
    }

    pub fn transpose(self) -> Result<Var<'t, T>> {
        let value = self.value().transpose()?;
        self.tape
            .custom("transpose", &[self], value, |g| Ok(vec![Some(g.transpose()?)]))
    }

    fn matmul_general(self, ta: bool, other: Var<'t, T>, tb: bool, op: &'static str) -> Result<Var<'t, T>> {
        self.check_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        let value = matmul_op(&a, ta, &b, tb)?;
        let (need_a, need_b) = (self.requires_grad(), other.requires_grad());
        self.tape.custom(op, &[self, other], value, move |g| {
            // C = op(A) op(B). dop(A) = G op(B)ᵀ, dop(B) = op(A)ᵀ G.
            let ga = if need_a {
                Some(if ta {
                    // A stored transposed: dA = (G op(B)ᵀ)ᵀ = op(B) Gᵀ
                    matmul_op(&b, tb, g, true)?
                } else {
                    matmul_op(g, false, &b, !tb)?
                })
            } else {
                None
            };
            let gb = if need_b {
                Some(if tb {
                    // dB = (op(A)ᵀ G)ᵀ = Gᵀ op(A)
                    matmul_op(g, true, &a, ta)?
                } else {
                    matmul_op(&a, !ta, g, false)?
                })
            } else {
                None
            };
            Ok(vec![ga, gb])
        })
    }

    /// `self · other`.
    pub fn matmul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_general(false, other, false, "matmul")
    }

    /// `self · otherᵀ`.
    pub fn matmul_nt(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_general(false, other, true, "matmul_nt")
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.matmul_general(true, other, false, "matmul_tn")
    }

    pub fn sum(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let value = Tensor::scalar(x.sum());
        self.tape.custom("sum", &[self], value, move |g| {
            Ok(vec![Some(Tensor::full(shape.clone(), g.item()))])
        })
    }

    pub fn mean(self) -> Result<Var<'t, T>> {
        let n = self.value().len();
        self.sum()?.scale(T::ONE / T::from_f64(n as f64))
    }

    /// `Σ x²`.
    pub fn sum_sq(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let value = Tensor::scalar(x.sum_sq());
        self.tape.custom("sum_sq", &[self], value, move |g| {
            let s = g.item() + g.item();
            Ok(vec![Some(x.scale(s))])
        })
    }

    pub fn trace(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, _) = x.dims2()?;
        let value = Tensor::scalar(x.trace()?);
        self.tape.custom("trace", &[self], value, move |g| {
            Ok(vec![Some(Tensor::<T>::eye(n).scale(g.item()))])
        })
    }

    /// `self + s·I` for a square matrix and a scalar node `s`.
    pub fn add_scaled_identity(self, s: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_tape(&s)?;
        let x = self.value();
        let (n, c) = x.dims2()?;
        if n != c || s.value().len() != 1 {
            return Err(Error::Dimension {
                op: "add_scaled_identity",
                lhs: x.shape().to_vec(),
                rhs: s.shape(),
            });
        }
        let sv = s.item();
        let mut out = x.to_vec();
        for i in 0..n {
            out[i * n + i] += sv;
        }
        let value = Tensor::new(vec![n, n], out)?;
        self.tape.custom("add_scaled_identity", &[self, s], value, move |g| {
            let tr = g.trace()?;
            Ok(vec![Some(g.clone()), Some(Tensor::scalar(tr))])
        })
    }

    /// Mean over rows of the cross-entropy `-Σ p log softmax(z)` between
    /// target distributions `p` (rows of `targets`) and logits `z`.
    pub fn soft_cross_entropy(self, targets: &Tensor<T>) -> Result<Var<'t, T>> {
        let z = self.value();
        let (r, c) = z.dims2()?;
        z.check_same_shape(targets, "soft_cross_entropy")?;
        let logp = log_softmax_rows(&z)?;
        let mut total = T::ZERO;
        for (lp, p) in logp.data().iter().zip(targets.data()) {
            total -= *p * *lp;
        }
        let inv_r = T::ONE / T::from_f64(r as f64);
        let value = Tensor::scalar(total * inv_r);
        let targets = targets.clone();
        self.tape.custom("soft_cross_entropy", &[self], value, move |g| {
            // d/dz = (softmax(z) * Σp - p) / r
            let s = g.item() * inv_r;
            let mut out = vec![T::ZERO; r * c];
            for i in 0..r {
                let p_row = targets.row(i);
                let mass: T = p_row.iter().copied().sum();
                for j in 0..c {
                    let q = logp.data()[i * c + j].exp();
                    out[i * c + j] = s * (q * mass - p_row[j]);
                }
            }
            Ok(vec![Some(Tensor::new(vec![r, c], out)?)])
        })
    }
}

/// Row-wise log-softmax, stabilised by the row maximum.
pub fn log_softmax_rows<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    let (r, c) = z.dims2()?;
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        let row = z.row(i);
        let m = row.iter().fold(row[0], |m, &v| m.max(v));
        let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
        for j in 0..c {
            out[i * c + j] = row[j] - lse;
        }
    }
    Tensor::new(vec![r, c], out)
}

/// Row-wise softmax.
pub fn softmax_rows<T: Real>(z: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(log_softmax_rows(z)?.map(|v| v.exp()))
}

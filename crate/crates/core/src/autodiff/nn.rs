//! Convolution, pooling and normalisation on NHWC activations.
//!
//! Images enter the engine as flattened CHW rows and are permuted once to
//! NHWC, where the channel is the fastest axis: convolution becomes one
//! im2col product and per-channel statistics read contiguous rows.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

use super::tape::Var;

/// Per-channel statistics of one normalisation call.
#[derive(Debug, Clone)]
pub struct BatchStats<T: Real> {
    pub mean: Tensor<T>,
    /// Unbiased variance, the quantity tracked by running statistics.
    pub var_unbiased: Tensor<T>,
}

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, h, w, c] => Ok((n, h, w, c)),
        _ => Err(Error::Dimension {
            op,
            lhs: shape.to_vec(),
            rhs: vec![0, 0, 0, 0],
        }),
    }
}

struct ConvGeom {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.kh * self.kw * self.c
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let patch = self.patch();
        let mut cols = vec![T::ZERO; self.n * self.h * self.w * patch];
        let mut r = 0;
        for n in 0..self.n {
            let img = &x[n * self.h * self.w * self.c..(n + 1) * self.h * self.w * self.c];
            for y in 0..self.h {
                for xx in 0..self.w {
                    let row = &mut cols[r * patch..(r + 1) * patch];
                    let mut o = 0;
                    for ky in 0..self.kh {
                        let sy = y as isize + ky as isize - ph as isize;
                        for kx in 0..self.kw {
                            let sx = xx as isize + kx as isize - pw as isize;
                            if sy >= 0 && sy < self.h as isize && sx >= 0 && sx < self.w as isize {
                                let s = (sy as usize * self.w + sx as usize) * self.c;
                                row[o..o + self.c].copy_from_slice(&img[s..s + self.c]);
                            }
                            o += self.c;
                        }
                    }
                    r += 1;
                }
            }
        }
        cols
    }

    fn col2im<T: Real>(&self, cols: &[T]) -> Vec<T> {
        let (ph, pw) = (self.kh / 2, self.kw / 2);
        let patch = self.patch();
        let mut x = vec![T::ZERO; self.n * self.h * self.w * self.c];
        let mut r = 0;
        for n in 0..self.n {
            let base = n * self.h * self.w * self.c;
            for y in 0..self.h {
                for xx in 0..self.w {
                    let row = &cols[r * patch..(r + 1) * patch];
                    let mut o = 0;
                    for ky in 0..self.kh {
                        let sy = y as isize + ky as isize - ph as isize;
                        for kx in 0..self.kw {
                            let sx = xx as isize + kx as isize - pw as isize;
                            if sy >= 0 && sy < self.h as isize && sx >= 0 && sx < self.w as isize {
                                let s = base + (sy as usize * self.w + sx as usize) * self.c;
                                for (d, &v) in x[s..s + self.c].iter_mut().zip(&row[o..o + self.c]) {
                                    *d += v;
                                }
                            }
                            o += self.c;
                        }
                    }
                    r += 1;
                }
            }
        }
        x
    }
}

impl<'t, T: Real> Var<'t, T> {
    /// Stride-1 "same" convolution of an NHWC input with a kernel of shape
    /// `[out_channels, kh, kw, in_channels]` (odd kh, kw).
    pub fn conv2d(self, kernel: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let k = kernel.value();
        let (n, h, w, c) = dims4(x.shape(), "conv2d")?;
        let (co, kh, kw, kc) = dims4(k.shape(), "conv2d")?;
        if kc != c || kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: x.shape().to_vec(),
                rhs: k.shape().to_vec(),
            });
        }
        let geom = ConvGeom { n, h, w, c, kh, kw };
        let patch = geom.patch();
        let rows = n * h * w;
        let cols = geom.im2col(x.data());
        let mut out = vec![T::ZERO; rows * co];
        // out[rows, co] = cols[rows, patch] · k[co, patch]ᵀ
        T::gemm(rows, patch, co, T::ONE, &cols, patch as isize, 1, k.data(), 1, patch as isize, T::ZERO, &mut out);
        let value = Tensor::new(vec![n, h, w, co], out)?;
        let (need_x, need_k) = (self.requires_grad(), kernel.requires_grad());
        self.tape.custom("conv2d", &[self, kernel], value, move |g| {
            let gd = g.data();
            let gk = if need_k {
                let mut dk = vec![T::ZERO; co * patch];
                // dk[co, patch] = gᵀ[co, rows] · cols[rows, patch]
                T::gemm(co, rows, patch, T::ONE, gd, 1, co as isize, &cols, patch as isize, 1, T::ZERO, &mut dk);
                Some(Tensor::new(vec![co, kh, kw, c], dk)?)
            } else {
                None
            };
            let gx = if need_x {
                let mut dcols = vec![T::ZERO; rows * patch];
                // dcols[rows, patch] = g[rows, co] · k[co, patch]
                T::gemm(rows, co, patch, T::ONE, gd, co as isize, 1, k.data(), patch as isize, 1, T::ZERO, &mut dcols);
                Some(Tensor::new(vec![n, h, w, c], geom.col2im(&dcols))?)
            } else {
                None
            };
            Ok(vec![gx, gk])
        })
    }

    /// 2×2 average pooling with stride 2 on NHWC input (even H and W).
    pub fn avg_pool2(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, h, w, c) = dims4(x.shape(), "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension {
                op: "avg_pool2",
                lhs: x.shape().to_vec(),
                rhs: vec![n, h / 2 * 2, w / 2 * 2, c],
            });
        }
        let (oh, ow) = (h / 2, w / 2);
        let quarter = T::from_f64(0.25);
        let xd = x.data();
        let mut out = vec![T::ZERO; n * oh * ow * c];
        for b in 0..n {
            for y in 0..oh {
                for xx in 0..ow {
                    let o = ((b * oh + y) * ow + xx) * c;
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                        for ch in 0..c {
                            out[o + ch] += xd[s + ch];
                        }
                    }
                    for v in &mut out[o..o + c] {
                        *v *= quarter;
                    }
                }
            }
        }
        let value = Tensor::new(vec![n, oh, ow, c], out)?;
        self.tape.custom("avg_pool2", &[self], value, move |g| {
            let gd = g.data();
            let mut gx = vec![T::ZERO; n * h * w * c];
            for b in 0..n {
                for y in 0..oh {
                    for xx in 0..ow {
                        let o = ((b * oh + y) * ow + xx) * c;
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let s = ((b * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                            for ch in 0..c {
                                gx[s + ch] = gd[o + ch] * quarter;
                            }
                        }
                    }
                }
            }
            Ok(vec![Some(Tensor::new(vec![n, h, w, c], gx)?)])
        })
    }

    /// Permutes flattened CHW image rows `[n, c·h·w]` into NHWC `[n, h, w, c]`.
    pub fn chw_to_nhwc(self, c: usize, h: usize, w: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, d) = x.dims2()?;
        if d != c * h * w {
            return Err(Error::Dimension {
                op: "chw_to_nhwc",
                lhs: x.shape().to_vec(),
                rhs: vec![n, c * h * w],
            });
        }
        let plane = h * w;
        let xd = x.data();
        let mut out = vec![T::ZERO; n * d];
        for b in 0..n {
            for ch in 0..c {
                for p in 0..plane {
                    out[b * d + p * c + ch] = xd[b * d + ch * plane + p];
                }
            }
        }
        let value = Tensor::new(vec![n, h, w, c], out)?;
        self.tape.custom("chw_to_nhwc", &[self], value, move |g| {
            let gd = g.data();
            let mut gx = vec![T::ZERO; n * d];
            for b in 0..n {
                for ch in 0..c {
                    for p in 0..plane {
                        gx[b * d + ch * plane + p] = gd[b * d + p * c + ch];
                    }
                }
            }
            Ok(vec![Some(Tensor::new(vec![n, d], gx)?)])
        })
    }

    /// Normalises each channel (last axis) with the statistics of this batch,
    /// then applies the optional affine `gamma · x̂ + beta`.
    ///
    /// Uses the biased batch variance for normalisation and reports the
    /// unbiased one for running-statistic updates.
    pub fn batch_norm(
        self,
        affine: Option<(Var<'t, T>, Var<'t, T>)>,
        eps: f64,
    ) -> Result<(Var<'t, T>, BatchStats<T>)> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::contract("batch_norm of a scalar"))?;
        let rows = x.len() / c.max(1);
        if rows < 2 {
            return Err(Error::contract(format!(
                "batch statistics need at least 2 samples per channel, got {rows}"
            )));
        }
        let xd = x.data();
        let rf = T::from_f64(rows as f64);
        let mut mean = vec![T::ZERO; c];
        for row in xd.chunks(c) {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= rf;
        }
        let mut var = vec![T::ZERO; c];
        for row in xd.chunks(c) {
            for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let unbiased: Vec<T> = var.iter().map(|&s| s / T::from_f64((rows - 1) as f64)).collect();
        for s in &mut var {
            *s /= rf;
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::ZERO; xd.len()];
        for (orow, row) in xhat.chunks_mut(c).zip(xd.chunks(c)) {
            for j in 0..c {
                orow[j] = (row[j] - mean[j]) * inv_std[j];
            }
        }
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let (gamma_t, beta_t) = match &affine {
            Some((g, b)) => {
                let (gv, bv) = (g.value(), b.value());
                if gv.shape() != [c] || bv.shape() != [c] {
                    return Err(Error::Dimension {
                        op: "batch_norm",
                        lhs: shape,
                        rhs: gv.shape().to_vec(),
                    });
                }
                (Some(gv), Some(bv))
            }
            None => (None, None),
        };
        let value = match (&gamma_t, &beta_t) {
            (Some(gv), Some(bv)) => {
                let mut out = xhat.to_vec();
                for row in out.chunks_mut(c) {
                    for j in 0..c {
                        row[j] = row[j] * gv.data()[j] + bv.data()[j];
                    }
                }
                Tensor::new(shape.clone(), out)?
            }
            _ => xhat.clone(),
        };
        let stats = BatchStats {
            mean: Tensor::new(vec![c], mean)?,
            var_unbiased: Tensor::new(vec![c], unbiased)?,
        };
        let mut parents = vec![self];
        if let Some((g, b)) = affine {
            parents.push(g);
            parents.push(b);
        }
        let has_affine = gamma_t.is_some();
        let out = self.tape.custom("batch_norm", &parents, value, move |g| {
            let gd = g.data();
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            for (grow, hrow) in gd.chunks(c).zip(xhat.data().chunks(c)) {
                for j in 0..c {
                    dgamma[j] += grow[j] * hrow[j];
                    dbeta[j] += grow[j];
                }
            }
            // dx̂ = g·γ, so Σdx̂ = γ·dβ and Σdx̂·x̂ = γ·dγ.
            let gamma: Vec<T> = match &gamma_t {
                Some(gv) => gv.to_vec(),
                None => vec![T::ONE; c],
            };
            let mut gx = vec![T::ZERO; gd.len()];
            for ((orow, grow), hrow) in gx.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.data().chunks(c)) {
                for j in 0..c {
                    let k = gamma[j] * inv_std[j] / rf;
                    orow[j] = k * (rf * grow[j] - dbeta[j] - hrow[j] * dgamma[j]);
                }
            }
            let mut grads = vec![Some(Tensor::new(xhat.shape().to_vec(), gx)?)];
            if has_affine {
                grads.push(Some(Tensor::new(vec![c], dgamma)?));
                grads.push(Some(Tensor::new(vec![c], dbeta)?));
            }
            Ok(grads)
        })?;
        Ok((out, stats))
    }

    /// Normalises each channel with fixed statistics (evaluation mode).
    pub fn fixed_norm(
        self,
        mean: &Tensor<T>,
        var: &Tensor<T>,
        affine: Option<(Var<'t, T>, Var<'t, T>)>,
        eps: f64,
    ) -> Result<Var<'t, T>> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let c = *shape.last().ok_or_else(|| Error::contract("fixed_norm of a scalar"))?;
        if mean.shape() != [c] || var.shape() != [c] {
            return Err(Error::Dimension {
                op: "fixed_norm",
                lhs: shape,
                rhs: mean.shape().to_vec(),
            });
        }
        let eps_t = T::from_f64(eps);
        let inv_std: Vec<T> = var.data().iter().map(|&v| T::ONE / (v + eps_t).sqrt()).collect();
        let mean_v = mean.to_vec();
        let mut xhat = x.to_vec();
        for row in xhat.chunks_mut(c) {
            for j in 0..c {
                row[j] = (row[j] - mean_v[j]) * inv_std[j];
            }
        }
        let xhat = Tensor::new(shape.clone(), xhat)?;
        let (gamma_t, value) = match &affine {
            Some((g, b)) => {
                let (gv, bv) = (g.value(), b.value());
                let mut out = xhat.to_vec();
                for row in out.chunks_mut(c) {
                    for j in 0..c {
                        row[j] = row[j] * gv.data()[j] + bv.data()[j];
                    }
                }
                (Some(gv), Tensor::new(shape.clone(), out)?)
            }
            None => (None, xhat.clone()),
        };
        let mut parents = vec![self];
        if let Some((g, b)) = affine {
            parents.push(g);
            parents.push(b);
        }
        self.tape.custom("fixed_norm", &parents, value, move |g| {
            let gd = g.data();
            let gamma: Vec<T> = match &gamma_t {
                Some(gv) => gv.to_vec(),
                None => vec![T::ONE; c],
            };
            let mut gx = vec![T::ZERO; gd.len()];
            let mut dgamma = vec![T::ZERO; c];
            let mut dbeta = vec![T::ZERO; c];
            for ((orow, grow), hrow) in gx.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.data().chunks(c)) {
                for j in 0..c {
                    orow[j] = grow[j] * gamma[j] * inv_std[j];
                    dgamma[j] += grow[j] * hrow[j];
                    dbeta[j] += grow[j];
                }
            }
            let mut grads = vec![Some(Tensor::new(xhat.shape().to_vec(), gx)?)];
            if gamma_t.is_some() {
                grads.push(Some(Tensor::new(vec![c], dgamma)?));
                grads.push(Some(Tensor::new(vec![c], dbeta)?));
            }
            Ok(grads)
        })
    }
}

//! Kernel ridge regression head over learned features, the outer
//! regression loss on a target batch, and its gradient with respect to the
//! distilled inputs and targets.
//!
//! Solves always run in `f64` through a Cholesky factorization, whatever the
//! precision of the surrounding network.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::{frobenius, sym_matmul, Cholesky};
use crate::models::{FeatureExtractor, Mode};
use crate::tensor::{Real, Tensor};

/// Relative residual every accepted solve must reach.
pub const RESIDUAL_TOL: f64 = 1e-8;
/// Number of ×10 jitter escalations tried after the first factorization.
pub const MAX_JITTER_ESCALATIONS: usize = 3;
/// Smallest ridge, relative to the mean kernel diagonal, used when the
/// configured value resolves to zero.
pub const RIDGE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", content = "value", rename_all = "snake_case")]
pub enum RidgeConfig {
    Absolute(f64),
    /// `base · tr(K) / m`.
    TraceScaled(f64),
}

impl Default for RidgeConfig {
    fn default() -> Self {
        RidgeConfig::TraceScaled(1e-6)
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            RidgeConfig::Absolute(v) | RidgeConfig::TraceScaled(v) => v,
        };
        if !(v >= 0.0 && v.is_finite()) {
            return Err(Error::config(format!("ridge value must be finite and non-negative, got {v}")));
        }
        Ok(())
    }

    /// Positive ridge for a kernel with the given trace and size.
    pub fn resolve(&self, trace: f64, m: usize) -> f64 {
        let scale = (trace / m.max(1) as f64).abs();
        let lambda = match *self {
            RidgeConfig::Absolute(v) => v,
            RidgeConfig::TraceScaled(base) => base * scale,
        };
        lambda.max(RIDGE_FLOOR * scale.max(1.0))
    }
}

/// Factorization diagnostics of one solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveInfo {
    pub ridge: f64,
    /// Extra diagonal added on top of the ridge (0 when the first attempt succeeded).
    pub jitter: f64,
    /// `‖(K + λI + jitter·I)A − Y‖_F / max(‖Y‖_F, 1e-12)` of the system
    /// actually factored.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KrrSolveResult {
    pub coefficients: Tensor<f64>,
    pub factor: Cholesky,
    pub info: SolveInfo,
}

fn check_square_symmetric(s: &[f64], n: usize, op: &'static str) -> Result<()> {
    if s.len() != n * n {
        return Err(Error::Dimension {
            op,
            lhs: vec![s.len() / n.max(1), n],
            rhs: vec![n, n],
        });
    }
    let scale = s.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    for i in 0..n {
        for j in 0..i {
            if (s[i * n + j] - s[j * n + i]).abs() > 1e-6 * scale {
                return Err(Error::contract(format!("{op}: matrix is not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(())
}

/// Solves `S A = Y` for symmetric positive definite `S` (row-major `n × n`),
/// escalating a diagonal jitter when factorization or the residual check
/// fails. `base` is the smallest jitter tried after the plain attempt.
fn solve_spd(s: &[f64], n: usize, y: &[f64], cols: usize, base: f64) -> Result<(Vec<f64>, Cholesky, f64, f64)> {
    if y.len() != n * cols {
        return Err(Error::Dimension {
            op: "solve_krr",
            lhs: vec![n, n],
            rhs: vec![y.len() / cols.max(1), cols],
        });
    }
    let y_norm = frobenius(y).max(1e-12);
    let mut jitter = 0.0;
    for attempt in 0..=MAX_JITTER_ESCALATIONS {
        if attempt > 0 {
            jitter = base * 10f64.powi(attempt as i32 - 1);
        }
        let mut sj = s.to_vec();
        for i in 0..n {
            sj[i * n + i] += jitter;
        }
        let Some(chol) = Cholesky::factor(&sj, n) else {
            continue;
        };
        let mut a = chol.solve(y, cols)?;
        // One step of iterative refinement against the jittered system.
        let r: Vec<f64> = y.iter().zip(sym_matmul(&sj, n, &a, cols)).map(|(yv, sa)| yv - sa).collect();
        let da = chol.solve(&r, cols)?;
        a.iter_mut().zip(&da).for_each(|(av, d)| *av += d);
        let res: Vec<f64> = sym_matmul(&sj, n, &a, cols).iter().zip(y).map(|(sa, yv)| sa - yv).collect();
        let residual = frobenius(&res) / y_norm;
        if residual.is_finite() && residual < RESIDUAL_TOL && a.iter().all(|v| v.is_finite()) {
            return Ok((a, chol, jitter, residual));
        }
    }
    Err(Error::Singular { jitter })
}

/// Closed-form ridge coefficients `A = (K + λI)⁻¹ Y`.
pub fn solve_krr(k: &Tensor<f64>, y: &Tensor<f64>, ridge: &RidgeConfig) -> Result<KrrSolveResult> {
    ridge.validate()?;
    let (m, c) = k.dims2()?;
    if m != c {
        return Err(Error::Dimension {
            op: "solve_krr",
            lhs: vec![m, c],
            rhs: vec![m, m],
        });
    }
    let (ym, d) = y.dims2()?;
    if ym != m {
        return Err(Error::Dimension {
            op: "solve_krr",
            lhs: vec![m, m],
            rhs: vec![ym, d],
        });
    }
    k.ensure_finite("solve_krr")?;
    check_square_symmetric(k.data(), m, "solve_krr")?;
    let lambda = ridge.resolve(k.trace()?, m);
    let mut s = k.to_vec();
    for i in 0..m {
        s[i * m + i] += lambda;
    }
    let (a, factor, jitter, residual) = solve_spd(&s, m, y.data(), d, lambda * 10.0)?;
    Ok(KrrSolveResult {
        coefficients: Tensor::new(vec![m, d], a)?,
        factor,
        info: SolveInfo {
            ridge: lambda,
            jitter,
            residual,
        },
    })
}

/// Differentiable solve `A = S⁻¹ Y` for symmetric `S` on the tape.
///
/// The adjoint of an upstream gradient `Ā` is `∇Y = S⁻¹Ā` and
/// `∇S = −sym(S⁻¹ Ā Aᵀ)`. Any jitter is treated as a constant shift.
pub fn solve_on_tape<'t, T: Real>(s: Var<'t, T>, y: Var<'t, T>, jitter_base: f64) -> Result<(Var<'t, T>, SolveInfo)> {
    let sv = s.value();
    let (m, c) = sv.dims2()?;
    let (ym, d) = y.value().dims2()?;
    if m != c || ym != m {
        return Err(Error::Dimension {
            op: "krr_solve",
            lhs: vec![m, c],
            rhs: vec![ym, d],
        });
    }
    sv.ensure_finite("krr_solve")?;
    let s64 = sv.to_f64_vec();
    check_square_symmetric(&s64, m, "krr_solve")?;
    let (a, chol, jitter, residual) = solve_spd(&s64, m, &y.value().to_f64_vec(), d, jitter_base)?;
    let value: Tensor<T> = Tensor::new(vec![m, d], a.iter().map(|&v| T::from_f64(v)).collect())?;
    let info = SolveInfo {
        ridge: 0.0,
        jitter,
        residual,
    };
    let out = s.tape().custom("krr_solve", &[s, y], value, move |g| {
        let g = chol.solve(&g.to_f64_vec(), d)?;
        let mut gs = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += g[i * d + k] * a[j * d + k] + a[i * d + k] * g[j * d + k];
                }
                gs[i * m + j] = -0.5 * acc;
            }
        }
        let to_t = |v: Vec<f64>, shape: Vec<usize>| Tensor::new(shape, v.into_iter().map(T::from_f64).collect());
        Ok(vec![Some(to_t(gs, vec![m, m])?), Some(to_t(g, vec![m, d])?)])
    })?;
    Ok((out, info))
}

/// Ridge `λ` as a tape node: a constant in absolute mode, otherwise
/// `base · tr(K)/m` so that it differentiates with the kernel.
fn ridge_on_tape<'t, T: Real>(k: Var<'t, T>, ridge: &RidgeConfig) -> Result<Var<'t, T>> {
    let kv = k.value();
    let m = kv.rows();
    let trace = kv.trace()?.to_f64();
    let floor = RIDGE_FLOOR * (trace / m as f64).abs().max(1.0);
    match *ridge {
        RidgeConfig::TraceScaled(base) if base * trace / m as f64 > floor => {
            k.trace()?.scale(T::from_f64(base / m as f64))
        }
        _ => Ok(k.tape().scalar(T::from_f64(ridge.resolve(trace, m)))),
    }
}

/// Outer loss `½‖G − F_t F_sᵀ (F_s F_sᵀ + λI)⁻¹ Y_s‖²_F` on tape features.
pub fn outer_loss_on_tape<'t, T: Real>(
    f_s: Var<'t, T>,
    y_s: Var<'t, T>,
    f_t: Var<'t, T>,
    targets: &Tensor<T>,
    ridge: &RidgeConfig,
) -> Result<(Var<'t, T>, SolveInfo)> {
    ridge.validate()?;
    let k = f_s.matmul_nt(f_s)?;
    let lambda = ridge_on_tape(k, ridge)?;
    let lambda_value = lambda.item().to_f64();
    let s = k.add_scaled_identity(lambda)?;
    let (a, mut info) = solve_on_tape(s, y_s, 10.0 * lambda_value)?;
    info.ridge = lambda_value;
    let pred = f_t.matmul_nt(f_s)?.matmul(a)?;
    if pred.shape() != targets.shape() {
        return Err(Error::Dimension {
            op: "outer_loss",
            lhs: pred.shape(),
            rhs: targets.shape().to_vec(),
        });
    }
    let g = f_s.tape().constant(targets.clone());
    let loss = g.sub(pred)?.sum_sq()?.scale(T::from_f64(0.5))?;
    Ok((loss, info))
}

/// Gram matrix `F Fᵀ` of batch-statistics features of `x`.
pub fn kernel_matrix<T: Real>(model: &FeatureExtractor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let f = model.embed(x, Mode::BatchStats)?;
    f.ensure_finite("kernel_matrix")?;
    f.matmul_nt(&f)
}

/// Predictions `f(X_q) f(X_s)ᵀ A` of a fitted ridge head. Features of each
/// set use that set's batch statistics.
pub fn krr_predict<T: Real>(
    model: &FeatureExtractor<T>,
    x_s: &Tensor<T>,
    coefficients: &Tensor<f64>,
    x_q: &Tensor<T>,
) -> Result<Tensor<T>> {
    let f_s = model.embed(x_s, Mode::BatchStats)?.cast::<f64>();
    let f_q = model.embed(x_q, Mode::BatchStats)?.cast::<f64>();
    if coefficients.rows() != f_s.rows() {
        return Err(Error::Dimension {
            op: "krr_predict",
            lhs: f_s.shape().to_vec(),
            rhs: coefficients.shape().to_vec(),
        });
    }
    Ok(f_q.matmul_nt(&f_s)?.matmul(coefficients)?.cast())
}

/// Outer loss, its gradients with respect to the distilled inputs and
/// targets, and the solve diagnostics.
#[derive(Debug, Clone)]
pub struct MetaGrad<T: Real> {
    pub loss: f64,
    pub grad_x: Tensor<T>,
    pub grad_y: Tensor<T>,
    pub info: SolveInfo,
}

/// Target-batch features are computed in their own pass and enter as
/// constants; `targets` are the frozen target model's embeddings of the
/// batch.
fn outer_pass<T: Real>(
    model: &FeatureExtractor<T>,
    x_s: &Tensor<T>,
    y_s: &Tensor<T>,
    x_batch: &Tensor<T>,
    targets: &Tensor<T>,
    ridge: &RidgeConfig,
    with_grad: bool,
) -> Result<MetaGrad<T>> {
    let f_t = model.embed(x_batch, Mode::BatchStats)?;
    let tape = Tape::new();
    let params = tape.inputs(&model.params, false);
    let (xv, yv) = if with_grad {
        (tape.leaf(x_s.clone()), tape.leaf(y_s.clone()))
    } else {
        (tape.constant(x_s.clone()), tape.constant(y_s.clone()))
    };
    let (f_s, _) = model.forward(&params, xv, Mode::BatchStats)?;
    let (loss, info) = outer_loss_on_tape(f_s, yv, tape.constant(f_t), targets, ridge)?;
    let value = loss.item().to_f64();
    let (grad_x, grad_y) = if with_grad {
        let g = tape.backward(loss)?;
        (g.wrt(xv), g.wrt(yv))
    } else {
        (Tensor::zeros_like(x_s), Tensor::zeros_like(y_s))
    };
    Ok(MetaGrad {
        loss: value,
        grad_x,
        grad_y,
        info,
    })
}

pub fn outer_loss<T: Real>(
    model: &FeatureExtractor<T>,
    x_s: &Tensor<T>,
    y_s: &Tensor<T>,
    x_batch: &Tensor<T>,
    targets: &Tensor<T>,
    ridge: &RidgeConfig,
) -> Result<f64> {
    Ok(outer_pass(model, x_s, y_s, x_batch, targets, ridge, false)?.loss)
}

pub fn meta_grad<T: Real>(
    model: &FeatureExtractor<T>,
    x_s: &Tensor<T>,
    y_s: &Tensor<T>,
    x_batch: &Tensor<T>,
    targets: &Tensor<T>,
    ridge: &RidgeConfig,
) -> Result<MetaGrad<T>> {
    outer_pass(model, x_s, y_s, x_batch, targets, ridge, true)
}

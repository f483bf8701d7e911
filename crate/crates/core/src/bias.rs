//! Exact study of mini-batch bias in bilevel meta-gradients on a toy
//! self-supervised problem whose inner solution has a closed form.
//!
//! The loss of one augmentation `ξ` (a feature mask with a scalar target
//! `κ_ξ`) on data `X` with `N` rows is
//!
//! ```text
//! ℓ_ξ(θ, X) = (1/2N)‖X diag(ξ) P θ − κ_ξ·1‖² + (μ/2)‖θ‖²
//! ```
//!
//! The inner problem minimizes a weighted sum of these over the atoms of
//! the augmentation distribution: the true probabilities give the exact
//! minimizer, sampled frequencies give the mini-batch one. The outer loss
//! is the exact expectation on a fixed `X_t`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Cholesky;
use crate::rng::RngState;

/// One augmentation outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    /// Keep-mask over input features.
    pub mask: Vec<bool>,
    pub prob: f64,
    pub target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyProblem {
    /// `d_x × d_θ`, row-major.
    pub projection: Vec<Vec<f64>>,
    pub atoms: Vec<Atom>,
    /// Ridge `μ`; zero makes sampled systems singular when a mask hides
    /// every feature a parameter depends on.
    pub ridge: f64,
    /// Outer data `X_t`, `n × d_x`.
    pub x_t: Vec<Vec<f64>>,
}

/// A problem plus the distilled point and trial settings it is studied at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignedInstance {
    pub problem: ToyProblem,
    pub x_s: Vec<Vec<f64>>,
    pub r: usize,
    pub trials: usize,
    pub seed: u64,
}

/// Instance shipped with the crate, found by a parameter search and checked
/// by the tests below.
pub fn designed_instance() -> DesignedInstance {
    serde_json::from_str(include_str!("../data/bias_instance.json")).expect("embedded instance parses")
}

impl Default for DesignedInstance {
    fn default() -> Self {
        designed_instance()
    }
}

/// Dense row-major matrix helper for the small systems here.
#[derive(Debug, Clone, PartialEq)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::format("rows", "ragged matrix"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    fn matmul(&self, o: &Mat) -> Mat {
        let mut out = Mat::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                for j in 0..o.cols {
                    out.data[i * o.cols + j] += a * o.at(k, j);
                }
            }
        }
        out
    }

    fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ self`.
    fn gram(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.cols);
        for r in 0..self.rows {
            let row = self.row(r);
            for i in 0..self.cols {
                for j in 0..self.cols {
                    out.data[i * self.cols + j] += row[i] * row[j];
                }
            }
        }
        out
    }

    fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-atom quantities at one data matrix.
struct AtomTerms {
    /// `P_ξ = diag(ξ) P`.
    pm: Mat,
    /// `B = X P_ξ`.
    b: Mat,
    /// `(1/N) Bᵀ B`.
    h: Mat,
    /// `(κ/N) Bᵀ 1`.
    g: Vec<f64>,
    target: f64,
}

impl ToyProblem {
    pub fn d_x(&self) -> usize {
        self.projection.len()
    }

    pub fn d_theta(&self) -> usize {
        self.projection.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let (dx, dt) = (self.d_x(), self.d_theta());
        if dx == 0 || dt == 0 || self.projection.iter().any(|r| r.len() != dt) {
            return Err(Error::config("projection must be a non-empty d_x × d_θ matrix"));
        }
        if self.atoms.is_empty() {
            return Err(Error::config("augmentation support is empty"));
        }
        if self.atoms.iter().any(|a| a.mask.len() != dx || !(a.prob >= 0.0) || !a.target.is_finite()) {
            return Err(Error::config("atoms need a d_x mask, a non-negative probability and a finite target"));
        }
        let total: f64 = self.atoms.iter().map(|a| a.prob).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("atom probabilities sum to {total}")));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config("ridge must be non-negative"));
        }
        if self.x_t.is_empty() || self.x_t.iter().any(|r| r.len() != dx) {
            return Err(Error::config("outer data must be a non-empty n × d_x matrix"));
        }
        Ok(())
    }

    pub fn probabilities(&self) -> Vec<f64> {
        self.atoms.iter().map(|a| a.prob).collect()
    }

    fn check_x(&self, x: &[Vec<f64>]) -> Result<Mat> {
        let m = Mat::from_rows(x)?;
        if m.rows == 0 || m.cols != self.d_x() {
            return Err(Error::Dimension {
                op: "toy_problem",
                lhs: vec![m.rows, m.cols],
                rhs: vec![m.rows.max(1), self.d_x()],
            });
        }
        Ok(m)
    }

    fn terms(&self, x: &Mat) -> Result<Vec<AtomTerms>> {
        let p = Mat::from_rows(&self.projection)?;
        let n = x.rows as f64;
        Ok(self
            .atoms
            .iter()
            .map(|a| {
                let mut pm = p.clone();
                for (i, &keep) in a.mask.iter().enumerate() {
                    if !keep {
                        pm.data[i * pm.cols..(i + 1) * pm.cols].fill(0.0);
                    }
                }
                let b = x.matmul(&pm);
                let mut h = b.gram();
                h.data.iter_mut().for_each(|v| *v /= n);
                let g = b.col_sums().into_iter().map(|v| a.target * v / n).collect();
                AtomTerms {
                    pm,
                    b,
                    h,
                    g,
                    target: a.target,
                }
            })
            .collect())
    }

    /// `Σ w_j H_j + μI` and `Σ w_j g_j`.
    fn system(&self, terms: &[AtomTerms], w: &[f64]) -> (Mat, Vec<f64>) {
        let d = self.d_theta();
        let mut h = Mat::zeros(d, d);
        let mut g = vec![0.0; d];
        for (t, &wj) in terms.iter().zip(w) {
            if wj == 0.0 {
                continue;
            }
            h.data.iter_mut().zip(&t.h.data).for_each(|(a, b)| *a += wj * b);
            g.iter_mut().zip(&t.g).for_each(|(a, b)| *a += wj * b);
        }
        for i in 0..d {
            h.data[i * d + i] += self.ridge;
        }
        (h, g)
    }

    /// Gradient of the exact outer loss `Σ p_j ℓ_j(θ, X_t)` at `θ`.
    pub fn outer_gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let xt = self.check_x(&self.x_t)?;
        let (h, g) = self.system(&self.terms(&xt)?, &self.probabilities());
        Ok(h.matvec(theta).iter().zip(&g).map(|(a, b)| a - b).collect())
    }

    /// Exact outer loss `Σ p_j ℓ_j(θ, X_t)`.
    pub fn outer_loss(&self, theta: &[f64]) -> Result<f64> {
        let xt = self.check_x(&self.x_t)?;
        let n = xt.rows as f64;
        let p = Mat::from_rows(&self.projection)?;
        let mut total = 0.5 * self.ridge * dot(theta, theta);
        for a in &self.atoms {
            let mut sq = 0.0;
            for r in 0..xt.rows {
                let mut pred = 0.0;
                for (j, &keep) in a.mask.iter().enumerate() {
                    if keep {
                        pred += xt.at(r, j) * dot(p.row(j), theta);
                    }
                }
                sq += (pred - a.target).powi(2);
            }
            total += a.prob * sq / (2.0 * n);
        }
        Ok(total)
    }

    /// Inner minimizer for atom weights `w`.
    pub fn inner_solution(&self, x_s: &[Vec<f64>], w: &[f64]) -> Result<Vec<f64>> {
        let xs = self.check_x(x_s)?;
        let (h, g) = self.system(&self.terms(&xs)?, w);
        let chol = Cholesky::factor(&h.data, h.rows).ok_or(Error::Singular { jitter: 0.0 })?;
        chol.solve(&g, 1)
    }
}

/// Meta-gradient at one set of atom weights with its ingredients.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedMetaGrad {
    pub theta: Vec<f64>,
    /// Outer gradient at `theta`.
    pub v: Vec<f64>,
    /// `m × d_x` row-major, computed by the adjoint route.
    pub grad: Vec<f64>,
    /// `∂θ/∂X_s`, `d_θ × (m·d_x)` row-major, computed in forward mode.
    pub alpha: Vec<f64>,
}

/// Meta-gradient when the inner problem weights atom `j` by `w[j]`.
/// Returns a singular error when the weighted inner system is not positive
/// definite.
pub fn meta_grad_at_weights(problem: &ToyProblem, x_s: &[Vec<f64>], w: &[f64]) -> Result<WeightedMetaGrad> {
    problem.validate()?;
    if w.len() != problem.atoms.len() {
        return Err(Error::Dimension {
            op: "meta_grad_at_weights",
            lhs: vec![w.len()],
            rhs: vec![problem.atoms.len()],
        });
    }
    let xs = problem.check_x(x_s)?;
    let (m, dx, dt) = (xs.rows, problem.d_x(), problem.d_theta());
    let n = m as f64;
    let terms = problem.terms(&xs)?;
    let (h, g) = problem.system(&terms, w);
    let chol = Cholesky::factor(&h.data, dt).ok_or(Error::Singular { jitter: 0.0 })?;
    let theta = chol.solve(&g, 1)?;
    let v = problem.outer_gradient(&theta)?;
    let u = chol.solve(&v, 1)?;

    // Adjoint: G = Σ_j w_j [(κ_j/N) 1 (P_j u)ᵀ − (1/N)(B_j θ (P_j u)ᵀ + B_j u (P_j θ)ᵀ)].
    let mut grad = vec![0.0; m * dx];
    // Forward: column (i, j) of α is H⁻¹ Σ_a w_a ∂(g_a − H_a θ)/∂X_ij.
    let mut rhs = vec![0.0; dt * m * dx];
    for (t, &wa) in terms.iter().zip(w) {
        if wa == 0.0 {
            continue;
        }
        let pu = t.pm.matvec(&u);
        let pt = t.pm.matvec(&theta);
        let bt = t.b.matvec(&theta);
        let bu = t.b.matvec(&u);
        for i in 0..m {
            for j in 0..dx {
                grad[i * dx + j] += wa * (t.target * pu[j] - bt[i] * pu[j] - bu[i] * pt[j]) / n;
                let col = i * dx + j;
                for k in 0..dt {
                    let d = t.target * t.pm.at(j, k) - t.pm.at(j, k) * bt[i] - t.b.at(i, k) * pt[j];
                    rhs[k * m * dx + col] += wa * d / n;
                }
            }
        }
    }
    let alpha = chol.solve(&rhs, m * dx)?;
    Ok(WeightedMetaGrad { theta, v, grad, alpha })
}

/// Meta-gradient with the inner problem at its exact expectation.
pub fn exact_meta_grad(problem: &ToyProblem, x_s: &[Vec<f64>]) -> Result<WeightedMetaGrad> {
    meta_grad_at_weights(problem, x_s, &problem.probabilities()).map_err(|e| match e {
        Error::Singular { .. } => Error::contract("exact inner Hessian is singular"),
        e => e,
    })
}

/// Counts of `r` i.i.d. atom draws.
fn draw_counts(problem: &ToyProblem, r: usize, rng: &mut RngState) -> Vec<usize> {
    let probs = problem.probabilities();
    let mut counts = vec![0; probs.len()];
    for _ in 0..r {
        counts[rng.categorical(&probs)] += 1;
    }
    counts
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledMetaGrad {
    pub counts: Vec<usize>,
    pub result: WeightedMetaGrad,
    /// Draws discarded because their inner system was singular.
    pub resamples: usize,
}

/// Largest number of consecutive singular draws tolerated.
pub const MAX_RESAMPLES: usize = 1000;

/// Meta-gradient through the minimizer of the average over `r` sampled
/// augmentations. Singular draws are redrawn and counted.
pub fn sampled_meta_grad(problem: &ToyProblem, x_s: &[Vec<f64>], r: usize, rng: &mut RngState) -> Result<SampledMetaGrad> {
    if r == 0 {
        return Err(Error::contract("need at least one sampled augmentation"));
    }
    let mut resamples = 0;
    loop {
        let counts = draw_counts(problem, r, rng);
        let w: Vec<f64> = counts.iter().map(|&c| c as f64 / r as f64).collect();
        match meta_grad_at_weights(problem, x_s, &w) {
            Ok(result) => {
                return Ok(SampledMetaGrad {
                    counts,
                    result,
                    resamples,
                })
            }
            Err(Error::Singular { .. }) if resamples < MAX_RESAMPLES => resamples += 1,
            Err(e) => return Err(e),
        }
    }
}

/// Exact `E_ζ[G(ζ)]` over `r` i.i.d. draws, by enumerating every count
/// vector with its multinomial probability. Singular count vectors are
/// excluded and the remaining mass renormalized, matching the resampling
/// rule of [`sampled_meta_grad`].
pub fn expected_sampled_grad(problem: &ToyProblem, x_s: &[Vec<f64>], r: usize) -> Result<Vec<f64>> {
    problem.validate()?;
    if r == 0 {
        return Err(Error::contract("need at least one sampled augmentation"));
    }
    let k = problem.atoms.len();
    let compositions = binomial_f64(r + k - 1, k - 1);
    if compositions > 2e6 {
        return Err(Error::contract(format!("{compositions} count vectors are too many to enumerate")));
    }
    let log_p: Vec<f64> = problem.probabilities().iter().map(|p| p.ln()).collect();
    let log_fact: Vec<f64> = std::iter::once(0.0)
        .chain((1..=r).scan(0.0, |acc, i| {
            *acc += (i as f64).ln();
            Some(*acc)
        }))
        .collect();
    let dims = problem.check_x(x_s)?;
    let mut total = vec![0.0; dims.rows * dims.cols];
    let mut mass = 0.0;
    let mut counts = vec![0; k];
    let mut visit = |counts: &[usize]| -> Result<()> {
        let mut lp = log_fact[r];
        for (&c, &l) in counts.iter().zip(&log_p) {
            if c > 0 {
                if l == f64::NEG_INFINITY {
                    return Ok(());
                }
                lp += c as f64 * l;
            }
            lp -= log_fact[c];
        }
        let prob = lp.exp();
        if prob == 0.0 {
            return Ok(());
        }
        let w: Vec<f64> = counts.iter().map(|&c| c as f64 / r as f64).collect();
        match meta_grad_at_weights(problem, x_s, &w) {
            Ok(g) => {
                total.iter_mut().zip(&g.grad).for_each(|(t, v)| *t += prob * v);
                mass += prob;
                Ok(())
            }
            Err(Error::Singular { .. }) => Ok(()),
            Err(e) => Err(e),
        }
    };
    compositions_of(r, 0, &mut counts, &mut visit)?;
    if mass <= 0.0 {
        return Err(Error::Singular { jitter: 0.0 });
    }
    Ok(total.into_iter().map(|t| t / mass).collect())
}

fn binomial_f64(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn compositions_of(
    remaining: usize,
    slot: usize,
    counts: &mut Vec<usize>,
    visit: &mut impl FnMut(&[usize]) -> Result<()>,
) -> Result<()> {
    if slot + 1 == counts.len() {
        counts[slot] = remaining;
        return visit(counts);
    }
    for c in 0..=remaining {
        counts[slot] = c;
        compositions_of(remaining - c, slot + 1, counts, visit)?;
    }
    Ok(())
}

/// Monte-Carlo mean and standard error of each coordinate, accumulated in
/// trial order.
#[derive(Debug, Clone)]
struct Moments {
    n: usize,
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self {
            n: 0,
            sum: vec![0.0; len],
            sum_sq: vec![0.0; len],
        }
    }

    fn push(&mut self, x: &[f64]) {
        self.n += 1;
        for ((s, q), &v) in self.sum.iter_mut().zip(self.sum_sq.iter_mut()).zip(x) {
            *s += v;
            *q += v * v;
        }
    }

    fn mean(&self) -> Vec<f64> {
        self.sum.iter().map(|s| s / self.n as f64).collect()
    }

    fn se(&self) -> Vec<f64> {
        let n = self.n as f64;
        self.sum
            .iter()
            .zip(&self.sum_sq)
            .map(|(&s, &q)| {
                let mean = s / n;
                let var = ((q / n - mean * mean) * n / (n - 1.0)).max(0.0);
                (var / n).sqrt()
            })
            .collect()
    }
}

/// Plain inner-gradient control: at a fixed `θ` the sampled gradient is an
/// unbiased estimate of the exact one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlainGradientControl {
    pub exact: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub within_3se: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub r: usize,
    pub trials: usize,
    pub seed: u64,
    pub rows: usize,
    pub cols: usize,
    /// Meta-gradient at the exact inner solution.
    pub exact: Vec<f64>,
    pub mean: Vec<f64>,
    pub se: Vec<f64>,
    pub bias: Vec<f64>,
    pub flags: Vec<bool>,
    /// Exact expectation of the sampled meta-gradient, when enumerable.
    pub expected: Option<Vec<f64>>,
    /// `Σ_k mean(v_k)·mean(α_k)` per coordinate.
    pub product_of_means: Vec<f64>,
    /// `Σ_k cov(v_k, α_k)` per coordinate (population normalization, so the
    /// decomposition is exact on the sample).
    pub covariance: Vec<f64>,
    /// `cov(v_k, α_k)` for each parameter direction `k`.
    pub covariance_by_direction: Vec<Vec<f64>>,
    /// Standard error of each direction's covariance estimate.
    pub covariance_se_by_direction: Vec<Vec<f64>>,
    /// `|mean − (product_of_means + covariance)|`.
    pub residual: Vec<f64>,
    pub resamples: usize,
    pub control: PlainGradientControl,
}

impl BiasReport {
    pub fn max_abs_bias(&self) -> f64 {
        self.bias.iter().fold(0.0, |a, b| a.max(b.abs()))
    }

    pub fn flagged(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    /// Whether every decomposition residual is below `k` standard errors
    /// (with a round-off floor).
    pub fn residual_within(&self, k: f64) -> bool {
        self.residual
            .iter()
            .zip(&self.se)
            .zip(&self.mean)
            .all(|((r, se), m)| *r <= k * se + 1e-12 * m.abs().max(1.0))
    }

    /// Per-coordinate table: `row,col,exact,mean,se,bias,flag`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,exact,mean,se,bias,flag\n");
        for i in 0..self.rows {
            for j in 0..self.cols {
                let c = i * self.cols + j;
                out.push_str(&format!(
                    "{i},{j},{:e},{:e},{:e},{:e},{}\n",
                    self.exact[c], self.mean[c], self.se[c], self.bias[c], self.flags[c]
                ));
            }
        }
        out
    }
}

/// Largest enumeration done automatically for [`BiasReport::expected`].
const ENUMERATION_LIMIT: f64 = 20_000.0;

/// Monte-Carlo estimate of the sampled meta-gradient's mean over `trials`
/// independent draws of `r` augmentations, compared with the exact
/// meta-gradient; also decomposes the mean into product-of-means plus
/// covariance terms and runs the plain-gradient control on the same trials.
pub fn bias_estimate(
    problem: &ToyProblem,
    x_s: &[Vec<f64>],
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<BiasReport> {
    if trials < 2 {
        return Err(Error::contract("need at least two trials for standard errors"));
    }
    let exact = exact_meta_grad(problem, x_s)?;
    let xs = problem.check_x(x_s)?;
    let (rows, cols, dt) = (xs.rows, xs.cols, problem.d_theta());
    let len = rows * cols;
    let terms = problem.terms(&xs)?;
    let (h_exact, g_exact) = problem.system(&terms, &problem.probabilities());
    let theta_ref = exact.theta.clone();
    let plain_exact: Vec<f64> = h_exact.matvec(&theta_ref).iter().zip(&g_exact).map(|(a, b)| a - b).collect();

    let mut root = RngState::new(seed);
    let mut grads = Moments::new(len);
    let mut plain = Moments::new(dt);
    let mut v_sum = vec![0.0; dt];
    let mut alpha_sum = vec![0.0; dt * len];
    let mut va_sum = vec![0.0; dt * len];
    let mut va_sq = vec![0.0; dt * len];
    let mut resamples = 0;
    let mut samples: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut rng = root.split();
        let s = sampled_meta_grad(problem, x_s, r, &mut rng)?;
        resamples += s.resamples;
        let g = &s.result;
        grads.push(&g.grad);
        let w: Vec<f64> = s.counts.iter().map(|&c| c as f64 / r as f64).collect();
        let (h, gv) = problem.system(&terms, &w);
        let pg: Vec<f64> = h.matvec(&theta_ref).iter().zip(&gv).map(|(a, b)| a - b).collect();
        plain.push(&pg);
        for k in 0..dt {
            v_sum[k] += g.v[k];
            for c in 0..len {
                alpha_sum[k * len + c] += g.alpha[k * len + c];
                let prod = g.v[k] * g.alpha[k * len + c];
                va_sum[k * len + c] += prod;
            }
        }
        samples.push((g.v.clone(), g.alpha.clone()));
    }
    let t = trials as f64;
    let v_mean: Vec<f64> = v_sum.iter().map(|s| s / t).collect();
    let alpha_mean: Vec<f64> = alpha_sum.iter().map(|s| s / t).collect();
    // Second pass for the spread of the centered products.
    for (v, alpha) in &samples {
        for k in 0..dt {
            for c in 0..len {
                let d = (v[k] - v_mean[k]) * (alpha[k * len + c] - alpha_mean[k * len + c]);
                va_sq[k * len + c] += d * d;
            }
        }
    }
    let mut product_of_means = vec![0.0; len];
    let mut covariance = vec![0.0; len];
    let mut covariance_by_direction = vec![vec![0.0; len]; dt];
    let mut covariance_se_by_direction = vec![vec![0.0; len]; dt];
    for k in 0..dt {
        for c in 0..len {
            let pm = v_mean[k] * alpha_mean[k * len + c];
            let cov = va_sum[k * len + c] / t - pm;
            product_of_means[c] += pm;
            covariance[c] += cov;
            covariance_by_direction[k][c] = cov;
            let var = (va_sq[k * len + c] / t - cov * cov).max(0.0) * t / (t - 1.0);
            covariance_se_by_direction[k][c] = (var / t).sqrt();
        }
    }
    let mean = grads.mean();
    let se = grads.se();
    let bias: Vec<f64> = mean.iter().zip(&exact.grad).map(|(a, b)| a - b).collect();
    let scale = exact.grad.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let flags = bias.iter().zip(&se).map(|(b, s)| b.abs() > 3.0 * s + 1e-12 * scale).collect();
    let residual = mean
        .iter()
        .zip(product_of_means.iter().zip(&covariance))
        .map(|(m, (p, c))| (m - (p + c)).abs())
        .collect();
    let k = problem.atoms.len();
    let expected = if binomial_f64(r + k - 1, k - 1) <= ENUMERATION_LIMIT {
        Some(expected_sampled_grad(problem, x_s, r)?)
    } else {
        None
    };
    let plain_mean = plain.mean();
    let plain_se = plain.se();
    let within_3se = plain_mean
        .iter()
        .zip(&plain_exact)
        .zip(&plain_se)
        .all(|((m, e), s)| (m - e).abs() <= 3.0 * s + 1e-12 * e.abs().max(1.0));
    Ok(BiasReport {
        r,
        trials,
        seed,
        rows,
        cols,
        exact: exact.grad,
        mean,
        se,
        bias,
        flags,
        expected,
        product_of_means,
        covariance,
        covariance_by_direction,
        covariance_se_by_direction,
        residual,
        resamples,
        control: PlainGradientControl {
            exact: plain_exact,
            mean: plain_mean,
            se: plain_se,
            within_3se,
        },
    })
}

/// Decomposition residuals `|mean − (product_of_means + covariance)|` per
/// coordinate, from the same trials as [`bias_estimate`].
pub fn covariance_decomposition_check(
    problem: &ToyProblem,
    x_s: &[Vec<f64>],
    r: usize,
    trials: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    Ok(bias_estimate(problem, x_s, r, trials, seed)?.residual)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::compare_with_central_differences;
    use crate::tensor::Tensor;
    use nalgebra::{DMatrix, DVector};

    fn instance() -> DesignedInstance {
        designed_instance()
    }

    /// Every atom collapsed onto one with probability 1.
    fn deterministic(problem: &ToyProblem) -> ToyProblem {
        ToyProblem {
            atoms: vec![Atom {
                prob: 1.0,
                ..problem.atoms[0].clone()
            }],
            ..problem.clone()
        }
    }

    /// Inner minimizer and meta-gradient by explicit matrices and inverses.
    fn brute_force(problem: &ToyProblem, x_s: &[Vec<f64>], w: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
        let dx = problem.d_x();
        let dt = problem.d_theta();
        let m = x_s.len();
        let p = DMatrix::from_row_slice(dx, dt, &problem.projection.concat());
        let xs = DMatrix::from_row_slice(m, dx, &x_s.concat());
        let xt = DMatrix::from_row_slice(problem.x_t.len(), dx, &problem.x_t.concat());
        let masked = |a: &Atom| {
            DMatrix::from_diagonal(&DVector::from_iterator(dx, a.mask.iter().map(|&k| if k { 1.0 } else { 0.0 }))) * &p
        };
        let system = |x: &DMatrix<f64>, w: &[f64]| {
            let n = x.nrows() as f64;
            let mut h = DMatrix::identity(dt, dt) * problem.ridge;
            let mut g = DVector::zeros(dt);
            for (a, &wj) in problem.atoms.iter().zip(w) {
                let b = x * masked(a);
                h += b.transpose() * &b * (wj / n);
                g += b.transpose() * DVector::from_element(x.nrows(), a.target) * (wj / n);
            }
            (h, g)
        };
        let (h, g) = system(&xs, w);
        let hinv = h.clone().try_inverse().unwrap();
        let theta = &hinv * g;
        let (ht, gt) = system(&xt, &problem.probabilities());
        let v = ht * &theta - gt;
        let n = m as f64;
        let mut grad = DMatrix::zeros(m, dx);
        for i in 0..m {
            for j in 0..dx {
                let mut e = DMatrix::zeros(m, dx);
                e[(i, j)] = 1.0;
                let mut dh = DMatrix::zeros(dt, dt);
                let mut dg = DVector::zeros(dt);
                for (a, &wj) in problem.atoms.iter().zip(w) {
                    let pm = masked(a);
                    dh += (pm.transpose() * (e.transpose() * &xs + xs.transpose() * &e) * &pm) * (wj / n);
                    dg += pm.transpose() * e.transpose() * DVector::from_element(m, a.target) * (wj / n);
                }
                let dtheta = &hinv * (dg - dh * &theta);
                grad[(i, j)] = v.dot(&dtheta);
            }
        }
        (theta, grad)
    }

    #[test]
    fn instance_is_valid_and_has_a_null_direction() {
        let inst = instance();
        inst.problem.validate().unwrap();
        assert_eq!(inst.problem.d_theta(), 3);
        assert_eq!(inst.problem.d_x(), 4);
        assert_eq!(inst.x_s.len(), 2);
        assert_eq!(inst.problem.atoms.len(), 2);
        assert_eq!(inst.problem.probabilities(), vec![0.3, 0.7]);
        assert!((0..3).any(|k| inst.problem.projection.iter().all(|row| row[k] == 0.0)));
    }

    #[test]
    fn adjoint_and_forward_routes_agree() {
        let inst = instance();
        for w in [vec![0.3, 0.7], vec![1.0, 0.0], vec![0.5, 0.5]] {
            let g = meta_grad_at_weights(&inst.problem, &inst.x_s, &w).unwrap();
            let len = g.grad.len();
            for c in 0..len {
                let fwd: f64 = (0..3).map(|k| g.v[k] * g.alpha[k * len + c]).sum();
                assert!((fwd - g.grad[c]).abs() < 1e-12 * g.grad[c].abs().max(1.0));
            }
        }
    }

    #[test]
    fn exact_gradient_matches_finite_differences() {
        let inst = instance();
        let g = exact_meta_grad(&inst.problem, &inst.x_s).unwrap();
        let x0 = Tensor::<f64>::from_rows(&inst.x_s);
        let f = |x: &Tensor<f64>| {
            let rows: Vec<Vec<f64>> = (0..x.rows()).map(|i| x.row(i).to_vec()).collect();
            let theta = inst.problem.inner_solution(&rows, &inst.problem.probabilities())?;
            inst.problem.outer_loss(&theta)
        };
        let analytic = Tensor::new(vec![2, 4], g.grad.clone()).unwrap();
        let r = compare_with_central_differences(f, &x0, &analytic, 1e-6).unwrap();
        assert!(r.passes(1e-7), "{r:?}");
    }

    #[test]
    fn outer_gradient_matches_outer_loss() {
        let inst = instance();
        let theta = vec![0.3, -0.2, 0.5];
        let g = inst.problem.outer_gradient(&theta).unwrap();
        let f = |t: &Tensor<f64>| inst.problem.outer_loss(t.data());
        let r = compare_with_central_differences(f, &Tensor::new(vec![3], theta.clone()).unwrap(), &Tensor::new(vec![3], g).unwrap(), 1e-6)
            .unwrap();
        assert!(r.passes(1e-7), "{r:?}");
    }

    #[test]
    fn zero_targets_give_zero_gradient() {
        let mut p = instance().problem;
        p.atoms.iter_mut().for_each(|a| a.target = 0.0);
        let g = exact_meta_grad(&p, &instance().x_s).unwrap();
        assert!(g.theta.iter().all(|&t| t == 0.0));
        assert!(g.grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_atom_pathways_coincide() {
        let inst = instance();
        let p = deterministic(&inst.problem);
        let exact = exact_meta_grad(&p, &inst.x_s).unwrap();
        let s = sampled_meta_grad(&p, &inst.x_s, 1, &mut RngState::new(0)).unwrap();
        for (a, b) in exact.grad.iter().zip(&s.result.grad) {
            assert!((a - b).abs() < 1e-10);
        }
        let rep = bias_estimate(&p, &inst.x_s, 2, 200, 0).unwrap();
        assert_eq!(rep.flagged(), 0);
        assert!(rep.covariance.iter().all(|&c| c.abs() < 1e-12 * rep.mean.iter().fold(1.0f64, |a, m| a.max(m.abs()))));
    }

    #[test]
    fn stratified_weights_reproduce_exact() {
        let inst = instance();
        // r = 10 with counts 3 / 7 has frequencies equal to the probabilities.
        let exact = exact_meta_grad(&inst.problem, &inst.x_s).unwrap();
        let strat = meta_grad_at_weights(&inst.problem, &inst.x_s, &[3.0 / 10.0, 7.0 / 10.0]).unwrap();
        for (a, b) in exact.grad.iter().zip(&strat.grad) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn sampled_gradient_is_deterministic_and_matches_brute_force() {
        let inst = instance();
        let mut rng = RngState::new(5);
        for _ in 0..50 {
            let mut a = rng.split();
            let mut b = a;
            let s = sampled_meta_grad(&inst.problem, &inst.x_s, inst.r, &mut a).unwrap();
            assert_eq!(s, sampled_meta_grad(&inst.problem, &inst.x_s, inst.r, &mut b).unwrap());
            let w: Vec<f64> = s.counts.iter().map(|&c| c as f64 / inst.r as f64).collect();
            let (theta, grad) = brute_force(&inst.problem, &inst.x_s, &w);
            for k in 0..3 {
                assert!((theta[k] - s.result.theta[k]).abs() < 1e-10);
            }
            for i in 0..2 {
                for j in 0..4 {
                    assert!((grad[(i, j)] - s.result.grad[i * 4 + j]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn singular_draws_are_counted() {
        // Without a ridge, an atom hiding every feature leaves θ undetermined.
        let inst = instance();
        let mut p = inst.problem.clone();
        p.ridge = 0.0;
        p.atoms = vec![
            Atom {
                mask: vec![false; 4],
                prob: 0.5,
                target: 1.0,
            },
            Atom {
                mask: vec![true; 4],
                prob: 0.5,
                target: 1.0,
            },
        ];
        p.projection.iter_mut().for_each(|row| row[2] = 1.0);
        let mut rng = RngState::new(0);
        let mut total = 0;
        for _ in 0..20 {
            let s = sampled_meta_grad(&p, &[vec![1.0, 0.5, -0.3, 0.2], vec![0.1, -1.0, 0.4, 0.9], vec![0.7, 0.2, 0.2, -0.5]], 1, &mut rng)
                .unwrap();
            assert_eq!(s.counts, vec![0, 1]);
            total += s.resamples;
        }
        assert!(total > 0);
    }

    #[test]
    fn exact_expectation_enumeration_matches_brute_force_sum() {
        let inst = instance();
        let r = 3;
        let got = expected_sampled_grad(&inst.problem, &inst.x_s, r).unwrap();
        let mut want = vec![0.0; 8];
        for k in 0..=r {
            let prob = binomial_f64(r, k) * 0.3f64.powi(k as i32) * 0.7f64.powi((r - k) as i32);
            let (_, g) = brute_force(&inst.problem, &inst.x_s, &[k as f64 / r as f64, (r - k) as f64 / r as f64]);
            for c in 0..8 {
                want[c] += prob * g[(c / 4, c % 4)];
            }
        }
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn designed_instance_is_biased_at_small_r() {
        let inst = instance();
        let rep = bias_estimate(&inst.problem, &inst.x_s, inst.r, inst.trials, inst.seed).unwrap();
        assert!(rep.flagged() >= 1, "{rep:?}");
        assert!(rep.control.within_3se);
        assert!(rep.residual_within(4.0));
        assert_eq!(rep.resamples, 0);
        let null = (0..3).find(|&k| inst.problem.projection.iter().all(|row| row[k] == 0.0)).unwrap();
        for (c, se) in rep.covariance_by_direction[null].iter().zip(&rep.covariance_se_by_direction[null]) {
            assert!(c.abs() <= 3.0 * se + 1e-15);
        }
        let big = bias_estimate(&inst.problem, &inst.x_s, 10_000, 2_000, inst.seed).unwrap();
        assert!(big.max_abs_bias() < rep.max_abs_bias());
    }

    #[test]
    fn exact_bias_shrinks_with_r() {
        let inst = instance();
        let exact = exact_meta_grad(&inst.problem, &inst.x_s).unwrap().grad;
        let mut last = f64::INFINITY;
        for r in [2, 8, 32, 128] {
            let e = expected_sampled_grad(&inst.problem, &inst.x_s, r).unwrap();
            let bias = e.iter().zip(&exact).fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
            assert!(bias <= last, "r = {r}: {bias} > {last}");
            last = bias;
        }
    }

    proptest::proptest! {
        #[test]
        fn weighted_solution_is_stationary(a in 0.0f64..1.0) {
            let inst = instance();
            let w = [a, 1.0 - a];
            let g = meta_grad_at_weights(&inst.problem, &inst.x_s, &w).unwrap();
            let xs = inst.problem.check_x(&inst.x_s).unwrap();
            let (h, b) = inst.problem.system(&inst.problem.terms(&xs).unwrap(), &w);
            for (hv, bv) in h.matvec(&g.theta).iter().zip(&b) {
                proptest::prop_assert!((hv - bv).abs() < 1e-10);
            }
            let len = g.grad.len();
            for c in 0..len {
                let fwd: f64 = (0..3).map(|k| g.v[k] * g.alpha[k * len + c]).sum();
                proptest::prop_assert!((fwd - g.grad[c]).abs() < 1e-10);
            }
            // The null direction stays at zero whatever the weights.
            proptest::prop_assert_eq!(g.theta[2], 0.0);
        }
    }
}

//! Dense linear algebra used across the crate: Mahalanobis norms, regularized
//! design matrices with rank-one updates, orthonormalization, and the
//! low-rank multi-task least-squares solver.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("matrix is rank deficient")]
    RankDeficient,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

// ---------------------------------------------------------------------------
// Norms and design matrices
// ---------------------------------------------------------------------------

/// `sqrt(x^T A x)` for symmetric positive-definite `A`.
pub fn mahalanobis_norm(x: &DVector<f64>, a: &DMatrix<f64>) -> Result<f64> {
    if a.nrows() != a.ncols() || a.nrows() != x.len() {
        return Err(LinalgError::DimensionMismatch(format!(
            "vector of length {} against {}x{} matrix",
            x.len(),
            a.nrows(),
            a.ncols()
        )));
    }
    if !x.iter().chain(a.iter()).all(|v| v.is_finite()) {
        return Err(LinalgError::NonFinite("mahalanobis_norm input"));
    }
    if a.clone().cholesky().is_none() {
        return Err(LinalgError::NotPositiveDefinite);
    }
    Ok(x.dot(&(a * x)).max(0.0).sqrt())
}

/// `lambda I + sum x x^T` together with its inverse and log-determinant.
#[derive(Debug, Clone)]
pub struct DesignState {
    pub lambda: f64,
    pub v: DMatrix<f64>,
    pub v_inv: DMatrix<f64>,
    pub logdet: f64,
    pub count: usize,
}

impl DesignState {
    pub fn new(d: usize, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(LinalgError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
        }
        Ok(Self {
            lambda,
            v: DMatrix::identity(d, d) * lambda,
            v_inv: DMatrix::identity(d, d) / lambda,
            logdet: d as f64 * lambda.ln(),
            count: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.v.nrows()
    }

    /// Sherman-Morrison rank-one update.
    pub fn update(&mut self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim() {
            return Err(LinalgError::DimensionMismatch(format!("update with length {} on dim {}", x.len(), self.dim())));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(LinalgError::NonFinite("design update"));
        }
        let vx = &self.v_inv * x;
        let denom = 1.0 + x.dot(&vx);
        self.v_inv -= (&vx * vx.transpose()) / denom;
        // keep the inverse exactly symmetric
        self.v_inv = (&self.v_inv + self.v_inv.transpose()) * 0.5;
        self.v += x * x.transpose();
        self.logdet += denom.ln();
        self.count += 1;
        Ok(())
    }

    /// `x^T V^{-1} x`
    pub fn inv_norm_sq(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.v_inv * x)).max(0.0)
    }

    /// `x^T V x`
    pub fn norm_sq(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.v * x)).max(0.0)
    }
}

// ---------------------------------------------------------------------------
// Orthonormal bases
// ---------------------------------------------------------------------------

/// Orthonormal basis for the column span of a full-column-rank `b`.
pub fn orthonormalize(b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if b.ncols() > b.nrows() {
        return Err(LinalgError::RankDeficient);
    }
    if !b.iter().all(|v| v.is_finite()) {
        return Err(LinalgError::NonFinite("orthonormalize input"));
    }
    let scale = b.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return Err(LinalgError::RankDeficient);
    }
    let qr = b.clone().qr();
    let r = qr.r();
    for j in 0..b.ncols() {
        if r[(j, j)].abs() <= 1e-12 * scale {
            return Err(LinalgError::RankDeficient);
        }
    }
    Ok(qr.q())
}

/// Modified Gram-Schmidt; columns that vanish are replaced by the canonical
/// vector with the largest residual, so the result always has orthonormal
/// columns spanning a superset of `span(b)`.
pub fn orthonormal_complete(b: &DMatrix<f64>) -> DMatrix<f64> {
    let (d, k) = b.shape();
    assert!(k <= d, "cannot build {k} orthonormal columns in dimension {d}");
    let scale = b.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let tol = 1e-10 * scale.max(1e-300);
    let mut q = DMatrix::<f64>::zeros(d, k);
    for j in 0..k {
        let mut v: DVector<f64> = b.column(j).into_owned();
        for _ in 0..2 {
            for p in 0..j {
                let proj = q.column(p).dot(&v);
                v.axpy(-proj, &q.column(p), 1.0);
            }
        }
        let n = v.norm();
        if n > tol && scale > 0.0 {
            q.set_column(j, &(v / n));
            continue;
        }
        let mut best = DVector::zeros(d);
        let mut best_norm = -1.0;
        for e in 0..d {
            let mut c = DVector::zeros(d);
            c[e] = 1.0;
            for _ in 0..2 {
                for p in 0..j {
                    let proj = q.column(p).dot(&c);
                    c.axpy(-proj, &q.column(p), 1.0);
                }
            }
            let cn = c.norm();
            if cn > best_norm + 1e-12 {
                best_norm = cn;
                best = c;
            }
        }
        q.set_column(j, &(best / best_norm));
    }
    q
}

pub fn random_orthonormal<R: Rng + ?Sized>(d: usize, k: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, k, |_, _| rng.sample::<f64, _>(StandardNormal));
    orthonormal_complete(&g)
}

pub fn canonical_basis(d: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d, k, |r, c| if r == c { 1.0 } else { 0.0 })
}

// ---------------------------------------------------------------------------
// Small symmetric solves
// ---------------------------------------------------------------------------

/// Minimum-norm solution of `A x = c` for symmetric PSD `A`.
pub fn sym_pinv_solve(a: &DMatrix<f64>, c: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * lmax.max(1e-300);
    let ct = eig.eigenvectors.transpose() * c;
    let z = DVector::from_fn(ct.len(), |j, _| {
        let l = eig.eigenvalues[j];
        if l > tol {
            ct[j] / l
        } else {
            0.0
        }
    });
    &eig.eigenvectors * z
}

/// Minimizer of `w^T A w - 2 c^T w` subject to `||w|| <= radius`, with `A`
/// symmetric PSD. When the unconstrained problem has several minimizers the
/// minimum-norm one is used.
pub fn trust_region(a: &DMatrix<f64>, c: &DVector<f64>, radius: f64) -> DVector<f64> {
    let n = c.len();
    if c.norm() == 0.0 {
        return DVector::zeros(n);
    }
    let eig = SymmetricEigen::new(a.clone());
    let lmax = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = 1e-12 * lmax.max(1e-300);
    let ct = eig.eigenvectors.transpose() * c;
    let lam: Vec<f64> = eig.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let free = DVector::from_fn(n, |j, _| if lam[j] > tol { ct[j] / lam[j] } else { 0.0 });
    if !radius.is_finite() || free.norm() <= radius {
        return &eig.eigenvectors * free;
    }
    let norm_at = |mu: f64| -> f64 { (0..n).map(|j| (ct[j] / (lam[j] + mu)).powi(2)).sum::<f64>().sqrt() };
    let mut lo = 0.0;
    let mut hi = ct.norm() / radius.max(1e-300);
    while norm_at(hi) > radius {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if norm_at(mid) > radius {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let z = DVector::from_fn(n, |j, _| ct[j] / (lam[j] + hi));
    &eig.eigenvectors * z
}

// ---------------------------------------------------------------------------
// Low-rank multi-task least squares
// ---------------------------------------------------------------------------

/// Sufficient statistics of one task's regression data.
#[derive(Debug, Clone)]
pub struct TaskStats {
    pub gram: DMatrix<f64>,
    pub xy: DVector<f64>,
    pub yy: f64,
    pub count: usize,
}

impl TaskStats {
    pub fn new(d: usize) -> Self {
        Self { gram: DMatrix::zeros(d, d), xy: DVector::zeros(d), yy: 0.0, count: 0 }
    }

    /// From a `d x t` design (one column per sample) and `t` targets.
    pub fn from_history(x: &DMatrix<f64>, y: &DVector<f64>) -> Result<Self> {
        if x.ncols() != y.len() {
            return Err(LinalgError::DimensionMismatch(format!("{} samples but {} targets", x.ncols(), y.len())));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(LinalgError::NonFinite("regression history"));
        }
        Ok(Self { gram: x * x.transpose(), xy: x * y, yy: y.dot(y), count: y.len() })
    }

    pub fn push(&mut self, x: &DVector<f64>, y: f64) {
        self.gram.ger(1.0, x, x, 1.0);
        self.xy.axpy(y, x, 1.0);
        self.yy += y * y;
        self.count += 1;
    }

    pub fn dim(&self) -> usize {
        self.xy.len()
    }

    /// Squared residual of the linear predictor `theta`.
    pub fn residual(&self, theta: &DVector<f64>) -> f64 {
        (self.yy - 2.0 * self.xy.dot(theta) + theta.dot(&(&self.gram * theta))).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct SolverOptions {
    /// Random orthonormal initializations on top of the spectral one.
    pub restarts: usize,
    pub max_iter: usize,
    pub rel_tol: f64,
    pub seed: u64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { restarts: 5, max_iter: 200, rel_tol: 1e-9, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct LowRankSolution {
    /// `d x k`, orthonormal columns.
    pub b: DMatrix<f64>,
    /// `k x M`, one weight column per task.
    pub w: DMatrix<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective after each accepted iteration of the winning start.
    pub trace: Vec<f64>,
}

impl LowRankSolution {
    /// `d x M` parameter matrix `B W`.
    pub fn theta(&self) -> DMatrix<f64> {
        &self.b * &self.w
    }

    pub fn theta_col(&self, i: usize) -> DVector<f64> {
        &self.b * self.w.column(i)
    }
}

/// Joint objective `sum_i ||y_i - X_i^T B w_i||^2`.
pub fn lowrank_objective(stats: &[TaskStats], b: &DMatrix<f64>, w: &DMatrix<f64>) -> f64 {
    stats.iter().enumerate().map(|(i, s)| s.residual(&(b * w.column(i)))).sum()
}

/// Best weights for a fixed orthonormal `b`, each `||b w_i|| <= norm_bound`.
pub fn fit_weights(stats: &[TaskStats], b: &DMatrix<f64>, norm_bound: f64) -> DMatrix<f64> {
    let k = b.ncols();
    let mut w = DMatrix::zeros(k, stats.len());
    for (i, s) in stats.iter().enumerate() {
        if s.count == 0 {
            continue;
        }
        let a = b.transpose() * &s.gram * b;
        let c = b.transpose() * &s.xy;
        w.set_column(i, &trust_region(&a, &c, norm_bound));
    }
    w
}

fn b_step(stats: &[TaskStats], w: &DMatrix<f64>, d: usize) -> Option<DMatrix<f64>> {
    let k = w.nrows();
    let n = d * k;
    let mut big = DMatrix::<f64>::zeros(n, n);
    let mut rhs = DMatrix::<f64>::zeros(d, k);
    for (i, s) in stats.iter().enumerate() {
        if s.count == 0 {
            continue;
        }
        let wi = w.column(i);
        for p in 0..k {
            for q in 0..k {
                let f = wi[p] * wi[q];
                if f != 0.0 {
                    let mut blk = big.view_mut((p * d, q * d), (d, d));
                    blk += &s.gram * f;
                }
            }
        }
        rhs += &s.xy * wi.transpose();
    }
    let rhs = DVector::from_column_slice(rhs.as_slice());
    let sol = match big.clone().cholesky() {
        Some(ch) => {
            let x = ch.solve(&rhs);
            if x.iter().all(|v| v.is_finite()) {
                x
            } else {
                sym_pinv_solve(&big, &rhs)
            }
        }
        None => sym_pinv_solve(&big, &rhs),
    };
    if !sol.iter().all(|v| v.is_finite()) {
        return None;
    }
    Some(DMatrix::from_column_slice(d, k, sol.as_slice()))
}

fn alternate(stats: &[TaskStats], b0: DMatrix<f64>, norm_bound: f64, opts: &SolverOptions) -> LowRankSolution {
    let d = b0.nrows();
    let mut b = b0;
    let mut w = fit_weights(stats, &b, norm_bound);
    let mut f = lowrank_objective(stats, &b, &w);
    let mut trace = vec![f];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..opts.max_iter {
        if f <= 1e-300 {
            converged = true;
            break;
        }
        let Some(bn) = b_step(stats, &w, d) else {
            converged = true;
            break;
        };
        let q = orthonormal_complete(&bn);
        let wn = fit_weights(stats, &q, norm_bound);
        let fnew = lowrank_objective(stats, &q, &wn);
        if !(fnew <= f) {
            // the norm bound can make a step uphill; stop at the last feasible point
            converged = true;
            break;
        }
        iterations += 1;
        let rel = (f - fnew) / f.max(1e-300);
        b = q;
        w = wn;
        f = fnew;
        trace.push(f);
        if rel < opts.rel_tol {
            converged = true;
            break;
        }
    }
    LowRankSolution { b, w, objective: f, iterations, converged, trace }
}

fn spectral_init(stats: &[TaskStats], k: usize) -> DMatrix<f64> {
    let d = stats[0].dim();
    let m = stats.len();
    let mut theta = DMatrix::zeros(d, m);
    for (i, s) in stats.iter().enumerate() {
        if s.count > 0 {
            theta.set_column(i, &sym_pinv_solve(&s.gram, &s.xy));
        }
    }
    let svd = theta.svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let mut b = DMatrix::zeros(d, k);
    for (j, &idx) in order.iter().take(k).enumerate() {
        if svd.singular_values[idx] > 0.0 {
            b.set_column(j, &u.column(idx));
        }
    }
    orthonormal_complete(&b)
}

/// Minimizes `sum_i ||y_i - X_i^T B w_i||^2` over orthonormal `d x k` matrices
/// `B` and weights with `||B w_i|| <= norm_bound` by alternating minimization.
/// Starts: the warm start (if any), the top-k left singular vectors of the
/// stacked per-task least-squares solutions, and `opts.restarts` random bases.
pub fn solve_lowrank_stats(
    stats: &[TaskStats],
    k: usize,
    norm_bound: f64,
    opts: &SolverOptions,
    warm: Option<&DMatrix<f64>>,
) -> Result<LowRankSolution> {
    if stats.is_empty() {
        return Err(LinalgError::InvalidParameter("no tasks".into()));
    }
    let d = stats[0].dim();
    if k == 0 || k > d {
        return Err(LinalgError::InvalidParameter(format!("rank {k} outside 1..={d}")));
    }
    if !(norm_bound > 0.0) {
        return Err(LinalgError::InvalidParameter(format!("norm bound must be positive, got {norm_bound}")));
    }
    for s in stats {
        if s.dim() != d || s.gram.nrows() != d {
            return Err(LinalgError::DimensionMismatch("tasks disagree on feature dimension".into()));
        }
        if !s.gram.iter().chain(s.xy.iter()).all(|v| v.is_finite()) || !s.yy.is_finite() {
            return Err(LinalgError::NonFinite("regression history"));
        }
    }
    let m = stats.len();
    if stats.iter().all(|s| s.count == 0) {
        return Ok(LowRankSolution {
            b: canonical_basis(d, k),
            w: DMatrix::zeros(k, m),
            objective: 0.0,
            iterations: 0,
            converged: true,
            trace: vec![0.0],
        });
    }
    let mut starts = Vec::with_capacity(opts.restarts + 2);
    if let Some(b) = warm {
        if b.shape() == (d, k) && b.iter().all(|v| v.is_finite()) {
            starts.push(orthonormal_complete(b));
        }
    }
    starts.push(spectral_init(stats, k));
    let mut rng = crate::rng::stream(opts.seed, "lowrank-init", d as u64, k as u64);
    for _ in 0..opts.restarts {
        starts.push(random_orthonormal(d, k, &mut rng));
    }
    let mut best: Option<LowRankSolution> = None;
    for b0 in starts {
        let sol = alternate(stats, b0, norm_bound, opts);
        if best.as_ref().is_none_or(|b| sol.objective < b.objective) {
            best = Some(sol);
        }
    }
    Ok(best.expect("at least one start"))
}

/// Convenience wrapper over raw histories: `(X_i, y_i)` with `X_i` of shape
/// `d x t_i`.
pub fn solve_lowrank_ls(
    histories: &[(DMatrix<f64>, DVector<f64>)],
    k: usize,
    norm_bound: f64,
    opts: &SolverOptions,
) -> Result<LowRankSolution> {
    let stats = histories.iter().map(|(x, y)| TaskStats::from_history(x, y)).collect::<Result<Vec<_>>>()?;
    solve_lowrank_stats(&stats, k, norm_bound, opts, None)
}

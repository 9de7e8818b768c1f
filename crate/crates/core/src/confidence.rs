//! Confidence radii and the statistics checked against them.
//!
//! All logarithms are natural.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::DesignState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfidenceError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

pub type Result<T> = std::result::Result<T, ConfidenceError>;

fn check_delta(delta: f64) -> Result<()> {
    if delta > 0.0 && delta <= 1.0 {
        Ok(())
    } else {
        Err(ConfidenceError::InvalidParameter(format!("delta must lie in (0, 1], got {delta}")))
    }
}

fn check_counts(m: usize, k: usize, d: usize, t: usize) -> Result<()> {
    if m == 0 || k == 0 || d == 0 || t == 0 {
        return Err(ConfidenceError::InvalidParameter("M, k, d and T must be positive".into()));
    }
    if k > d {
        return Err(ConfidenceError::InvalidParameter(format!("rank {k} exceeds dimension {d}")));
    }
    Ok(())
}

/// Joint radius `L` for the multi-task low-rank confidence set
/// `sum_i ||theta_hat_i - theta_i||^2_{V_i} <= L`.
pub fn bandit_radius(m: usize, k: usize, d: usize, t: usize, delta: f64) -> Result<f64> {
    check_counts(m, k, d, t)?;
    check_delta(delta)?;
    let (mf, kf, df, tf) = (m as f64, k as f64, d as f64, t as f64);
    Ok(48.0 * (mf * kf + 5.0 * kf * df * (kf * mf * tf).ln()) + 32.0 * (4.0 * mf * tf).ln() + 76.0 * (1.0 / delta).ln())
}

/// Radius under per-task misspecification of sup-norm `zeta`.
pub fn misspecified_radius(l: f64, m: usize, t: usize, zeta: f64) -> Result<f64> {
    if !(zeta >= 0.0) || !zeta.is_finite() {
        return Err(ConfidenceError::InvalidParameter(format!("zeta must be non-negative, got {zeta}")));
    }
    Ok(2.0 * l + 32.0 * m as f64 * t as f64 * zeta * zeta)
}

/// Textbook single-task OFUL radius `beta_t` (squared), used by the
/// independent baseline with a per-task failure probability.
pub fn indep_oful_radius(d: usize, t: usize, lambda: f64, param_bound: f64, delta: f64) -> Result<f64> {
    check_delta(delta)?;
    if !(lambda > 0.0) {
        return Err(ConfidenceError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let df = d as f64;
    let inner = 2.0 * (1.0 / delta).ln() + df * (1.0 + t as f64 / (lambda * df)).ln();
    Ok((lambda.sqrt() * param_bound + inner.sqrt()).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlRadii {
    pub f1: f64,
    pub f2: f64,
    pub alpha: f64,
}

/// Radius of the optimistic program for multi-task LSVI. `ibe` is the
/// inherent Bellman error, `param_bound` the norm bound on value parameters.
pub fn rl_radii(
    m: usize,
    k: usize,
    d: usize,
    t: usize,
    delta: f64,
    ibe: f64,
    param_bound: f64,
    lambda: f64,
) -> Result<RlRadii> {
    check_counts(m, k, d, t)?;
    check_delta(delta)?;
    if !(ibe >= 0.0) || !(param_bound > 0.0) || !(lambda > 0.0) {
        return Err(ConfidenceError::InvalidParameter("ibe >= 0, param bound > 0 and lambda > 0 required".into()));
    }
    let (mf, kf, df, tf) = (m as f64, k as f64, d as f64, t as f64);
    let lk = (kf * mf * tf).ln();
    let lm = (mf * tf).ln();
    let ld = (2.0 / delta).ln();
    let f1 = (9.0 * kf * df * lk + 5.0 * mf * kf * lm + 2.0 * ld).sqrt();
    let f2 = (4.0 * kf * df * lk + 5.0 * mf * kf * lm + 2.0 * ld).sqrt()
        + (kf + 5.0 * kf * df * lk + 2.0 * mf * kf * lm + ld).sqrt();
    let alpha = (2.0 * (mf * tf).sqrt() * ibe + 2.0 * f1 + (2.0 * f2 + 4.0 * mf * param_bound * param_bound * lambda).sqrt())
        .powi(2);
    Ok(RlRadii { f1, f2, alpha })
}

/// `sum_i ||theta_hat_i - theta_i||^2_{V_i}` and whether it is within `radius`.
/// Parameters are `d x M`, one column per task.
pub fn membership(
    theta_hat: &DMatrix<f64>,
    theta_true: &DMatrix<f64>,
    designs: &[DesignState],
    radius: f64,
) -> Result<(bool, f64)> {
    if theta_hat.shape() != theta_true.shape() || theta_hat.ncols() != designs.len() {
        return Err(ConfidenceError::DimensionMismatch(format!(
            "estimate {:?}, truth {:?}, {} designs",
            theta_hat.shape(),
            theta_true.shape(),
            designs.len()
        )));
    }
    let mut stat = 0.0;
    for (i, ds) in designs.iter().enumerate() {
        let diff: DVector<f64> = theta_hat.column(i) - theta_true.column(i);
        stat += ds.norm_sq(&diff);
    }
    Ok((stat <= radius, stat))
}

/// Self-normalized martingale statistic for a fixed `d x 2k` basis `u_bar`.
/// Each history is `(X_i, eta_i)` with `X_i` of shape `d x t` and `eta_i`
/// the noise sequence. Returns `(lhs, rhs)` where the bound claims
/// `lhs <= rhs` with probability at least `1 - delta`.
pub fn self_normalized_statistic(
    u_bar: &DMatrix<f64>,
    histories: &[(DMatrix<f64>, DVector<f64>)],
    lambda: f64,
    delta: f64,
) -> Result<(f64, f64)> {
    check_delta(delta)?;
    if !(lambda > 0.0) {
        return Err(ConfidenceError::InvalidParameter(format!("lambda must be positive, got {lambda}")));
    }
    let p = u_bar.ncols();
    let mut lhs = 0.0;
    let mut rhs = 2.0 * (1.0 / delta).ln();
    for (x, eta) in histories {
        if x.nrows() != u_bar.nrows() || x.ncols() != eta.len() {
            return Err(ConfidenceError::DimensionMismatch("history does not match basis".into()));
        }
        let z = u_bar.transpose() * x;
        let v = &z * z.transpose() + DMatrix::identity(p, p) * lambda;
        let s = &z * eta;
        let chol = v.clone().cholesky().expect("regularized Gram matrix is positive definite");
        lhs += s.dot(&chol.solve(&s));
        let logdet: f64 = chol.l().diagonal().iter().map(|l| 2.0 * l.ln()).sum();
        rhs += logdet - p as f64 * lambda.ln();
    }
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bandit_radius_matches_hand_evaluation() {
        // M=5, k=2, d=10, T=100, delta=0.1:
        // 48 (10 + 100 ln 1000) + 32 ln 2000 + 76 ln 10
        let expected = 48.0 * (10.0 + 100.0 * 1000f64.ln()) + 32.0 * 2000f64.ln() + 76.0 * 10f64.ln();
        let l = bandit_radius(5, 2, 10, 100, 0.1).unwrap();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-9);
        assert_abs_diff_eq!(l, 34055.447, epsilon = 1e-2);
    }

    #[test]
    fn bandit_radius_at_delta_one_drops_confidence_term() {
        let l = bandit_radius(5, 2, 10, 100, 1.0).unwrap();
        let expected = 48.0 * (10.0 + 100.0 * 1000f64.ln()) + 32.0 * 2000f64.ln();
        assert_abs_diff_eq!(l, expected, epsilon = 1e-9);
    }

    #[test]
    fn bandit_radius_rejects_bad_delta() {
        assert!(bandit_radius(5, 2, 10, 100, 0.0).is_err());
        assert!(bandit_radius(5, 2, 10, 100, 1.5).is_err());
        assert!(bandit_radius(5, 3, 2, 100, 0.1).is_err());
    }

    #[test]
    fn misspecified_radius_reduces_to_twice_l() {
        assert_eq!(misspecified_radius(100.0, 5, 100, 0.0).unwrap(), 200.0);
        assert_abs_diff_eq!(misspecified_radius(100.0, 5, 100, 0.1).unwrap(), 200.0 + 32.0 * 500.0 * 0.01, epsilon = 1e-9);
        assert!(misspecified_radius(100.0, 5, 100, -0.1).is_err());
    }

    #[test]
    fn rl_radii_example() {
        // M=5, k=2, d=6, T=50, delta=0.1, zero IBE, D=1, lambda=1; kMT = 500, MT = 250
        let r = rl_radii(5, 2, 6, 50, 0.1, 0.0, 1.0, 1.0).unwrap();
        let f1 = (108.0 * 500f64.ln() + 50.0 * 250f64.ln() + 2.0 * 20f64.ln()).sqrt();
        let f2 = (48.0 * 500f64.ln() + 50.0 * 250f64.ln() + 2.0 * 20f64.ln()).sqrt()
            + (2.0 + 60.0 * 500f64.ln() + 20.0 * 250f64.ln() + 20f64.ln()).sqrt();
        assert_abs_diff_eq!(r.f1, f1, epsilon = 1e-12);
        assert_abs_diff_eq!(r.f2, f2, epsilon = 1e-12);
        assert_abs_diff_eq!(r.alpha, (2.0 * f1 + (2.0 * f2 + 20.0).sqrt()).powi(2), epsilon = 1e-9);
    }

    #[test]
    fn rl_alpha_grows_with_ibe() {
        let a = rl_radii(5, 2, 6, 50, 0.1, 0.0, 1.0, 1.0).unwrap().alpha;
        let b = rl_radii(5, 2, 6, 50, 0.1, 0.01, 1.0, 1.0).unwrap().alpha;
        assert!(b > a);
    }

    #[test]
    fn indep_radius_at_start() {
        // t = 0: (sqrt(lambda) S + sqrt(2 ln(1/delta)))^2
        let b = indep_oful_radius(10, 0, 1.0, 1.0, 0.05).unwrap();
        assert_abs_diff_eq!(b, (1.0 + (2.0 * 20f64.ln()).sqrt()).powi(2), epsilon = 1e-12);
    }

    #[test]
    fn membership_identity_design() {
        let theta = DMatrix::from_column_slice(2, 1, &[0.6, 0.8]);
        let hat = DMatrix::from_column_slice(2, 1, &[0.6, 0.5]);
        let ds = vec![DesignState::new(2, 1.0).unwrap()];
        let (inside, stat) = membership(&hat, &theta, &ds, 0.1).unwrap();
        assert!(inside);
        assert_abs_diff_eq!(stat, 0.09, epsilon = 1e-12);
        let (inside, _) = membership(&hat, &theta, &ds, 0.05).unwrap();
        assert!(!inside);
    }

    #[test]
    fn self_normalized_empty_history() {
        let u = DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let hist = vec![(DMatrix::zeros(3, 0), DVector::zeros(0)); 2];
        let (lhs, rhs) = self_normalized_statistic(&u, &hist, 1.0, 0.1).unwrap();
        assert_eq!(lhs, 0.0);
        assert_abs_diff_eq!(rhs, 2.0 * 10f64.ln(), epsilon = 1e-12);
    }
}

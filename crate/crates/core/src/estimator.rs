//! Least-squares identification of `[A B]` with PAC-style error radii.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{from_rows, to_rows, ThetaMatrix};
use crate::simulator::Transition;
use crate::stats::chi_squared_inv_cdf;

/// Relative pivot size below which the regressor matrix is treated as rank deficient.
const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelEstimate {
    pub theta_hat: ThetaMatrix,
    pub sigma_hat: Option<f64>,
    /// Empirical second moment `X'X / n` of the regressors `[x u]`.
    pub q_hat: DMatrix<f64>,
    pub n: usize,
    pub lambda_min: f64,
}

impl ModelEstimate {
    /// Fits `theta_hat`, the regressor second moment and (when `n > d + d'`) `sigma_hat`.
    pub fn from_data(data: &[Transition]) -> Result<Self> {
        let theta_hat = fit_least_squares(data)?;
        let (x, _) = design_matrices(data)?;
        let n = data.len();
        let mut q_hat = x.tr_mul(&x) / n as f64;
        q_hat = (&q_hat + q_hat.transpose()) * 0.5;
        let lambda_min = min_eigenvalue(&q_hat);
        let (d, dp) = (theta_hat.state_dim(), theta_hat.action_dim());
        let sigma_hat = if n > d + dp { Some(estimate_sigma(data, &theta_hat)?) } else { None };
        Ok(Self { theta_hat, sigma_hat, q_hat, n, lambda_min })
    }

    pub fn state_dim(&self) -> usize {
        self.theta_hat.state_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.theta_hat.action_dim()
    }
}

/// PAC radius on `||theta_hat - theta*||_F`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub epsilon: f64,
    pub alpha: f64,
    pub n: usize,
}

fn design_matrices(data: &[Transition]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let first = data.first().ok_or_else(|| Error::Estimation("no training data".into()))?;
    let d = first.state.len();
    let dp = first.action.len();
    let p = d + dp;
    let n = data.len();
    let mut x = DMatrix::zeros(n, p);
    let mut y = DMatrix::zeros(n, d);
    for (i, tr) in data.iter().enumerate() {
        if tr.state.len() != d || tr.action.len() != dp || tr.next_state.len() != d {
            return Err(shape_err(format!("transition {i} has inconsistent dimensions")));
        }
        for j in 0..d {
            x[(i, j)] = tr.state[j];
            y[(i, j)] = tr.next_state[j];
        }
        for j in 0..dp {
            x[(i, d + j)] = tr.action[j];
        }
    }
    Ok((x, y))
}

/// Least-squares `[A B]` from `(x, u) -> x'` triples, solved through a
/// Householder QR of the regressor matrix.
pub fn fit_least_squares(data: &[Transition]) -> Result<ThetaMatrix> {
    let (x, mut y) = design_matrices(data)?;
    let (n, p) = x.shape();
    let d = y.ncols();
    if n < p {
        return Err(Error::Estimation(format!("need at least {p} samples, got {n}")));
    }
    let qr = x.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..p).map(|i| r[(i, i)].abs()).collect();
    let scale = diag.iter().copied().fold(0.0, f64::max);
    let weak: Vec<usize> = (0..p).filter(|&i| diag[i] <= RANK_TOL * scale.max(f64::MIN_POSITIVE)).collect();
    if !weak.is_empty() {
        return Err(Error::Estimation(format!(
            "regressor matrix is rank deficient (weak pivots at columns {weak:?}); the inputs are not persistently exciting"
        )));
    }
    qr.q_tr_mul(&mut y);
    let rhs = y.rows(0, p).into_owned();
    let theta_t = r
        .solve_upper_triangular(&rhs)
        .ok_or_else(|| Error::Estimation("triangular solve failed".into()))?;
    ThetaMatrix::from_stacked(theta_t.transpose(), d)
}

/// `sqrt( sum ||x' - (A x + B u)||^2 / (d (n - d - d')) )`.
pub fn estimate_sigma(data: &[Transition], theta_hat: &ThetaMatrix) -> Result<f64> {
    let d = theta_hat.state_dim();
    let dp = theta_hat.action_dim();
    let n = data.len();
    if n <= d + dp {
        return Err(invalid(format!("need more than {} samples to estimate sigma, got {n}", d + dp)));
    }
    let a = theta_hat.a();
    let b = theta_hat.b();
    let mut rss = 0.0;
    for tr in data {
        if tr.state.len() != d || tr.action.len() != dp {
            return Err(shape_err("transition does not match theta dimensions"));
        }
        rss += (&tr.next_state - &a * &tr.state - &b * &tr.action).norm_squared();
    }
    Ok((rss / (d as f64 * (n - d - dp) as f64)).sqrt())
}

/// Frobenius error radius `sigma * sqrt(d F^{-1}(1 - alpha/d) / (n lambda_min))`
/// with `F` the chi-squared CDF on `d + d'` degrees of freedom.
pub fn epsilon_bound(estimate: &ModelEstimate, alpha: f64, sigma: f64) -> Result<ErrorBound> {
    let epsilon = epsilon_formula(
        estimate.n,
        estimate.lambda_min,
        estimate.state_dim(),
        estimate.action_dim(),
        alpha,
        sigma,
    )?;
    Ok(ErrorBound { epsilon, alpha, n: estimate.n })
}

pub fn epsilon_formula(n: usize, lambda_min: f64, d: usize, dp: usize, alpha: f64, sigma: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if !(sigma >= 0.0) {
        return Err(invalid("sigma must be nonnegative"));
    }
    if n == 0 {
        return Err(invalid("sample count must be positive"));
    }
    if !(lambda_min > 0.0) {
        return Err(Error::IllConditioned { lambda_min });
    }
    let quantile = chi_squared_inv_cdf(1.0 - alpha / d as f64, d + dp)?;
    Ok(sigma * (d as f64 * quantile / (n as f64 * lambda_min)).sqrt())
}

/// The quadratic form `delta' (n Q / sigma^2) delta` for row `ell`.
pub fn row_ellipsoid_statistic(
    estimate: &ModelEstimate,
    theta_star_row: &DVector<f64>,
    ell: usize,
    sigma: f64,
) -> Result<f64> {
    if ell >= estimate.state_dim() {
        return Err(shape_err(format!("row {ell} out of range")));
    }
    if theta_star_row.len() != estimate.q_hat.nrows() {
        return Err(shape_err("row length does not match d + d'"));
    }
    if !(estimate.lambda_min > 0.0) {
        return Err(Error::IllConditioned { lambda_min: estimate.lambda_min });
    }
    if !(sigma > 0.0) {
        return Err(invalid("sigma must be positive"));
    }
    let delta = estimate.theta_hat.row(ell) - theta_star_row;
    let q = (delta.transpose() * &estimate.q_hat * &delta)[(0, 0)];
    Ok(estimate.n as f64 * q / (sigma * sigma))
}

/// Whether row `ell` of the true parameters lies inside the `1 - alpha` confidence ellipsoid.
pub fn row_ellipsoid_check(
    estimate: &ModelEstimate,
    theta_star_row: &DVector<f64>,
    ell: usize,
    alpha: f64,
    sigma: f64,
) -> Result<bool> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid("alpha must lie in (0, 1)"));
    }
    let stat = row_ellipsoid_statistic(estimate, theta_star_row, ell, sigma)?;
    let quantile = chi_squared_inv_cdf(1.0 - alpha, estimate.q_hat.nrows())?;
    Ok(stat < quantile)
}

fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// JSON form of an estimate together with its error radius.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimateReport {
    pub theta_hat: Vec<Vec<f64>>,
    pub sigma_hat: Option<f64>,
    #[serde(rename = "Q_hat")]
    pub q_hat: Vec<Vec<f64>>,
    pub n: usize,
    pub lambda_min: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

impl EstimateReport {
    pub fn new(estimate: &ModelEstimate, bound: &ErrorBound) -> Self {
        Self {
            theta_hat: estimate.theta_hat.to_rows(),
            sigma_hat: estimate.sigma_hat,
            q_hat: to_rows(&estimate.q_hat),
            n: estimate.n,
            lambda_min: estimate.lambda_min,
            epsilon: bound.epsilon,
            alpha: bound.alpha,
        }
    }

    /// Recovers `theta_hat`; `state_dim` is the row count of the stacked matrix.
    pub fn theta(&self) -> Result<ThetaMatrix> {
        let m = from_rows(&self.theta_hat, 0)?;
        let d = m.nrows();
        ThetaMatrix::from_stacked(m, d)
    }
}

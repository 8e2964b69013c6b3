//! Closed-form robust safety bounds over the Frobenius ball
//! `||[A B] - [A_hat B_hat]||_F <= epsilon`.
//!
//! All matrix norms here are Frobenius norms; vector norms are Euclidean.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model::{spectral_radius, SafetySpec, ThetaMatrix};

/// Exact one-step worst case for one state coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct OneStepWorstCase {
    pub ell: usize,
    pub value: f64,
    /// Maximizing perturbation of row `ell` of `[A B]`; its norm is `epsilon`
    /// (or zero when `[x0 u]` vanishes).
    pub row_perturbation: DVector<f64>,
}

impl OneStepWorstCase {
    /// The maximizing parameters: `theta_hat` with row `ell` moved by the perturbation.
    pub fn maximizer(&self, theta_hat: &ThetaMatrix) -> ThetaMatrix {
        let mut m = theta_hat.matrix().clone();
        for (j, v) in self.row_perturbation.iter().enumerate() {
            m[(self.ell, j)] += v;
        }
        ThetaMatrix::from_stacked(m, theta_hat.state_dim()).expect("same shape")
    }
}

/// `max A[l,:] x0 + B[l,:] u` over the epsilon-ball, which equals
/// `epsilon ||[x0 u]|| + A_hat[l,:] x0 + B_hat[l,:] u`.
pub fn one_step_worst_case(
    theta_hat: &ThetaMatrix,
    epsilon: f64,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    ell: usize,
) -> Result<OneStepWorstCase> {
    check_epsilon(epsilon)?;
    let d = theta_hat.state_dim();
    if x0.len() != d || u.len() != theta_hat.action_dim() {
        return Err(shape_err("x0/u do not match theta dimensions"));
    }
    if ell >= d {
        return Err(shape_err(format!("row {ell} out of range")));
    }
    let mut v = DVector::zeros(d + u.len());
    v.rows_mut(0, d).copy_from(x0);
    v.rows_mut(d, u.len()).copy_from(u);
    let nominal = theta_hat.row(ell).dot(&v);
    let norm = v.norm();
    let row_perturbation = if norm > 0.0 { &v * (epsilon / norm) } else { DVector::zeros(v.len()) };
    Ok(OneStepWorstCase { ell, value: nominal + epsilon * norm, row_perturbation })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndexedValue {
    pub ell: usize,
    pub value: f64,
}

/// Outcome of checking every constrained coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetyVerdict {
    pub safe: bool,
    pub worst_values: Vec<IndexedValue>,
    /// Coordinate with the largest violation `value - s_l`, when unsafe.
    pub binding_index: Option<usize>,
}

impl SafetyVerdict {
    pub fn from_values(worst_values: Vec<IndexedValue>, spec: &SafetySpec) -> Self {
        let mut binding: Option<(usize, f64)> = None;
        for iv in &worst_values {
            let margin = iv.value - spec.bound(iv.ell);
            if margin > 0.0 && binding.is_none_or(|(_, m)| margin > m) {
                binding = Some((iv.ell, margin));
            }
        }
        Self { safe: binding.is_none(), worst_values, binding_index: binding.map(|(l, _)| l) }
    }
}

pub fn one_step_safe(
    theta_hat: &ThetaMatrix,
    epsilon: f64,
    x0: &DVector<f64>,
    u: &DVector<f64>,
    spec: &SafetySpec,
) -> Result<SafetyVerdict> {
    spec.check_dim(theta_hat.state_dim())?;
    let values = spec
        .constrained
        .iter()
        .map(|&ell| one_step_worst_case(theta_hat, epsilon, x0, u, ell).map(|w| IndexedValue { ell, value: w.value }))
        .collect::<Result<Vec<_>>>()?;
    Ok(SafetyVerdict::from_values(values, spec))
}

/// `(I - A)^{-1} B u`, the expected steady state under a fixed action.
pub fn steady_state_expectation(a: &DMatrix<f64>, b: &DMatrix<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
    if !a.is_square() || b.nrows() != a.nrows() || u.len() != b.ncols() {
        return Err(shape_err("A, B and u have inconsistent shapes"));
    }
    require_stable(a)?;
    let lhs = DMatrix::identity(a.nrows(), a.nrows()) - a;
    lhs.lu()
        .solve(&(b * u))
        .ok_or(Error::Unstable { rho: 1.0 })
}

/// Upper bound on `max [(I - A)^{-1} B u]_l` over the epsilon-ball.
///
/// With `M = I - A_hat`, the inverse perturbation satisfies
/// `||(M + E)^{-1} - M^{-1}|| <= ||M^{-1}||^2 eps / (1 - eps ||M^{-1}||)`,
/// which requires `eps ||M^{-1}|| < 1`.
pub fn fixed_action_upper_bound(theta_hat: &ThetaMatrix, epsilon: f64, u: &DVector<f64>, ell: usize) -> Result<f64> {
    check_epsilon(epsilon)?;
    let a = theta_hat.a();
    let b = theta_hat.b();
    if ell >= a.nrows() {
        return Err(shape_err(format!("row {ell} out of range")));
    }
    let nominal = steady_state_expectation(&a, &b, u)?[ell];
    let d = a.nrows();
    let m = DMatrix::identity(d, d) - &a;
    let m_inv = m.try_inverse().ok_or(Error::Unstable { rho: 1.0 })?;
    let inv_norm = m_inv.norm();
    let contraction = epsilon * inv_norm;
    if contraction >= 1.0 {
        return Err(Error::BoundInapplicable(format!(
            "epsilon * ||(I - A_hat)^-1|| = {contraction} must be below 1"
        )));
    }
    let inverse_shift = inv_norm * inv_norm * epsilon / (1.0 - contraction);
    let gain_shift = inverse_shift * (b.norm() + epsilon) + epsilon * inv_norm;
    Ok(gain_shift * u.norm() + nominal)
}

/// Bound on `||A^{t-1} - A_hat^{t-1}||_F` over `||A - A_hat||_F <= epsilon`:
/// `(||A_hat|| + eps)^{t-1} - ||A_hat||^{t-1}`.
pub fn matrix_power_perturbation_bound(a_hat: &DMatrix<f64>, epsilon: f64, t: usize) -> f64 {
    power_gap(a_hat.norm(), epsilon, t)
}

fn power_gap(norm: f64, epsilon: f64, t: usize) -> f64 {
    if t <= 1 {
        return 0.0;
    }
    let k = (t - 1) as i32;
    (norm + epsilon).powi(k) - norm.powi(k)
}

/// Conservative closed-form bound on the expected value of `x_{tau,l}` for
/// any model in the epsilon-ball and any actions within `delta` of `u`.
///
/// Each term `A^{t-1} B z_t` is split into its nominal value at `u`, the
/// best response to the action offset, and the model perturbation
/// `||A^{t-1} B - A_hat^{t-1} B_hat|| <= P_t (||B_hat|| + eps) + eps ||A_hat^{t-1}||`.
pub fn trajectory_ball_loose_bound(
    theta_hat: &ThetaMatrix,
    epsilon: f64,
    delta: f64,
    u: &DVector<f64>,
    x0: &DVector<f64>,
    ell: usize,
    tau: usize,
) -> Result<f64> {
    check_epsilon(epsilon)?;
    if !(delta >= 0.0) {
        return Err(crate::error::invalid("delta must be nonnegative"));
    }
    let a = theta_hat.a();
    let b = theta_hat.b();
    let d = a.nrows();
    if x0.len() != d || u.len() != b.ncols() || ell >= d {
        return Err(shape_err("x0, u or ell inconsistent with theta"));
    }
    if tau < 1 {
        return Err(crate::error::invalid("tau must be at least 1"));
    }
    require_stable(&a)?;
    let a_norm = a.norm();
    let b_norm = b.norm();
    let u_norm = u.norm();
    let mut total = 0.0;
    let mut power = DMatrix::identity(d, d); // A_hat^{t-1}
    for t in 1..=tau {
        let gain = &power * &b;
        let row = gain.row(ell);
        let nominal = (row * u)[(0, 0)];
        let offset = delta * row.norm();
        let model_shift = power_gap(a_norm, epsilon, t) * (b_norm + epsilon) + epsilon * power.norm();
        total += nominal + offset + model_shift * (u_norm + delta);
        power = &a * &power;
    }
    // power is now A_hat^tau
    total += (&power * x0)[ell] + power_gap(a_norm, epsilon, tau + 1) * x0.norm();
    Ok(total)
}

fn require_stable(a: &DMatrix<f64>) -> Result<()> {
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    Ok(())
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(crate::error::invalid(format!("epsilon must be finite and nonnegative, got {epsilon}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{random_stable_model, DEFAULT_SENTINEL};
    use crate::simulator::expected_rollout_ab;
    use nalgebra::{dmatrix, dvector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_theta(a: f64, b: f64) -> ThetaMatrix {
        ThetaMatrix::from_stacked(dmatrix![a, b], 1).unwrap()
    }

    #[test]
    fn one_step_examples() {
        let th = scalar_theta(0.5, 1.0);
        let w0 = one_step_worst_case(&th, 0.0, &dvector![1.0], &dvector![1.0], 0).unwrap();
        assert_eq!(w0.value, 1.5);
        let w = one_step_worst_case(&th, 0.1, &dvector![1.0], &dvector![1.0], 0).unwrap();
        assert!((w.value - (1.5 + 0.1 * 2f64.sqrt())).abs() < 1e-15);

        // dense grid over the boundary circle of the epsilon-ball
        let mut best = f64::NEG_INFINITY;
        for k in 0..100_000 {
            let phi = k as f64 / 100_000.0 * std::f64::consts::TAU;
            best = best.max((0.5 + 0.1 * phi.cos()) + (1.0 + 0.1 * phi.sin()));
        }
        assert!((best - w.value).abs() <= 1e-4);

        let a = dmatrix![0.5, 1.0; 0.0, 0.0];
        let b = dmatrix![0.0, 0.0; 1.0, 0.0];
        let th = ThetaMatrix::from_parts(&a, &b).unwrap();
        let w = one_step_worst_case(&th, 0.0, &dvector![0.5, 0.0], &dvector![1.0, 0.0], 0).unwrap();
        assert_eq!(w.value, 0.25);
    }

    #[test]
    fn maximizer_is_feasible_and_attains_value() {
        let m = random_stable_model(3, 2, 0.8, 0.0, 4).unwrap();
        let th = m.theta();
        let x0 = dvector![0.3, -1.0, 2.0];
        let u = dvector![0.5, 0.7];
        for ell in 0..3 {
            let w = one_step_worst_case(&th, 0.07, &x0, &u, ell).unwrap();
            let best = w.maximizer(&th);
            assert!((best.matrix() - th.matrix()).norm() <= 0.07 + 1e-12);
            let attained = (best.a() * &x0 + best.b() * &u)[ell];
            assert!((attained - w.value).abs() <= 1e-10);
        }
    }

    #[test]
    fn one_step_verdicts() {
        let th = scalar_theta(0.5, 1.0);
        let x0 = dvector![1.0];
        let u = dvector![1.0];
        let free = SafetySpec::new(vec![DEFAULT_SENTINEL], vec![0]).unwrap();
        assert!(one_step_safe(&th, 0.1, &x0, &u, &free).unwrap().safe);
        let tight = SafetySpec::new(vec![1.6], vec![0]).unwrap();
        let v = one_step_safe(&th, 0.1, &x0, &u, &tight).unwrap();
        assert!(!v.safe);
        assert_eq!(v.binding_index, Some(0));
        assert!((v.worst_values[0].value - 1.641_421_356).abs() < 1e-8);
        let loose = SafetySpec::new(vec![1.7], vec![0]).unwrap();
        assert!(one_step_safe(&th, 0.1, &x0, &u, &loose).unwrap().safe);

        let json = serde_json::to_value(&v).unwrap();
        assert_eq!(json["safe"], false);
        assert_eq!(json["binding_index"], 0);
        assert!(json["worst_values"].is_array());
    }

    #[test]
    fn steady_state_examples() {
        let y = steady_state_expectation(&dmatrix![0.5], &dmatrix![1.0], &dvector![1.0]).unwrap();
        assert!((y[0] - 2.0).abs() < 1e-15);
        let b = dmatrix![1.0, 2.0; 3.0, 4.0];
        let u = dvector![0.5, -1.0];
        assert_eq!(steady_state_expectation(&DMatrix::zeros(2, 2), &b, &u).unwrap(), &b * &u);
        assert!(matches!(
            steady_state_expectation(&dmatrix![1.2], &dmatrix![1.0], &dvector![1.0]),
            Err(Error::Unstable { .. })
        ));

        let m = random_stable_model(5, 2, 0.9, 0.0, 3).unwrap();
        let u = dvector![1.0, -0.5];
        let ss = steady_state_expectation(m.a(), m.b(), &u).unwrap();
        let lhs = DMatrix::identity(5, 5) - m.a();
        assert!((&lhs * &ss - m.b() * &u).norm() <= 1e-10 * (m.b() * &u).norm());
        let tail = expected_rollout_ab(m.a(), m.b(), &DVector::zeros(5), &vec![u; 500]).unwrap();
        assert!((&tail[499] - ss).amax() <= 1e-6);
    }

    #[test]
    fn fixed_action_bound_examples() {
        let th = scalar_theta(0.5, 1.0);
        let u = dvector![1.0];
        assert_eq!(fixed_action_upper_bound(&th, 0.0, &u, 0).unwrap(), 2.0);
        // hand evaluation: ||M^-1|| = 2, ||B|| = 1
        // shift = 2^2 * 0.05 / (1 - 0.1) * 1.05 + 0.05 * 2
        let expected = 2.0 + (4.0 * 0.05 / 0.9) * 1.05 + 0.1;
        let v = fixed_action_upper_bound(&th, 0.05, &u, 0).unwrap();
        assert!((v - expected).abs() < 1e-14);
        assert!(matches!(
            fixed_action_upper_bound(&th, 0.6, &u, 0),
            Err(Error::BoundInapplicable(_))
        ));
    }

    #[test]
    fn fixed_action_bound_dominates_sampled_adversary() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for seed in 0..5 {
            let m = random_stable_model(3, 2, 0.8, 0.0, seed).unwrap();
            let th = m.theta();
            let u = dvector![rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
            let eps = 0.02;
            for ell in 0..3 {
                let bound = fixed_action_upper_bound(&th, eps, &u, ell).unwrap();
                assert!(bound >= steady_state_expectation(m.a(), m.b(), &u).unwrap()[ell]);
                for _ in 0..500 {
                    let dir = crate::model::unit_sphere_sample(15, &mut rng);
                    let pert = DMatrix::from_column_slice(3, 5, dir.as_slice()) * eps;
                    let cand = th.matrix() + pert;
                    let a = cand.columns(0, 3).into_owned();
                    if spectral_radius(&a).unwrap() >= 1.0 {
                        continue;
                    }
                    let b = cand.columns(3, 2).into_owned();
                    let val = steady_state_expectation(&a, &b, &u).unwrap()[ell];
                    assert!(val <= bound);
                }
            }
        }
    }

    #[test]
    fn power_bound_examples() {
        let a = dmatrix![0.3, 0.1; -0.2, 0.5];
        assert_eq!(matrix_power_perturbation_bound(&a, 0.1, 1), 0.0);
        assert!((matrix_power_perturbation_bound(&a, 0.1, 2) - 0.1).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for t in 1..=10 {
            let bound = matrix_power_perturbation_bound(&a, 0.05, t);
            for _ in 0..100 {
                let dir = crate::model::unit_sphere_sample(4, &mut rng);
                let e = DMatrix::from_column_slice(2, 2, dir.as_slice()) * (0.05 * rng.random::<f64>());
                let pert = (&a - e).pow((t - 1) as u32);
                let nominal = a.pow((t - 1) as u32);
                assert!((pert - nominal).norm() <= bound + 1e-15);
            }
        }
    }

    #[test]
    fn loose_bound_is_exact_without_uncertainty() {
        let m = random_stable_model(4, 2, 0.85, 0.0, 9).unwrap();
        let th = m.theta();
        let u = dvector![0.4, -0.9];
        let x0 = dvector![1.0, 0.0, -0.5, 0.2];
        for tau in [1, 3, 8] {
            let exp = expected_rollout_ab(m.a(), m.b(), &x0, &vec![u.clone(); tau]).unwrap();
            for (ell, want) in exp[tau - 1].iter().enumerate() {
                let v = trajectory_ball_loose_bound(&th, 0.0, 0.0, &u, &x0, ell, tau).unwrap();
                assert!((v - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loose_bound_monotone_in_delta_and_epsilon() {
        let m = random_stable_model(5, 2, 0.9, 0.0, 1).unwrap();
        let th = m.theta();
        let u = dvector![1.0, 1.0];
        let x0 = DVector::zeros(5);
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let v = trajectory_ball_loose_bound(&th, 0.01, 0.1 * k as f64, &u, &x0, 0, 20).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        let mut prev = f64::NEG_INFINITY;
        for k in 0..20 {
            let v = trajectory_ball_loose_bound(&th, 0.005 * k as f64, 0.3, &u, &x0, 0, 20).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }
}

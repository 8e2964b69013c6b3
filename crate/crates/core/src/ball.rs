//! Adversarial certification of action balls.
//!
//! For a ball `B_delta(u)` the adversary picks a model `[A B]` within
//! `epsilon` of the estimate (Frobenius), with `rho(A) < 1`, and actions
//! `z_0..z_{tau-1}` inside the ball, trying to push `E[x_{tau,l}] + c sigma
//! sqrt(Var[x_{tau,l}])` above `s_l`. The search alternates three steps:
//!
//! * B-step: exact maximizer of the (linear in `B`) objective over the part of
//!   the Frobenius budget not used by `A`;
//! * z-step: exact per-step maximizer over the action ball;
//! * A-step: projected gradient ascent on `(A, B)` jointly with backtracking,
//!   accepting only candidates that keep `rho(A) <= 1 - margin`.
//!
//! An UNSAFE verdict always carries a feasible witness whose objective exceeds
//! the bound. A SAFE verdict only means the search found no violation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{ball_sample, from_rows, spectral_radius, to_rows, unit_sphere_sample, ActionBall, SafetySpec, ThetaMatrix};

/// Tolerance used when re-checking witness feasibility.
pub const WITNESS_FEASIBILITY_TOL: f64 = 1e-9;
/// Relative tolerance used when re-evaluating a witness objective.
pub const WITNESS_VALUE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafeBallConfig {
    /// Random restarts per `(l, tau)` subproblem.
    pub restarts: usize,
    /// Maximum alternating passes per restart.
    pub inner_iterations: usize,
    /// Projected gradient steps taken in each A-step.
    pub gradient_steps: usize,
    /// First trial step length of the A-step, as a fraction of epsilon.
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub max_halvings: usize,
    /// A pass that improves the objective by less than this ends the restart.
    pub improvement_tol: f64,
    /// Accepted A-step iterates satisfy `rho(A) <= 1 - rho_margin`.
    pub rho_margin: f64,
    /// Standard-deviation multiplier `c`; zero checks safety in expectation.
    pub confidence_multiplier: f64,
    /// Noise scale used by the variance term when `c > 0`.
    pub sigma: f64,
    /// Bisection tolerance of the largest-ball search.
    pub omega: f64,
    /// Cap on the number of doublings in the galloping phase.
    pub max_doublings: usize,
}

impl Default for SafeBallConfig {
    fn default() -> Self {
        Self {
            restarts: 5,
            inner_iterations: 50,
            gradient_steps: 3,
            initial_step: 1.0,
            backtrack_factor: 0.5,
            max_halvings: 30,
            improvement_tol: 1e-8,
            rho_margin: 1e-3,
            confidence_multiplier: 0.0,
            sigma: 0.0,
            omega: 0.05,
            max_doublings: 30,
        }
    }
}

impl SafeBallConfig {
    pub fn validate(&self) -> Result<()> {
        if self.restarts < 1 {
            return Err(invalid("restarts must be at least 1"));
        }
        if !(self.omega > 0.0) {
            return Err(invalid("omega must be positive"));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(invalid("backtrack_factor must lie in (0, 1)"));
        }
        if !(self.rho_margin >= 0.0 && self.rho_margin < 1.0) {
            return Err(invalid("rho_margin must lie in [0, 1)"));
        }
        if !(self.confidence_multiplier >= 0.0) || !(self.sigma >= 0.0) {
            return Err(invalid("confidence multiplier and sigma must be nonnegative"));
        }
        if !(self.initial_step > 0.0) {
            return Err(invalid("initial_step must be positive"));
        }
        Ok(())
    }

    /// `c * sigma`, the weight on `sqrt(sum ||A^t[l,:]||^2)`.
    pub fn variance_weight(&self) -> f64 {
        self.confidence_multiplier * self.sigma
    }
}

/// Everything fixed while certifying balls: the estimate, its error radius,
/// the initial state, the horizon and the safety bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct CertificationProblem {
    pub theta_hat: ThetaMatrix,
    pub epsilon: f64,
    pub x0: DVector<f64>,
    pub horizon: usize,
    pub spec: SafetySpec,
}

impl CertificationProblem {
    pub fn new(theta_hat: ThetaMatrix, epsilon: f64, x0: DVector<f64>, horizon: usize, spec: SafetySpec) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(invalid(format!("epsilon must be finite and nonnegative, got {epsilon}")));
        }
        if horizon < 1 {
            return Err(invalid("horizon must be at least 1"));
        }
        if x0.len() != theta_hat.state_dim() {
            return Err(shape_err("x0 does not match the state dimension"));
        }
        spec.check_dim(theta_hat.state_dim())?;
        let rho = spectral_radius(&theta_hat.a())?;
        if rho >= 1.0 {
            return Err(Error::Unstable { rho });
        }
        Ok(Self { theta_hat, epsilon, x0, horizon, spec })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.theta_hat.clone(), epsilon, self.x0.clone(), self.horizon, self.spec.clone())
    }
}

/// A feasible adversarial choice that drives `x_{tau,l}` above its bound.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialWitness {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    /// Actions `z_0..z_{tau-1}` in execution order.
    pub z: Vec<DVector<f64>>,
    pub ell: usize,
    pub tau: usize,
    pub value: f64,
    pub x0: DVector<f64>,
    pub epsilon: f64,
    /// The ball the actions were drawn from; `None` for a pinned action sequence.
    pub ball: Option<ActionBall>,
    pub variance_weight: f64,
}

#[derive(Serialize, Deserialize)]
struct WitnessJson {
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    z: Vec<Vec<f64>>,
    ell: usize,
    tau: usize,
    value: f64,
    x0: Vec<f64>,
    epsilon: f64,
    center: Option<Vec<f64>>,
    radius: Option<f64>,
    #[serde(default)]
    variance_weight: f64,
}

impl AdversarialWitness {
    pub fn to_json(&self) -> String {
        let raw = WitnessJson {
            a: to_rows(&self.a),
            b: to_rows(&self.b),
            z: self.z.iter().map(|v| v.iter().copied().collect()).collect(),
            ell: self.ell,
            tau: self.tau,
            value: self.value,
            x0: self.x0.iter().copied().collect(),
            epsilon: self.epsilon,
            center: self.ball.as_ref().map(|b| b.center.iter().copied().collect()),
            radius: self.ball.as_ref().map(|b| b.radius),
            variance_weight: self.variance_weight,
        };
        serde_json::to_string_pretty(&raw).expect("witness serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: WitnessJson = serde_json::from_str(text)?;
        let ball = match (raw.center, raw.radius) {
            (Some(c), Some(r)) => Some(ActionBall::new(DVector::from_vec(c), r)?),
            (None, None) => None,
            _ => return Err(invalid("witness center and radius must be given together")),
        };
        let a = from_rows(&raw.a, raw.x0.len())?;
        let b = from_rows(&raw.b, 0)?;
        Ok(Self {
            a,
            b,
            z: raw.z.into_iter().map(DVector::from_vec).collect(),
            ell: raw.ell,
            tau: raw.tau,
            value: raw.value,
            x0: DVector::from_vec(raw.x0),
            epsilon: raw.epsilon,
            ball,
            variance_weight: raw.variance_weight,
        })
    }

    /// Independent re-check of every witness invariant against `theta_hat` and `spec`.
    pub fn verify(&self, theta_hat: &ThetaMatrix, spec: &SafetySpec) -> Result<WitnessCheck> {
        let d = theta_hat.state_dim();
        if self.a.shape() != (d, d) || self.b.shape() != (d, theta_hat.action_dim()) {
            return Err(shape_err("witness matrices do not match theta_hat"));
        }
        if self.x0.len() != d || self.ell >= d || self.z.len() != self.tau || self.tau == 0 {
            return Err(shape_err("witness x0, ell, tau or z are inconsistent"));
        }
        if self.z.iter().any(|z| z.len() != theta_hat.action_dim()) {
            return Err(shape_err("witness action has wrong length"));
        }
        spec.check_dim(d)?;
        let theta = ThetaMatrix::from_parts(&self.a, &self.b)?;
        let model_distance = (theta.matrix() - theta_hat.matrix()).norm();
        let model_feasible = model_distance <= self.epsilon + WITNESS_FEASIBILITY_TOL;
        let actions_feasible = match &self.ball {
            Some(ball) => self.z.iter().all(|z| ball.contains(z, WITNESS_FEASIBILITY_TOL)),
            None => true,
        };
        let rho = spectral_radius(&self.a)?;
        let recomputed = ball_objective(&self.a, &self.b, &self.x0, &self.z, self.ell, self.variance_weight);
        let value_matches = (recomputed - self.value).abs() <= WITNESS_VALUE_TOL * recomputed.abs().max(1.0);
        let violates = spec.constrained.contains(&self.ell) && recomputed > spec.bound(self.ell);
        Ok(WitnessCheck {
            model_distance,
            model_feasible,
            actions_feasible,
            spectral_radius: rho,
            stable: rho < 1.0,
            recomputed_value: recomputed,
            value_matches,
            violates,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WitnessCheck {
    pub model_distance: f64,
    pub model_feasible: bool,
    pub actions_feasible: bool,
    pub spectral_radius: f64,
    pub stable: bool,
    pub recomputed_value: f64,
    pub value_matches: bool,
    pub violates: bool,
}

impl WitnessCheck {
    pub fn is_valid(&self) -> bool {
        self.model_feasible && self.actions_feasible && self.stable && self.value_matches && self.violates
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BallVerdict {
    Safe,
    Unsafe(Box<AdversarialWitness>),
}

impl BallVerdict {
    pub fn is_safe(&self) -> bool {
        matches!(self, BallVerdict::Safe)
    }

    pub fn witness(&self) -> Option<&AdversarialWitness> {
        match self {
            BallVerdict::Safe => None,
            BallVerdict::Unsafe(w) => Some(w),
        }
    }
}

/// `[A^tau x0 + sum_t A^{tau-1-t} B z_t]_l + w sqrt(sum_{t<tau} ||A^t[l,:]||^2)`
/// with `tau = z.len()` and `w = c sigma`.
pub fn ball_objective(a: &DMatrix<f64>, b: &DMatrix<f64>, x0: &DVector<f64>, z: &[DVector<f64>], ell: usize, variance_weight: f64) -> f64 {
    let mut x = x0.clone();
    for zk in z {
        x = a * &x + b * zk;
    }
    let mut value = x[ell];
    if variance_weight != 0.0 {
        value += variance_weight * row_power_sum(a, ell, z.len()).sqrt();
    }
    value
}

fn row_power_sum(a: &DMatrix<f64>, ell: usize, tau: usize) -> f64 {
    let mut r = DVector::zeros(a.nrows());
    r[ell] = 1.0;
    let mut acc = 0.0;
    for _ in 0..tau {
        acc += r.norm_squared();
        r = a.tr_mul(&r);
    }
    acc
}

/// Objective value with its partial derivatives.
#[derive(Debug, Clone)]
pub struct ObjectiveGradient {
    pub value: f64,
    pub grad_a: DMatrix<f64>,
    pub grad_b: DMatrix<f64>,
    pub grad_z: Vec<DVector<f64>>,
}

/// Analytic gradient of [`ball_objective`]. The mean term uses the adjoint
/// recursion `lambda_k = A' lambda_{k+1}`; the variance term differentiates
/// `sum_t ||(A')^t e_l||^2` through every factor of each power.
pub fn ball_objective_gradient(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: &DVector<f64>,
    z: &[DVector<f64>],
    ell: usize,
    variance_weight: f64,
) -> ObjectiveGradient {
    let tau = z.len();
    let d = a.nrows();
    let mut xs = Vec::with_capacity(tau + 1);
    xs.push(x0.clone());
    for k in 0..tau {
        let next = a * &xs[k] + b * &z[k];
        xs.push(next);
    }
    // r[j] = (A')^j e_l, j = 0..=tau
    let mut r = Vec::with_capacity(tau + 1);
    let mut e = DVector::zeros(d);
    e[ell] = 1.0;
    r.push(e);
    for j in 0..tau {
        let next = a.tr_mul(&r[j]);
        r.push(next);
    }
    let mut grad_a = DMatrix::zeros(d, d);
    let mut grad_b = DMatrix::zeros(d, b.ncols());
    let mut grad_z = Vec::with_capacity(tau);
    for k in 0..tau {
        let lambda = &r[tau - 1 - k];
        grad_a.ger(1.0, lambda, &xs[k], 1.0);
        grad_b.ger(1.0, lambda, &z[k], 1.0);
        grad_z.push(b.tr_mul(lambda));
    }
    let mut value = xs[tau][ell];
    if variance_weight != 0.0 && tau > 0 {
        let sum: f64 = r[..tau].iter().map(|v| v.norm_squared()).sum();
        let root = sum.sqrt();
        value += variance_weight * root;
        let scale = variance_weight / (2.0 * root);
        for t in 1..tau {
            let mut q = r[t].clone();
            for j in 0..t {
                grad_a.ger(2.0 * scale, &r[t - 1 - j], &q, 1.0);
                q = a * q;
            }
        }
    }
    ObjectiveGradient { value, grad_a, grad_b, grad_z }
}

/// Adversary state for one `(l, tau)` subproblem.
#[derive(Clone)]
struct Iterate {
    da: DMatrix<f64>,
    db: DMatrix<f64>,
    z: Vec<DVector<f64>>,
    value: f64,
}

enum ActionSet<'a> {
    Ball(&'a ActionBall),
    Pinned(&'a [DVector<f64>]),
}

struct Search<'a> {
    problem: &'a CertificationProblem,
    config: &'a SafeBallConfig,
    a_hat: DMatrix<f64>,
    b_hat: DMatrix<f64>,
    actions: ActionSet<'a>,
    weight: f64,
}

impl<'a> Search<'a> {
    fn new(problem: &'a CertificationProblem, config: &'a SafeBallConfig, actions: ActionSet<'a>) -> Self {
        Self {
            problem,
            config,
            a_hat: problem.theta_hat.a(),
            b_hat: problem.theta_hat.b(),
            actions,
            weight: config.variance_weight(),
        }
    }

    fn eval(&self, it: &Iterate, ell: usize) -> f64 {
        let a = &self.a_hat + &it.da;
        let b = &self.b_hat + &it.db;
        ball_objective(&a, &b, &self.problem.x0, &it.z, ell, self.weight)
    }

    fn rho_ok(&self, da: &DMatrix<f64>) -> bool {
        let a = &self.a_hat + da;
        spectral_radius(&a).is_ok_and(|rho| rho <= 1.0 - self.config.rho_margin)
    }

    fn initial(&self, tau: usize, random: bool, rng: &mut ChaCha8Rng) -> Iterate {
        let d = self.a_hat.nrows();
        let dp = self.b_hat.ncols();
        let eps = self.problem.epsilon;
        let mut da = DMatrix::zeros(d, d);
        let mut db = DMatrix::zeros(d, dp);
        if random && eps > 0.0 {
            let dim = d * (d + dp);
            for _ in 0..100 {
                let dir = unit_sphere_sample(dim, rng);
                let radius = eps * rng.random::<f64>().powf(1.0 / dim as f64);
                let cand_a = DMatrix::from_column_slice(d, d, &dir.as_slice()[..d * d]) * radius;
                if self.rho_ok(&cand_a) {
                    da = cand_a;
                    db = DMatrix::from_column_slice(d, dp, &dir.as_slice()[d * d..]) * radius;
                    break;
                }
            }
        }
        let z = match &self.actions {
            ActionSet::Ball(ball) => (0..tau)
                .map(|_| if random { ball_sample(&ball.center, ball.radius, rng) } else { ball.center.clone() })
                .collect(),
            ActionSet::Pinned(seq) => seq[..tau].to_vec(),
        };
        Iterate { da, db, z, value: f64::NEG_INFINITY }
    }

    /// Exact maximizer over `B` given `A` and `z`, within the remaining budget.
    fn b_step(&self, it: &mut Iterate, ell: usize) {
        let eps = self.problem.epsilon;
        let budget = (eps * eps - it.da.norm_squared()).max(0.0).sqrt();
        let a = &self.a_hat + &it.da;
        let g = b_coefficients(&a, &it.z, ell, self.b_hat.ncols());
        let norm = g.norm();
        if norm > 0.0 {
            it.db = g * (budget / norm);
        }
    }

    /// Exact maximizer over each `z_t` given `A` and `B`.
    fn z_step(&self, it: &mut Iterate, ell: usize) {
        let ActionSet::Ball(ball) = &self.actions else { return };
        if ball.radius == 0.0 {
            return;
        }
        let a = &self.a_hat + &it.da;
        let b = &self.b_hat + &it.db;
        let tau = it.z.len();
        let mut lambda = DVector::zeros(a.nrows());
        lambda[ell] = 1.0;
        for k in (0..tau).rev() {
            let g = b.tr_mul(&lambda);
            let n = g.norm();
            if n > 0.0 {
                it.z[k] = &ball.center + g * (ball.radius / n);
            }
            lambda = a.tr_mul(&lambda);
        }
    }

    /// Projected gradient ascent on `(A, B)` with backtracking.
    fn a_step(&self, it: &mut Iterate, ell: usize, step: &mut f64) -> Result<()> {
        let eps = self.problem.epsilon;
        if eps == 0.0 {
            return Ok(());
        }
        for _ in 0..self.config.gradient_steps {
            let a = &self.a_hat + &it.da;
            let b = &self.b_hat + &it.db;
            let grad = ball_objective_gradient(&a, &b, &self.problem.x0, &it.z, ell, self.weight);
            if !grad.value.is_finite() || !grad.grad_a.iter().all(|v| v.is_finite()) {
                return Err(Error::Optimizer(format!(
                    "non-finite objective or gradient at l = {ell}, tau = {}",
                    it.z.len()
                )));
            }
            let gnorm = (grad.grad_a.norm_squared() + grad.grad_b.norm_squared()).sqrt();
            if gnorm == 0.0 {
                return Ok(());
            }
            let mut length = *step;
            let mut accepted = false;
            for _ in 0..=self.config.max_halvings {
                let scale = length / gnorm;
                let mut da = &it.da + &grad.grad_a * scale;
                let mut db = &it.db + &grad.grad_b * scale;
                let norm = (da.norm_squared() + db.norm_squared()).sqrt();
                if norm > eps {
                    da *= eps / norm;
                    db *= eps / norm;
                }
                if self.rho_ok(&da) {
                    let cand = Iterate { da, db, z: it.z.clone(), value: 0.0 };
                    let v = self.eval(&cand, ell);
                    if !v.is_finite() {
                        return Err(Error::Optimizer(format!("non-finite objective at l = {ell}")));
                    }
                    if v > it.value {
                        it.da = cand.da;
                        it.db = cand.db;
                        it.value = v;
                        accepted = true;
                        break;
                    }
                }
                length *= self.config.backtrack_factor;
            }
            if !accepted {
                return Ok(());
            }
            *step = (length * 2.0).min(2.0 * eps);
        }
        Ok(())
    }

    fn witness(&self, it: &Iterate, ell: usize) -> AdversarialWitness {
        let a = &self.a_hat + &it.da;
        let b = &self.b_hat + &it.db;
        let value = ball_objective(&a, &b, &self.problem.x0, &it.z, ell, self.weight);
        AdversarialWitness {
            a,
            b,
            z: it.z.clone(),
            ell,
            tau: it.z.len(),
            value,
            x0: self.problem.x0.clone(),
            epsilon: self.problem.epsilon,
            ball: match &self.actions {
                ActionSet::Ball(ball) => Some((*ball).clone()),
                ActionSet::Pinned(_) => None,
            },
            variance_weight: self.weight,
        }
    }

    /// Runs the alternating loop from `start`; returns the final iterate.
    fn climb(&self, mut it: Iterate, ell: usize, bound: f64) -> Result<(Iterate, bool)> {
        it.value = self.eval(&it, ell);
        if it.value > bound {
            return Ok((it, true));
        }
        let mut step = self.config.initial_step * self.problem.epsilon;
        for _ in 0..self.config.inner_iterations {
            let prev = it.value;
            self.b_step(&mut it, ell);
            self.z_step(&mut it, ell);
            it.value = self.eval(&it, ell);
            self.a_step(&mut it, ell, &mut step)?;
            if !it.value.is_finite() {
                return Err(Error::Optimizer(format!("non-finite objective at l = {ell}")));
            }
            if it.value > bound {
                return Ok((it, true));
            }
            if it.value - prev < self.config.improvement_tol * prev.abs().max(1.0) {
                break;
            }
        }
        Ok((it, false))
    }

    fn run(&self, horizon: usize, rng: &mut ChaCha8Rng, warm: Option<&AdversarialWitness>) -> Result<BallVerdict> {
        if let Some(w) = warm {
            if let Some(verdict) = self.try_warm_start(w) {
                return Ok(verdict);
            }
        }
        for &ell in &self.problem.spec.constrained {
            for tau in 1..=horizon {
                for restart in 0..self.config.restarts {
                    let start = self.initial(tau, restart > 0, rng);
                    let (it, violated) = self.climb(start, ell, self.problem.spec.bound(ell))?;
                    if violated {
                        let w = self.witness(&it, ell);
                        if w.value > self.problem.spec.bound(ell) {
                            return Ok(BallVerdict::Unsafe(Box::new(w)));
                        }
                    }
                }
            }
        }
        Ok(BallVerdict::Safe)
    }

    /// Reuses a previous witness when it is still feasible for this problem.
    fn try_warm_start(&self, w: &AdversarialWitness) -> Option<BallVerdict> {
        if w.epsilon > self.problem.epsilon || w.x0 != self.problem.x0 || w.tau > self.problem.horizon {
            return None;
        }
        let ActionSet::Ball(ball) = &self.actions else { return None };
        let mut moved = w.clone();
        moved.ball = Some((*ball).clone());
        moved.epsilon = self.problem.epsilon;
        moved.variance_weight = self.weight;
        moved.value = ball_objective(&w.a, &w.b, &w.x0, &w.z, w.ell, self.weight);
        let check = moved.verify(&self.problem.theta_hat, &self.problem.spec).ok()?;
        let within_margin = spectral_radius(&w.a).is_ok_and(|r| r <= 1.0 - self.config.rho_margin);
        (check.is_valid() && within_margin).then(|| BallVerdict::Unsafe(Box::new(moved)))
    }
}

/// Best adversarial value found for coordinate `ell` at step `tau`, ignoring the bound.
pub fn worst_case_search<R: Rng + ?Sized>(
    problem: &CertificationProblem,
    ball: &ActionBall,
    ell: usize,
    tau: usize,
    config: &SafeBallConfig,
    rng: &mut R,
) -> Result<AdversarialWitness> {
    config.validate()?;
    if ball.dim() != problem.theta_hat.action_dim() {
        return Err(shape_err("ball dimension does not match the action dimension"));
    }
    if ell >= problem.theta_hat.state_dim() || tau < 1 {
        return Err(invalid("ell must index a state and tau must be positive"));
    }
    let mut local = derive_rng(rng);
    let search = Search::new(problem, config, ActionSet::Ball(ball));
    let mut best: Option<Iterate> = None;
    for restart in 0..config.restarts {
        let start = search.initial(tau, restart > 0, &mut local);
        let (it, _) = search.climb(start, ell, f64::INFINITY)?;
        if best.as_ref().is_none_or(|b| it.value > b.value) {
            best = Some(it);
        }
    }
    Ok(search.witness(&best.expect("at least one restart"), ell))
}

/// `sum_k lambda_{k+1} z_k'`, the coefficient matrix of `B` in the mean term
/// (the reshaped `sum_t A^{t-1}[l,:] (x) z_t`).
pub fn b_coefficients(a: &DMatrix<f64>, z: &[DVector<f64>], ell: usize, action_dim: usize) -> DMatrix<f64> {
    let d = a.nrows();
    let mut g = DMatrix::zeros(d, action_dim);
    let mut lambda = DVector::zeros(d);
    lambda[ell] = 1.0;
    for zk in z.iter().rev() {
        g.ger(1.0, &lambda, zk, 1.0);
        lambda = a.tr_mul(&lambda);
    }
    g
}

fn derive_rng<R: Rng + ?Sized>(rng: &mut R) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(rng.random())
}

/// Searches for a model in the epsilon-ball and actions in `ball` that
/// violate a constrained coordinate within the horizon.
pub fn safe_ball_check<R: Rng + ?Sized>(
    problem: &CertificationProblem,
    ball: &ActionBall,
    config: &SafeBallConfig,
    rng: &mut R,
) -> Result<BallVerdict> {
    safe_ball_check_seeded(problem, ball, config, rng, None)
}

/// [`safe_ball_check`] that first tries to reuse `warm` as a witness.
pub fn safe_ball_check_seeded<R: Rng + ?Sized>(
    problem: &CertificationProblem,
    ball: &ActionBall,
    config: &SafeBallConfig,
    rng: &mut R,
    warm: Option<&AdversarialWitness>,
) -> Result<BallVerdict> {
    config.validate()?;
    if ball.dim() != problem.theta_hat.action_dim() {
        return Err(shape_err("ball dimension does not match the action dimension"));
    }
    let mut local = derive_rng(rng);
    Search::new(problem, config, ActionSet::Ball(ball)).run(problem.horizon, &mut local, warm)
}

/// Checks a fixed action sequence: only `A` and `B` are adversarial.
pub fn sequence_safe<R: Rng + ?Sized>(
    problem: &CertificationProblem,
    actions: &[DVector<f64>],
    config: &SafeBallConfig,
    rng: &mut R,
) -> Result<BallVerdict> {
    config.validate()?;
    if actions.is_empty() {
        return Err(invalid("action sequence is empty"));
    }
    if actions.iter().any(|u| u.len() != problem.theta_hat.action_dim()) {
        return Err(shape_err("action length does not match the action dimension"));
    }
    let mut local = derive_rng(rng);
    Search::new(problem, config, ActionSet::Pinned(actions)).run(actions.len(), &mut local, None)
}

/// Result of the galloping + bisection search.
#[derive(Debug, Clone, PartialEq)]
pub struct MaxSafeBall {
    /// Largest radius certified (the lower end of the final bracket).
    pub radius: f64,
    /// Upper end of the final bracket; `upper - radius <= omega` unless `capped`.
    pub upper: f64,
    /// Number of SafeBall evaluations.
    pub checks: usize,
    /// The galloping phase hit `max_doublings` without finding an unsafe radius.
    pub capped: bool,
    /// Witness for the smallest radius found unsafe.
    pub witness: Option<AdversarialWitness>,
}

/// Largest `delta` such that `B_delta(u_star)` passes [`safe_ball_check`], to within `omega`.
pub fn max_safe_ball<R: Rng + ?Sized>(
    problem: &CertificationProblem,
    u_star: &DVector<f64>,
    delta0: f64,
    config: &SafeBallConfig,
    rng: &mut R,
) -> Result<MaxSafeBall> {
    config.validate()?;
    if !(delta0 > 0.0) {
        return Err(invalid("delta0 must be positive"));
    }
    let omega = config.omega;
    let mut checks = 0;
    let mut check = |delta: f64, rng: &mut R| -> Result<BallVerdict> {
        checks += 1;
        safe_ball_check(problem, &ActionBall::new(u_star.clone(), delta)?, config, rng)
    };
    let mut low = 0.0;
    let mut high = delta0;
    let mut delta = delta0;
    let mut witness = None;
    let mut doublings = 0;
    let mut capped = false;
    loop {
        match check(delta, rng)? {
            BallVerdict::Safe => {
                low = delta;
                high = 2.0 * delta;
                delta *= 2.0;
                doublings += 1;
                if doublings > config.max_doublings {
                    capped = true;
                    break;
                }
            }
            BallVerdict::Unsafe(w) => {
                witness = Some(*w);
                break;
            }
        }
    }
    if !capped {
        while high - low > omega {
            let mid = 0.5 * (low + high);
            match check(mid, rng)? {
                BallVerdict::Safe => low = mid,
                BallVerdict::Unsafe(w) => {
                    high = mid;
                    witness = Some(*w);
                }
            }
        }
    }
    if low == 0.0 {
        if let BallVerdict::Unsafe(w) = check(0.0, rng)? {
            return Err(Error::NominalUnsafe(format!(
                "the center action violates x[{}] <= {} at step {} (value {})",
                w.ell,
                problem.spec.bound(w.ell),
                w.tau,
                w.value
            )));
        }
    }
    Ok(MaxSafeBall { radius: low, upper: high, checks, capped, witness })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::steady_state_expectation;
    use crate::model::random_stable_model;
    use crate::simulator::expected_rollout_ab;
    use nalgebra::{dmatrix, dvector};

    fn scalar_problem(a: f64, b: f64, eps: f64, bound: f64, horizon: usize) -> CertificationProblem {
        let theta = ThetaMatrix::from_stacked(dmatrix![a, b], 1).unwrap();
        let spec = SafetySpec::new(vec![bound], vec![0]).unwrap();
        CertificationProblem::new(theta, eps, dvector![0.0], horizon, spec).unwrap()
    }

    fn synthetic_problem(seed: u64, eps: f64, headroom: f64) -> (CertificationProblem, DVector<f64>) {
        let m = random_stable_model(4, 2, 0.8, 0.0, seed).unwrap();
        let u = dvector![0.5, -0.3];
        let x0 = steady_state_expectation(m.a(), m.b(), &u).unwrap();
        let spec = SafetySpec::single(4, 0, x0[0] + headroom).unwrap();
        (CertificationProblem::new(m.theta(), eps, x0, 10, spec).unwrap(), u)
    }

    fn finite_difference_a(a: &DMatrix<f64>, b: &DMatrix<f64>, x0: &DVector<f64>, z: &[DVector<f64>], ell: usize, w: f64) -> DMatrix<f64> {
        let h = 1e-6;
        DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| {
            let mut ap = a.clone();
            let mut am = a.clone();
            ap[(i, j)] += h;
            am[(i, j)] -= h;
            (ball_objective(&ap, b, x0, z, ell, w) - ball_objective(&am, b, x0, z, ell, w)) / (2.0 * h)
        })
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for trial in 0..6 {
            let m = random_stable_model(3, 2, 0.85, 0.0, trial).unwrap();
            let x0 = DVector::from_fn(3, |_, _| rng.random::<f64>() - 0.5);
            let z: Vec<_> = (0..7).map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>())).collect();
            for w in [0.0, 0.7] {
                let g = ball_objective_gradient(m.a(), m.b(), &x0, &z, 1, w);
                assert!((g.value - ball_objective(m.a(), m.b(), &x0, &z, 1, w)).abs() < 1e-12);
                let fd = finite_difference_a(m.a(), m.b(), &x0, &z, 1, w);
                assert!((&g.grad_a - &fd).norm() <= 1e-5 * fd.norm().max(1.0));
            }
        }
    }

    #[test]
    fn b_coefficients_match_looped_objective() {
        let m = random_stable_model(3, 2, 0.7, 0.0, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let z: Vec<_> = (0..5).map(|_| DVector::from_fn(2, |_, _| rng.random::<f64>())).collect();
        for ell in 0..3 {
            let g = b_coefficients(m.a(), &z, ell, 2);
            let vect = g.dot(m.b());
            let mut looped = 0.0;
            for (k, zk) in z.iter().enumerate() {
                let power = m.a().pow((z.len() - 1 - k) as u32);
                looped += (power.row(ell) * m.b() * zk)[(0, 0)];
            }
            assert!((vect - looped).abs() <= 1e-10);
        }
    }

    #[test]
    fn no_adversarial_freedom_is_safe() {
        let (problem, u) = synthetic_problem(2, 0.0, 0.5);
        let ball = ActionBall::new(u, 0.0).unwrap();
        let v = safe_ball_check(&problem, &ball, &SafeBallConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(v.is_safe());
    }

    #[test]
    fn large_ball_yields_verifiable_witness() {
        let (problem, u) = synthetic_problem(2, 0.0, 0.05);
        let ball = ActionBall::new(u, 3.0).unwrap();
        let v = safe_ball_check(&problem, &ball, &SafeBallConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let w = v.witness().expect("should be unsafe");
        assert!(w.verify(&problem.theta_hat, &problem.spec).unwrap().is_valid());
        let xs = expected_rollout_ab(&w.a, &w.b, &w.x0, &w.z).unwrap();
        assert!(xs[w.tau - 1][w.ell] > problem.spec.bound(w.ell));

        let back = AdversarialWitness::from_json(&w.to_json()).unwrap();
        assert!(back.verify(&problem.theta_hat, &problem.spec).unwrap().is_valid());
    }

    /// Scalar system `x' = a x + b z`, `x0 = 0`: the worst case puts `A`, `B` on
    /// the ball boundary and every `z_t = u + delta`.
    fn scalar_worst(a_hat: f64, b_hat: f64, eps: f64, u: f64, delta: f64, horizon: usize) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for k in 0..20_000 {
            let phi = k as f64 / 20_000.0 * std::f64::consts::TAU;
            let a = a_hat + eps * phi.cos();
            let b = b_hat + eps * phi.sin();
            if a.abs() >= 1.0 - 1e-3 {
                continue;
            }
            for tau in 1..=horizon {
                let gain: f64 = (0..tau).map(|t| a.powi(t as i32)).sum();
                best = best.max(b * (u + delta) * gain);
            }
        }
        best
    }

    #[test]
    fn scalar_threshold_located() {
        let (a, b, eps, u, horizon) = (0.6, 1.0, 0.05, 1.0, 8);
        let bound = scalar_worst(a, b, eps, u, 0.5, horizon);
        let problem = scalar_problem(a, b, eps, bound, horizon);
        let config = SafeBallConfig { omega: 0.005, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let below = ActionBall::new(dvector![u], 0.45).unwrap();
        let above = ActionBall::new(dvector![u], 0.55).unwrap();
        assert!(safe_ball_check(&problem, &below, &config, &mut rng).unwrap().is_safe());
        assert!(!safe_ball_check(&problem, &above, &config, &mut rng).unwrap().is_safe());
        let res = max_safe_ball(&problem, &dvector![u], 0.1, &config, &mut rng).unwrap();
        assert!((res.radius - 0.5).abs() <= 0.5 * 0.05, "{res:?}");
        assert!(res.upper - res.radius <= config.omega);
    }

    #[test]
    fn max_ball_bisects_below_delta0() {
        let (problem, u) = synthetic_problem(5, 0.0, 0.02);
        let config = SafeBallConfig::default();
        let res = max_safe_ball(&problem, &u, 5.0, &config, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(res.radius < 5.0);
        assert!(res.upper <= 5.0);
        assert!(res.upper - res.radius <= config.omega);
    }

    #[test]
    fn unsafe_nominal_action_is_reported() {
        let (mut problem, u) = synthetic_problem(5, 0.0, 0.5);
        problem.spec.upper[0] = problem.x0[0] - 0.1;
        let err = max_safe_ball(&problem, &u, 0.1, &SafeBallConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap_err();
        assert!(matches!(err, Error::NominalUnsafe(_)));
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn warm_start_nesting() {
        let (problem, u) = synthetic_problem(2, 0.01, 0.05);
        let config = SafeBallConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = safe_ball_check(&problem, &ActionBall::new(u.clone(), 1.0).unwrap(), &config, &mut rng).unwrap();
        let w = v.witness().expect("unsafe").clone();
        for r in [1.0, 1.5, 3.0] {
            let bigger = ActionBall::new(u.clone(), r).unwrap();
            let v2 = safe_ball_check_seeded(&problem, &bigger, &config, &mut rng, Some(&w)).unwrap();
            assert!(!v2.is_safe());
        }
    }

    #[test]
    fn sequence_check_without_uncertainty_is_threshold_test() {
        let (problem, u) = synthetic_problem(3, 0.0, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = problem.theta_hat.a();
        let b = problem.theta_hat.b();
        for scale in [0.0, 0.5, 1.0, 2.0, 4.0] {
            let seq: Vec<_> = (0..10).map(|t| &u + dvector![scale * (t as f64 * 0.7).sin(), scale * (t as f64 * 0.3).cos()]).collect();
            let xs = expected_rollout_ab(&a, &b, &problem.x0, &seq).unwrap();
            let direct_safe = xs.iter().all(|x| x[0] <= problem.spec.bound(0));
            let v = sequence_safe(&problem, &seq, &SafeBallConfig::default(), &mut rng).unwrap();
            assert_eq!(v.is_safe(), direct_safe, "scale {scale}");
            if let Some(w) = v.witness() {
                assert!(w.verify(&problem.theta_hat, &problem.spec).unwrap().is_valid());
                assert_eq!(&w.z[..], &seq[..w.tau]);
            }
        }
    }

    #[test]
    fn steps_never_decrease_objective() {
        let (problem, u) = synthetic_problem(6, 0.02, 100.0);
        let ball = ActionBall::new(u, 0.5).unwrap();
        let config = SafeBallConfig { confidence_multiplier: 2.0, sigma: 0.05, ..Default::default() };
        let search = Search::new(&problem, &config, ActionSet::Ball(&ball));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for tau in [1, 4, 10] {
            let mut it = search.initial(tau, true, &mut rng);
            it.value = search.eval(&it, 0);
            let mut step = problem.epsilon;
            for _ in 0..10 {
                let v0 = it.value;
                search.b_step(&mut it, 0);
                let v1 = search.eval(&it, 0);
                search.z_step(&mut it, 0);
                let v2 = search.eval(&it, 0);
                it.value = v2;
                search.a_step(&mut it, 0, &mut step).unwrap();
                let v3 = it.value;
                assert!(v1 >= v0 - 1e-12 && v2 >= v1 - 1e-12 && v3 >= v2, "{v0} {v1} {v2} {v3}");
                assert!((it.da.norm_squared() + it.db.norm_squared()).sqrt() <= problem.epsilon + 1e-12);
                assert!(it.z.iter().all(|z| ball.contains(z, 1e-12)));
            }
        }
    }

    #[test]
    fn config_validation() {
        assert!(SafeBallConfig { restarts: 0, ..Default::default() }.validate().is_err());
        assert!(SafeBallConfig { omega: 0.0, ..Default::default() }.validate().is_err());
        assert!(SafeBallConfig::default().validate().is_ok());
    }
}

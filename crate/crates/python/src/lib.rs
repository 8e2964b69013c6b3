//! Python bindings: models, estimation, ball certification and witnesses.

use nalgebra::{DMatrix, DVector};
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use safe_explore::ball::{self, AdversarialWitness, BallVerdict, SafeBallConfig};
use safe_explore::estimator::{epsilon_bound, ModelEstimate};
use safe_explore::experiments::{run_fig1, ExperimentConfig};
use safe_explore::model::{self, from_rows, to_rows, ActionBall, SafetySpec, ThetaMatrix};
use safe_explore::simulator::{self, episode_rng, Transition};
use safe_explore::{bounds, Error};

create_exception!(safe_explore_py, SafeExploreError, PyException);
create_exception!(safe_explore_py, NominalUnsafeError, SafeExploreError);

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Shape(_) | Error::Validation(_) => PyValueError::new_err(e.to_string()),
        Error::NominalUnsafe(_) => NominalUnsafeError::new_err(e.to_string()),
        _ => SafeExploreError::new_err(e.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    from_rows(rows, 0).map_err(py_err)
}

fn vector(v: Vec<f64>) -> DVector<f64> {
    DVector::from_vec(v)
}

fn list(v: &DVector<f64>) -> Vec<f64> {
    v.iter().copied().collect()
}

fn theta(rows: &[Vec<f64>], state_dim: usize) -> PyResult<ThetaMatrix> {
    ThetaMatrix::from_stacked(matrix(rows)?, state_dim).map_err(py_err)
}

#[pyclass(name = "LinearGaussianModel", module = "safe_explore_py")]
struct PyModel {
    inner: model::LinearGaussianModel,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, sigma: f64) -> PyResult<Self> {
        let inner = model::LinearGaussianModel::new(matrix(&a)?, matrix(&b)?, sigma).map_err(py_err)?;
        Ok(Self { inner })
    }

    /// Random model with `A` rescaled to spectral radius `rho`.
    #[staticmethod]
    #[pyo3(signature = (d, d_prime, rho=0.9, sigma=0.01, seed=0))]
    fn random(d: usize, d_prime: usize, rho: f64, sigma: f64, seed: u64) -> PyResult<Self> {
        Ok(Self { inner: model::random_stable_model(d, d_prime, rho, sigma, seed).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: model::LinearGaussianModel::from_json(text).map_err(py_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter(A)]
    fn a(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.a())
    }

    #[getter(B)]
    fn b(&self) -> Vec<Vec<f64>> {
        to_rows(self.inner.b())
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    /// Stacked `[A B]` as nested rows.
    fn theta(&self) -> Vec<Vec<f64>> {
        self.inner.theta().to_rows()
    }

    fn spectral_radius(&self) -> f64 {
        self.inner.spectral_radius()
    }

    fn steady_state(&self, u: Vec<f64>) -> PyResult<Vec<f64>> {
        let x = bounds::steady_state_expectation(self.inner.a(), self.inner.b(), &vector(u)).map_err(py_err)?;
        Ok(list(&x))
    }

    /// `episodes` runs of `horizon` steps from `x0`, actions uniform in the
    /// ball around `center`. Returns `(states, actions, next_states)`.
    #[pyo3(signature = (x0, center, radius, episodes, horizon, seed=0))]
    #[allow(clippy::type_complexity)]
    fn simulate(
        &self,
        x0: Vec<f64>,
        center: Vec<f64>,
        radius: f64,
        episodes: usize,
        horizon: usize,
        seed: u64,
    ) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        let x0 = vector(x0);
        let center = vector(center);
        let (mut xs, mut us, mut ys) = (Vec::new(), Vec::new(), Vec::new());
        for e in 0..episodes {
            let mut rng = episode_rng(seed, e as u64);
            let traj = simulator::run_episode(
                &self.inner,
                &x0,
                |_, _, rng: &mut ChaCha8Rng| model::ball_sample(&center, radius, rng),
                horizon,
                &mut rng,
            )
            .map_err(py_err)?;
            for t in traj.transitions() {
                xs.push(list(&t.state));
                us.push(list(&t.action));
                ys.push(list(&t.next_state));
            }
        }
        Ok((xs, us, ys))
    }
}

/// Least-squares fit with its error radius.
#[pyclass(name = "Estimate", module = "safe_explore_py", get_all)]
struct PyEstimate {
    theta_hat: Vec<Vec<f64>>,
    sigma_hat: Option<f64>,
    n: usize,
    lambda_min: f64,
    epsilon: f64,
    alpha: f64,
}

#[pymethods]
impl PyEstimate {
    #[staticmethod]
    #[pyo3(signature = (states, actions, next_states, alpha=0.05, sigma=None))]
    fn fit(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, next_states: Vec<Vec<f64>>, alpha: f64, sigma: Option<f64>) -> PyResult<Self> {
        if states.len() != actions.len() || states.len() != next_states.len() {
            return Err(PyValueError::new_err("states, actions and next_states must have equal length"));
        }
        let data: Vec<Transition> = states
            .into_iter()
            .zip(actions)
            .zip(next_states)
            .map(|((x, u), y)| Transition { state: vector(x), action: vector(u), next_state: vector(y) })
            .collect();
        let est = ModelEstimate::from_data(&data).map_err(py_err)?;
        let sigma = sigma
            .or(est.sigma_hat)
            .ok_or_else(|| PyValueError::new_err("too few samples to estimate sigma; pass sigma"))?;
        let bound = epsilon_bound(&est, alpha, sigma).map_err(py_err)?;
        Ok(Self {
            theta_hat: est.theta_hat.to_rows(),
            sigma_hat: est.sigma_hat,
            n: est.n,
            lambda_min: est.lambda_min,
            epsilon: bound.epsilon,
            alpha,
        })
    }

    fn __repr__(&self) -> String {
        let sigma = self.sigma_hat.map_or("None".to_string(), |s| s.to_string());
        format!("Estimate(n={}, epsilon={}, sigma_hat={sigma})", self.n, self.epsilon)
    }
}

#[pyclass(name = "Witness", module = "safe_explore_py")]
struct PyWitness {
    inner: AdversarialWitness,
}

#[pymethods]
impl PyWitness {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self { inner: AdversarialWitness::from_json(text).map_err(py_err)? })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn value(&self) -> f64 {
        self.inner.value
    }

    #[getter]
    fn ell(&self) -> usize {
        self.inner.ell
    }

    #[getter]
    fn tau(&self) -> usize {
        self.inner.tau
    }

    #[getter(A)]
    fn a(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.a)
    }

    #[getter(B)]
    fn b(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.b)
    }

    #[getter]
    fn z(&self) -> Vec<Vec<f64>> {
        self.inner.z.iter().map(list).collect()
    }

    /// True when the witness is feasible for `problem` and violates its bound.
    fn verify(&self, problem: PyRef<'_, PyProblem>) -> PyResult<bool> {
        let check = self.inner.verify(&problem.inner.theta_hat, &problem.inner.spec).map_err(py_err)?;
        Ok(check.is_valid() && self.inner.epsilon <= problem.inner.epsilon + 1e-12)
    }
}

fn witness(verdict: BallVerdict) -> Option<PyWitness> {
    match verdict {
        BallVerdict::Safe => None,
        BallVerdict::Unsafe(w) => Some(PyWitness { inner: *w }),
    }
}

#[pyclass(name = "CertificationProblem", module = "safe_explore_py")]
struct PyProblem {
    inner: ball::CertificationProblem,
}

fn optimizer(restarts: usize, omega: f64) -> SafeBallConfig {
    SafeBallConfig { restarts, omega, ..SafeBallConfig::default() }
}

#[pymethods]
impl PyProblem {
    #[new]
    fn new(theta_hat: Vec<Vec<f64>>, epsilon: f64, x0: Vec<f64>, horizon: usize, upper: Vec<f64>, constrained: Vec<usize>) -> PyResult<Self> {
        let d = x0.len();
        let spec = SafetySpec::new(upper, constrained).map_err(py_err)?;
        let inner = ball::CertificationProblem::new(theta(&theta_hat, d)?, epsilon, vector(x0), horizon, spec).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    /// `None` when no violation was found, otherwise a witness.
    #[pyo3(signature = (center, radius, seed=0, restarts=5))]
    fn safe_ball_check(&self, center: Vec<f64>, radius: f64, seed: u64, restarts: usize) -> PyResult<Option<PyWitness>> {
        let ball = ActionBall::new(vector(center), radius).map_err(py_err)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let verdict = ball::safe_ball_check(&self.inner, &ball, &optimizer(restarts, 0.05), &mut rng).map_err(py_err)?;
        Ok(witness(verdict))
    }

    /// Checks a fixed action sequence against every model in the epsilon-ball.
    #[pyo3(signature = (actions, seed=0, restarts=5))]
    fn sequence_safe(&self, actions: Vec<Vec<f64>>, seed: u64, restarts: usize) -> PyResult<Option<PyWitness>> {
        let actions: Vec<DVector<f64>> = actions.into_iter().map(vector).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let verdict = ball::sequence_safe(&self.inner, &actions, &optimizer(restarts, 0.05), &mut rng).map_err(py_err)?;
        Ok(witness(verdict))
    }

    /// Returns `(radius, upper, witness)`.
    #[pyo3(signature = (u_star, delta0=0.1, omega=0.05, seed=0, restarts=5))]
    fn max_safe_ball(&self, u_star: Vec<f64>, delta0: f64, omega: f64, seed: u64, restarts: usize) -> PyResult<(f64, f64, Option<PyWitness>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let res = ball::max_safe_ball(&self.inner, &vector(u_star), delta0, &optimizer(restarts, omega), &mut rng).map_err(py_err)?;
        Ok((res.radius, res.upper, res.witness.map(|w| PyWitness { inner: w })))
    }

    /// Closed-form worst case of `x_1[ell]` over the epsilon-ball.
    fn one_step_worst_case(&self, u: Vec<f64>, ell: usize) -> PyResult<f64> {
        let w = bounds::one_step_worst_case(&self.inner.theta_hat, self.inner.epsilon, &self.inner.x0, &vector(u), ell).map_err(py_err)?;
        Ok(w.value)
    }
}

#[pyfunction]
#[pyo3(signature = (a, sigma, ell, tol=simulator::DEFAULT_VARIANCE_TOL))]
fn steady_state_variance(a: Vec<Vec<f64>>, sigma: f64, ell: usize, tol: f64) -> PyResult<f64> {
    simulator::steady_state_variance(&matrix(&a)?, sigma, ell, tol).map_err(py_err)
}

#[pyfunction]
fn spectral_radius(a: Vec<Vec<f64>>) -> PyResult<f64> {
    model::spectral_radius(&matrix(&a)?).map_err(py_err)
}

/// Largest safe radius across the configured epsilon sweep: `[(epsilon, delta_max)]`.
#[pyfunction]
#[pyo3(signature = (config_json=None, seed=0))]
fn fig1(config_json: Option<&str>, seed: u64) -> PyResult<Vec<(f64, f64)>> {
    let config = match config_json {
        Some(text) => ExperimentConfig::from_json(text).map_err(py_err)?,
        None => ExperimentConfig::default(),
    };
    let rows = run_fig1(&config, seed).map_err(py_err)?;
    Ok(rows.into_iter().map(|r| (r.epsilon, r.delta_max)).collect())
}

#[pymodule]
fn safe_explore_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyEstimate>()?;
    m.add_class::<PyProblem>()?;
    m.add_class::<PyWitness>()?;
    m.add_function(wrap_pyfunction!(steady_state_variance, m)?)?;
    m.add_function(wrap_pyfunction!(spectral_radius, m)?)?;
    m.add_function(wrap_pyfunction!(fig1, m)?)?;
    m.add("SafeExploreError", m.py().get_type::<SafeExploreError>())?;
    m.add("NominalUnsafeError", m.py().get_type::<NominalUnsafeError>())?;
    Ok(())
}

//! Model types: linear-Gaussian dynamics, the stacked parameter matrix
//! `[A B]`, safety specifications and action balls, plus the small amount of
//! matrix analysis the rest of the crate needs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape_err, Error, Result};

/// Default stand-in for the upper bound of an unconstrained state dimension.
pub const DEFAULT_SENTINEL: f64 = 1e12;

/// Half-width of the uniform range used for `B` entries of generated models.
pub const GENERATED_B_RANGE: f64 = 1.0;

/// Discrete-time dynamics `x' = A x + B u + xi`, `xi ~ N(0, sigma^2 I)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGaussianModel {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    sigma: f64,
}

impl LinearGaussianModel {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, sigma: f64) -> Result<Self> {
        if !a.is_square() {
            return Err(shape_err(format!("A must be square, got {}x{}", a.nrows(), a.ncols())));
        }
        if b.nrows() != a.nrows() {
            return Err(shape_err(format!(
                "B has {} rows but A has {}",
                b.nrows(),
                a.nrows()
            )));
        }
        if a.nrows() == 0 || b.ncols() == 0 {
            return Err(shape_err("state and action dimensions must be positive"));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(invalid(format!("sigma must be finite and nonnegative, got {sigma}")));
        }
        check_finite(&a, "A")?;
        check_finite(&b, "B")?;
        Ok(Self { a, b, sigma })
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn action_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::new(self.a.clone(), self.b.clone(), sigma)
    }

    pub fn theta(&self) -> ThetaMatrix {
        ThetaMatrix::from_parts(&self.a, &self.b).expect("model shapes are validated")
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a).expect("A is square and finite")
    }

    /// True when every eigenvalue of `A` lies strictly inside the unit circle.
    pub fn is_schur_stable(&self) -> bool {
        self.spectral_radius() < 1.0
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: ModelJson = serde_json::from_str(text)?;
        raw.try_into()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelJson::from(self)).expect("model serializes")
    }
}

#[derive(Serialize, Deserialize)]
struct ModelJson {
    d: usize,
    d_prime: usize,
    #[serde(rename = "A")]
    a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    b: Vec<Vec<f64>>,
    sigma: f64,
}

impl From<&LinearGaussianModel> for ModelJson {
    fn from(m: &LinearGaussianModel) -> Self {
        Self {
            d: m.state_dim(),
            d_prime: m.action_dim(),
            a: to_rows(&m.a),
            b: to_rows(&m.b),
            sigma: m.sigma,
        }
    }
}

impl TryFrom<ModelJson> for LinearGaussianModel {
    type Error = Error;

    fn try_from(raw: ModelJson) -> Result<Self> {
        let a = from_rows(&raw.a, raw.d)?;
        let b = from_rows(&raw.b, raw.d_prime)?;
        if a.nrows() != raw.d {
            return Err(shape_err(format!("A has {} rows, expected d = {}", a.nrows(), raw.d)));
        }
        LinearGaussianModel::new(a, b, raw.sigma)
    }
}

/// The stacked parameter matrix `[A B]` of shape `d x (d + d')`.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaMatrix {
    m: DMatrix<f64>,
    state_dim: usize,
}

impl ThetaMatrix {
    pub fn from_parts(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<Self> {
        if !a.is_square() || b.nrows() != a.nrows() {
            return Err(shape_err(format!(
                "cannot stack A ({}x{}) with B ({}x{})",
                a.nrows(),
                a.ncols(),
                b.nrows(),
                b.ncols()
            )));
        }
        let d = a.nrows();
        let mut m = DMatrix::zeros(d, d + b.ncols());
        m.columns_mut(0, d).copy_from(a);
        m.columns_mut(d, b.ncols()).copy_from(b);
        Ok(Self { m, state_dim: d })
    }

    /// Wraps an already stacked matrix; the first `state_dim` columns are `A`.
    pub fn from_stacked(m: DMatrix<f64>, state_dim: usize) -> Result<Self> {
        if m.nrows() != state_dim || m.ncols() <= state_dim {
            return Err(shape_err(format!(
                "stacked theta must be {state_dim}x(>{state_dim}), got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(Self { m, state_dim })
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.m.ncols() - self.state_dim
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn a(&self) -> DMatrix<f64> {
        self.m.columns(0, self.state_dim).into_owned()
    }

    pub fn b(&self) -> DMatrix<f64> {
        self.m.columns(self.state_dim, self.action_dim()).into_owned()
    }

    /// Row `ell` of `[A B]` as a column vector.
    pub fn row(&self, ell: usize) -> DVector<f64> {
        self.m.row(ell).transpose()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.norm()
    }

    pub fn to_model(&self, sigma: f64) -> Result<LinearGaussianModel> {
        LinearGaussianModel::new(self.a(), self.b(), sigma)
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        to_rows(&self.m)
    }
}

/// Per-dimension upper bounds `x_l <= s_l` enforced for `l` in `constrained`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SafetySpec {
    pub upper: Vec<f64>,
    pub constrained: Vec<usize>,
}

impl SafetySpec {
    pub fn new(upper: Vec<f64>, mut constrained: Vec<usize>) -> Result<Self> {
        constrained.sort_unstable();
        constrained.dedup();
        for &ell in &constrained {
            if ell >= upper.len() {
                return Err(shape_err(format!(
                    "constrained index {ell} out of range for dimension {}",
                    upper.len()
                )));
            }
            if !upper[ell].is_finite() {
                return Err(invalid(format!("bound for constrained index {ell} is not finite")));
            }
        }
        Ok(Self { upper, constrained })
    }

    /// A single constrained coordinate; every other bound is the sentinel.
    pub fn single(dim: usize, ell: usize, bound: f64) -> Result<Self> {
        let mut upper = vec![DEFAULT_SENTINEL; dim];
        if ell < dim {
            upper[ell] = bound;
        }
        Self::new(upper, vec![ell])
    }

    pub fn unconstrained(dim: usize) -> Self {
        Self { upper: vec![DEFAULT_SENTINEL; dim], constrained: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.upper.len()
    }

    pub fn bound(&self, ell: usize) -> f64 {
        self.upper[ell]
    }

    pub fn check_dim(&self, d: usize) -> Result<()> {
        if self.upper.len() != d {
            return Err(shape_err(format!(
                "safety spec has {} bounds, state dimension is {d}",
                self.upper.len()
            )));
        }
        Ok(())
    }
}

/// Closed Euclidean ball of actions.
#[derive(Debug, Clone, PartialEq)]
pub struct ActionBall {
    pub center: DVector<f64>,
    pub radius: f64,
}

impl ActionBall {
    pub fn new(center: DVector<f64>, radius: f64) -> Result<Self> {
        if !(radius >= 0.0) || !radius.is_finite() {
            return Err(invalid(format!("ball radius must be finite and nonnegative, got {radius}")));
        }
        Ok(Self { center, radius })
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, z: &DVector<f64>, tol: f64) -> bool {
        z.len() == self.center.len() && (z - &self.center).norm() <= self.radius + tol
    }
}

#[derive(Serialize, Deserialize)]
struct BallJson {
    center: Vec<f64>,
    radius: f64,
}

impl Serialize for ActionBall {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        BallJson { center: self.center.iter().copied().collect(), radius: self.radius }.serialize(s)
    }
}

impl<'de> Deserialize<'de> for ActionBall {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let raw = BallJson::deserialize(d)?;
        ActionBall::new(DVector::from_vec(raw.center), raw.radius).map_err(serde::de::Error::custom)
    }
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> Result<f64> {
    if !a.is_square() {
        return Err(shape_err(format!("spectral radius needs a square matrix, got {}x{}", a.nrows(), a.ncols())));
    }
    check_finite(a, "matrix")?;
    if a.nrows() == 0 {
        return Ok(0.0);
    }
    if a.nrows() == 1 {
        return Ok(a[(0, 0)].abs());
    }
    let eig = a.complex_eigenvalues();
    Ok(eig.iter().map(|l| l.norm()).fold(0.0, f64::max))
}

/// Frobenius norm of `theta1 - theta2`.
pub fn frobenius_distance(theta1: &ThetaMatrix, theta2: &ThetaMatrix) -> Result<f64> {
    matrix_distance(theta1.matrix(), theta2.matrix())
}

pub fn matrix_distance(m1: &DMatrix<f64>, m2: &DMatrix<f64>) -> Result<f64> {
    if m1.shape() != m2.shape() {
        return Err(shape_err(format!("shapes {:?} and {:?} differ", m1.shape(), m2.shape())));
    }
    Ok((m1 - m2).norm())
}

/// Random model whose `A` is rescaled to spectral radius `rho_target`;
/// entries of `B` are uniform on `[-GENERATED_B_RANGE, GENERATED_B_RANGE]`.
pub fn random_stable_model(
    state_dim: usize,
    action_dim: usize,
    rho_target: f64,
    sigma: f64,
    seed: u64,
) -> Result<LinearGaussianModel> {
    if !(rho_target > 0.0 && rho_target < 1.0) {
        return Err(invalid(format!("rho_target must lie in (0, 1), got {rho_target}")));
    }
    if state_dim == 0 || action_dim == 0 {
        return Err(invalid("dimensions must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = loop {
        let raw = DMatrix::from_fn(state_dim, state_dim, |_, _| {
            <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng)
        });
        let rho = spectral_radius(&raw)?;
        if rho > 1e-6 {
            break raw * (rho_target / rho);
        }
    };
    let unif = Uniform::new_inclusive(-GENERATED_B_RANGE, GENERATED_B_RANGE).expect("valid range");
    let b = DMatrix::from_fn(state_dim, action_dim, |_, _| unif.sample(&mut rng));
    LinearGaussianModel::new(a, b, sigma)
}

/// Uniform sample from the unit sphere in `dim` dimensions.
pub fn unit_sphere_sample<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> DVector<f64> {
    loop {
        let v = DVector::from_fn(dim, |_, _| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng));
        let n = v.norm();
        if n > 1e-12 {
            return v / n;
        }
    }
}

/// Volume-uniform sample from the ball of `radius` around `center`.
pub fn ball_sample<R: Rng + ?Sized>(center: &DVector<f64>, radius: f64, rng: &mut R) -> DVector<f64> {
    let dim = center.len();
    let dir = unit_sphere_sample(dim, rng);
    let r: f64 = rng.random::<f64>().powf(1.0 / dim as f64) * radius;
    center + dir * r
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Builds a matrix from row-major nested vectors; `ncols` is used when there are no rows.
pub fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    let width = rows.first().map_or(ncols, Vec::len);
    if rows.iter().any(|r| r.len() != width) {
        return Err(shape_err("ragged matrix rows"));
    }
    Ok(DMatrix::from_fn(rows.len(), width, |i, j| rows[i][j]))
}

fn check_finite(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(invalid(format!("{name} has non-finite entries")))
    }
}

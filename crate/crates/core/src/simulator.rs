//! Rollouts of linear-Gaussian models: noisy steps, exact expected
//! trajectories, state variances and episode bookkeeping.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{invalid, shape_err, Error, Result};
use crate::model::{spectral_radius, LinearGaussianModel};

/// Default relative stopping tolerance for [`steady_state_variance`].
pub const DEFAULT_VARIANCE_TOL: f64 = 1e-10;
/// Hard cap on the number of series terms summed by [`steady_state_variance`].
pub const MAX_VARIANCE_TERMS: usize = 1_000_000;

/// Generator for episode `episode` of a run seeded with `seed`.
///
/// Every episode gets its own ChaCha stream keyed by its index, so the noise
/// an episode sees does not depend on how many draws earlier episodes made.
pub fn episode_rng(seed: u64, episode: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(episode);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.actions.len()
    }

    pub fn transitions(&self) -> impl Iterator<Item = Transition> + '_ {
        self.actions.iter().enumerate().map(move |(t, u)| Transition {
            state: self.states[t].clone(),
            action: u.clone(),
            next_state: self.states[t + 1].clone(),
        })
    }
}

/// One training example `(x, u) -> x'`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: DVector<f64>,
    pub action: DVector<f64>,
    pub next_state: DVector<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeLog {
    pub seed: u64,
    pub model_id: String,
    pub trajectories: Vec<Trajectory>,
}

impl EpisodeLog {
    pub fn new(seed: u64, model_id: impl Into<String>) -> Self {
        Self { seed, model_id: model_id.into(), trajectories: Vec::new() }
    }

    pub fn push(&mut self, trajectory: Trajectory) {
        self.trajectories.push(trajectory);
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Trajectory::horizon).sum()
    }

    pub fn transitions(&self) -> Vec<Transition> {
        self.trajectories.iter().flat_map(|t| t.transitions()).collect()
    }

    /// Writes `episode,t,x_0..x_{d-1},u_0..u_{d'-1}`; the final state of each
    /// episode gets empty action fields.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let (d, dp) = match self.trajectories.first() {
            Some(t) => (t.states[0].len(), t.actions.first().map_or(0, |u| u.len())),
            None => (0, 0),
        };
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["episode".to_string(), "t".to_string()];
        header.extend((0..d).map(|i| format!("x_{i}")));
        header.extend((0..dp).map(|i| format!("u_{i}")));
        w.write_record(&header)?;
        for (ep, traj) in self.trajectories.iter().enumerate() {
            for (t, x) in traj.states.iter().enumerate() {
                let mut row = vec![ep.to_string(), t.to_string()];
                row.extend(x.iter().map(|v| v.to_string()));
                match traj.actions.get(t) {
                    Some(u) => row.extend(u.iter().map(|v| v.to_string())),
                    None => row.extend(std::iter::repeat_n(String::new(), dp)),
                }
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Parses the format produced by [`EpisodeLog::write_csv`].
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header = r.headers()?.clone();
        let d = header.iter().filter(|h| h.starts_with("x_")).count();
        let dp = header.iter().filter(|h| h.starts_with("u_")).count();
        if d == 0 || dp == 0 || header.len() != 2 + d + dp {
            return Err(shape_err("episode CSV header must be episode,t,x_*,u_*"));
        }
        let mut log = EpisodeLog::default();
        let mut current: Option<(usize, Trajectory)> = None;
        for rec in r.records() {
            let rec = rec?;
            let ep: usize = rec[0].trim().parse().map_err(|_| invalid("bad episode index"))?;
            let parse = |s: &str| -> Result<f64> { s.trim().parse().map_err(|_| invalid(format!("bad number {s:?}"))) };
            let x = DVector::from_iterator(d, (0..d).map(|i| parse(&rec[2 + i])).collect::<Result<Vec<_>>>()?);
            let action_fields: Vec<&str> = (0..dp).map(|i| &rec[2 + d + i]).collect();
            if current.as_ref().map(|(e, _)| *e) != Some(ep) {
                if let Some((_, t)) = current.take() {
                    log.push(t);
                }
                current = Some((ep, Trajectory { states: Vec::new(), actions: Vec::new() }));
            }
            let traj = &mut current.as_mut().expect("set above").1;
            traj.states.push(x);
            if action_fields.iter().all(|s| s.trim().is_empty()) {
                continue;
            }
            let u = action_fields.iter().map(|s| parse(s)).collect::<Result<Vec<_>>>()?;
            traj.actions.push(DVector::from_vec(u));
        }
        if let Some((_, t)) = current.take() {
            log.push(t);
        }
        for t in &log.trajectories {
            if t.states.len() != t.actions.len() + 1 {
                return Err(shape_err("each episode needs exactly one state more than actions"));
            }
        }
        Ok(log)
    }
}

/// One noisy transition `A x + B u + xi`.
pub fn step<R: Rng + ?Sized>(
    model: &LinearGaussianModel,
    x: &DVector<f64>,
    u: &DVector<f64>,
    rng: &mut R,
) -> Result<DVector<f64>> {
    check_state_action(model.a(), model.b(), x, u)?;
    let mut next = model.a() * x + model.b() * u;
    if model.sigma() > 0.0 {
        for v in next.iter_mut() {
            let xi: f64 = StandardNormal.sample(rng);
            *v += model.sigma() * xi;
        }
    }
    Ok(next)
}

/// `E[x_1], ..., E[x_tau]` for the given action sequence.
pub fn expected_rollout(
    model: &LinearGaussianModel,
    x0: &DVector<f64>,
    actions: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    expected_rollout_ab(model.a(), model.b(), x0, actions)
}

pub fn expected_rollout_ab(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x0: &DVector<f64>,
    actions: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>> {
    let mut out = Vec::with_capacity(actions.len());
    let mut x = x0.clone();
    for u in actions {
        check_state_action(a, b, &x, u)?;
        x = a * &x + b * u;
        out.push(x.clone());
    }
    Ok(out)
}

/// `sigma^2 * sum_{t<tau} ||A^t[ell,:]||^2`, the variance of `x_{tau,ell}`.
pub fn state_variance(a: &DMatrix<f64>, sigma: f64, tau: usize, ell: usize) -> Result<f64> {
    if tau < 1 {
        return Err(invalid("tau must be at least 1"));
    }
    check_row(a, ell)?;
    Ok(sigma * sigma * row_power_norm_sums(a, ell, tau)[tau - 1])
}

/// Partial sums `sum_{t<=k} ||A^t[ell,:]||^2` for `k = 0..count`.
pub(crate) fn row_power_norm_sums(a: &DMatrix<f64>, ell: usize, count: usize) -> Vec<f64> {
    let mut row = DVector::zeros(a.nrows());
    row[ell] = 1.0;
    let at = a.transpose();
    let mut acc = 0.0;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        acc += row.norm_squared();
        out.push(acc);
        row = &at * row;
    }
    out
}

/// Limit of [`state_variance`] as `tau -> infinity`, together with the number
/// of series terms summed before the relative increment fell below `tol`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VarianceLimit {
    pub value: f64,
    pub terms: usize,
}

pub fn steady_state_variance(a: &DMatrix<f64>, sigma: f64, ell: usize, tol: f64) -> Result<f64> {
    steady_state_variance_detailed(a, sigma, ell, tol).map(|v| v.value)
}

pub fn steady_state_variance_detailed(a: &DMatrix<f64>, sigma: f64, ell: usize, tol: f64) -> Result<VarianceLimit> {
    check_row(a, ell)?;
    if !(tol > 0.0) {
        return Err(invalid("tol must be positive"));
    }
    let rho = spectral_radius(a)?;
    if rho >= 1.0 {
        return Err(Error::Unstable { rho });
    }
    let mut row = DVector::zeros(a.nrows());
    row[ell] = 1.0;
    let at = a.transpose();
    let mut sum = 0.0;
    let mut terms = 0;
    while terms < MAX_VARIANCE_TERMS {
        let inc = row.norm_squared();
        sum += inc;
        terms += 1;
        if inc < tol * sum {
            break;
        }
        row = &at * row;
    }
    Ok(VarianceLimit { value: sigma * sigma * sum, terms })
}

/// `Phi^{-1}(1 - gamma / T)`: the per-step standard-deviation multiplier that
/// makes a union bound over `T` steps hold with probability `1 - gamma`.
pub fn confidence_multiplier(gamma: f64, horizon: usize) -> Result<f64> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    if horizon < 1 {
        return Err(invalid("horizon must be at least 1"));
    }
    let normal = Normal::standard();
    Ok(normal.inverse_cdf(1.0 - gamma / horizon as f64))
}

/// Runs `horizon` steps from `x0`, asking `policy` for each action.
pub fn run_episode<R, P>(
    model: &LinearGaussianModel,
    x0: &DVector<f64>,
    mut policy: P,
    horizon: usize,
    rng: &mut R,
) -> Result<Trajectory>
where
    R: Rng + ?Sized,
    P: FnMut(usize, &DVector<f64>, &mut R) -> DVector<f64>,
{
    if horizon < 1 {
        return Err(invalid("episode horizon must be at least 1"));
    }
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    states.push(x0.clone());
    for t in 0..horizon {
        let u = policy(t, &states[t], rng);
        let next = step(model, &states[t], &u, rng)?;
        actions.push(u);
        states.push(next);
    }
    Ok(Trajectory { states, actions })
}

fn check_state_action(a: &DMatrix<f64>, b: &DMatrix<f64>, x: &DVector<f64>, u: &DVector<f64>) -> Result<()> {
    if x.len() != a.ncols() {
        return Err(shape_err(format!("state has length {}, expected {}", x.len(), a.ncols())));
    }
    if u.len() != b.ncols() {
        return Err(shape_err(format!("action has length {}, expected {}", u.len(), b.ncols())));
    }
    Ok(())
}

fn check_row(a: &DMatrix<f64>, ell: usize) -> Result<()> {
    if !a.is_square() {
        return Err(shape_err("A must be square"));
    }
    if ell >= a.nrows() {
        return Err(shape_err(format!("row index {ell} out of range for {}x{}", a.nrows(), a.ncols())));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::random_stable_model;
    use nalgebra::{dmatrix, dvector};

    fn worked_example() -> LinearGaussianModel {
        LinearGaussianModel::new(dmatrix![0.5, 1.0; 0.0, 0.0], dmatrix![0.0, 0.0; 1.0, 0.0], 0.0).unwrap()
    }

    #[test]
    fn noiseless_steps() {
        let m = worked_example();
        let mut rng = episode_rng(0, 0);
        let x1 = step(&m, &dvector![0.5, 0.0], &dvector![1.0, 0.0], &mut rng).unwrap();
        assert_eq!(x1, dvector![0.25, 1.0]);

        let m = LinearGaussianModel::new(DMatrix::zeros(2, 2), DMatrix::identity(2, 2), 0.0).unwrap();
        let x = step(&m, &dvector![-4.0, 9.0], &dvector![3.0, 7.0], &mut rng).unwrap();
        assert_eq!(x, dvector![3.0, 7.0]);
        assert!(step(&m, &dvector![1.0], &dvector![3.0, 7.0], &mut rng).is_err());
    }

    #[test]
    fn noisy_step_mean_and_isotropy() {
        let m = random_stable_model(3, 2, 0.8, 0.01, 2).unwrap();
        let x = dvector![0.3, -0.2, 1.0];
        let u = dvector![0.5, 0.1];
        let mean = m.a() * &x + m.b() * &u;
        let n = 100_000;
        let mut rng = episode_rng(11, 0);
        let mut sum = DVector::zeros(3);
        let mut cross = DMatrix::zeros(3, 3);
        for _ in 0..n {
            let e = step(&m, &x, &u, &mut rng).unwrap() - &mean;
            sum += &e;
            cross += &e * e.transpose();
        }
        let tol = 4.0 * 0.01 / (n as f64).sqrt();
        for i in 0..3 {
            assert!((sum[i] / n as f64).abs() <= tol);
        }
        let cov = cross / n as f64;
        for i in 0..3 {
            assert!((cov[(i, i)] / 1e-4 - 1.0).abs() < 0.02);
            for j in 0..3 {
                if i != j {
                    // sample correlation of independent normals ~ N(0, 1/n)
                    assert!((cov[(i, j)] / 1e-4).abs() < 5.0 / (n as f64).sqrt());
                }
            }
        }
    }

    #[test]
    fn expected_rollout_examples() {
        let m = worked_example();
        let xs = expected_rollout(&m, &dvector![0.25, 1.0], &[dvector![3.7, -2.0]]).unwrap();
        assert_eq!(xs[0][0], 9.0 / 8.0);
        assert_eq!(xs[0][1], 3.7);
        assert!(expected_rollout(&m, &dvector![0.0, 0.0], &[]).unwrap().is_empty());

        let b = dmatrix![1.0, 2.0; -1.0, 0.5];
        let m0 = LinearGaussianModel::new(DMatrix::zeros(2, 2), b.clone(), 0.0).unwrap();
        let us = vec![dvector![1.0, 0.0], dvector![0.3, 2.0]];
        let xs = expected_rollout(&m0, &dvector![5.0, 5.0], &us).unwrap();
        assert_eq!(xs[1], &b * &us[1]);
    }

    #[test]
    fn expected_rollout_matches_noiseless_chain() {
        let m = random_stable_model(4, 2, 0.95, 0.0, 21).unwrap();
        let mut rng = episode_rng(1, 0);
        let x0 = dvector![0.1, -0.4, 0.9, 2.0];
        let us: Vec<_> = (0..5).map(|_| dvector![rng.random::<f64>(), rng.random::<f64>()]).collect();
        let exp = expected_rollout(&m, &x0, &us).unwrap();
        let mut x = x0.clone();
        for (t, u) in us.iter().enumerate() {
            x = step(&m, &x, u, &mut rng).unwrap();
            assert!((&x - &exp[t]).amax() <= 1e-12);
        }
    }

    #[test]
    fn constant_action_rollout_converges_to_steady_state() {
        let m = random_stable_model(5, 2, 0.9, 0.0, 1).unwrap();
        let u = dvector![0.7, -1.2];
        let xs = expected_rollout(&m, &DVector::zeros(5), &vec![u.clone(); 500]).unwrap();
        let lhs = DMatrix::identity(5, 5) - m.a();
        let ss = lhs.lu().solve(&(m.b() * &u)).unwrap();
        assert!((&xs[499] - ss).amax() <= 1e-6);
    }

    #[test]
    fn variance_examples() {
        let a = dmatrix![0.5];
        assert_eq!(state_variance(&a, 0.3, 1, 0).unwrap(), 0.09);
        assert!((state_variance(&a, 1.0, 3, 0).unwrap() - 1.3125).abs() < 1e-15);
        assert!(state_variance(&a, 1.0, 0, 0).is_err());
        assert!((steady_state_variance(&a, 1.0, 0, DEFAULT_VARIANCE_TOL).unwrap() - 4.0 / 3.0).abs() < 1e-9);
        let z = DMatrix::zeros(3, 3);
        assert_eq!(steady_state_variance(&z, 0.2, 1, DEFAULT_VARIANCE_TOL).unwrap(), 0.2 * 0.2);
        assert!(matches!(
            steady_state_variance(&dmatrix![1.0], 1.0, 0, 1e-10),
            Err(Error::Unstable { .. })
        ));
    }

    #[test]
    fn variance_at_two_steps_matches_monte_carlo() {
        let m = random_stable_model(3, 1, 0.8, 0.5, 8).unwrap();
        let x0 = dvector![0.2, 0.0, -0.1];
        let u = dvector![1.0];
        let mut rng = episode_rng(3, 3);
        let n = 200_000;
        let samples: Vec<f64> = (0..n)
            .map(|_| {
                let x1 = step(&m, &x0, &u, &mut rng).unwrap();
                step(&m, &x1, &u, &mut rng).unwrap()[1]
            })
            .collect();
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let exact = state_variance(m.a(), 0.5, 2, 1).unwrap();
        assert!((var / exact - 1.0).abs() < 0.02, "{var} vs {exact}");
    }

    #[test]
    fn steady_state_dominates_partial_sums_and_is_cauchy() {
        let m = random_stable_model(5, 2, 0.9, 0.01, 1).unwrap();
        for ell in 0..5 {
            let lim = steady_state_variance_detailed(m.a(), 0.01, ell, 1e-10).unwrap();
            let partial = state_variance(m.a(), 0.01, 50, ell).unwrap();
            assert!(lim.value >= partial);
            let sums = row_power_norm_sums(m.a(), ell, lim.terms + 200);
            let base = sums[lim.terms - 1];
            for s in &sums[lim.terms..] {
                assert!((s - base) / base < 1e-8);
            }
        }
    }

    #[test]
    fn confidence_multiplier_values() {
        assert!(confidence_multiplier(0.5, 1).unwrap().abs() < 1e-12);
        assert!((confidence_multiplier(0.05, 1).unwrap() - 1.6448536269514722).abs() < 1e-9);
        let mut prev = f64::NEG_INFINITY;
        for t in 1..=40 {
            let c = confidence_multiplier(0.1, t).unwrap();
            assert!(c >= prev);
            prev = c;
        }
        assert!(confidence_multiplier(0.0, 3).is_err());
        assert!(confidence_multiplier(1.0, 3).is_err());
    }

    #[test]
    fn episodes_are_reproducible_and_log_triples() {
        let m = random_stable_model(5, 2, 0.9, 0.01, 1).unwrap();
        let x0 = DVector::zeros(5);
        let policy = |_t: usize, _x: &DVector<f64>, r: &mut ChaCha8Rng| dvector![r.random::<f64>(), r.random::<f64>()];
        let t1 = run_episode(&m, &x0, policy, 20, &mut episode_rng(4, 2)).unwrap();
        let t2 = run_episode(&m, &x0, policy, 20, &mut episode_rng(4, 2)).unwrap();
        assert_eq!(t1, t2);
        let mut log = EpisodeLog::new(4, "m");
        log.push(t1.clone());
        log.push(t2);
        assert_eq!(log.transition_count(), 40);
        assert_eq!(log.transitions().len(), 40);
        assert_eq!(t1.transitions().count(), 20);

        let m0 = m.with_sigma(0.0).unwrap();
        let u = dvector![0.4, -0.3];
        let traj = run_episode(&m0, &x0, |_, _, _: &mut ChaCha8Rng| u.clone(), 7, &mut episode_rng(0, 0)).unwrap();
        let exp = expected_rollout(&m0, &x0, &vec![u.clone(); 7]).unwrap();
        assert_eq!(&traj.states[1..], &exp[..]);
    }

    #[test]
    fn csv_export_layout_and_parse() {
        let m = random_stable_model(2, 1, 0.5, 0.1, 1).unwrap();
        let mut log = EpisodeLog::new(0, "m");
        for ep in 0..2 {
            let traj = run_episode(&m, &dvector![0.0, 0.0], |_, _, _: &mut ChaCha8Rng| dvector![1.0], 3, &mut episode_rng(0, ep)).unwrap();
            log.push(traj);
        }
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "episode,t,x_0,x_1,u_0");
        assert_eq!(lines.len(), 1 + 2 * 4);
        assert!(lines[4].ends_with(','));
        let back = EpisodeLog::read_csv(&buf[..]).unwrap();
        assert_eq!(back.trajectories, log.trajectories);
    }
}

//! Multi-ball exploration: a registry of certified balls, candidate spawning,
//! action sampling and the fit / bound / recertify loop.

use std::io::Write;

use log::warn;
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ball::{max_safe_ball, CertificationProblem, SafeBallConfig};
use crate::error::{invalid, shape_err, Error, Result};
use crate::estimator::{epsilon_bound, ModelEstimate};
use crate::model::{ball_sample, frobenius_distance, unit_sphere_sample, ActionBall, LinearGaussianModel, SafetySpec, ThetaMatrix};
use crate::simulator::{episode_rng, step, EpisodeLog, Trajectory, Transition};

/// Certified balls; the first entry is the nominal ball around `u*`.
#[derive(Debug, Clone, PartialEq)]
pub struct BallRegistry {
    balls: Vec<ActionBall>,
    pub capacity: usize,
    pub min_radius: f64,
}

impl BallRegistry {
    pub fn new(nominal: ActionBall, capacity: usize, min_radius: f64) -> Result<Self> {
        if capacity < 1 {
            return Err(invalid("registry capacity must be at least 1"));
        }
        if !(min_radius >= 0.0) {
            return Err(invalid("min_radius must be nonnegative"));
        }
        Ok(Self { balls: vec![nominal], capacity, min_radius })
    }

    pub fn balls(&self) -> &[ActionBall] {
        &self.balls
    }

    pub fn nominal(&self) -> &ActionBall {
        &self.balls[0]
    }

    pub fn len(&self) -> usize {
        self.balls.len()
    }

    pub fn is_empty(&self) -> bool {
        self.balls.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.balls.len() >= self.capacity
    }

    /// Index of a registered ball containing `u`, if any.
    pub fn covering(&self, u: &DVector<f64>, tol: f64) -> Option<usize> {
        self.balls.iter().position(|b| b.contains(u, tol))
    }

    pub fn radius_range(&self) -> (f64, f64) {
        self.balls
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.radius), hi.max(b.radius)))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.balls).expect("balls serialize")
    }

    pub fn balls_from_json(text: &str) -> Result<Vec<ActionBall>> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Two independent points on the surface of a uniformly chosen ball.
pub fn spawn_candidates<R: Rng + ?Sized>(registry: &BallRegistry, rng: &mut R) -> [DVector<f64>; 2] {
    let ball = &registry.balls[rng.random_range(0..registry.balls.len())];
    let mut surface = || &ball.center + unit_sphere_sample(ball.dim(), rng) * ball.radius;
    [surface(), surface()]
}

/// A uniformly chosen ball, then a volume-uniform point inside it.
pub fn sample_action<R: Rng + ?Sized>(registry: &BallRegistry, rng: &mut R) -> DVector<f64> {
    let ball = &registry.balls[rng.random_range(0..registry.balls.len())];
    ball_sample(&ball.center, ball.radius, rng)
}

/// Settings shared by registry updates.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSettings {
    pub delta0: f64,
    pub spawn: bool,
    pub optimizer: SafeBallConfig,
}

/// Recertifies every ball under `problem` and, when `spawn` is set and there
/// is room, certifies two surface candidates.
pub fn update_registry<R: Rng + ?Sized>(
    registry: &BallRegistry,
    problem: &CertificationProblem,
    settings: &UpdateSettings,
    rng: &mut R,
) -> Result<BallRegistry> {
    if registry.nominal().dim() != problem.theta_hat.action_dim() {
        return Err(shape_err("registry balls do not match the action dimension"));
    }
    let mut next = Vec::with_capacity(registry.capacity);
    for (i, ball) in registry.balls.iter().enumerate() {
        let certified = max_safe_ball(problem, &ball.center, settings.delta0, &settings.optimizer, rng);
        match certified {
            Ok(res) if i == 0 || res.radius >= registry.min_radius => {
                next.push(ActionBall::new(ball.center.clone(), res.radius)?);
            }
            Ok(res) => warn!("dropping ball {i}: recertified radius {} below {}", res.radius, registry.min_radius),
            Err(e) if i == 0 => {
                warn!("nominal ball could not be certified ({e}); shrinking it to its center");
                next.push(ActionBall::new(ball.center.clone(), 0.0)?);
            }
            Err(e) => warn!("dropping ball {i}: {e}"),
        }
    }
    let mut out = BallRegistry { balls: next, capacity: registry.capacity, min_radius: registry.min_radius };
    if settings.spawn && !out.is_full() {
        let candidates = spawn_candidates(registry, rng);
        for cand in candidates {
            if out.is_full() {
                break;
            }
            match max_safe_ball(problem, &cand, settings.delta0, &settings.optimizer, rng) {
                Ok(res) if res.radius >= out.min_radius => out.balls.push(ActionBall::new(cand, res.radius)?),
                Ok(_) => {}
                Err(e) => warn!("candidate rejected: {e}"),
            }
        }
    }
    Ok(out)
}

/// Source of transitions for the exploration loop.
pub trait Environment {
    fn state_dim(&self) -> usize;
    fn action_dim(&self) -> usize;
    /// Initial state of every episode.
    fn initial_state(&self) -> DVector<f64>;
    fn step(&mut self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>>;
    /// The true parameters, when known (simulation).
    fn true_theta(&self) -> Option<ThetaMatrix> {
        None
    }
}

/// A known linear-Gaussian model started from a fixed state.
#[derive(Debug, Clone)]
pub struct SimulatedEnvironment {
    pub model: LinearGaussianModel,
    pub x0: DVector<f64>,
}

impl Environment for SimulatedEnvironment {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn action_dim(&self) -> usize {
        self.model.action_dim()
    }

    fn initial_state(&self) -> DVector<f64> {
        self.x0.clone()
    }

    fn step(&mut self, x: &DVector<f64>, u: &DVector<f64>, rng: &mut ChaCha8Rng) -> Result<DVector<f64>> {
        step(&self.model, x, u, rng)
    }

    fn true_theta(&self) -> Option<ThetaMatrix> {
        Some(self.model.theta())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExplorationMode {
    Single,
    Multi,
}

impl ExplorationMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExplorationMode::Single => "single",
            ExplorationMode::Multi => "multi",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExplorationConfig {
    pub mode: ExplorationMode,
    pub total_episodes: usize,
    /// Episodes collected between model updates.
    pub cadence: usize,
    pub horizon: usize,
    pub alpha: f64,
    pub u_star: DVector<f64>,
    pub spec: SafetySpec,
    pub capacity: usize,
    pub min_radius: f64,
    pub delta0: f64,
    pub optimizer: SafeBallConfig,
}

impl ExplorationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cadence < 1 || self.total_episodes < self.cadence {
            return Err(invalid("need cadence >= 1 and total_episodes >= cadence"));
        }
        if self.horizon < 1 {
            return Err(invalid("horizon must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha must lie in (0, 1)"));
        }
        if !(self.delta0 > 0.0) {
            return Err(invalid("delta0 must be positive"));
        }
        self.optimizer.validate()
    }
}

/// One model update of the exploration loop.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpdateRecord {
    pub n: usize,
    pub eps_theoretical: f64,
    pub eps_actual: Option<f64>,
    pub n_balls: usize,
    pub min_radius: f64,
    pub max_radius: f64,
    #[serde(skip)]
    pub snapshot: Vec<ActionBall>,
}

/// The ball every executed episode drew its actions from.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeAudit {
    pub episode: usize,
    pub ball: ActionBall,
}

#[derive(Debug, Clone)]
pub struct ExplorationOutcome {
    pub records: Vec<UpdateRecord>,
    pub registry: BallRegistry,
    pub log: EpisodeLog,
    pub audit: Vec<EpisodeAudit>,
}

/// Writes `n, eps_theoretical, eps_actual, n_balls, min_radius, max_radius`.
pub fn write_update_csv<W: Write>(records: &[UpdateRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n", "eps_theoretical", "eps_actual", "n_balls", "min_radius", "max_radius"])?;
    for r in records {
        w.write_record([
            r.n.to_string(),
            r.eps_theoretical.to_string(),
            r.eps_actual.map_or(String::new(), |e| e.to_string()),
            r.n_balls.to_string(),
            r.min_radius.to_string(),
            r.max_radius.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn registry_rng(seed: u64, update: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1_e995_7f4a_7c15);
    rng.set_stream(update);
    rng
}

#[allow(clippy::too_many_arguments)]
fn run_block<E: Environment>(
    env: &mut E,
    registry: &BallRegistry,
    seed: u64,
    first_episode: usize,
    count: usize,
    horizon: usize,
    log: &mut EpisodeLog,
    audit: &mut Vec<EpisodeAudit>,
) -> Result<()> {
    for episode in first_episode..first_episode + count {
        let mut rng = episode_rng(seed, episode as u64);
        let ball = registry.balls[rng.random_range(0..registry.balls.len())].clone();
        let mut states = vec![env.initial_state()];
        let mut actions = Vec::with_capacity(horizon);
        for t in 0..horizon {
            let u = ball_sample(&ball.center, ball.radius, &mut rng);
            let next = env.step(&states[t], &u, &mut rng)?;
            actions.push(u);
            states.push(next);
        }
        log.push(Trajectory { states, actions });
        audit.push(EpisodeAudit { episode, ball });
    }
    Ok(())
}

/// Runs the explore / refit / recertify loop and returns one record per update.
pub fn run_exploration<E: Environment>(env: &mut E, config: &ExplorationConfig, seed: u64) -> Result<ExplorationOutcome> {
    config.validate()?;
    if config.u_star.len() != env.action_dim() {
        return Err(shape_err("u_star does not match the action dimension"));
    }
    config.spec.check_dim(env.state_dim())?;
    let nominal = ActionBall::new(config.u_star.clone(), config.delta0)?;
    let capacity = match config.mode {
        ExplorationMode::Single => 1,
        ExplorationMode::Multi => config.capacity,
    };
    let mut registry = BallRegistry::new(nominal, capacity, config.min_radius)?;
    let settings = UpdateSettings {
        delta0: config.delta0,
        spawn: config.mode == ExplorationMode::Multi,
        optimizer: config.optimizer.clone(),
    };
    let truth = env.true_theta();
    let x0 = env.initial_state();
    let mut log = EpisodeLog::new(seed, config.mode.as_str());
    let mut audit = Vec::new();
    let mut records = Vec::new();
    let mut episode = 0;
    let mut retried = false;
    let mut update = 0u64;
    while episode + config.cadence <= config.total_episodes {
        run_block(env, &registry, seed, episode, config.cadence, config.horizon, &mut log, &mut audit)?;
        episode += config.cadence;
        let data: Vec<Transition> = log.transitions();
        let estimate = match fit(&data, config.alpha) {
            Ok(e) => e,
            Err(e) if !retried && is_rank_failure(&e) => {
                warn!("fit failed after {} samples ({e}); collecting another block at the nominal ball", data.len());
                retried = true;
                let fallback = BallRegistry::new(registry.nominal().clone(), 1, registry.min_radius)?;
                if episode + config.cadence > config.total_episodes {
                    return Err(e);
                }
                run_block(env, &fallback, seed, episode, config.cadence, config.horizon, &mut log, &mut audit)?;
                episode += config.cadence;
                fit(&log.transitions(), config.alpha)?
            }
            Err(e) => return Err(e),
        };
        let (theta_hat, eps) = estimate;
        let eps_actual = match &truth {
            Some(t) => Some(frobenius_distance(&theta_hat, t)?),
            None => None,
        };
        match CertificationProblem::new(theta_hat, eps, x0.clone(), config.horizon, config.spec.clone()) {
            Ok(problem) => {
                let mut rng = registry_rng(seed, update);
                registry = update_registry(&registry, &problem, &settings, &mut rng)?;
            }
            Err(Error::Unstable { rho }) => warn!("estimate has spectral radius {rho}; registry left unchanged"),
            Err(e) => return Err(e),
        }
        update += 1;
        let (min_radius, max_radius) = registry.radius_range();
        records.push(UpdateRecord {
            n: log.transition_count(),
            eps_theoretical: eps,
            eps_actual,
            n_balls: registry.len(),
            min_radius,
            max_radius,
            snapshot: registry.balls.clone(),
        });
    }
    Ok(ExplorationOutcome { records, registry, log, audit })
}

fn is_rank_failure(e: &Error) -> bool {
    matches!(e, Error::Estimation(_) | Error::IllConditioned { .. })
}

fn fit(data: &[Transition], alpha: f64) -> Result<(ThetaMatrix, f64)> {
    let estimate = ModelEstimate::from_data(data)?;
    let sigma = estimate
        .sigma_hat
        .ok_or_else(|| Error::Estimation("too few samples to estimate sigma".into()))?;
    let bound = epsilon_bound(&estimate, alpha, sigma)?;
    Ok((estimate.theta_hat, bound.epsilon))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bounds::steady_state_expectation;
    use crate::model::random_stable_model;
    use nalgebra::dvector;

    fn registry_with(radius: f64) -> BallRegistry {
        BallRegistry::new(ActionBall::new(dvector![1.0, -1.0], radius).unwrap(), 14, 0.2).unwrap()
    }

    #[test]
    fn candidates_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let reg = registry_with(0.7);
        for _ in 0..100 {
            for c in spawn_candidates(&reg, &mut rng) {
                assert!(((&c - &reg.nominal().center).norm() - 0.7).abs() < 1e-10);
            }
        }
        let zero = registry_with(0.0);
        for c in spawn_candidates(&zero, &mut rng) {
            assert_eq!(c, zero.nominal().center);
        }
    }

    #[test]
    fn candidate_mean_approaches_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let reg = registry_with(1.0);
        let mut sum = DVector::zeros(2);
        for _ in 0..5000 {
            for c in spawn_candidates(&reg, &mut rng) {
                sum += c;
            }
        }
        let mean = sum / 10_000.0;
        assert!((mean - &reg.nominal().center).norm() < 0.03);
    }

    #[test]
    fn sampled_radii_follow_volume_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let reg = registry_with(2.0);
        let n = 10_000;
        let mut radii: Vec<f64> = (0..n)
            .map(|_| {
                let u = sample_action(&reg, &mut rng);
                assert!(reg.covering(&u, 1e-12).is_some());
                (u - &reg.nominal().center).norm() / 2.0
            })
            .collect();
        radii.sort_by(f64::total_cmp);
        let ks = radii
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let cdf = r * r;
                (cdf - i as f64 / n as f64).abs().max((cdf - (i + 1) as f64 / n as f64).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.02, "ks {ks}");
        let zero = registry_with(0.0);
        assert_eq!(sample_action(&zero, &mut rng), zero.nominal().center);
    }

    fn small_setup() -> (SimulatedEnvironment, ExplorationConfig) {
        let model = random_stable_model(3, 2, 0.8, 0.01, 11).unwrap();
        let u = dvector![0.5, 0.5];
        let x0 = steady_state_expectation(model.a(), model.b(), &u).unwrap();
        let spec = SafetySpec::single(3, 0, x0[0] + 0.5).unwrap();
        let config = ExplorationConfig {
            mode: ExplorationMode::Multi,
            total_episodes: 40,
            cadence: 20,
            horizon: 8,
            alpha: 0.05,
            u_star: u,
            spec,
            capacity: 4,
            min_radius: 0.2,
            delta0: 0.1,
            optimizer: SafeBallConfig { restarts: 2, omega: 0.1, ..Default::default() },
        };
        (SimulatedEnvironment { model, x0 }, config)
    }

    #[test]
    fn exploration_records_and_audit() {
        let (mut env, config) = small_setup();
        let out = run_exploration(&mut env, &config, 5).unwrap();
        assert_eq!(out.records.len(), 2);
        assert!(out.records[1].eps_theoretical < out.records[0].eps_theoretical);
        for r in &out.records {
            assert!(r.n_balls <= config.capacity);
            assert_eq!(r.snapshot[0].center, config.u_star);
        }
        assert_eq!(out.audit.len(), out.log.trajectories.len());
        for (a, traj) in out.audit.iter().zip(&out.log.trajectories) {
            assert!(traj.actions.iter().all(|u| a.ball.contains(u, 1e-12)));
        }
        let mut buf = Vec::new();
        write_update_csv(&out.records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,eps_theoretical,eps_actual,n_balls,min_radius,max_radius\n"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn single_mode_matches_unspawned_multi() {
        let (mut env, mut config) = small_setup();
        config.mode = ExplorationMode::Single;
        let single = run_exploration(&mut env, &config, 9).unwrap();
        config.mode = ExplorationMode::Multi;
        config.capacity = 1;
        let multi = run_exploration(&mut env, &config, 9).unwrap();
        assert_eq!(single.records.len(), multi.records.len());
        for (s, m) in single.records.iter().zip(&multi.records) {
            assert_eq!(s.snapshot, m.snapshot);
            assert_eq!(s.eps_theoretical, m.eps_theoretical);
        }
    }

    #[test]
    fn capacity_is_respected() {
        let model = random_stable_model(3, 2, 0.5, 0.0, 1).unwrap();
        let u = dvector![0.0, 0.0];
        let spec = SafetySpec::single(3, 0, 1e6).unwrap();
        let problem = CertificationProblem::new(model.theta(), 0.0, DVector::zeros(3), 3, spec).unwrap();
        let settings = UpdateSettings {
            delta0: 0.1,
            spawn: true,
            optimizer: SafeBallConfig { restarts: 1, max_doublings: 3, ..Default::default() },
        };
        let mut reg = BallRegistry::new(ActionBall::new(u, 0.1).unwrap(), 3, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..4 {
            reg = update_registry(&reg, &problem, &settings, &mut rng).unwrap();
            assert!(reg.len() <= 3);
        }
        assert_eq!(reg.len(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(16))]

            #[test]
            fn registry_invariants_hold_across_updates(seed in 0u64..1000, capacity in 1usize..6, eps in 0.0f64..0.05) {
                let model = random_stable_model(3, 2, 0.7, 0.0, seed).unwrap();
                let u = dvector![0.3, -0.2];
                let x0 = steady_state_expectation(model.a(), model.b(), &u).unwrap();
                let spec = SafetySpec::single(3, 0, x0[0] + 1.0).unwrap();
                let problem = CertificationProblem::new(model.theta(), eps, x0, 6, spec).unwrap();
                let settings = UpdateSettings {
                    delta0: 0.1,
                    spawn: true,
                    optimizer: SafeBallConfig { restarts: 1, omega: 0.1, ..Default::default() },
                };
                let mut reg = BallRegistry::new(ActionBall::new(u.clone(), 0.1).unwrap(), capacity, 0.2).unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for _ in 0..3 {
                    reg = update_registry(&reg, &problem, &settings, &mut rng).unwrap();
                    prop_assert!(reg.len() <= capacity);
                    prop_assert_eq!(&reg.nominal().center, &u);
                    prop_assert!(reg.balls()[1..].iter().all(|b| b.radius >= reg.min_radius));
                    for _ in 0..20 {
                        let a = sample_action(&reg, &mut rng);
                        prop_assert!(reg.covering(&a, 1e-12).is_some());
                    }
                }
            }
        }
    }

    #[test]
    fn registry_json_round_trip() {
        let reg = registry_with(0.3);
        let balls = BallRegistry::balls_from_json(&reg.to_json()).unwrap();
        assert_eq!(balls, reg.balls());
    }
}

//! Experiment configuration and the three figure reproductions on
//! synthetic systems.

use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::ball::{max_safe_ball, CertificationProblem, SafeBallConfig};
use crate::bounds::steady_state_expectation;
use crate::error::{invalid, shape_err, Result};
use crate::exploration::{run_exploration, ExplorationConfig, ExplorationMode, SimulatedEnvironment, UpdateRecord};
use crate::model::{random_stable_model, unit_sphere_sample, ActionBall, LinearGaussianModel, SafetySpec};
use crate::simulator::{confidence_multiplier, episode_rng, steady_state_variance, DEFAULT_VARIANCE_TOL};
use crate::svg::{circle_panels, line_chart, CirclePanel, Series};

/// Where the true dynamics come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum ModelSource {
    File { path: PathBuf },
    Generated { d: usize, d_prime: usize, rho_target: f64, seed: u64 },
}

impl Default for ModelSource {
    fn default() -> Self {
        ModelSource::Generated { d: 5, d_prime: 2, rho_target: 0.9, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelSource,
    /// Nominal action; drawn as `u_star_norm` times a random direction when absent.
    pub u_star: Option<Vec<f64>>,
    pub u_star_norm: f64,
    /// Upper bounds; when absent, `s_l` is the steady state under `u*` plus `headroom`.
    pub upper: Option<Vec<f64>>,
    pub constrained: Vec<usize>,
    pub headroom: f64,
    /// Required distance, in steady-state standard deviations, between the
    /// nominal steady state and each bound.
    pub margin_sd: f64,
    pub horizon: usize,
    pub alpha: f64,
    /// When set, safety holds with probability `1 - gamma`; otherwise in expectation.
    pub gamma: Option<f64>,
    pub omega: f64,
    pub delta0: f64,
    pub sigma: f64,
    pub cadence: usize,
    pub total_episodes: usize,
    pub capacity: usize,
    pub min_radius: f64,
    /// Fig. 1 sweep, as fractions of `||theta*||_F`.
    pub epsilon_grid_relative: Vec<f64>,
    pub fig2_seeds: usize,
    pub fig3_checkpoints: Vec<usize>,
    pub fig3_mode: ExplorationMode,
    pub restarts: usize,
    pub inner_iterations: usize,
    pub gradient_steps: usize,
    pub rho_margin: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelSource::default(),
            u_star: None,
            u_star_norm: 1.5,
            upper: None,
            constrained: vec![0],
            headroom: 0.5,
            margin_sd: 2.0,
            horizon: 20,
            alpha: 0.05,
            gamma: None,
            omega: 0.05,
            delta0: 0.1,
            sigma: 0.01,
            cadence: 100,
            total_episodes: 1000,
            capacity: 14,
            min_radius: 0.2,
            epsilon_grid_relative: vec![0.0, 0.001, 0.0025, 0.005, 0.0075, 0.01, 0.0125, 0.015, 0.0175, 0.02, 0.0215],
            fig2_seeds: 11,
            fig3_checkpoints: vec![2000, 10000, 20000],
            fig3_mode: ExplorationMode::Multi,
            restarts: 3,
            inner_iterations: 50,
            gradient_steps: 3,
            rho_margin: 1e-3,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("u_star_norm", self.u_star_norm),
            ("omega", self.omega),
            ("delta0", self.delta0),
            ("min_radius", self.min_radius),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.sigma >= 0.0) || !(self.headroom >= 0.0) || !(self.margin_sd >= 0.0) {
            return Err(invalid("sigma, headroom and margin_sd must be nonnegative"));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(invalid("alpha must lie in (0, 1)"));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g < 1.0) {
                return Err(invalid("gamma must lie in (0, 1)"));
            }
        }
        if self.horizon < 1 || self.cadence < 1 || self.capacity < 1 || self.restarts < 1 || self.fig2_seeds < 1 {
            return Err(invalid("horizon, cadence, capacity, restarts and fig2_seeds must be positive"));
        }
        if self.total_episodes < self.cadence {
            return Err(invalid("total_episodes must be at least cadence"));
        }
        if self.epsilon_grid_relative.is_empty() || self.epsilon_grid_relative.iter().any(|e| !(*e >= 0.0)) {
            return Err(invalid("epsilon grid must be nonempty and nonnegative"));
        }
        if let ModelSource::Generated { d, d_prime, rho_target, .. } = self.model {
            if d == 0 || d_prime == 0 || !(rho_target > 0.0 && rho_target < 1.0) {
                return Err(invalid("generated model needs d, d' >= 1 and rho_target in (0, 1)"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Result<SafeBallConfig> {
        let c = match self.gamma {
            Some(g) => confidence_multiplier(g, self.horizon)?,
            None => 0.0,
        };
        Ok(SafeBallConfig {
            restarts: self.restarts,
            inner_iterations: self.inner_iterations,
            gradient_steps: self.gradient_steps,
            rho_margin: self.rho_margin,
            confidence_multiplier: c,
            sigma: self.sigma,
            omega: self.omega,
            ..SafeBallConfig::default()
        })
    }
}

/// True model, nominal action, start state and safety bounds of an experiment.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: LinearGaussianModel,
    pub u_star: DVector<f64>,
    pub x0: DVector<f64>,
    pub spec: SafetySpec,
}

impl Scenario {
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let (model, seed) = match &config.model {
            ModelSource::File { path } => (LinearGaussianModel::from_json(&std::fs::read_to_string(path)?)?, 0),
            ModelSource::Generated { d, d_prime, rho_target, seed } => {
                (random_stable_model(*d, *d_prime, *rho_target, config.sigma, *seed)?, *seed)
            }
        };
        let model = model.with_sigma(config.sigma)?;
        let u_star = match &config.u_star {
            Some(u) => DVector::from_vec(u.clone()),
            None => {
                let mut rng = episode_rng(seed, u64::MAX);
                unit_sphere_sample(model.action_dim(), &mut rng) * config.u_star_norm
            }
        };
        if u_star.len() != model.action_dim() {
            return Err(shape_err("u_star does not match the action dimension"));
        }
        let x0 = steady_state_expectation(model.a(), model.b(), &u_star)?;
        let d = model.state_dim();
        let upper = match &config.upper {
            Some(s) => s.clone(),
            None => x0.iter().map(|v| v + config.headroom).collect(),
        };
        let spec = SafetySpec::new(upper, config.constrained.clone())?;
        spec.check_dim(d)?;
        for &ell in &spec.constrained {
            let sd = steady_state_variance(model.a(), model.sigma(), ell, DEFAULT_VARIANCE_TOL)?.sqrt();
            if x0[ell] > spec.bound(ell) - config.margin_sd * sd {
                return Err(crate::Error::NominalUnsafe(format!(
                    "steady state {} of x[{ell}] under u* is within {} standard deviations of the bound {}",
                    x0[ell],
                    config.margin_sd,
                    spec.bound(ell)
                )));
            }
        }
        Ok(Self { model, u_star, x0, spec })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig1Row {
    pub epsilon: f64,
    pub delta_max: f64,
}

/// Largest certified ball around `u*` for each epsilon of the sweep, with `theta_hat = theta*`.
pub fn run_fig1(config: &ExperimentConfig, seed: u64) -> Result<Vec<Fig1Row>> {
    let scenario = Scenario::build(config)?;
    let optimizer = config.optimizer()?;
    let theta = scenario.model.theta();
    let norm = theta.frobenius_norm();
    let mut rows = Vec::with_capacity(config.epsilon_grid_relative.len());
    for (i, rel) in config.epsilon_grid_relative.iter().enumerate() {
        let epsilon = rel * norm;
        let problem = CertificationProblem::new(theta.clone(), epsilon, scenario.x0.clone(), config.horizon, scenario.spec.clone())?;
        let mut rng = episode_rng(seed, i as u64);
        let res = max_safe_ball(&problem, &scenario.u_star, config.delta0, &optimizer, &mut rng)?;
        rows.push(Fig1Row { epsilon, delta_max: res.radius });
    }
    Ok(rows)
}

pub fn exploration_config(config: &ExperimentConfig, scenario: &Scenario, mode: ExplorationMode) -> Result<ExplorationConfig> {
    Ok(ExplorationConfig {
        mode,
        total_episodes: config.total_episodes,
        cadence: config.cadence,
        horizon: config.horizon,
        alpha: config.alpha,
        u_star: scenario.u_star.clone(),
        spec: scenario.spec.clone(),
        capacity: config.capacity,
        min_radius: config.min_radius,
        delta0: config.delta0,
        optimizer: config.optimizer()?,
    })
}

/// One exploration run of a fig. 2 pair.
#[derive(Debug, Clone)]
pub struct Fig2Run {
    pub mode: ExplorationMode,
    pub seed: u64,
    pub records: Vec<UpdateRecord>,
}

/// Median-aggregated fig. 2 point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig2Row {
    pub mode: ExplorationMode,
    pub n: usize,
    pub eps_theoretical: f64,
    pub eps_actual: f64,
}

/// Runs single- and multi-ball exploration on `fig2_seeds` paired seeds.
pub fn run_fig2(config: &ExperimentConfig, seed: u64) -> Result<Vec<Fig2Run>> {
    let scenario = Scenario::build(config)?;
    let mut runs = Vec::new();
    for k in 0..config.fig2_seeds as u64 {
        let run_seed = seed.wrapping_add(k);
        for mode in [ExplorationMode::Single, ExplorationMode::Multi] {
            let mut env = SimulatedEnvironment { model: scenario.model.clone(), x0: scenario.x0.clone() };
            let out = run_exploration(&mut env, &exploration_config(config, &scenario, mode)?, run_seed)?;
            runs.push(Fig2Run { mode, seed: run_seed, records: out.records });
        }
    }
    Ok(runs)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-mode, per-n medians over seeds.
pub fn summarize_fig2(runs: &[Fig2Run]) -> Vec<Fig2Row> {
    let mut rows = Vec::new();
    for mode in [ExplorationMode::Single, ExplorationMode::Multi] {
        let of_mode: Vec<&Fig2Run> = runs.iter().filter(|r| r.mode == mode).collect();
        let Some(first) = of_mode.first() else { continue };
        for (i, rec) in first.records.iter().enumerate() {
            let mut t: Vec<f64> = of_mode.iter().filter_map(|r| r.records.get(i)).map(|r| r.eps_theoretical).collect();
            let mut a: Vec<f64> = of_mode.iter().filter_map(|r| r.records.get(i)).filter_map(|r| r.eps_actual).collect();
            rows.push(Fig2Row { mode, n: rec.n, eps_theoretical: median(&mut t), eps_actual: median(&mut a) });
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Fig3Snapshot {
    pub n: usize,
    pub eps_theoretical: f64,
    pub balls: Vec<ActionBall>,
}

/// Registry snapshots at the configured checkpoints of one exploration run.
pub fn run_fig3(config: &ExperimentConfig, seed: u64) -> Result<(Vec<Fig3Snapshot>, Vec<UpdateRecord>)> {
    let scenario = Scenario::build(config)?;
    let mut env = SimulatedEnvironment { model: scenario.model.clone(), x0: scenario.x0.clone() };
    let out = run_exploration(&mut env, &exploration_config(config, &scenario, config.fig3_mode)?, seed)?;
    let mut snaps = Vec::new();
    for &n in &config.fig3_checkpoints {
        match out.records.iter().rev().find(|r| r.n <= n) {
            Some(r) => snaps.push(Fig3Snapshot { n, eps_theoretical: r.eps_theoretical, balls: r.snapshot.clone() }),
            None => return Err(invalid(format!("checkpoint {n} precedes the first model update"))),
        }
    }
    Ok((snaps, out.records))
}

pub fn fig1_csv(rows: &[Fig1Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

pub fn fig2_csv(rows: &[Fig2Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

/// Every update of every run, with its seed.
pub fn fig2_runs_csv(runs: &[Fig2Run]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["mode", "seed", "n", "eps_theoretical", "eps_actual", "n_balls", "min_radius", "max_radius"])?;
    for run in runs {
        for r in &run.records {
            w.write_record([
                run.mode.as_str().to_string(),
                run.seed.to_string(),
                r.n.to_string(),
                r.eps_theoretical.to_string(),
                r.eps_actual.map_or(String::new(), |e| e.to_string()),
                r.n_balls.to_string(),
                r.min_radius.to_string(),
                r.max_radius.to_string(),
            ])?;
        }
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

/// One row per checkpoint: `n, n_balls, min_radius, max_radius, eps_theoretical`.
pub fn fig3_csv(snaps: &[Fig3Snapshot]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["n", "n_balls", "min_radius", "max_radius", "eps_theoretical"])?;
    for s in snaps {
        let (lo, hi) = s
            .balls
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), b| (lo.min(b.radius), hi.max(b.radius)));
        w.write_record([s.n.to_string(), s.balls.len().to_string(), lo.to_string(), hi.to_string(), s.eps_theoretical.to_string()])?;
    }
    Ok(String::from_utf8(w.into_inner().map_err(|e| e.into_error())?).expect("csv is utf-8"))
}

pub fn fig1_svg(rows: &[Fig1Row]) -> String {
    let s = Series { name: "delta_max".into(), points: rows.iter().map(|r| (r.epsilon, r.delta_max)).collect(), dashed: false };
    line_chart("Largest safe ball vs model error", "epsilon", "delta_max", &[s])
}

pub fn fig2_svg(rows: &[Fig2Row]) -> String {
    let mut series = Vec::new();
    for mode in [ExplorationMode::Multi, ExplorationMode::Single] {
        let of_mode: Vec<&Fig2Row> = rows.iter().filter(|r| r.mode == mode).collect();
        series.push(Series {
            name: format!("{} theoretical", mode.as_str()),
            points: of_mode.iter().map(|r| (r.n as f64, r.eps_theoretical)).collect(),
            dashed: false,
        });
        series.push(Series {
            name: format!("{} actual", mode.as_str()),
            points: of_mode.iter().map(|r| (r.n as f64, r.eps_actual)).collect(),
            dashed: true,
        });
    }
    line_chart("Model error vs training examples", "n", "epsilon", &series)
}

pub fn fig3_svg(snaps: &[Fig3Snapshot]) -> String {
    if snaps.iter().any(|s| s.balls.iter().any(|b| b.dim() != 2)) {
        warn!("actions are not two-dimensional; plotting the first two coordinates");
    }
    let coord = |b: &ActionBall, i: usize| b.center.get(i).copied().unwrap_or(0.0);
    let panels: Vec<CirclePanel> = snaps
        .iter()
        .map(|s| CirclePanel {
            title: format!("n = {}", s.n),
            circles: s.balls.iter().map(|b| (coord(b, 0), coord(b, 1), b.radius)).collect(),
        })
        .collect();
    circle_panels("Safe balls in the action plane", &panels)
}

pub fn snapshots_json(snaps: &[Fig3Snapshot]) -> String {
    serde_json::to_string_pretty(snaps).expect("snapshots serialize")
}

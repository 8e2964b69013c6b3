use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use safe_explore::ball::{max_safe_ball, AdversarialWitness, CertificationProblem};
use safe_explore::estimator::{epsilon_bound, EstimateReport, ModelEstimate};
use safe_explore::exploration::write_update_csv;
use safe_explore::experiments::{
    fig1_csv, fig1_svg, fig2_csv, fig2_runs_csv, fig2_svg, fig3_csv, fig3_svg, run_fig1, run_fig2, run_fig3, snapshots_json,
    summarize_fig2, ExperimentConfig, Scenario,
};
use safe_explore::model::{ball_sample, SafetySpec};
use safe_explore::simulator::{episode_rng, run_episode, EpisodeLog};

#[derive(Parser)]
#[command(name = "safe-explore", version, about = "Safe exploration for linear-Gaussian system identification")]
struct Cli {
    /// Experiment configuration (JSON); defaults are used for missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Largest safe ball around u* across the epsilon sweep.
    Fig1,
    /// Single- vs multi-ball exploration error curves.
    Fig2,
    /// Registry snapshots during multi-ball exploration.
    Fig3,
    /// Re-check an adversarial witness.
    Verify {
        #[arg(long)]
        witness: PathBuf,
        /// Estimate JSON as written by `estimate`.
        #[arg(long)]
        estimate: PathBuf,
        /// Safety spec JSON `{upper, constrained}`.
        #[arg(long)]
        spec: PathBuf,
    },
    /// Simulate episodes in the nominal ball of the configured scenario.
    Simulate {
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        /// Ball radius around u* (defaults to delta0).
        #[arg(long)]
        radius: Option<f64>,
    },
    /// Fit a model and its error radius from an episode CSV.
    Estimate {
        #[arg(long)]
        episodes: PathBuf,
    },
    /// Largest safe ball around u* for a fitted estimate.
    Maxball {
        #[arg(long)]
        estimate: PathBuf,
        /// Overrides the scenario's safety spec.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

#[derive(Serialize)]
struct ScenarioJson<'a> {
    u_star: Vec<f64>,
    x0: Vec<f64>,
    spec: &'a SafetySpec,
}

#[derive(Serialize)]
struct MaxballJson {
    radius: f64,
    upper: f64,
    checks: usize,
    capped: bool,
    epsilon: f64,
}

fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    let out = cli.out.as_path();
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match cli.command {
        Command::Fig1 => {
            let rows = run_fig1(&config, cli.seed)?;
            write(out, "fig1.csv", &fig1_csv(&rows)?)?;
            write(out, "fig1.svg", &fig1_svg(&rows))?;
        }
        Command::Fig2 => {
            let runs = run_fig2(&config, cli.seed)?;
            let rows = summarize_fig2(&runs);
            write(out, "fig2.csv", &fig2_csv(&rows)?)?;
            write(out, "fig2_runs.csv", &fig2_runs_csv(&runs)?)?;
            write(out, "fig2.svg", &fig2_svg(&rows))?;
        }
        Command::Fig3 => {
            let (snaps, records) = run_fig3(&config, cli.seed)?;
            write(out, "fig3.csv", &fig3_csv(&snaps)?)?;
            write(out, "fig3_snapshots.json", &snapshots_json(&snaps))?;
            let mut buf = Vec::new();
            write_update_csv(&records, &mut buf)?;
            write(out, "fig3_updates.csv", &String::from_utf8(buf)?)?;
            write(out, "fig3.svg", &fig3_svg(&snaps))?;
        }
        Command::Verify { witness, estimate, spec } => {
            let w = AdversarialWitness::from_json(&fs::read_to_string(&witness)?)?;
            let report: EstimateReport = serde_json::from_str(&fs::read_to_string(&estimate)?)?;
            let spec: SafetySpec = serde_json::from_str(&fs::read_to_string(&spec)?)?;
            let check = w.verify(&report.theta()?, &spec)?;
            println!("re-evaluated objective: {}", check.recomputed_value);
            println!("recorded objective:     {}", w.value);
            println!(
                "model distance {} (epsilon {}), actions feasible {}, spectral radius {}, violates {}",
                check.model_distance, w.epsilon, check.actions_feasible, check.spectral_radius, check.violates
            );
            if !check.value_matches {
                eprintln!("value mismatch: recorded {} vs recomputed {}", w.value, check.recomputed_value);
            }
            if w.epsilon > report.epsilon + 1e-12 {
                eprintln!("witness epsilon {} exceeds the estimate's epsilon {}", w.epsilon, report.epsilon);
                return Ok(ExitCode::from(1));
            }
            if !check.is_valid() {
                eprintln!("witness rejected");
                return Ok(ExitCode::from(1));
            }
            println!("witness valid");
        }
        Command::Simulate { episodes, radius } => {
            let scenario = Scenario::build(&config)?;
            let radius = radius.unwrap_or(config.delta0);
            if radius.is_nan() || radius < 0.0 {
                bail!("radius must be nonnegative");
            }
            let mut log = EpisodeLog::new(cli.seed, "scenario");
            for e in 0..episodes {
                let mut rng = episode_rng(cli.seed, e as u64);
                let traj = run_episode(
                    &scenario.model,
                    &scenario.x0,
                    |_, _, rng: &mut ChaCha8Rng| ball_sample(&scenario.u_star, radius, rng),
                    config.horizon,
                    &mut rng,
                )?;
                log.push(traj);
            }
            let mut buf = Vec::new();
            log.write_csv(&mut buf)?;
            write(out, "episodes.csv", &String::from_utf8(buf)?)?;
            write(out, "model.json", &scenario.model.to_json())?;
            write(out, "spec.json", &json(&scenario.spec))?;
            write(
                out,
                "scenario.json",
                &json(&ScenarioJson {
                    u_star: scenario.u_star.iter().copied().collect(),
                    x0: scenario.x0.iter().copied().collect(),
                    spec: &scenario.spec,
                }),
            )?;
        }
        Command::Estimate { episodes } => {
            let log = EpisodeLog::read_csv(fs::File::open(&episodes).with_context(|| format!("opening {}", episodes.display()))?)?;
            let data = log.transitions();
            let est = ModelEstimate::from_data(&data)?;
            let sigma = est.sigma_hat.unwrap_or(config.sigma);
            let bound = epsilon_bound(&est, config.alpha, sigma)?;
            println!("n = {}, epsilon = {}", est.n, bound.epsilon);
            write(out, "estimate.json", &json(&EstimateReport::new(&est, &bound)))?;
        }
        Command::Maxball { estimate, spec } => {
            let scenario = Scenario::build(&config)?;
            let report: EstimateReport = serde_json::from_str(&fs::read_to_string(&estimate)?)?;
            let spec = match spec {
                Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
                None => scenario.spec.clone(),
            };
            let problem = CertificationProblem::new(report.theta()?, report.epsilon, scenario.x0.clone(), config.horizon, spec)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cli.seed);
            let res = max_safe_ball(&problem, &scenario.u_star, config.delta0, &config.optimizer()?, &mut rng)?;
            println!("largest safe radius {} (bracket [{}, {}])", res.radius, res.radius, res.upper);
            write(
                out,
                "maxball.json",
                &json(&MaxballJson { radius: res.radius, upper: res.upper, checks: res.checks, capped: res.capped, epsilon: report.epsilon }),
            )?;
            if let Some(w) = &res.witness {
                write(out, "witness.json", &w.to_json())?;
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<safe_explore::Error>().map_or(2, |e| e.exit_code());
            ExitCode::from(code as u8)
        }
    }
}

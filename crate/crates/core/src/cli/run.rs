use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;
use serde_json::json;
use thiserror::Error;

use super::config::{ConfigError, DriftKind, ExperimentConfig, InitKind};
use crate::analysis::{
    commutation_residuals, drift_regularity, verify_covering_product, verify_envelope, verify_l2_lipschitz,
    verify_metric_axioms, GridSpec,
};
use crate::divergence::{
    empirical_marginal_kl, girsanov_path_kl, kl_to_reference, mixing_bound, sample_moments, Estimate,
};
use crate::rng::{derive_seed, norm};
use crate::sde::{
    simulate_reverse, DriftField, EstimatorDrift, Init, NoiseSchedule, OracleDrift, ReferenceDrift,
    ReverseSampler,
};
use crate::semigroup::{ou_semigroup_oracle, sample_cloud, SemigroupEstimator};
use crate::targets::{oracle_score, GaussianMixture, RadonNikodym};

/// Subcommands of the experiment runner.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Command {
    /// Reverse-SDE particles from the configured drift.
    Sample,
    /// Semigroup score against the closed-form score on a grid.
    ScoreError,
    /// Randomized checks of the regularity and covering inequalities.
    Verify,
    /// Greedy covers against the product bound.
    Covering,
    /// Path KL between the configured drift and the oracle drift.
    Kl,
    /// Terminal KL against the mixing bound over several horizons.
    Mixing,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Sample => "sample",
            Command::ScoreError => "score-error",
            Command::Verify => "verify",
            Command::Covering => "covering",
            Command::Kl => "kl",
            Command::Mixing => "mixing",
        }
    }

    fn file_stem(self) -> &'static str {
        match self {
            Command::ScoreError => "score_error",
            c => c.name(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{operation}: {source}")]
    Module {
        operation: &'static str,
        source: crate::Error,
    },

    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl RunError {
    /// 2 for configuration problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            RunError::Config(_) => 2,
            _ => 1,
        }
    }
}

trait Op<T> {
    fn op(self, operation: &'static str) -> Result<T, RunError>;
}

impl<T> Op<T> for crate::Result<T> {
    fn op(self, operation: &'static str) -> Result<T, RunError> {
        self.map_err(|source| RunError::Module { operation, source })
    }
}

/// Result of a completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    /// False when a verification or invariant check failed.
    pub passed: bool,
    /// Data files written, manifest last.
    pub files: Vec<PathBuf>,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            0
        } else {
            1
        }
    }
}

/// Runs one subcommand and writes its outputs plus a manifest into
/// `config.output_dir`.
pub fn run(command: Command, config: &ExperimentConfig) -> Result<Outcome, RunError> {
    config.validate()?;
    let started = Instant::now();
    let dir = config.output_dir.clone();
    fs::create_dir_all(&dir).map_err(|source| RunError::Io {
        path: dir.clone(),
        source,
    })?;
    let mut out = Output {
        dir,
        files: Vec::new(),
    };
    let passed = match command {
        Command::Sample => sample(config, &mut out)?,
        Command::ScoreError => score_error(config, &mut out)?,
        Command::Verify => verify(config, &mut out)?,
        Command::Covering => covering(config, &mut out)?,
        Command::Kl => kl(config, &mut out)?,
        Command::Mixing => mixing(config, &mut out)?,
    };
    let data_files: Vec<String> = out
        .files
        .iter()
        .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .collect();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0);
    let manifest = json!({
        "command": command.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "seed": config.seed,
        "passed": passed,
        "outputs": data_files,
        "config": config,
        "finished_unix": started_unix,
        "wall_clock_seconds": started.elapsed().as_secs_f64(),
    });
    out.json(&format!("{}_manifest.json", command.file_stem()), &manifest)?;
    Ok(Outcome {
        passed,
        files: out.files,
    })
}

struct Output {
    dir: PathBuf,
    files: Vec<PathBuf>,
}

impl Output {
    fn write(&mut self, name: &str, text: &str) -> Result<(), RunError> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|source| RunError::Io {
            path: path.clone(),
            source,
        })?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), RunError> {
        let mut text = serde_json::to_string_pretty(value).expect("serializable report");
        text.push('\n');
        self.write(name, &text)
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[Vec<f64>]) -> Result<(), RunError> {
        let mut text = header.join(",");
        text.push('\n');
        for row in rows {
            for (i, v) in row.iter().enumerate() {
                if i > 0 {
                    text.push(',');
                }
                push_number(&mut text, *v);
            }
            text.push('\n');
        }
        self.write(name, &text)
    }
}

/// Full double precision: 17 significant digits.
fn push_number(text: &mut String, v: f64) {
    let _ = write!(text, "{v:.16e}");
}

fn columns(prefix: &str, d: usize) -> Vec<String> {
    (0..d).map(|i| format!("{prefix}_{i}")).collect()
}

fn seed_for(config: &ExperimentConfig, stream: &str) -> u64 {
    derive_seed(config.seed, stream, 0)
}

struct Setup {
    mixture: GaussianMixture,
    schedule: NoiseSchedule,
}

fn setup(config: &ExperimentConfig) -> Result<Setup, RunError> {
    Ok(Setup {
        mixture: config.mixture()?,
        schedule: config.schedule()?,
    })
}

fn density_ratio(config: &ExperimentConfig, mixture: &GaussianMixture) -> Result<RadonNikodym, RunError> {
    RadonNikodym::estimated(
        Arc::new(mixture.clone()),
        config.sigma,
        config.ball_radius,
        config.verify.regularity_probes,
        seed_for(config, "cli/regularity"),
    )
    .op("targets::estimate_regularity")
}

fn estimator(config: &ExperimentConfig, rnd: RadonNikodym) -> Result<SemigroupEstimator, RunError> {
    let cloud = sample_cloud(rnd.dim(), config.cloud_size, seed_for(config, "cli/cloud")).op("semigroup::sample_cloud")?;
    SemigroupEstimator::new(Arc::new(cloud), rnd).op("semigroup::SemigroupEstimator::new")
}

fn drift_field(config: &ExperimentConfig, s: &Setup, kind: DriftKind) -> Result<Box<dyn DriftField>, RunError> {
    Ok(match kind {
        DriftKind::Oracle => Box::new(OracleDrift::new(s.mixture.clone(), s.schedule, config.sigma)),
        DriftKind::Reference => Box::new(ReferenceDrift::new(s.schedule, s.mixture.dim())),
        DriftKind::Estimator => {
            let est = estimator(config, density_ratio(config, &s.mixture)?)?;
            Box::new(EstimatorDrift::new(est, s.schedule))
        }
    })
}

fn init_of<'a>(config: &ExperimentConfig, mixture: &'a GaussianMixture) -> Init<'a> {
    match config.init {
        InitKind::Reference => Init::ReferenceGaussian,
        InitKind::Exact => Init::ExactTerminal(mixture),
    }
}

fn sample(config: &ExperimentConfig, out: &mut Output) -> Result<bool, RunError> {
    let s = setup(config)?;
    let d = s.mixture.dim();
    let drift = drift_field(config, &s, config.drift)?;
    let sampler = ReverseSampler::new(s.schedule, config.sigma, config.n_steps).with_paths(config.record_paths);
    let run = simulate_reverse(
        &sampler,
        drift.as_ref(),
        init_of(config, &s.mixture),
        config.n_particles,
        seed_for(config, "cli/sample"),
    )
    .op("sde::simulate_reverse")?;

    out.csv("samples.csv", &columns("x", d), &run.samples)?;
    if let Some(paths) = &run.paths {
        let mut header = vec!["particle".to_string(), "step".to_string(), "t".to_string()];
        header.extend(columns("x", d));
        let rows: Vec<Vec<f64>> = paths
            .iter()
            .enumerate()
            .flat_map(|(p, tr)| {
                tr.times.iter().zip(&tr.states).enumerate().map(move |(k, (t, x))| {
                    let mut row = vec![p as f64, k as f64, *t];
                    row.extend_from_slice(x);
                    row
                })
            })
            .collect();
        out.csv("paths.csv", &header, &rows)?;
    }

    let (mean, cov) = sample_moments(&run.samples);
    let n = run.samples.len() as f64;
    let mean_se: Vec<f64> = (0..d).map(|i| (cov[i * d + i] / n).sqrt()).collect();
    let moment_kl = if run.samples.len() >= 1000 {
        empirical_marginal_kl(&run.samples, &s.mixture).ok()
    } else {
        None
    };
    out.json(
        "summary.json",
        &json!({
            "n_particles": run.samples.len(),
            "n_steps": config.n_steps,
            "drift": config.drift,
            "init": config.init,
            "mean": mean,
            "mean_std_error": mean_se,
            "covariance": cov,
            "target_mean": s.mixture.mean(),
            "target_covariance": s.mixture.covariance(),
            "moment_matched_kl": moment_kl,
        }),
    )?;
    Ok(true)
}

fn score_error(config: &ExperimentConfig, out: &mut Output) -> Result<bool, RunError> {
    let s = setup(config)?;
    let d = s.mixture.dim();
    let est = estimator(config, density_ratio(config, &s.mixture)?)?;
    let sc = &config.score_error;
    let grid = GridSpec::ball(d, config.ball_radius, sc.grid_points, sc.grid_times, config.score_t_max());
    let mut rows = Vec::with_capacity(grid.len());
    let mut max_err: f64 = 0.0;
    let mut max_se: f64 = 0.0;
    for (t, x) in grid.iter() {
        let score = est.score_from_semigroup(&s.schedule, x, t).op("semigroup::score_from_semigroup")?;
        let tau = s.schedule.integral(t).op("sde::NoiseSchedule::integral")?;
        let stats = est.ou_semigroup_mc_stats(x, tau).op("semigroup::ou_semigroup_mc_stats")?;
        let exact = oracle_score(&s.mixture, &s.schedule, config.sigma, t, x).op("targets::oracle_score")?;
        let diff: Vec<f64> = score.iter().zip(&exact).map(|(a, b)| a - b).collect();
        let err = norm(&diff);
        let se = stats.log_grad_se_norm();
        max_err = max_err.max(err);
        max_se = max_se.max(se);
        let mut row = vec![t];
        row.extend_from_slice(x);
        row.extend_from_slice(&score);
        row.extend_from_slice(&exact);
        row.push(err);
        row.push(se);
        rows.push(row);
    }
    let mut header = vec!["t".to_string()];
    header.extend(columns("x", d));
    header.extend(columns("est", d));
    header.extend(columns("oracle", d));
    header.push("abs_err".into());
    header.push("std_error".into());
    out.csv("score_error.csv", &header, &rows)?;
    out.json(
        "score_error.json",
        &json!({
            "grid_size": grid.len(),
            "t_max": config.score_t_max(),
            "max_abs_err": max_err,
            "max_std_error": max_se,
            "cloud_size": config.cloud_size,
        }),
    )?;
    Ok(true)
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckEntry {
    pub name: String,
    /// The inequality being checked.
    pub statement: String,
    pub trials: usize,
    pub violations: usize,
    /// Largest observed ratio of the checked quantity to its bound, or the
    /// largest residual when the bound is a tolerance.
    pub max_residual: Option<f64>,
    pub pass: bool,
}

fn entry(name: &str, statement: &str, trials: usize, violations: usize, max_residual: Option<f64>) -> CheckEntry {
    CheckEntry {
        name: name.into(),
        statement: statement.into(),
        trials,
        violations,
        max_residual,
        pass: violations == 0,
    }
}

fn verify(config: &ExperimentConfig, out: &mut Output) -> Result<bool, RunError> {
    let s = setup(config)?;
    let d = s.mixture.dim();
    let v = &config.verify;
    let r = config.ball_radius;
    let rnd = density_ratio(config, &s.mixture)?;
    let mut entries = Vec::new();

    let bad = verify_metric_axioms(d, r, v.time_horizon, v.metric_trials, seed_for(config, "cli/metric"))
        .op("analysis::verify_metric_axioms")?;
    entries.push(entry(
        "metric_axioms",
        "rho_OU is symmetric, vanishes only on the diagonal, and satisfies the triangle inequality",
        v.metric_trials,
        bad,
        None,
    ));

    let env = verify_envelope(&rnd, r, v.envelope_samples, seed_for(config, "cli/envelope"))
        .op("analysis::verify_envelope")?;
    entries.push(entry(
        "envelope",
        "|f(e^-t x + sigma sqrt(1-e^-2t) z) - f(0)| <= L((R v 1) + sqrt(2) sigma |z|)",
        env.trials,
        env.violations,
        Some(env.max_ratio),
    ));

    let l2 = verify_l2_lipschitz(&rnd, v.l2_pairs, v.l2_draws, seed_for(config, "cli/l2"))
        .op("analysis::verify_l2_lipschitz")?;
    entries.push(entry(
        "l2_lipschitz",
        "L2(gamma) distance of f along two OU points <= L (1 + sigma sqrt(2d)) rho_OU",
        l2.trials,
        l2.violations,
        Some(l2.max_ratio),
    ));

    let est = estimator(config, rnd)?;
    let residuals = commutation_residuals(&est, v.commutation_probes, 1e-5, seed_for(config, "cli/commutation"))
        .op("analysis::verify_commutation")?;
    let over = residuals.iter().filter(|r| **r >= v.commutation_tolerance).count();
    entries.push(entry(
        "commutation",
        "finite-difference gradient of the empirical semigroup matches its analytic gradient",
        residuals.len(),
        over,
        Some(residuals.iter().cloned().fold(0.0, f64::max)),
    ));

    let grid = GridSpec::ball(d, r, v.grid_points, v.grid_times, v.time_horizon);
    let reg = drift_regularity(&est, &grid).op("analysis::drift_regularity")?;
    entries.push(entry(
        "log_gradient_bound",
        "|grad log U_t f| <= L/c on the ball",
        grid.len(),
        usize::from(reg.max_norm > reg.norm_bound + 1e-6),
        Some(reg.max_norm / reg.norm_bound),
    ));
    entries.push(entry(
        "log_gradient_lipschitz",
        "difference quotients of grad log U_t f <= L/c + L^2/c^2 on the ball",
        grid.len(),
        usize::from(reg.max_quotient > reg.quotient_bound + 1e-6),
        Some(reg.max_quotient / reg.quotient_bound),
    ));
    entries.push(entry(
        "clipped_drift_bound",
        "every component of the clipped empirical drift <= 2L/c",
        grid.len(),
        usize::from(reg.max_clipped > reg.clip_bound),
        Some(reg.max_clipped / reg.clip_bound),
    ));

    let unit = NoiseSchedule::constant(1.0, v.time_horizon.max(2.0)).op("sde::NoiseSchedule::constant")?;
    let mut outside = 0;
    let mut worst: f64 = 0.0;
    for (t, x) in grid.iter() {
        let sample = est.ou_semigroup_mc_stats(x, t).op("semigroup::ou_semigroup_mc_stats")?;
        let exact = ou_semigroup_oracle(est.rnd(), &unit, x, t).op("semigroup::ou_semigroup_oracle")?;
        let z = (sample.value - exact).abs() / sample.value_se.max(1e-300);
        if (sample.value - exact).abs() > 5.0 * sample.value_se + 1e-12 {
            outside += 1;
        }
        worst = worst.max(z);
    }
    entries.push(entry(
        "semigroup_oracle",
        "empirical semigroup within 5 standard errors of the closed form",
        grid.len(),
        outside,
        Some(worst),
    ));

    if v.covering {
        let c = &config.covering;
        let reports = verify_covering_product(config.covering_dim(), c.radius, c.horizon, &c.epsilons, c.resolution)
            .op("analysis::verify_covering_product")?;
        entries.push(entry(
            "covering_product",
            "greedy rho_OU cover of [0,T] x B(R) <= N([0,T], eps^2/4) N(B(R), eps/2)",
            reports.len(),
            reports.iter().filter(|r| !r.holds).count(),
            Some(
                reports
                    .iter()
                    .map(|r| r.cover_size as f64 / r.product_bound as f64)
                    .fold(0.0, f64::max),
            ),
        ));
    }

    let passed = entries.iter().all(|e| e.pass);
    out.json(
        "verify.json",
        &json!({
            "pass": passed,
            "lipschitz": est.rnd().lipschitz(),
            "lower_bound": est.rnd().lower_bound(),
            "checks": entries,
        }),
    )?;
    Ok(passed)
}

fn covering(config: &ExperimentConfig, out: &mut Output) -> Result<bool, RunError> {
    let c = &config.covering;
    let reports = verify_covering_product(config.covering_dim(), c.radius, c.horizon, &c.epsilons, c.resolution)
        .op("analysis::verify_covering_product")?;
    let mut text = String::from("epsilon,cover_size,product_bound,holds\n");
    for r in &reports {
        push_number(&mut text, r.epsilon);
        let _ = writeln!(text, ",{},{},{}", r.cover_size, r.product_bound, r.holds);
    }
    out.write("covering.csv", &text)?;
    Ok(reports.iter().all(|r| r.holds))
}

fn kl(config: &ExperimentConfig, out: &mut Output) -> Result<bool, RunError> {
    let s = setup(config)?;
    let drift = drift_field(config, &s, config.drift)?;
    let oracle = OracleDrift::new(s.mixture.clone(), s.schedule, config.sigma);
    let sampler = ReverseSampler::new(s.schedule, config.sigma, config.n_steps);
    let e = girsanov_path_kl(
        &sampler,
        drift.as_ref(),
        &oracle,
        init_of(config, &s.mixture),
        config.kl_paths(),
        seed_for(config, "cli/kl"),
    )
    .op("divergence::girsanov_path_kl")?;
    out.json(
        "kl.json",
        &json!({
            "estimate": e.estimate,
            "std_error": e.std_error,
            "n_paths": e.n_paths,
            "drift": config.drift,
            "against": DriftKind::Oracle,
            "config": config,
        }),
    )?;
    Ok(true)
}

/// One horizon of the mixing comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MixingRow {
    pub horizon: f64,
    pub measured_kl: f64,
    pub bound: f64,
    pub ratio: f64,
    pub drift_rate: f64,
}

fn mixing(config: &ExperimentConfig, out: &mut Output) -> Result<bool, RunError> {
    let mixture = config.mixture()?;
    let m = &config.mixing;
    let kl0 = kl_to_reference(&mixture, config.sigma, m.kl0_samples, seed_for(config, "cli/kl0"))
        .op("divergence::kl_to_reference")?;
    let mut rows = Vec::with_capacity(m.horizons.len());
    for (k, &horizon) in m.horizons.iter().enumerate() {
        let schedule = NoiseSchedule::new(config.schedule, horizon).map_err(|e| ConfigError::Invalid {
            field: "mixing.horizons".into(),
            message: e.to_string(),
        })?;
        let s = Setup {
            mixture: mixture.clone(),
            schedule,
        };
        let n_steps = ((horizon * m.steps_per_unit as f64).round() as usize).max(10);
        let sampler = ReverseSampler::new(schedule, config.sigma, n_steps);
        let drift = drift_field(config, &s, config.drift)?;
        let run = simulate_reverse(
            &sampler,
            drift.as_ref(),
            init_of(config, &mixture),
            config.n_particles,
            derive_seed(config.seed, "cli/mixing", k as u64),
        )
        .op("sde::simulate_reverse")?;
        let measured = empirical_marginal_kl(&run.samples, &mixture).op("divergence::empirical_marginal_kl")?;
        // The oracle drift is the exact reversal, so its drift error is zero.
        let drift_rate = if config.drift == DriftKind::Oracle {
            0.0
        } else {
            let oracle = OracleDrift::new(mixture.clone(), schedule, config.sigma);
            let e: Estimate = girsanov_path_kl(
                &sampler,
                drift.as_ref(),
                &oracle,
                init_of(config, &mixture),
                m.drift_paths,
                derive_seed(config.seed, "cli/mixing-drift", k as u64),
            )
            .op("divergence::girsanov_path_kl")?;
            e.estimate.max(0.0) / horizon
        };
        let budget = mixing_bound(horizon, kl0, drift_rate).op("divergence::mixing_bound")?;
        rows.push(MixingRow {
            horizon,
            measured_kl: measured,
            bound: budget.total,
            ratio: measured / budget.total,
            drift_rate,
        });
    }

    let mut order: Vec<&MixingRow> = rows.iter().collect();
    order.sort_by(|a, b| a.horizon.total_cmp(&b.horizon));
    let monotone = order.windows(2).all(|w| w[1].measured_kl < w[0].measured_kl);
    let within = rows.iter().all(|r| r.ratio <= m.max_ratio);
    let passed = monotone && within;

    let table: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| vec![r.horizon, r.measured_kl, r.bound, r.ratio])
        .collect();
    let header: Vec<String> = ["T", "measured_kl", "bound", "ratio"].iter().map(|s| s.to_string()).collect();
    out.csv("mixing.csv", &header, &table)?;
    out.json(
        "mixing.json",
        &json!({
            "kl0": kl0,
            "n_paths": config.n_particles,
            "rows": rows,
            "monotone": monotone,
            "max_ratio": rows.iter().map(|r| r.ratio).fold(0.0, f64::max),
            "pass": passed,
            "config": config,
        }),
    )?;
    Ok(passed)
}

/// Loads a config, applies overrides, and runs one subcommand, mapping the
/// result to an exit status.
pub fn run_path(command: Command, path: &Path, overrides: &[String]) -> i32 {
    let config = match super::config::load_config(path, overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match run(command, &config) {
        Ok(outcome) => {
            if !outcome.passed {
                eprintln!("{}: a verification check failed; see {}", command.name(), config.output_dir.display());
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

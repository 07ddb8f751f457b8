use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sde::{BetaKind, NoiseSchedule};
use crate::targets::GaussianMixture;

/// Environment variable that replaces `output_dir` after loading.
pub const OUTPUT_DIR_ENV: &str = "VPSDE_OUTPUT_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("config parse error: {0}")]
    Parse(String),

    #[error("invalid value for `{field}`: {message}")]
    Invalid { field: String, message: String },

    #[error("malformed override `{0}`: expected key=value")]
    Override(String),
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        message: message.into(),
    }
}

/// Covariance of a mixture component: `s I`, `diag(v)`, or a full matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CovSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    #[serde(default = "one")]
    pub weight: f64,
    pub mean: Vec<f64>,
    #[serde(default = "cov_default")]
    pub cov: CovSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub components: Vec<ComponentSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftKind {
    /// Closed-form score of the Gaussian-mixture marginals.
    Oracle,
    /// Clipped empirical semigroup drift.
    Estimator,
    /// `-beta y`, the drift whose reversal keeps `N(0, sigma^2 I)` fixed.
    Reference,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    /// `N(0, sigma^2 I)`.
    Reference,
    /// The exact forward marginal at the horizon.
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreErrorConfig {
    pub grid_points: usize,
    pub grid_times: usize,
    /// Largest forward time on the grid; defaults to `min(1, horizon)`.
    pub t_max: Option<f64>,
}

impl Default for ScoreErrorConfig {
    fn default() -> Self {
        Self {
            grid_points: 21,
            grid_times: 21,
            t_max: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub metric_trials: usize,
    pub envelope_samples: usize,
    pub l2_pairs: usize,
    pub l2_draws: usize,
    pub commutation_probes: usize,
    pub commutation_tolerance: f64,
    pub regularity_probes: usize,
    pub grid_points: usize,
    pub grid_times: usize,
    /// Upper end of the OU-time range used by the time-space checks.
    pub time_horizon: f64,
    pub covering: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            metric_trials: 100_000,
            envelope_samples: 1_000_000,
            l2_pairs: 200,
            l2_draws: 10_000,
            commutation_probes: 50,
            commutation_tolerance: 1e-6,
            regularity_probes: 2000,
            grid_points: 21,
            grid_times: 21,
            time_horizon: 1.0,
            covering: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoveringConfig {
    pub epsilons: Vec<f64>,
    /// Defaults to the target dimension.
    pub dim: Option<usize>,
    pub radius: f64,
    pub horizon: f64,
    pub resolution: f64,
}

impl Default for CoveringConfig {
    fn default() -> Self {
        Self {
            epsilons: vec![0.3, 0.5, 0.8],
            dim: None,
            radius: 1.0,
            horizon: 1.0,
            resolution: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KlConfig {
    /// Defaults to `n_particles`.
    pub n_paths: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MixingConfig {
    pub horizons: Vec<f64>,
    pub steps_per_unit: usize,
    /// Paths for the drift-error rate; unused for the oracle drift.
    pub drift_paths: usize,
    /// Samples for the Monte-Carlo `KL(pi || N(0, sigma^2 I))`.
    pub kl0_samples: usize,
    /// Largest admissible ratio of measured KL to the bound.
    pub max_ratio: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            horizons: vec![1.0, 2.0, 4.0],
            steps_per_unit: 100,
            drift_paths: 1000,
            kl0_samples: 200_000,
            max_ratio: 3.0,
        }
    }
}

/// Everything one run needs. Optional tables fall back to their defaults,
/// and the resolved values are written back into the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub target: TargetSpec,
    #[serde(default = "one")]
    pub sigma: f64,
    #[serde(default = "schedule_default")]
    pub schedule: BetaKind,
    #[serde(default = "horizon_default")]
    pub horizon: f64,
    #[serde(default = "n_steps_default")]
    pub n_steps: usize,
    #[serde(default = "n_particles_default")]
    pub n_particles: usize,
    #[serde(default = "cloud_size_default")]
    pub cloud_size: usize,
    #[serde(default = "one")]
    pub ball_radius: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "output_dir_default")]
    pub output_dir: PathBuf,
    #[serde(default = "drift_default")]
    pub drift: DriftKind,
    #[serde(default = "init_default")]
    pub init: InitKind,
    #[serde(default)]
    pub record_paths: bool,
    #[serde(default)]
    pub score_error: ScoreErrorConfig,
    #[serde(default)]
    pub verify: VerifyConfig,
    #[serde(default)]
    pub covering: CoveringConfig,
    #[serde(default)]
    pub kl: KlConfig,
    #[serde(default)]
    pub mixing: MixingConfig,
}

fn one() -> f64 {
    1.0
}
fn cov_default() -> CovSpec {
    CovSpec::Scalar(1.0)
}
fn schedule_default() -> BetaKind {
    BetaKind::Constant { beta: 1.0 }
}
fn horizon_default() -> f64 {
    4.0
}
fn n_steps_default() -> usize {
    400
}
fn n_particles_default() -> usize {
    10_000
}
fn cloud_size_default() -> usize {
    10_000
}
fn output_dir_default() -> PathBuf {
    PathBuf::from("out")
}
fn drift_default() -> DriftKind {
    DriftKind::Oracle
}
fn init_default() -> InitKind {
    InitKind::Reference
}

impl ExperimentConfig {
    /// Parses TOML text, applies `key=value` overrides (dotted keys address
    /// nested tables), and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        if !overrides.is_empty() && !table.contains_key("schedule") {
            // Lets `schedule.beta=...` modify the default schedule.
            let default = toml::Table::try_from(schedule_default()).expect("schedule serializes");
            table.insert("schedule".into(), toml::Value::Table(default));
        }
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Self = table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        self.target.components.first().map_or(0, |c| c.mean.len())
    }

    pub fn mixture(&self) -> Result<GaussianMixture, ConfigError> {
        let d = self.dim();
        let parts = self
            .target
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let field = format!("target.components[{k}]");
                if c.mean.len() != d {
                    return Err(invalid(&format!("{field}.mean"), format!("expected {d} entries, got {}", c.mean.len())));
                }
                let cov = match &c.cov {
                    CovSpec::Scalar(s) => crate::targets::scaled_identity(d, *s),
                    CovSpec::Diagonal(v) => {
                        if v.len() != d {
                            return Err(invalid(&format!("{field}.cov"), format!("expected {d} diagonal entries, got {}", v.len())));
                        }
                        let mut m = vec![0.0; d * d];
                        for i in 0..d {
                            m[i * d + i] = v[i];
                        }
                        m
                    }
                    CovSpec::Full(rows) => {
                        if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                            return Err(invalid(&format!("{field}.cov"), format!("expected a {d}x{d} matrix")));
                        }
                        rows.concat()
                    }
                };
                Ok((c.weight, c.mean.clone(), cov))
            })
            .collect::<Result<Vec<_>, _>>()?;
        GaussianMixture::new(d, parts).map_err(|e| invalid("target.components", e.to_string()))
    }

    pub fn schedule(&self) -> Result<NoiseSchedule, ConfigError> {
        NoiseSchedule::new(self.schedule, self.horizon).map_err(|e| {
            let field = if !(self.horizon.is_finite() && self.horizon > 0.0) {
                "horizon"
            } else {
                "schedule"
            };
            invalid(field, e.to_string())
        })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.target.components.is_empty() {
            return Err(invalid("target.components", "at least one component is required"));
        }
        if self.dim() == 0 {
            return Err(invalid("target.components[0].mean", "must be non-empty"));
        }
        positive("sigma", self.sigma)?;
        positive("horizon", self.horizon)?;
        positive("ball_radius", self.ball_radius)?;
        at_least("n_steps", self.n_steps, 10)?;
        at_least("n_particles", self.n_particles, 1)?;
        at_least("cloud_size", self.cloud_size, 2)?;
        self.schedule()?;
        self.mixture()?;

        let se = &self.score_error;
        at_least("score_error.grid_points", se.grid_points, 2)?;
        at_least("score_error.grid_times", se.grid_times, 2)?;
        if let Some(t) = se.t_max {
            positive("score_error.t_max", t)?;
            if t > self.horizon {
                return Err(invalid("score_error.t_max", format!("must not exceed horizon {}", self.horizon)));
            }
        }

        let v = &self.verify;
        at_least("verify.metric_trials", v.metric_trials, 10_000)?;
        at_least("verify.envelope_samples", v.envelope_samples, 100_000)?;
        at_least("verify.l2_pairs", v.l2_pairs, 1)?;
        at_least("verify.l2_draws", v.l2_draws, 10_000)?;
        at_least("verify.commutation_probes", v.commutation_probes, 10)?;
        at_least("verify.regularity_probes", v.regularity_probes, 1000)?;
        at_least("verify.grid_points", v.grid_points, 2)?;
        at_least("verify.grid_times", v.grid_times, 2)?;
        positive("verify.commutation_tolerance", v.commutation_tolerance)?;
        positive("verify.time_horizon", v.time_horizon)?;

        let c = &self.covering;
        if c.epsilons.is_empty() {
            return Err(invalid("covering.epsilons", "must be non-empty"));
        }
        if let Some(e) = c.epsilons.iter().find(|e| !(**e > 0.0 && **e <= 1.0)) {
            return Err(invalid("covering.epsilons", format!("entries must lie in (0, 1], got {e}")));
        }
        if let Some(d) = c.dim {
            if !(1..=2).contains(&d) {
                return Err(invalid("covering.dim", format!("must be 1 or 2, got {d}")));
            }
        } else if self.dim() > 2 {
            return Err(invalid("covering.dim", "target dimension exceeds 2; set covering.dim explicitly"));
        }
        positive("covering.radius", c.radius)?;
        positive("covering.horizon", c.horizon)?;
        positive("covering.resolution", c.resolution)?;

        if let Some(n) = self.kl.n_paths {
            at_least("kl.n_paths", n, 2)?;
        }

        let m = &self.mixing;
        if m.horizons.is_empty() {
            return Err(invalid("mixing.horizons", "must be non-empty"));
        }
        for h in &m.horizons {
            positive("mixing.horizons", *h)?;
        }
        at_least("mixing.steps_per_unit", m.steps_per_unit, 1)?;
        at_least("mixing.drift_paths", m.drift_paths, 2)?;
        at_least("mixing.kl0_samples", m.kl0_samples, 2)?;
        positive("mixing.max_ratio", m.max_ratio)?;
        Ok(())
    }

    pub fn covering_dim(&self) -> usize {
        self.covering.dim.unwrap_or_else(|| self.dim())
    }

    pub fn score_t_max(&self) -> f64 {
        self.score_error.t_max.unwrap_or(self.horizon.min(1.0))
    }

    pub fn kl_paths(&self) -> usize {
        self.kl.n_paths.unwrap_or(self.n_particles)
    }
}

fn positive(field: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(field, format!("must be positive and finite, got {v}")))
    }
}

fn at_least(field: &str, v: usize, min: usize) -> Result<(), ConfigError> {
    if v >= min {
        Ok(())
    } else {
        Err(invalid(field, format!("must be at least {min}, got {v}")))
    }
}

/// Sets `a.b.c = value` in `table`, creating intermediate tables. The value is
/// read as a TOML literal when possible and as a bare string otherwise.
fn apply_override(table: &mut toml::Table, raw: &str) -> Result<(), ConfigError> {
    let (key, value) = raw.split_once('=').ok_or_else(|| ConfigError::Override(raw.to_string()))?;
    let key = key.trim();
    let value = value.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(ConfigError::Override(raw.to_string()));
    }
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().expect("non-empty key");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| invalid(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), parsed);
    Ok(())
}

/// Reads and validates a config file, then applies overrides and the
/// output-directory environment variable.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut cfg = ExperimentConfig::from_toml_str(&text, overrides)?;
    if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
        if !dir.is_empty() {
            cfg.output_dir = PathBuf::from(dir);
        }
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[[target.components]]\nmean = [2.0]\n";

    #[test]
    fn minimal_config_fills_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &[]).unwrap();
        assert_eq!(cfg.sigma, 1.0);
        assert_eq!(cfg.horizon, 4.0);
        assert_eq!(cfg.schedule, BetaKind::Constant { beta: 1.0 });
        assert_eq!(cfg.dim(), 1);
        assert_eq!(cfg.target.components[0].weight, 1.0);
        assert_eq!(cfg.covering.epsilons, vec![0.3, 0.5, 0.8]);
        let m = cfg.mixture().unwrap();
        assert_eq!(m.mean(), vec![2.0]);
    }

    #[test]
    fn overrides_reach_nested_tables() {
        let o = vec![
            "sigma=2.5".to_string(),
            "schedule.beta=0.5".to_string(),
            "drift=estimator".to_string(),
            "covering.epsilons=[0.5]".to_string(),
        ];
        let cfg = ExperimentConfig::from_toml_str(MINIMAL, &o).unwrap();
        assert_eq!(cfg.sigma, 2.5);
        assert_eq!(cfg.schedule, BetaKind::Constant { beta: 0.5 });
        assert_eq!(cfg.drift, DriftKind::Estimator);
        assert_eq!(cfg.covering.epsilons, vec![0.5]);
        assert!(matches!(
            ExperimentConfig::from_toml_str(MINIMAL, &["sigma".to_string()]),
            Err(ConfigError::Override(_))
        ));
    }

    #[test]
    fn covariance_forms() {
        let text = "[[target.components]]\nmean = [0.0, 1.0]\nweight = 0.25\ncov = [1.0, 2.0]\n\
                    [[target.components]]\nweight = 0.75\nmean = [1.0, 0.0]\ncov = [[2.0, 0.5], [0.5, 1.0]]\n";
        let cfg = ExperimentConfig::from_toml_str(text, &[]).unwrap();
        let m = cfg.mixture().unwrap();
        assert_eq!(m.components().len(), 2);
        let bad = "[[target.components]]\nmean = [0.0, 1.0]\ncov = [1.0]\n";
        let err = ExperimentConfig::from_toml_str(bad, &[]).unwrap_err();
        assert!(err.to_string().contains("target.components[0].cov"), "{err}");
    }
}

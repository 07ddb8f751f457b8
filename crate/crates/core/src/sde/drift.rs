use crate::error::{check_dim, Error, Result};
use crate::semigroup::SemigroupEstimator;
use crate::targets::{marginal_at, GaussianMixture, TargetDensity};

use super::NoiseSchedule;

/// A drift frozen at one reverse time.
pub trait FrozenDrift: Send + Sync {
    fn eval(&self, y: &[f64], out: &mut [f64]) -> Result<()>;
}

/// Time-indexed drift `b(y, t_rev)` of a reverse-time SDE.
///
/// Reverse time `t_rev` in `[0, T]` corresponds to forward time `T - t_rev`;
/// implementations take reverse time and convert internally.
pub trait DriftField: Send + Sync {
    fn dim(&self) -> usize;

    /// Schedule the drift was built against, if any.
    fn schedule(&self) -> Option<&NoiseSchedule>;

    fn at(&self, t_rev: f64) -> Result<Box<dyn FrozenDrift + '_>>;
}

/// `b(y, t_rev)` as a fresh vector.
pub fn reverse_drift(field: &dyn DriftField, y: &[f64], t_rev: f64) -> Result<Vec<f64>> {
    check_dim(field.dim(), y.len())?;
    let mut out = vec![0.0; y.len()];
    field.at(t_rev)?.eval(y, &mut out)?;
    Ok(out)
}

fn forward_time(schedule: &NoiseSchedule, t_rev: f64) -> Result<(f64, f64)> {
    let tol = 1e-12 * schedule.horizon.max(1.0);
    if !(t_rev >= -tol && t_rev <= schedule.horizon + tol) {
        return Err(Error::Contract(format!(
            "reverse time {t_rev} outside [0, {}]",
            schedule.horizon
        )));
    }
    let s = (schedule.horizon - t_rev).clamp(0.0, schedule.horizon);
    Ok((s, schedule.beta(s)?))
}

/// Reference process drift `-beta_{T-t} y`.
#[derive(Debug, Clone)]
pub struct ReferenceDrift {
    schedule: NoiseSchedule,
    dim: usize,
}

impl ReferenceDrift {
    pub fn new(schedule: NoiseSchedule, dim: usize) -> Self {
        Self { schedule, dim }
    }
}

struct Scaled(f64);

impl FrozenDrift for Scaled {
    fn eval(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        for (o, v) in out.iter_mut().zip(y) {
            *o = self.0 * v;
        }
        Ok(())
    }
}

impl DriftField for ReferenceDrift {
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        Some(&self.schedule)
    }

    fn at(&self, t_rev: f64) -> Result<Box<dyn FrozenDrift + '_>> {
        let (_, beta) = forward_time(&self.schedule, t_rev)?;
        Ok(Box::new(Scaled(-beta)))
    }
}

/// Exact time reversal `beta (y + 2 sigma^2 grad log p_{T-t}(y))` for a mixture target.
#[derive(Debug, Clone)]
pub struct OracleDrift {
    target: GaussianMixture,
    schedule: NoiseSchedule,
    sigma: f64,
}

impl OracleDrift {
    pub fn new(target: GaussianMixture, schedule: NoiseSchedule, sigma: f64) -> Self {
        Self {
            target,
            schedule,
            sigma,
        }
    }

    /// The value-function form `-beta (y - 2 sigma^2 grad log phi_{T-t}(y))`,
    /// with `grad log phi = grad log p + y / sigma^2`.
    pub fn value_function_form(&self, y: &[f64], t_rev: f64) -> Result<Vec<f64>> {
        let (s, beta) = forward_time(&self.schedule, t_rev)?;
        let s2 = self.sigma * self.sigma;
        let score = marginal_at(&self.target, &self.schedule, self.sigma, s)?.score(y)?;
        Ok(y.iter()
            .zip(&score)
            .map(|(yi, si)| {
                let log_phi_grad = si + yi / s2;
                -beta * (yi - 2.0 * s2 * log_phi_grad)
            })
            .collect())
    }
}

struct FrozenOracle {
    marginal: GaussianMixture,
    beta: f64,
    two_s2: f64,
}

impl FrozenDrift for FrozenOracle {
    fn eval(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        check_dim(self.marginal.dim(), y.len())?;
        self.marginal.log_density_grad(y, out);
        for i in 0..y.len() {
            out[i] = self.beta * (y[i] + self.two_s2 * out[i]);
        }
        Ok(())
    }
}

impl DriftField for OracleDrift {
    fn dim(&self) -> usize {
        self.target.dim()
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        Some(&self.schedule)
    }

    fn at(&self, t_rev: f64) -> Result<Box<dyn FrozenDrift + '_>> {
        let (s, beta) = forward_time(&self.schedule, t_rev)?;
        Ok(Box::new(FrozenOracle {
            marginal: marginal_at(&self.target, &self.schedule, self.sigma, s)?,
            beta,
            two_s2: 2.0 * self.sigma * self.sigma,
        }))
    }
}

/// Drift from the empirical semigroup: `-beta (y - 2 sigma^2 v(y, tau))` with
/// `v` the clipped log-gradient estimate and `tau` the OU clock at `T - t_rev`.
#[derive(Debug, Clone)]
pub struct EstimatorDrift {
    estimator: SemigroupEstimator,
    schedule: NoiseSchedule,
}

impl EstimatorDrift {
    pub fn new(estimator: SemigroupEstimator, schedule: NoiseSchedule) -> Self {
        Self {
            estimator,
            schedule,
        }
    }

    pub fn estimator(&self) -> &SemigroupEstimator {
        &self.estimator
    }
}

struct FrozenEstimator<'a> {
    estimator: &'a SemigroupEstimator,
    tau: f64,
    beta: f64,
    two_s2: f64,
}

impl FrozenDrift for FrozenEstimator<'_> {
    fn eval(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        let v = self.estimator.drift_estimate(y, self.tau)?;
        for i in 0..y.len() {
            out[i] = -self.beta * (y[i] - self.two_s2 * v[i]);
        }
        Ok(())
    }
}

impl DriftField for EstimatorDrift {
    fn dim(&self) -> usize {
        self.estimator.dim()
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        Some(&self.schedule)
    }

    fn at(&self, t_rev: f64) -> Result<Box<dyn FrozenDrift + '_>> {
        let (s, beta) = forward_time(&self.schedule, t_rev)?;
        let sigma = self.estimator.rnd().sigma();
        Ok(Box::new(FrozenEstimator {
            estimator: &self.estimator,
            tau: self.schedule.integral_unchecked(s),
            beta,
            two_s2: 2.0 * sigma * sigma,
        }))
    }
}

/// Drift parameterized by a control `f(s, y)` approximating `grad log phi_s`:
/// `b = -beta_{T-t} (y - 2 sigma^2 f(T - t, y))`.
pub struct ControlDrift<F> {
    control: F,
    schedule: NoiseSchedule,
    sigma: f64,
    dim: usize,
}

impl<F> ControlDrift<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    /// `control(s, y, out)` receives forward time `s`.
    pub fn new(control: F, schedule: NoiseSchedule, sigma: f64, dim: usize) -> Self {
        Self {
            control,
            schedule,
            sigma,
            dim,
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn control(&self, s: f64, y: &[f64], out: &mut [f64]) {
        (self.control)(s, y, out)
    }
}

struct FrozenControl<'a, F> {
    field: &'a ControlDrift<F>,
    s: f64,
    beta: f64,
}

impl<F> FrozenDrift for FrozenControl<'_, F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.field.control)(self.s, y, out);
        let two_s2 = 2.0 * self.field.sigma * self.field.sigma;
        for i in 0..y.len() {
            out[i] = -self.beta * (y[i] - two_s2 * out[i]);
        }
        Ok(())
    }
}

impl<F> DriftField for ControlDrift<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        Some(&self.schedule)
    }

    fn at(&self, t_rev: f64) -> Result<Box<dyn FrozenDrift + '_>> {
        let (s, beta) = forward_time(&self.schedule, t_rev)?;
        Ok(Box::new(FrozenControl {
            field: self,
            s,
            beta,
        }))
    }
}

/// Arbitrary drift `b(t_rev, y)`.
pub struct FnDrift<F> {
    drift: F,
    dim: usize,
}

impl<F> FnDrift<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    pub fn new(dim: usize, drift: F) -> Self {
        Self { drift, dim }
    }
}

struct FrozenFn<'a, F> {
    drift: &'a F,
    t_rev: f64,
}

impl<F> FrozenDrift for FrozenFn<'_, F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, y: &[f64], out: &mut [f64]) -> Result<()> {
        (self.drift)(self.t_rev, y, out);
        Ok(())
    }
}

impl<F> DriftField for FnDrift<F>
where
    F: Fn(f64, &[f64], &mut [f64]) + Send + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn schedule(&self) -> Option<&NoiseSchedule> {
        None
    }

    fn at(&self, t_rev: f64) -> Result<Box<dyn FrozenDrift + '_>> {
        Ok(Box::new(FrozenFn {
            drift: &self.drift,
            t_rev,
        }))
    }
}

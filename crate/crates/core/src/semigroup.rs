//! Ornstein-Uhlenbeck semigroup: closed-form oracle, empirical estimator on a
//! fixed Gaussian point cloud, the heat-semigroup baseline, and the clipped
//! log-gradient drift built on top of the estimator.
//!
//! All semigroup times here are on the OU clock (`beta = 1`). A general noise
//! schedule enters only through `tau(t) = int_0^t beta_s ds`.

use std::sync::Arc;

use crate::error::{check_dim, Error, Result};
use crate::rng::{fill_standard_normal, stream_rng};
use crate::sde::NoiseSchedule;
use crate::targets::{log_reference_density, marginal_at, RadonNikodym};

/// Fixed standard-normal points `z_1..z_N` shared by every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    dim: usize,
    points: Vec<f64>,
    seed: u64,
    radius_bound: f64,
    attempts: usize,
}

const MAX_CLOUD_ATTEMPTS: usize = 100;

/// `8 sqrt((d + 6) log N)`.
pub fn cloud_radius_bound(dim: usize, n: usize) -> f64 {
    8.0 * ((dim as f64 + 6.0) * (n as f64).ln()).sqrt()
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn radius_bound(&self) -> f64 {
        self.radius_bound
    }

    /// Number of wholesale draws needed to satisfy the radius bound.
    pub fn attempts(&self) -> usize {
        self.attempts
    }

    pub fn point(&self, n: usize) -> &[f64] {
        &self.points[n * self.dim..(n + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.points.chunks_exact(self.dim)
    }

    pub fn max_norm(&self) -> f64 {
        self.iter()
            .map(|z| z.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }
}

/// Draws `n` i.i.d. standard normal points in `R^dim`, redrawing the whole set
/// until every point lies within [`cloud_radius_bound`].
pub fn sample_cloud(dim: usize, n: usize, seed: u64) -> Result<PointCloud> {
    sample_cloud_with_bound(dim, n, seed, cloud_radius_bound(dim, n))
}

pub(crate) fn sample_cloud_with_bound(
    dim: usize,
    n: usize,
    seed: u64,
    bound: f64,
) -> Result<PointCloud> {
    if dim == 0 {
        return Err(Error::Contract("cloud dimension must be positive".into()));
    }
    if n < 2 {
        return Err(Error::Contract(format!("cloud needs at least 2 points, got {n}")));
    }
    for attempt in 0..MAX_CLOUD_ATTEMPTS {
        let mut rng = stream_rng(seed, "semigroup/cloud", attempt as u64);
        let mut points = vec![0.0; n * dim];
        fill_standard_normal(&mut rng, &mut points);
        let cloud = PointCloud {
            dim,
            points,
            seed,
            radius_bound: bound,
            attempts: attempt + 1,
        };
        if cloud.max_norm() <= bound {
            return Ok(cloud);
        }
    }
    Err(Error::ImprobableEvent {
        attempts: MAX_CLOUD_ATTEMPTS,
    })
}

/// Coefficients `(e^{-t}, sigma sqrt(1 - e^{-2t}))` of the OU transition.
#[inline]
fn ou_coefficients(t: f64, sigma: f64) -> (f64, f64) {
    (((-t).exp()), sigma * (-(-2.0 * t).exp_m1()).sqrt())
}

fn check_time(t: f64) -> Result<()> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(Error::Contract(format!("semigroup time must be >= 0, got {t}")))
    }
}

/// Monte-Carlo estimate with standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct SemigroupSample {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Standard error of `value`.
    pub value_se: f64,
    /// Delta-method standard errors of the components of `grad / value`.
    pub log_grad_se: Vec<f64>,
}

impl SemigroupSample {
    /// `grad / value`, unclipped.
    pub fn log_grad(&self) -> Vec<f64> {
        self.grad.iter().map(|g| g / self.value).collect()
    }

    pub fn log_grad_se_norm(&self) -> f64 {
        self.log_grad_se.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// The empirical semigroup `phi(x, t) = (1/N) sum_n f(e^{-t} x + sigma sqrt(1 - e^{-2t}) z_n)`
/// and the clipped drift `clip(grad phi / phi)`.
#[derive(Debug, Clone)]
pub struct SemigroupEstimator {
    cloud: Arc<PointCloud>,
    rnd: RadonNikodym,
    clip_level: f64,
}

impl SemigroupEstimator {
    /// Clip level defaults to `2L/c`.
    pub fn new(cloud: Arc<PointCloud>, rnd: RadonNikodym) -> Result<Self> {
        let clip = 2.0 * rnd.lipschitz() / rnd.lower_bound();
        Self::with_clip_level(cloud, rnd, clip)
    }

    pub fn with_clip_level(cloud: Arc<PointCloud>, rnd: RadonNikodym, clip_level: f64) -> Result<Self> {
        check_dim(rnd.dim(), cloud.dim())?;
        if !(clip_level > 0.0) {
            return Err(Error::Contract(format!("clip level must be positive, got {clip_level}")));
        }
        Ok(Self {
            cloud,
            rnd,
            clip_level,
        })
    }

    pub fn cloud(&self) -> &PointCloud {
        &self.cloud
    }

    pub fn rnd(&self) -> &RadonNikodym {
        &self.rnd
    }

    pub fn clip_level(&self) -> f64 {
        self.clip_level
    }

    pub fn dim(&self) -> usize {
        self.rnd.dim()
    }

    /// `(phi(x, t), grad_x phi(x, t))`. The `e^{-t}` chain-rule factor is
    /// applied once, to the averaged gradient.
    pub fn ou_semigroup_mc(&self, x: &[f64], t: f64) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        check_time(t)?;
        if t == 0.0 {
            return self.rnd.eval(x);
        }
        let d = self.dim();
        let (keep, spread) = ou_coefficients(t, self.rnd.sigma());
        let mut arg = vec![0.0; d];
        let mut g = vec![0.0; d];
        let mut acc = vec![0.0; d];
        let mut sum = 0.0;
        for z in self.cloud.iter() {
            for i in 0..d {
                arg[i] = keep * x[i] + spread * z[i];
            }
            sum += self.rnd.eval_into(&arg, &mut g)?;
            for i in 0..d {
                acc[i] += g[i];
            }
        }
        let n = self.cloud.len() as f64;
        let grad = acc.iter().map(|a| keep * a / n).collect();
        Ok((sum / n, grad))
    }

    /// As [`Self::ou_semigroup_mc`], also reporting Monte-Carlo standard errors.
    pub fn ou_semigroup_mc_stats(&self, x: &[f64], t: f64) -> Result<SemigroupSample> {
        check_dim(self.dim(), x.len())?;
        check_time(t)?;
        let d = self.dim();
        if t == 0.0 {
            let (value, grad) = self.rnd.eval(x)?;
            return Ok(SemigroupSample {
                value,
                grad,
                value_se: 0.0,
                log_grad_se: vec![0.0; d],
            });
        }
        let (keep, spread) = ou_coefficients(t, self.rnd.sigma());
        let n = self.cloud.len();
        let mut values = Vec::with_capacity(n);
        let mut grads = Vec::with_capacity(n * d);
        let mut arg = vec![0.0; d];
        let mut g = vec![0.0; d];
        for z in self.cloud.iter() {
            for i in 0..d {
                arg[i] = keep * x[i] + spread * z[i];
            }
            values.push(self.rnd.eval_into(&arg, &mut g)?);
            grads.extend(g.iter().map(|v| keep * v));
        }
        Ok(summarize(&values, &grads, d))
    }

    /// Componentwise `clip(grad phi / phi)` at level `clip_level`.
    pub fn drift_estimate(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let (value, grad) = self.ou_semigroup_mc(x, t)?;
        self.clipped_ratio(x, t, value, &grad)
    }

    fn clipped_ratio(&self, x: &[f64], t: f64, value: f64, grad: &[f64]) -> Result<Vec<f64>> {
        if !(value > 0.0) {
            return Err(Error::Numeric {
                x: x.to_vec(),
                t,
                value,
            });
        }
        let c = self.clip_level;
        Ok(grad.iter().map(|g| (g / value).clamp(-c, c)).collect())
    }

    /// Score of the VP-SDE marginal at forward time `t`:
    /// `-y / sigma^2 + clip(grad log phi(y, tau(t)))`.
    pub fn score_from_semigroup(&self, schedule: &NoiseSchedule, y: &[f64], t: f64) -> Result<Vec<f64>> {
        check_time(t)?;
        let tau = schedule.integral_unchecked(t);
        let s2 = self.rnd.sigma() * self.rnd.sigma();
        let v = self.drift_estimate(y, tau)?;
        Ok(v.iter().zip(y).map(|(vi, yi)| vi - yi / s2).collect())
    }
}

fn summarize(values: &[f64], grads: &[f64], d: usize) -> SemigroupSample {
    let n = values.len();
    let nf = n as f64;
    let value = values.iter().sum::<f64>() / nf;
    let mut grad = vec![0.0; d];
    for row in grads.chunks_exact(d) {
        for i in 0..d {
            grad[i] += row[i];
        }
    }
    for g in grad.iter_mut() {
        *g /= nf;
    }
    let var = values.iter().map(|v| (v - value) * (v - value)).sum::<f64>() / (nf - 1.0);
    let ratio: Vec<f64> = grad.iter().map(|g| g / value).collect();
    let mut resid = vec![0.0; d];
    for (row, v) in grads.chunks_exact(d).zip(values) {
        for i in 0..d {
            let e = row[i] - ratio[i] * v;
            resid[i] += e * e;
        }
    }
    SemigroupSample {
        value,
        grad,
        value_se: (var / nf).sqrt(),
        log_grad_se: resid
            .iter()
            .map(|r| (r / (nf * (nf - 1.0))).sqrt() / value)
            .collect(),
    }
}

/// `p_t(x) / N(x; 0, sigma^2 I)`, the exact semigroup applied to `f`, where
/// `p_t` is the VP-SDE marginal at forward time `t` under `schedule`.
pub fn ou_semigroup_oracle(rnd: &RadonNikodym, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<f64> {
    Ok(oracle_log_semigroup(rnd, schedule, x, t)?.exp())
}

fn oracle_log_semigroup(rnd: &RadonNikodym, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<f64> {
    let gmm = rnd
        .mixture()
        .ok_or_else(|| Error::Capability("semigroup oracle needs a Gaussian-mixture target".into()))?;
    check_dim(gmm.dim(), x.len())?;
    let marginal = marginal_at(gmm, schedule, rnd.sigma(), t)?;
    Ok(marginal.log_density(x)? - log_reference_density(x, rnd.sigma()))
}

/// `grad log U f(x) = grad log p_t(x) + x / sigma^2`, from the closed-form marginal.
pub fn oracle_log_gradient(rnd: &RadonNikodym, schedule: &NoiseSchedule, x: &[f64], t: f64) -> Result<Vec<f64>> {
    let gmm = rnd
        .mixture()
        .ok_or_else(|| Error::Capability("semigroup oracle needs a Gaussian-mixture target".into()))?;
    check_dim(gmm.dim(), x.len())?;
    let s2 = rnd.sigma() * rnd.sigma();
    let score = marginal_at(gmm, schedule, rnd.sigma(), t)?.score(x)?;
    Ok(score.iter().zip(x).map(|(s, xi)| s + xi / s2).collect())
}

/// `(U f(x), grad U f(x))` from the closed-form marginal.
pub fn ou_semigroup_oracle_grad(
    rnd: &RadonNikodym,
    schedule: &NoiseSchedule,
    x: &[f64],
    t: f64,
) -> Result<(f64, Vec<f64>)> {
    let v = ou_semigroup_oracle(rnd, schedule, x, t)?;
    let lg = oracle_log_gradient(rnd, schedule, x, t)?;
    Ok((v, lg.iter().map(|g| v * g).collect()))
}

/// Heat semigroup `Q_t f(x) = E f(x + sqrt(t) Z)` over the same cloud, with its gradient.
pub fn heat_semigroup_mc(rnd: &RadonNikodym, cloud: &PointCloud, x: &[f64], t: f64) -> Result<SemigroupSample> {
    check_dim(rnd.dim(), x.len())?;
    check_dim(rnd.dim(), cloud.dim())?;
    check_time(t)?;
    let d = x.len();
    if t == 0.0 {
        let (value, grad) = rnd.eval(x)?;
        return Ok(SemigroupSample {
            value,
            grad,
            value_se: 0.0,
            log_grad_se: vec![0.0; d],
        });
    }
    let s = t.sqrt();
    let mut values = Vec::with_capacity(cloud.len());
    let mut grads = Vec::with_capacity(cloud.len() * d);
    let mut arg = vec![0.0; d];
    let mut g = vec![0.0; d];
    for z in cloud.iter() {
        for i in 0..d {
            arg[i] = x[i] + s * z[i];
        }
        values.push(rnd.eval_into(&arg, &mut g)?);
        grads.extend_from_slice(&g);
    }
    Ok(summarize(&values, &grads, d))
}

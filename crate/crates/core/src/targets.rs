//! Target densities, the density ratio `f = dpi/dN(0, sigma^2 I)`, and
//! closed-form Gaussian-mixture oracles for the VP-SDE marginals.

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::rng::{dist, halton_ball, norm, standard_normal_vec};
use crate::sde::NoiseSchedule;

const MIN_WEIGHT: f64 = 1e-12;
const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// An unnormalized density `gamma` on `R^d` with gradient access.
pub trait TargetDensity: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Writes `grad log gamma(x)` into `grad` and returns `log gamma(x)`.
    /// Callers guarantee `x.len() == grad.len() == dim`.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; x.len()];
        self.log_density_grad(x, &mut g)
    }

    /// `log Z` when known. `Some(0.0)` means `gamma` is already normalized.
    fn log_normalizer(&self) -> Option<f64>;

    fn as_mixture(&self) -> Option<&GaussianMixture> {
        None
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
    chol: Vec<f64>,
    precision: Vec<f64>,
    log_norm: f64,
}

impl Component {
    fn new(dim: usize, weight: f64, mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        check_dim(dim, mean.len())?;
        check_dim(dim * dim, cov.len())?;
        if mean.iter().chain(cov.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Contract("mixture parameters must be finite".into()));
        }
        let m = DMatrix::from_row_slice(dim, dim, &cov);
        let scale = m.abs().max().max(1.0);
        for i in 0..dim {
            for j in 0..i {
                if (m[(i, j)] - m[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::NotSpd(format!("covariance not symmetric at ({i}, {j})")));
                }
            }
        }
        let chol = m
            .clone()
            .cholesky()
            .ok_or_else(|| Error::NotSpd(format!("covariance {cov:?} has a non-positive eigenvalue")))?;
        let l = chol.l();
        let log_det = 2.0 * (0..dim).map(|i| l[(i, i)].ln()).sum::<f64>();
        let inv = chol.inverse();
        let mut chol_rows = vec![0.0; dim * dim];
        let mut precision = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                chol_rows[i * dim + j] = l[(i, j)];
                precision[i * dim + j] = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            }
        }
        Ok(Self {
            weight,
            log_norm: weight.ln() - 0.5 * (dim as f64 * LN_2PI + log_det),
            mean,
            cov,
            chol: chol_rows,
            precision,
        })
    }

    /// `-(1/2)(x-m)^T S^{-1} (x-m)`.
    #[inline]
    fn half_quad(&self, x: &[f64]) -> f64 {
        let d = self.mean.len();
        let mut q = 0.0;
        for i in 0..d {
            let di = x[i] - self.mean[i];
            let row = &self.precision[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for j in 0..d {
                acc += row[j] * (x[j] - self.mean[j]);
            }
            q += di * acc;
        }
        -0.5 * q
    }
}

/// Finite Gaussian mixture `sum_k w_k N(m_k, S_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
}

impl GaussianMixture {
    /// Components are `(weight, mean, row-major covariance)`.
    pub fn new(dim: usize, parts: Vec<(f64, Vec<f64>, Vec<f64>)>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("mixture dimension must be positive".into()));
        }
        if parts.is_empty() {
            return Err(Error::Contract("mixture needs at least one component".into()));
        }
        let mut total = 0.0;
        for (w, _, _) in &parts {
            if !(w.is_finite() && *w >= MIN_WEIGHT && *w <= 1.0) {
                return Err(Error::Contract(format!(
                    "mixture weight {w} outside [{MIN_WEIGHT}, 1]"
                )));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Contract(format!("mixture weights sum to {total}, not 1")));
        }
        let components = parts
            .into_iter()
            .map(|(w, m, c)| Component::new(dim, w, m, c))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, components })
    }

    pub fn gaussian(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self> {
        let dim = mean.len();
        Self::new(dim, vec![(1.0, mean, cov)])
    }

    /// `N(mean, var * I)`.
    pub fn isotropic(mean: Vec<f64>, var: f64) -> Result<Self> {
        let dim = mean.len();
        Self::gaussian(mean, scaled_identity(dim, var))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    /// `log sum_k w_k N(x; m_k, S_k)`.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        Ok(self.log_density_unchecked(x))
    }

    fn log_density_unchecked(&self, x: &[f64]) -> f64 {
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        for c in &self.components {
            let l = c.log_norm + c.half_quad(x);
            if l > max {
                sum = sum * (max - l).exp() + 1.0;
                max = l;
            } else {
                sum += (l - max).exp();
            }
        }
        max + sum.ln()
    }

    /// `grad log p(x)`: responsibility-weighted component scores.
    pub fn score(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim, x.len())?;
        let mut g = vec![0.0; self.dim];
        self.log_density_grad_unchecked(x, &mut g);
        Ok(g)
    }

    /// Streaming log-sum-exp over components; no scratch allocation.
    fn log_density_grad_unchecked(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut max = f64::NEG_INFINITY;
        let mut sum = 0.0;
        grad.fill(0.0);
        for c in &self.components {
            let l = c.log_norm + c.half_quad(x);
            let (keep, w) = if l > max {
                let s = (max - l).exp();
                sum = sum * s + 1.0;
                max = l;
                (s, 1.0)
            } else {
                let w = (l - max).exp();
                sum += w;
                (1.0, w)
            };
            for i in 0..d {
                let row = &c.precision[i * d..(i + 1) * d];
                let mut acc = 0.0;
                for j in 0..d {
                    acc += row[j] * (x[j] - c.mean[j]);
                }
                grad[i] = grad[i] * keep - w * acc;
            }
        }
        for g in grad.iter_mut() {
            *g /= sum;
        }
        max + sum.ln()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.dim];
        for c in &self.components {
            for (m, v) in mu.iter_mut().zip(&c.mean) {
                *m += c.weight * v;
            }
        }
        mu
    }

    /// Row-major covariance of the mixture law.
    pub fn covariance(&self) -> Vec<f64> {
        let d = self.dim;
        let mu = self.mean();
        let mut s = vec![0.0; d * d];
        for c in &self.components {
            for i in 0..d {
                for j in 0..d {
                    s[i * d + j] += c.weight * (c.cov[i * d + j] + c.mean[i] * c.mean[j]);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                s[i * d + j] -= mu[i] * mu[j];
            }
        }
        s
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = &self.components[self.components.len() - 1];
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let d = self.dim;
        let xi = standard_normal_vec(rng, d);
        (0..d)
            .map(|i| {
                chosen.mean[i]
                    + (0..=i).map(|j| chosen.chol[i * d + j] * xi[j]).sum::<f64>()
            })
            .collect()
    }

    /// Law of `a X + sqrt(v) Z` for `X` from this mixture and independent `Z ~ N(0, I)`.
    pub fn affine_noise(&self, a: f64, v: f64) -> Result<Self> {
        let d = self.dim;
        let parts = self
            .components
            .iter()
            .map(|c| {
                let mean = c.mean.iter().map(|m| a * m).collect();
                let mut cov: Vec<f64> = c.cov.iter().map(|s| a * a * s).collect();
                for i in 0..d {
                    cov[i * d + i] += v;
                }
                (c.weight, mean, cov)
            })
            .collect();
        Self::new(d, parts)
    }
}

impl TargetDensity for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        self.log_density_grad_unchecked(x, grad)
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.log_density_unchecked(x)
    }

    fn log_normalizer(&self) -> Option<f64> {
        Some(0.0)
    }

    fn as_mixture(&self) -> Option<&GaussianMixture> {
        Some(self)
    }
}

type LogGammaFn = dyn Fn(&[f64], &mut [f64]) -> f64 + Send + Sync;

/// A target known only through `log gamma` and its gradient.
#[derive(Clone)]
pub struct FnTarget {
    dim: usize,
    log_gamma: Arc<LogGammaFn>,
    log_z: Option<f64>,
}

impl FnTarget {
    /// `log_gamma(x, grad)` must write the gradient and return the log density.
    pub fn new<F>(dim: usize, log_z: Option<f64>, log_gamma: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) -> f64 + Send + Sync + 'static,
    {
        Self {
            dim,
            log_gamma: Arc::new(log_gamma),
            log_z,
        }
    }
}

impl fmt::Debug for FnTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnTarget")
            .field("dim", &self.dim)
            .field("log_z", &self.log_z)
            .finish_non_exhaustive()
    }
}

impl TargetDensity for FnTarget {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        (self.log_gamma)(x, grad)
    }

    fn log_normalizer(&self) -> Option<f64> {
        self.log_z
    }
}

pub fn scaled_identity(dim: usize, v: f64) -> Vec<f64> {
    let mut m = vec![0.0; dim * dim];
    for i in 0..dim {
        m[i * dim + i] = v;
    }
    m
}

/// Log density of `N(0, sigma^2 I)` at `x`.
pub fn log_reference_density(x: &[f64], sigma: f64) -> f64 {
    let d = x.len() as f64;
    let s2 = sigma * sigma;
    -0.5 * (d * (LN_2PI + s2.ln()) + x.iter().map(|v| v * v).sum::<f64>() / s2)
}

/// Marginal of the VP-SDE at time `t` when started from `gmm`:
/// means scale by `sqrt(1 - lambda_t)`, covariances become
/// `(1 - lambda_t) S + sigma^2 lambda_t I`. Times past the horizon extend the
/// schedule analytically.
pub fn marginal_at(
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    sigma: f64,
    t: f64,
) -> Result<GaussianMixture> {
    if !(t >= 0.0) {
        return Err(Error::Contract(format!("marginal time must be >= 0, got {t}")));
    }
    if t == 0.0 {
        return Ok(gmm.clone());
    }
    let lambda = schedule.lambda_unchecked(t);
    let keep = (-schedule.integral_unchecked(t)).exp();
    gmm.affine_noise(keep, sigma * sigma * lambda)
}

/// `grad_y log p_t(y)` from the closed-form marginal.
pub fn oracle_score(
    gmm: &GaussianMixture,
    schedule: &NoiseSchedule,
    sigma: f64,
    t: f64,
    y: &[f64],
) -> Result<Vec<f64>> {
    check_dim(gmm.dim(), y.len())?;
    marginal_at(gmm, schedule, sigma, t)?.score(y)
}

/// Regularity constants of `f` over the working ball.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regularity {
    /// Max of the Lipschitz constants of `f` and `grad f`.
    pub lipschitz: f64,
    /// Lower bound of `f`.
    pub lower_bound: f64,
}

/// The density ratio `f = pi / N(0, sigma^2 I)` together with its regularity
/// constants on `B^d(ball_radius)`.
#[derive(Debug, Clone)]
pub struct RadonNikodym {
    target: Arc<dyn TargetDensity>,
    sigma: f64,
    lipschitz: f64,
    lower_bound: f64,
    ball_radius: f64,
}

impl RadonNikodym {
    pub fn new(
        target: Arc<dyn TargetDensity>,
        sigma: f64,
        ball_radius: f64,
        regularity: Regularity,
    ) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Contract(format!("sigma must be positive, got {sigma}")));
        }
        if !(ball_radius.is_finite() && ball_radius > 0.0) {
            return Err(Error::Contract(format!(
                "ball radius must be positive, got {ball_radius}"
            )));
        }
        let Regularity {
            lipschitz,
            lower_bound,
        } = regularity;
        if !(lipschitz.is_finite() && lipschitz > 0.0) {
            return Err(Error::Contract(format!(
                "Lipschitz constant must be positive, got {lipschitz}"
            )));
        }
        if !(lower_bound > 0.0 && lower_bound <= 1.0) {
            return Err(Error::Contract(format!(
                "lower bound c must lie in (0, 1], got {lower_bound}"
            )));
        }
        Ok(Self {
            target,
            sigma,
            lipschitz,
            lower_bound,
            ball_radius,
        })
    }

    /// Builds `f` with constants from [`estimate_regularity`].
    pub fn estimated(
        target: Arc<dyn TargetDensity>,
        sigma: f64,
        ball_radius: f64,
        probe_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let reg = estimate_regularity(target.as_ref(), sigma, ball_radius, probe_count, seed)?;
        Self::new(target, sigma, ball_radius, reg)
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn lower_bound(&self) -> f64 {
        self.lower_bound
    }

    pub fn ball_radius(&self) -> f64 {
        self.ball_radius
    }

    pub fn regularity(&self) -> Regularity {
        Regularity {
            lipschitz: self.lipschitz,
            lower_bound: self.lower_bound,
        }
    }

    pub fn target(&self) -> &Arc<dyn TargetDensity> {
        &self.target
    }

    pub fn mixture(&self) -> Option<&GaussianMixture> {
        self.target.as_mixture()
    }

    /// `log f(x)`, with `grad log f(x)` written into `grad`.
    pub fn log_eval_into(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        log_ratio_into(self.target.as_ref(), self.sigma, x, grad)
    }

    /// `f(x)`, with `grad f(x)` written into `grad`.
    pub fn eval_into(&self, x: &[f64], grad: &mut [f64]) -> Result<f64> {
        ratio_into(self.target.as_ref(), self.sigma, x, grad)
    }

    /// `(f(x), grad f(x))`.
    pub fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        check_dim(self.dim(), x.len())?;
        let mut g = vec![0.0; x.len()];
        let v = self.eval_into(x, &mut g)?;
        Ok((v, g))
    }

    /// Empirical check of the stored constants over a fresh probe of the ball.
    pub fn check_constants(&self, probe_count: usize, seed: u64) -> Result<()> {
        let probe = RegularityProbe::collect(
            self.target.as_ref(),
            self.sigma,
            self.ball_radius,
            probe_count,
            seed,
        )?;
        if probe.min_value < self.lower_bound - 1e-9 {
            return Err(Error::Contract(format!(
                "f falls to {} below the lower bound {}",
                probe.min_value, self.lower_bound
            )));
        }
        if probe.max_quotient > self.lipschitz + 1e-6 {
            return Err(Error::Contract(format!(
                "difference quotient {} exceeds L = {}",
                probe.max_quotient, self.lipschitz
            )));
        }
        Ok(())
    }
}

fn log_ratio_into(target: &dyn TargetDensity, sigma: f64, x: &[f64], grad: &mut [f64]) -> f64 {
    let s2 = sigma * sigma;
    let lg = target.log_density_grad(x, grad);
    for (g, xi) in grad.iter_mut().zip(x) {
        *g += xi / s2;
    }
    lg - log_reference_density(x, sigma)
}

/// `f = gamma / N(0, sigma^2 I)` computed in log space, then exponentiated.
fn ratio_into(target: &dyn TargetDensity, sigma: f64, x: &[f64], grad: &mut [f64]) -> Result<f64> {
    let lf = log_ratio_into(target, sigma, x, grad);
    if !(lf < 700.0) {
        return Err(Error::Range {
            x: x.to_vec(),
            log_value: lf,
        });
    }
    let v = lf.exp();
    for g in grad.iter_mut() {
        *g *= v;
    }
    Ok(v)
}

struct RegularityProbe {
    min_value: f64,
    max_quotient: f64,
}

impl RegularityProbe {
    fn collect(
        target: &dyn TargetDensity,
        sigma: f64,
        radius: f64,
        probe_count: usize,
        seed: u64,
    ) -> Result<Self> {
        let d = target.dim();
        let points = probe_points(d, radius, probe_count, seed);
        let evals = points
            .par_iter()
            .map(|x| {
                let mut g = vec![0.0; d];
                ratio_into(target, sigma, x, &mut g).map(|v| (v, g))
            })
            .collect::<Result<Vec<_>>>()?;
        let min_value = evals.iter().map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        let max_quotient = (0..points.len())
            .into_par_iter()
            .map(|i| {
                let mut best = 0.0f64;
                for j in (i + 1)..points.len() {
                    let h = dist(&points[i], &points[j]);
                    if h <= 0.0 {
                        continue;
                    }
                    let dv = (evals[i].0 - evals[j].0).abs() / h;
                    let dg = dist(&evals[i].1, &evals[j].1) / h;
                    best = best.max(dv).max(dg);
                }
                best
            })
            .reduce(|| 0.0, f64::max);
        Ok(Self {
            min_value,
            max_quotient,
        })
    }
}

/// Deterministic probe of `B^d(r)`: three quarters Halton interior points, one
/// quarter on or near the boundary sphere. The seed offsets the sequence.
fn probe_points(dim: usize, r: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let n_boundary = (count / 4).max(2);
    let n_interior = count.saturating_sub(n_boundary).max(1);
    let skip = (seed % 997) as usize;
    let mut pts: Vec<Vec<f64>> = halton_ball(n_interior + skip, dim, r)
        .into_iter()
        .skip(skip)
        .collect();
    if dim == 1 {
        let per_side = n_boundary / 2;
        for k in 0..per_side {
            let s = r * (1.0 - k as f64 / (4.0 * per_side as f64));
            pts.push(vec![s]);
            pts.push(vec![-s]);
        }
    } else {
        let dirs = halton_ball(n_boundary + skip + 1, dim, 1.0);
        for p in dirs.into_iter().skip(skip + 1).take(n_boundary) {
            let n = norm(&p);
            if n > 1e-9 {
                pts.push(p.iter().map(|v| v * r / n).collect());
            }
        }
    }
    pts
}

/// Estimates `(L, c)` for `f = gamma / N(0, sigma^2 I)` on `B^d(radius)`.
///
/// `c` is 0.9 times the smallest probed value of `f` (floored at 1e-12 and
/// capped at 1); `L` is 1.1 times the largest difference quotient of `f` or
/// `grad f` over all probe pairs (floored at 1e-12).
pub fn estimate_regularity(
    target: &dyn TargetDensity,
    sigma: f64,
    radius: f64,
    probe_count: usize,
    seed: u64,
) -> Result<Regularity> {
    if probe_count < 1000 {
        return Err(Error::Contract(format!(
            "regularity probe needs at least 1000 points, got {probe_count}"
        )));
    }
    let probe = RegularityProbe::collect(target, sigma, radius, probe_count, seed)?;
    Ok(Regularity {
        lipschitz: (1.1 * probe.max_quotient).max(1e-12),
        lower_bound: (0.9 * probe.min_value).clamp(1e-12, 1.0),
    })
}

//! Closed-form Gaussian KL, Girsanov path-KL estimates between reverse-time
//! diffusions, the reverse-KL objective of a controlled sampler, and the
//! mixing-time error budget.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::rng::stream_rng;
use crate::sde::{
    simulate_reverse_with_cost, DriftField, FrozenDrift, Init, PathCost, ReverseSampler, StepCost,
};
use crate::targets::{log_reference_density, scaled_identity, GaussianMixture, TargetDensity};

/// `KL(N(m1, c1) || N(m2, c2))`; covariances are row-major `d x d`.
pub fn gaussian_kl(mean1: &[f64], cov1: &[f64], mean2: &[f64], cov2: &[f64]) -> Result<f64> {
    let d = mean1.len();
    check_dim(d, mean2.len())?;
    check_dim(d * d, cov1.len())?;
    check_dim(d * d, cov2.len())?;
    let c1 = DMatrix::from_row_slice(d, d, cov1);
    let c2 = DMatrix::from_row_slice(d, d, cov2);
    let l1 = c1
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("first covariance is not positive definite".into()))?;
    let l2 = c2
        .cholesky()
        .ok_or_else(|| Error::NotSpd("second covariance is not positive definite".into()))?;
    let logdet = |l: &nalgebra::Cholesky<f64, nalgebra::Dyn>| {
        2.0 * l.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    };
    let trace = l2.solve(&c1).trace();
    let diff = DVector::from_iterator(d, mean2.iter().zip(mean1).map(|(a, b)| a - b));
    let quad = diff.dot(&l2.solve(&diff));
    let kl = 0.5 * (trace + quad - d as f64 + logdet(&l2) - logdet(&l1));
    // Rounding can leave a tiny negative value for identical laws.
    Ok(kl.max(0.0))
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
}

impl Estimate {
    fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            estimate: mean,
            std_error: (var / n).sqrt(),
            n_paths: values.len(),
        }
    }
}

struct GirsanovCost<'a> {
    other: &'a dyn DriftField,
    sampler: &'a ReverseSampler,
}

struct GirsanovStep<'a> {
    other: Box<dyn FrozenDrift + 'a>,
    /// `dt / (2 g^2)` with `g^2 = 2 sigma^2 beta`.
    weight: f64,
}

impl PathCost for GirsanovCost<'_> {
    fn at(&self, t_rev: f64, dt: f64) -> Result<Box<dyn StepCost + '_>> {
        let beta = self.sampler.schedule.beta((self.sampler.schedule.horizon - t_rev).max(0.0))?;
        let g2 = 2.0 * self.sampler.sigma * self.sampler.sigma * beta;
        Ok(Box::new(GirsanovStep {
            other: self.other.at(t_rev)?,
            weight: dt / (2.0 * g2),
        }))
    }
}

impl StepCost for GirsanovStep<'_> {
    fn eval(&self, y: &[f64], b: &[f64]) -> Result<f64> {
        let mut other = vec![0.0; y.len()];
        self.other.eval(y, &mut other)?;
        let sq: f64 = b.iter().zip(&other).map(|(p, q)| (p - q).powi(2)).sum();
        Ok(self.weight * sq)
    }
}

/// `KL(law of a-paths || law of b-paths) = E_a int |b_a - b_b|^2 / (2 g^2) dt`
/// for two reverse diffusions sharing the noise `g = sigma sqrt(2 beta)` and
/// initial law, discretized on the sampler's grid along `drift_a` paths.
pub fn girsanov_path_kl(
    sampler: &ReverseSampler,
    drift_a: &dyn DriftField,
    drift_b: &dyn DriftField,
    init: Init<'_>,
    n_paths: usize,
    seed: u64,
) -> Result<Estimate> {
    check_dim(drift_a.dim(), drift_b.dim())?;
    let cost = GirsanovCost {
        other: drift_b,
        sampler,
    };
    let run = simulate_reverse_with_cost(sampler, drift_a, init, n_paths, seed, Some(&cost))?;
    Ok(Estimate::from_samples(&run.costs.expect("cost requested")))
}

/// Reverse-KL objective of a reverse sampler started at `N(0, sigma^2 I)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveEstimate {
    #[serde(flatten)]
    pub value: Estimate,
    /// When false the estimate is only known up to an additive `log Z`.
    pub log_z_known: bool,
}

struct ObjectiveCost<'a> {
    sampler: &'a ReverseSampler,
    target: &'a dyn TargetDensity,
}

struct ObjectiveStep {
    beta: f64,
    weight: f64,
}

impl PathCost for ObjectiveCost<'_> {
    fn at(&self, t_rev: f64, dt: f64) -> Result<Box<dyn StepCost + '_>> {
        let beta = self.sampler.schedule.beta((self.sampler.schedule.horizon - t_rev).max(0.0))?;
        let s2 = self.sampler.sigma * self.sampler.sigma;
        Ok(Box::new(ObjectiveStep {
            beta,
            weight: dt / (4.0 * s2 * beta),
        }))
    }

    fn terminal(&self, y: &[f64]) -> Result<f64> {
        let log_pi = self.target.log_density(y) - self.target.log_normalizer().unwrap_or(0.0);
        Ok(log_reference_density(y, self.sampler.sigma) - log_pi)
    }
}

impl StepCost for ObjectiveStep {
    /// `sigma^2 beta |f|^2 dt` where `b = -beta (y - 2 sigma^2 f)`.
    fn eval(&self, y: &[f64], b: &[f64]) -> Result<f64> {
        let sq: f64 = b
            .iter()
            .zip(y)
            .map(|(bi, yi)| (bi + self.beta * yi).powi(2))
            .sum();
        Ok(self.weight * sq)
    }
}

/// `E[sigma^2 int beta_{T-t} |f(T - t, y_t)|^2 dt + ln(N(y_T; 0, sigma^2 I) / pi(y_T))]`
/// over paths of `dy = -beta (y - 2 sigma^2 f) dt + sigma sqrt(2 beta) dW`
/// started at `N(0, sigma^2 I)`. The control is read off the drift as
/// `f = (b + beta y) / (2 sigma^2 beta)`, so any drift field can be scored.
pub fn reverse_kl_objective(
    sampler: &ReverseSampler,
    drift: &dyn DriftField,
    target: &dyn TargetDensity,
    n_paths: usize,
    seed: u64,
) -> Result<ObjectiveEstimate> {
    check_dim(drift.dim(), target.dim())?;
    let cost = ObjectiveCost { sampler, target };
    let run = simulate_reverse_with_cost(
        sampler,
        drift,
        Init::ReferenceGaussian,
        n_paths,
        seed,
        Some(&cost),
    )?;
    Ok(ObjectiveEstimate {
        value: Estimate::from_samples(&run.costs.expect("cost requested")),
        log_z_known: target.log_normalizer().is_some(),
    })
}

/// Error budget `e^{-T} KL(pi || N(0, sigma^2 I)) + T eps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KlBudget {
    pub mixing_term: f64,
    pub drift_term: f64,
    pub total: f64,
}

pub fn mixing_bound(horizon: f64, kl0: f64, epsilon: f64) -> Result<KlBudget> {
    if !(kl0 >= 0.0 && epsilon >= 0.0 && horizon >= 0.0) {
        return Err(Error::Contract(format!(
            "mixing bound needs T, kl0, eps >= 0, got {horizon}, {kl0}, {epsilon}"
        )));
    }
    let mixing_term = (-horizon).exp() * kl0;
    let drift_term = horizon * epsilon;
    Ok(KlBudget {
        mixing_term,
        drift_term,
        total: mixing_term + drift_term,
    })
}

/// Sample mean and unbiased covariance (row-major).
pub fn sample_moments(samples: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len() as f64;
    let d = samples.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for s in samples {
        for i in 0..d {
            mean[i] += s[i];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for s in samples {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (s[i] - mean[i]) * (s[j] - mean[j]);
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n - 1.0);
    (mean, cov)
}

/// `KL(N(m_hat, C_hat) || N(m_ref, C_ref))` between the Gaussian fitted to
/// `samples` and the moment-matched Gaussian of `reference`. Exact for
/// Gaussian laws; a Gaussianized proxy otherwise.
pub fn empirical_marginal_kl(samples: &[Vec<f64>], reference: &GaussianMixture) -> Result<f64> {
    if samples.len() < 1000 {
        return Err(Error::Contract(format!(
            "moment-matched KL needs >= 1000 samples, got {}",
            samples.len()
        )));
    }
    for s in samples {
        check_dim(reference.dim(), s.len())?;
    }
    let (mean, cov) = sample_moments(samples);
    let d = mean.len();
    let c = DMatrix::from_row_slice(d, d, &cov);
    let scale = c.diagonal().iter().cloned().fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let degenerate = c
        .symmetric_eigenvalues()
        .iter()
        .any(|&e| !(e > 1e-12 * scale));
    if degenerate {
        return Err(Error::DegenerateData(
            "sample covariance is singular".into(),
        ));
    }
    gaussian_kl(&mean, &cov, &reference.mean(), &reference.covariance())
}

/// `KL(pi || N(0, sigma^2 I))`: closed form for a single Gaussian, otherwise
/// a Monte Carlo average of `log pi - log N` over `n_samples` draws from `pi`.
pub fn kl_to_reference(target: &GaussianMixture, sigma: f64, n_samples: usize, seed: u64) -> Result<f64> {
    let d = target.dim();
    if target.components().len() == 1 {
        return gaussian_kl(
            &target.mean(),
            &target.covariance(),
            &vec![0.0; d],
            &scaled_identity(d, sigma * sigma),
        );
    }
    if n_samples == 0 {
        return Err(Error::Contract("need at least one sample".into()));
    }
    let mut rng = stream_rng(seed, "divergence/kl0", 0);
    let mut acc = 0.0;
    for _ in 0..n_samples {
        let x = target.sample(&mut rng);
        acc += target.log_density(&x)? - log_reference_density(&x, sigma);
    }
    Ok(acc / n_samples as f64)
}

use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::rng::{fill_standard_normal, standard_normal_vec, stream_rng};
use crate::targets::{marginal_at, GaussianMixture};

use super::{DriftField, NoiseSchedule};

/// One exact draw from the forward transition `N(sqrt(1 - lambda_t) x0, sigma^2 lambda_t I)`.
pub fn forward_sample(
    schedule: &NoiseSchedule,
    sigma: f64,
    x0: &[f64],
    t: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    let mut out = forward_sample_batch(schedule, sigma, std::slice::from_ref(&x0.to_vec()), t, seed)?;
    Ok(out.pop().expect("one input, one draw"))
}

/// Independent exact forward draws, one per starting point; draw `i` uses the
/// random stream `(seed, i)`.
pub fn forward_sample_batch(
    schedule: &NoiseSchedule,
    sigma: f64,
    x0: &[Vec<f64>],
    t: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let lambda = schedule.lambda_at(t)?;
    let keep = (-schedule.integral(t)?).exp();
    let spread = sigma * lambda.sqrt();
    Ok(x0
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let mut rng = stream_rng(seed, "sde/forward", i as u64);
            let xi = standard_normal_vec(&mut rng, x.len());
            x.iter().zip(&xi).map(|(x, z)| keep * x + spread * z).collect()
        })
        .collect())
}

/// Recorded path of one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub seed: u64,
}

/// Initial law of the reverse process.
#[derive(Debug, Clone, Copy)]
pub enum Init<'a> {
    /// `N(0, sigma^2 I)`.
    ReferenceGaussian,
    /// The forward marginal `p_T` of a mixture target.
    ExactTerminal(&'a GaussianMixture),
}

/// Running and terminal costs accumulated along reverse paths.
pub trait PathCost: Sync {
    /// Cost over `[t_rev, t_rev + dt]`, frozen at the left endpoint.
    fn at(&self, t_rev: f64, dt: f64) -> Result<Box<dyn StepCost + '_>>;

    fn terminal(&self, _y: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

pub trait StepCost: Send + Sync {
    /// Increment at state `y` where the sampler's drift is `b`.
    fn eval(&self, y: &[f64], b: &[f64]) -> Result<f64>;
}

/// Euler-Maruyama on a uniform grid for
/// `dy = b(y, t) dt + sigma sqrt(2 beta_{T-t}) dW`.
#[derive(Debug, Clone)]
pub struct ReverseSampler {
    pub schedule: NoiseSchedule,
    pub sigma: f64,
    pub n_steps: usize,
    /// Brownian increments are drawn on a grid `noise_substeps` times finer and
    /// summed, so runs with `n_steps * noise_substeps` fixed share one path.
    pub noise_substeps: usize,
    pub record_paths: bool,
}

impl ReverseSampler {
    pub fn new(schedule: NoiseSchedule, sigma: f64, n_steps: usize) -> Self {
        Self {
            schedule,
            sigma,
            n_steps,
            noise_substeps: 1,
            record_paths: false,
        }
    }

    pub fn with_noise_substeps(mut self, substeps: usize) -> Self {
        self.noise_substeps = substeps;
        self
    }

    pub fn with_paths(mut self, record: bool) -> Self {
        self.record_paths = record;
        self
    }

    pub fn dt(&self) -> f64 {
        self.schedule.horizon / self.n_steps as f64
    }

    fn validate(&self, drift: &dyn DriftField, n_particles: usize) -> Result<()> {
        if self.n_steps < 10 {
            return Err(Error::Contract(format!(
                "reverse sampler needs at least 10 steps, got {}",
                self.n_steps
            )));
        }
        if self.noise_substeps == 0 {
            return Err(Error::Contract("noise_substeps must be >= 1".into()));
        }
        if n_particles == 0 {
            return Err(Error::Contract("need at least one particle".into()));
        }
        if !(self.sigma.is_finite() && self.sigma > 0.0) {
            return Err(Error::Contract(format!("sigma must be positive, got {}", self.sigma)));
        }
        if let Some(s) = drift.schedule() {
            if s != &self.schedule {
                return Err(Error::Contract(
                    "drift field and sampler use different noise schedules".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Terminal states, optional paths, and per-particle accumulated costs.
#[derive(Debug, Clone)]
pub struct ReverseRun {
    pub samples: Vec<Vec<f64>>,
    pub paths: Option<Vec<Trajectory>>,
    pub costs: Option<Vec<f64>>,
}

/// Simulates `n_particles` reverse paths. Each particle owns a random stream
/// derived from `(seed, particle index)`, so results are independent of the
/// thread schedule.
pub fn simulate_reverse(
    sampler: &ReverseSampler,
    drift: &dyn DriftField,
    init: Init<'_>,
    n_particles: usize,
    seed: u64,
) -> Result<ReverseRun> {
    simulate_reverse_with_cost(sampler, drift, init, n_particles, seed, None)
}

pub fn simulate_reverse_with_cost(
    sampler: &ReverseSampler,
    drift: &dyn DriftField,
    init: Init<'_>,
    n_particles: usize,
    seed: u64,
    cost: Option<&dyn PathCost>,
) -> Result<ReverseRun> {
    sampler.validate(drift, n_particles)?;
    let d = drift.dim();
    let start = match init {
        Init::ReferenceGaussian => None,
        Init::ExactTerminal(gmm) => {
            check_dim(d, gmm.dim())?;
            let t = sampler.schedule.horizon;
            Some(marginal_at(gmm, &sampler.schedule, sampler.sigma, t)?)
        }
    };

    let particle_seed = |i: usize| crate::rng::derive_seed(seed, "sde/particle", i as u64);
    let mut rngs: Vec<ChaCha8Rng> = (0..n_particles)
        .map(|i| stream_rng(seed, "sde/particle", i as u64))
        .collect();
    let mut states = vec![0.0; n_particles * d];
    states
        .par_chunks_mut(d)
        .zip(rngs.par_iter_mut())
        .for_each(|(y, rng)| match &start {
            None => {
                fill_standard_normal(rng, y);
                for v in y.iter_mut() {
                    *v *= sampler.sigma;
                }
            }
            Some(p) => y.copy_from_slice(&p.sample(rng)),
        });

    let n = sampler.n_steps;
    let dt = sampler.dt();
    let horizon = sampler.schedule.horizon;
    let r = sampler.noise_substeps;
    let inv_sqrt_r = 1.0 / (r as f64).sqrt();
    // Sum of `r` unit normals scaled by 1/sqrt(r): the same increment law,
    // but it reproduces the Brownian path of a sampler with r times the steps.
    let mut paths: Option<Vec<Vec<f64>>> = sampler
        .record_paths
        .then(|| states.chunks(d).map(|y| {
            let mut p = Vec::with_capacity((n + 1) * d);
            p.extend_from_slice(y);
            p
        }).collect());
    let mut costs = vec![0.0; n_particles];

    for k in 0..n {
        let t_rev = k as f64 * dt;
        let frozen = drift.at(t_rev)?;
        let step_cost = cost.map(|c| c.at(t_rev, dt)).transpose()?;
        let beta = sampler.schedule.beta((horizon - t_rev).max(0.0))?;
        let scale = sampler.sigma * (2.0 * beta * dt).sqrt() * inv_sqrt_r;

        let mut failures: Vec<(usize, Error)> = states
            .par_chunks_mut(d)
            .zip(rngs.par_iter_mut())
            .zip(costs.par_iter_mut())
            .enumerate()
            .map_init(
                || (vec![0.0; d], vec![0.0; d], vec![0.0; d]),
                |(b, xi, sub), (i, ((y, rng), acc))| {
                    if let Err(e) = frozen.eval(y, b) {
                        return Some((i, e));
                    }
                    if let Some(sc) = step_cost.as_ref() {
                        match sc.eval(y, b) {
                            Ok(v) => *acc += v,
                            Err(e) => return Some((i, e)),
                        }
                    }
                    if r == 1 {
                        fill_standard_normal(rng, xi);
                    } else {
                        xi.iter_mut().for_each(|v| *v = 0.0);
                        for _ in 0..r {
                            fill_standard_normal(rng, sub);
                            for j in 0..d {
                                xi[j] += sub[j];
                            }
                        }
                    }
                    let mut ok = true;
                    for j in 0..d {
                        y[j] += b[j] * dt + scale * xi[j];
                        ok &= y[j].is_finite();
                    }
                    (!ok).then_some((i, Error::Divergence { particle: i, step: k }))
                },
            )
            .flatten()
            .collect();
        if !failures.is_empty() {
            failures.sort_by_key(|(i, _)| *i);
            return Err(failures.swap_remove(0).1);
        }
        if let Some(p) = paths.as_mut() {
            for (path, y) in p.iter_mut().zip(states.chunks(d)) {
                path.extend_from_slice(y);
            }
        }
    }

    if let Some(pc) = cost {
        let terminal: Vec<Result<f64>> = states.par_chunks(d).map(|y| pc.terminal(y)).collect();
        for (acc, t) in costs.iter_mut().zip(terminal) {
            *acc += t?;
        }
    }

    let times: Vec<f64> = (0..=n).map(|k| k as f64 * dt).collect();
    let paths = paths.map(|p| {
        p.into_iter()
            .enumerate()
            .map(|(i, flat)| Trajectory {
                times: times.clone(),
                states: flat.chunks(d).map(<[f64]>::to_vec).collect(),
                seed: particle_seed(i),
            })
            .collect()
    });
    Ok(ReverseRun {
        samples: states.chunks(d).map(<[f64]>::to_vec).collect(),
        paths,
        costs: cost.map(|_| costs),
    })
}

//! The `rho_OU` metric, covering numbers, and numerical checks of the
//! regularity properties of the OU semigroup and the drift it induces.

mod covering;
mod inequalities;

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{check_dim, Error, Result};
use crate::rng::{dist, halton_ball, norm, stream_rng, uniform_in_ball};
use crate::sde::NoiseSchedule;
use crate::semigroup::{ou_semigroup_oracle_grad, oracle_log_gradient, SemigroupEstimator};
use crate::targets::RadonNikodym;

pub use covering::{
    ball_cover_size, greedy_cover, TIE, interval_cover_size, product_cover_size, verify_covering_product,
    CoverReport,
};
pub use inequalities::{
    commutation_residuals, projected, verify_commutation, verify_commutation_with_step, verify_envelope,
    verify_envelope_fn, verify_l2_lipschitz, verify_l2_lipschitz_fn, LipschitzCheck,
};

/// A point `(t, x)` of `[0, T] x B^d(R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuPoint {
    pub t: f64,
    pub x: Vec<f64>,
}

impl OuPoint {
    pub fn new(t: f64, x: Vec<f64>) -> Self {
        Self { t, x }
    }

    /// Validating constructor for points of `[0, horizon] x B^d(radius)`.
    pub fn checked(t: f64, x: Vec<f64>, horizon: f64, radius: f64) -> Result<Self> {
        if !(0.0..=horizon).contains(&t) {
            return Err(Error::Contract(format!("t = {t} outside [0, {horizon}]")));
        }
        if norm(&x) > radius + 1e-12 {
            return Err(Error::Contract(format!(
                "|x| = {} exceeds ball radius {radius}",
                norm(&x)
            )));
        }
        Ok(Self { t, x })
    }
}

/// `rho_OU((t, x), (t', x')) = |e^{-t} x - e^{-t'} x'| + |t - t'|^{1/2}`.
pub fn rho_ou(a: &OuPoint, b: &OuPoint) -> f64 {
    let (ea, eb) = ((-a.t).exp(), (-b.t).exp());
    let sq: f64 = a
        .x
        .iter()
        .zip(&b.x)
        .map(|(p, q)| {
            let d = ea * p - eb * q;
            d * d
        })
        .sum();
    sq.sqrt() + (a.t - b.t).abs().sqrt()
}

fn random_point<R: Rng>(rng: &mut R, d: usize, radius: f64, horizon: f64) -> OuPoint {
    let t = rng.random::<f64>() * horizon;
    OuPoint::new(t, uniform_in_ball(rng, d, radius))
}

/// Samples random triples in `[0, T] x B^d(R)` and counts failures of
/// symmetry, identity of indiscernibles, and the triangle inequality.
pub fn verify_metric_axioms(d: usize, radius: f64, horizon: f64, trials: usize, seed: u64) -> Result<usize> {
    if trials < 10_000 {
        return Err(Error::Contract(format!("metric check needs >= 1e4 trials, got {trials}")));
    }
    let chunk = 1024;
    let violations = (0..trials.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, "analysis/metric", c as u64);
            let mut bad = 0;
            for _ in (c * chunk)..((c + 1) * chunk).min(trials) {
                let a = random_point(&mut rng, d, radius, horizon);
                let b = random_point(&mut rng, d, radius, horizon);
                let c = random_point(&mut rng, d, radius, horizon);
                let ab = rho_ou(&a, &b);
                if ab != rho_ou(&b, &a) || ab < 0.0 {
                    bad += 1;
                }
                if rho_ou(&a, &a) != 0.0 {
                    bad += 1;
                }
                // A distinct point nearby must be at positive distance.
                let mut near = a.clone();
                near.t = (near.t + 1e-9).min(horizon);
                if near.t == a.t {
                    near.t -= 1e-9;
                }
                if rho_ou(&a, &near) <= 0.0 {
                    bad += 1;
                }
                if ab > rho_ou(&a, &c) + rho_ou(&c, &b) + 1e-12 {
                    bad += 1;
                }
            }
            bad
        })
        .sum();
    Ok(violations)
}

/// Evaluation grid: every time paired with every point.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub times: Vec<f64>,
    pub points: Vec<Vec<f64>>,
}

impl GridSpec {
    /// `n_t` equispaced times in `[0, t_max]` and `n_x` points of `B^d(radius)`:
    /// an equispaced segment in one dimension, a Halton fill otherwise.
    pub fn ball(dim: usize, radius: f64, n_x: usize, n_t: usize, t_max: f64) -> Self {
        let times = linspace(0.0, t_max, n_t);
        let points = if dim == 1 {
            linspace(-radius, radius, n_x).into_iter().map(|x| vec![x]).collect()
        } else {
            halton_ball(n_x, dim, radius)
        };
        Self { times, points }
    }

    pub fn len(&self) -> usize {
        self.times.len() * self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &[f64])> + '_ {
        self.times
            .iter()
            .flat_map(move |&t| self.points.iter().map(move |x| (t, x.as_slice())))
    }
}

pub(crate) fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![a],
        _ => (0..n)
            .map(|i| a + (b - a) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Sup-norm errors of the empirical semigroup against the closed form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SupError {
    pub value: f64,
    pub grad: f64,
    /// Largest pointwise standard error of the value estimate on the grid.
    pub max_value_se: f64,
}

/// Max over the grid of `|phi_hat - U_t f|` and `|grad phi_hat - grad U_t f|`.
/// Grid times are OU times with unit rate.
pub fn sup_error_report(est: &SemigroupEstimator, grid: &GridSpec) -> Result<SupError> {
    let unit = unit_clock(grid)?;
    let rows: Vec<Result<(f64, f64, f64)>> = grid
        .iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(t, x)| {
            check_dim(est.dim(), x.len())?;
            let s = est.ou_semigroup_mc_stats(x, t)?;
            let (v, g) = ou_semigroup_oracle_grad(est.rnd(), &unit, x, t)?;
            Ok(((s.value - v).abs(), dist(&s.grad, &g), s.value_se))
        })
        .collect();
    let mut out = SupError {
        value: 0.0,
        grad: 0.0,
        max_value_se: 0.0,
    };
    for r in rows {
        let (v, g, se) = r?;
        out.value = out.value.max(v);
        out.grad = out.grad.max(g);
        out.max_value_se = out.max_value_se.max(se);
    }
    Ok(out)
}

pub(crate) fn unit_clock(grid: &GridSpec) -> Result<NoiseSchedule> {
    // Only the integral is used; a horizon of at least 2 keeps the schedule quiet.
    let t_max = grid.times.iter().cloned().fold(2.0, f64::max);
    NoiseSchedule::constant(1.0, t_max)
}

/// Bounds on `grad log U_t f` over a grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DriftRegularity {
    pub max_norm: f64,
    pub norm_bound: f64,
    pub max_quotient: f64,
    pub quotient_bound: f64,
    pub max_clipped: f64,
    pub clip_bound: f64,
}

impl DriftRegularity {
    pub fn holds(&self) -> bool {
        self.max_norm <= self.norm_bound + 1e-6
            && self.max_quotient <= self.quotient_bound + 1e-6
            && self.max_clipped <= self.clip_bound
    }
}

/// Checks `|grad log U_t f| <= L/c`, same-time difference quotients of
/// `grad log U_t f` against `L/c + L^2/c^2`, and the clipped estimator
/// against `2L/c`, over the grid.
pub fn drift_regularity(est: &SemigroupEstimator, grid: &GridSpec) -> Result<DriftRegularity> {
    let rnd: &RadonNikodym = est.rnd();
    let ratio = rnd.lipschitz() / rnd.lower_bound();
    let unit = unit_clock(grid)?;
    let per_time: Vec<Result<(f64, f64, f64)>> = grid
        .times
        .par_iter()
        .map(|&t| {
            let grads = grid
                .points
                .iter()
                .map(|x| oracle_log_gradient(rnd, &unit, x, t))
                .collect::<Result<Vec<_>>>()?;
            let max_norm = grads.iter().map(|g| norm(g)).fold(0.0, f64::max);
            let mut max_q: f64 = 0.0;
            for i in 0..grads.len() {
                for j in (i + 1)..grads.len() {
                    let dx = dist(&grid.points[i], &grid.points[j]);
                    if dx > 0.0 {
                        max_q = max_q.max(dist(&grads[i], &grads[j]) / dx);
                    }
                }
            }
            let mut max_c: f64 = 0.0;
            for x in &grid.points {
                for v in est.drift_estimate(x, t)? {
                    max_c = max_c.max(v.abs());
                }
            }
            Ok((max_norm, max_q, max_c))
        })
        .collect();
    let mut out = DriftRegularity {
        max_norm: 0.0,
        norm_bound: ratio,
        max_quotient: 0.0,
        quotient_bound: ratio + ratio * ratio,
        max_clipped: 0.0,
        clip_bound: est.clip_level(),
    };
    for r in per_time {
        let (n, q, c) = r?;
        out.max_norm = out.max_norm.max(n);
        out.max_quotient = out.max_quotient.max(q);
        out.max_clipped = out.max_clipped.max(c);
    }
    Ok(out)
}

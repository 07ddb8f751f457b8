use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng::{fill_standard_normal, norm, stream_rng, uniform_in_ball};
use crate::semigroup::SemigroupEstimator;
use crate::targets::RadonNikodym;

use super::{rho_ou, OuPoint};

/// Outcome of a randomized inequality check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzCheck {
    pub trials: usize,
    pub violations: usize,
    /// Largest observed ratio of the left side to the bound.
    pub max_ratio: f64,
}

/// `g = f o P`, where `P` is the radial projection onto the working ball.
///
/// A Gaussian-mixture density ratio is neither bounded nor globally Lipschitz,
/// so the global inequalities are checked on this extension, which agrees with
/// `f` on the ball and is `L`-Lipschitz everywhere.
pub fn projected(rnd: &RadonNikodym) -> impl Fn(&[f64]) -> Result<f64> + Sync + '_ {
    let r = rnd.ball_radius();
    move |x: &[f64]| {
        let n = norm(x);
        let mut grad = vec![0.0; x.len()];
        if n > r {
            let p: Vec<f64> = x.iter().map(|v| v * r / n).collect();
            rnd.eval_into(&p, &mut grad)
        } else {
            rnd.eval_into(x, &mut grad)
        }
    }
}

fn ou_argument(x: &[f64], t: f64, sigma: f64, z: &[f64], out: &mut [f64]) {
    let keep = (-t).exp();
    let spread = sigma * (-(-2.0 * t).exp_m1()).sqrt();
    for i in 0..x.len() {
        out[i] = keep * x[i] + spread * z[i];
    }
}

/// Envelope check for the projected density ratio:
/// `|g(e^{-t} x + sigma sqrt(1 - e^{-2t}) z) - g(0)| <= L((R v 1) + sqrt(2) sigma |z|)`
/// over random `x` in the ball, `t` in `[0, 1]`, and Gaussian `z`.
pub fn verify_envelope(rnd: &RadonNikodym, radius: f64, samples: usize, seed: u64) -> Result<LipschitzCheck> {
    let g = projected(rnd);
    verify_envelope_fn(&g, rnd.dim(), rnd.lipschitz(), rnd.sigma(), radius, samples, seed)
}

/// [`verify_envelope`] for an arbitrary `L`-Lipschitz function.
pub fn verify_envelope_fn(
    g: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    dim: usize,
    lipschitz: f64,
    sigma: f64,
    radius: f64,
    samples: usize,
    seed: u64,
) -> Result<LipschitzCheck> {
    if samples < 100_000 {
        return Err(Error::Contract(format!("envelope check needs >= 1e5 samples, got {samples}")));
    }
    let g0 = g(&vec![0.0; dim])?;
    let chunk = 4096;
    let parts: Vec<Result<(usize, f64)>> = (0..samples.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, "analysis/envelope", c as u64);
            let mut z = vec![0.0; dim];
            let mut arg = vec![0.0; dim];
            let (mut bad, mut worst) = (0usize, 0.0f64);
            for _ in (c * chunk)..((c + 1) * chunk).min(samples) {
                let x = uniform_in_ball(&mut rng, dim, radius);
                let t = rng.random::<f64>();
                fill_standard_normal(&mut rng, &mut z);
                ou_argument(&x, t, sigma, &z, &mut arg);
                let lhs = (g(&arg)? - g0).abs();
                let env = lipschitz * (radius.max(1.0) + 2f64.sqrt() * sigma * norm(&z));
                if lhs > env + 1e-9 {
                    bad += 1;
                }
                worst = worst.max(lhs / env);
            }
            Ok((bad, worst))
        })
        .collect();
    let mut out = LipschitzCheck {
        trials: samples,
        violations: 0,
        max_ratio: 0.0,
    };
    for p in parts {
        let (b, w) = p?;
        out.violations += b;
        out.max_ratio = out.max_ratio.max(w);
    }
    Ok(out)
}

/// Mean-square Lipschitz check for the projected density ratio: for random
/// pairs of `[0, 1] x B^d(R)`,
/// `|g_{t,x} - g_{t',x'}|_{L2} <= L(1 + sigma sqrt(2d)) rho_OU`, where
/// `g_{t,x}(z) = g(e^{-t} x + sigma sqrt(1 - e^{-2t}) z)`. Both sides of a pair
/// share the same `z` draws; a violation needs to exceed the bound by three
/// standard errors.
pub fn verify_l2_lipschitz(rnd: &RadonNikodym, pairs: usize, mc_draws: usize, seed: u64) -> Result<LipschitzCheck> {
    let g = projected(rnd);
    verify_l2_lipschitz_fn(
        &g,
        rnd.dim(),
        rnd.lipschitz(),
        rnd.sigma(),
        &random_pairs(rnd.dim(), rnd.ball_radius(), pairs, seed),
        mc_draws,
        seed,
    )
}

pub(crate) fn random_pairs(dim: usize, radius: f64, pairs: usize, seed: u64) -> Vec<(OuPoint, OuPoint)> {
    let mut rng = stream_rng(seed, "analysis/l2-pairs", 0);
    (0..pairs)
        .map(|_| {
            let a = OuPoint::new(rng.random::<f64>(), uniform_in_ball(&mut rng, dim, radius));
            let b = OuPoint::new(rng.random::<f64>(), uniform_in_ball(&mut rng, dim, radius));
            (a, b)
        })
        .collect()
}

/// [`verify_l2_lipschitz`] for an arbitrary `L`-Lipschitz function and
/// caller-chosen pairs.
pub fn verify_l2_lipschitz_fn(
    g: &(dyn Fn(&[f64]) -> Result<f64> + Sync),
    dim: usize,
    lipschitz: f64,
    sigma: f64,
    pairs: &[(OuPoint, OuPoint)],
    mc_draws: usize,
    seed: u64,
) -> Result<LipschitzCheck> {
    if mc_draws < 10_000 {
        return Err(Error::Contract(format!("L2 check needs >= 1e4 draws, got {mc_draws}")));
    }
    let factor = lipschitz * (1.0 + sigma * (2.0 * dim as f64).sqrt());
    let parts: Vec<Result<(bool, f64)>> = pairs
        .par_iter()
        .enumerate()
        .map(|(k, (a, b))| {
            let rho = rho_ou(a, b);
            if rho == 0.0 {
                return Ok((false, 0.0));
            }
            let mut rng = stream_rng(seed, "analysis/l2-draws", k as u64);
            let mut z = vec![0.0; dim];
            let (mut pa, mut pb) = (vec![0.0; dim], vec![0.0; dim]);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..mc_draws {
                fill_standard_normal(&mut rng, &mut z);
                ou_argument(&a.x, a.t, sigma, &z, &mut pa);
                ou_argument(&b.x, b.t, sigma, &z, &mut pb);
                let d = g(&pa)? - g(&pb)?;
                let sq = d * d;
                s1 += sq;
                s2 += sq * sq;
            }
            let n = mc_draws as f64;
            let mean = s1 / n;
            let var = ((s2 / n - mean * mean) * n / (n - 1.0)).max(0.0);
            let lhs = mean.sqrt();
            let se = if lhs > 0.0 { (var / n).sqrt() / (2.0 * lhs) } else { 0.0 };
            let bound = factor * rho;
            Ok((lhs > bound + 3.0 * se + 1e-12, lhs / bound))
        })
        .collect();
    let mut out = LipschitzCheck {
        trials: pairs.len(),
        violations: 0,
        max_ratio: 0.0,
    };
    for p in parts {
        let (bad, r) = p?;
        out.violations += bad as usize;
        out.max_ratio = out.max_ratio.max(r);
    }
    Ok(out)
}

/// Largest residual between a central finite difference of the empirical
/// semigroup value and its analytic gradient, at random `(x, t)` with the
/// cloud held fixed. Residuals are `|fd - grad| / max(|grad|, 1)`.
pub fn verify_commutation(est: &SemigroupEstimator, probes: usize, seed: u64) -> Result<f64> {
    verify_commutation_with_step(est, probes, 1e-5, seed)
}

pub fn verify_commutation_with_step(est: &SemigroupEstimator, probes: usize, step: f64, seed: u64) -> Result<f64> {
    let residuals = commutation_residuals(est, probes, step, seed)?;
    Ok(residuals.into_iter().fold(0.0, f64::max))
}

/// Per-probe residuals behind [`verify_commutation_with_step`].
pub fn commutation_residuals(est: &SemigroupEstimator, probes: usize, step: f64, seed: u64) -> Result<Vec<f64>> {
    if probes < 10 {
        return Err(Error::Contract(format!("commutation check needs >= 10 probes, got {probes}")));
    }
    let d = est.dim();
    let radius = est.rnd().ball_radius();
    let mut rng = stream_rng(seed, "analysis/commutation", 0);
    let points: Vec<(Vec<f64>, f64)> = (0..probes)
        .map(|_| {
            let x = uniform_in_ball(&mut rng, d, radius);
            // t in (0, 1]; t = 0 is the identity map.
            (x, 1.0 - rng.random::<f64>())
        })
        .collect();
    let residuals: Vec<Result<f64>> = points
        .par_iter()
        .map(|(x, t)| {
            let (_, grad) = est.ou_semigroup_mc(x, *t)?;
            let mut fd = vec![0.0; d];
            let mut xp = x.clone();
            for i in 0..d {
                xp[i] = x[i] + step;
                let up = est.ou_semigroup_mc(&xp, *t)?.0;
                xp[i] = x[i] - step;
                let down = est.ou_semigroup_mc(&xp, *t)?.0;
                xp[i] = x[i];
                fd[i] = (up - down) / (2.0 * step);
            }
            let diff: Vec<f64> = fd.iter().zip(&grad).map(|(a, b)| a - b).collect();
            Ok(norm(&diff) / norm(&grad).max(1.0))
        })
        .collect();
    residuals.into_iter().collect()
}

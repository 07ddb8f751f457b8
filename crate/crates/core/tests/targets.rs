use std::sync::Arc;

use proptest::prelude::*;
use vpsde::rng::stream_rng;
use vpsde::sde::{forward_sample_batch, NoiseSchedule};
use vpsde::targets::{
    estimate_regularity, marginal_at, oracle_score, GaussianMixture, RadonNikodym, Regularity,
    TargetDensity,
};

const LN_2PI_HALF: f64 = 0.918_938_533_204_672_7;

fn unit_schedule() -> NoiseSchedule {
    NoiseSchedule::constant(1.0, 4.0).unwrap()
}

fn rnd(target: GaussianMixture, sigma: f64) -> RadonNikodym {
    let reg = Regularity {
        lipschitz: 1.0,
        lower_bound: 1e-3,
    };
    RadonNikodym::new(Arc::new(target), sigma, 1.0, reg).unwrap()
}

fn two_bumps() -> GaussianMixture {
    GaussianMixture::new(
        2,
        vec![
            (0.4, vec![-1.0, 0.5], vec![1.0, 0.3, 0.3, 0.8]),
            (0.6, vec![1.0, -0.5], vec![0.7, 0.0, 0.0, 1.2]),
        ],
    )
    .unwrap()
}

#[test]
fn log_density_examples() {
    let g = GaussianMixture::isotropic(vec![0.0], 1.0).unwrap();
    assert!((g.log_density(&[0.0]).unwrap() + LN_2PI_HALF).abs() < 1e-14);
    let mut last = f64::INFINITY;
    for r in [1.0, 2.0, 4.0, 8.0, 16.0] {
        let v = g.log_density(&[r]).unwrap();
        assert!(v < last);
        last = v;
    }
    let sym = GaussianMixture::new(1, vec![(0.5, vec![-2.0], vec![1.0]), (0.5, vec![2.0], vec![1.0])]).unwrap();
    let direct = (0.5 * (-2.0f64).exp() / (2.0 * std::f64::consts::PI).sqrt() * 2.0).ln();
    assert!((sym.log_density(&[0.0]).unwrap() - direct).abs() < 1e-14);
    assert!((direct + 2.9189).abs() < 1e-4);
    assert!(g.log_density(&[0.0, 1.0]).is_err());
}

#[test]
fn far_tails_stay_finite() {
    let g = two_bumps();
    let v = g.log_density(&[300.0, -200.0]).unwrap();
    assert!(v.is_finite() && v < -1e4);
    assert!(g.score(&[300.0, -200.0]).unwrap().iter().all(|s| s.is_finite()));
}

#[test]
fn mixture_construction_checks() {
    assert!(GaussianMixture::new(1, vec![(0.5, vec![0.0], vec![1.0])]).is_err());
    assert!(GaussianMixture::new(1, vec![(1.0, vec![0.0], vec![-1.0])]).is_err());
    assert!(GaussianMixture::new(2, vec![(1.0, vec![0.0, 0.0], vec![1.0, 0.5, 0.4, 1.0])]).is_err());
    assert!(GaussianMixture::new(1, vec![(1.0, vec![0.0], vec![1.0]), (0.0, vec![1.0], vec![1.0])]).is_err());
    assert!(GaussianMixture::new(2, vec![(1.0, vec![0.0, 0.0], vec![1.0, 2.0, 2.0, 1.0])]).is_err());
}

#[test]
fn density_ratio_examples() {
    let f = rnd(GaussianMixture::isotropic(vec![0.0, 0.0], 4.0).unwrap(), 2.0);
    let (v, g) = f.eval(&[0.7, -1.3]).unwrap();
    assert!((v - 1.0).abs() < 1e-13);
    assert!(g.iter().all(|x| x.abs() < 1e-13));

    let f = rnd(GaussianMixture::isotropic(vec![1.0], 1.0).unwrap(), 1.0);
    let (v, g) = f.eval(&[0.0]).unwrap();
    assert!((v - (-0.5f64).exp()).abs() < 1e-14);
    assert!((g[0] - v).abs() < 1e-14);
}

#[test]
fn density_ratio_overflow_is_a_range_error() {
    let f = rnd(GaussianMixture::isotropic(vec![0.0], 4.0).unwrap(), 1.0);
    assert!(matches!(f.eval(&[60.0]), Err(vpsde::Error::Range { .. })));
}

fn arb_mixture() -> impl Strategy<Value = GaussianMixture> {
    let comp = (
        0.2f64..1.0,
        prop::collection::vec(-2.0f64..2.0, 2),
        0.5f64..2.0,
        0.5f64..2.0,
        -0.4f64..0.4,
    );
    prop::collection::vec(comp, 1..4).prop_map(|parts| {
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let parts = parts
            .into_iter()
            .map(|(w, m, a, b, rho)| {
                let off = rho * (a * b).sqrt();
                (w / total, m, vec![a, off, off, b])
            })
            .collect();
        GaussianMixture::new(2, parts).unwrap()
    })
}

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[i] += h;
            b[i] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1.0);
    diff / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn density_ratio_gradient_matches_finite_differences(
        g in arb_mixture(),
        sigma in 0.7f64..1.5,
        xs in prop::collection::vec(prop::collection::vec(-1.5f64..1.5, 2), 20),
    ) {
        let f = rnd(g, sigma);
        for x in &xs {
            let (_, grad) = f.eval(x).unwrap();
            let fd = central_diff(|y| f.eval(y).unwrap().0, x, 1e-5);
            prop_assert!(rel_err(&fd, &grad) < 1e-5);
        }
    }

    #[test]
    fn oracle_score_matches_finite_differences(
        g in arb_mixture(),
        probes in prop::collection::vec((0.0f64..3.0, prop::collection::vec(-2.0f64..2.0, 2)), 20),
    ) {
        let sched = unit_schedule();
        for (t, y) in &probes {
            let score = oracle_score(&g, &sched, 1.0, *t, y).unwrap();
            let m = marginal_at(&g, &sched, 1.0, *t).unwrap();
            let fd = central_diff(|z| m.log_density(z).unwrap(), y, 1e-5);
            prop_assert!(rel_err(&fd, &score) < 1e-5);
        }
    }

    #[test]
    fn score_jacobian_is_symmetric(
        g in arb_mixture(),
        t in 0.0f64..2.0,
        y in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let sched = unit_schedule();
        let h = 1e-5;
        let col = |i: usize| {
            let mut a = y.clone();
            let mut b = y.clone();
            a[i] += h;
            b[i] -= h;
            let sa = oracle_score(&g, &sched, 1.0, t, &a).unwrap();
            let sb = oracle_score(&g, &sched, 1.0, t, &b).unwrap();
            vec![(sa[0] - sb[0]) / (2.0 * h), (sa[1] - sb[1]) / (2.0 * h)]
        };
        let (c0, c1) = (col(0), col(1));
        prop_assert!((c0[1] - c1[0]).abs() < 1e-4);
    }
}

#[test]
fn regularity_of_reference_target() {
    let g = GaussianMixture::isotropic(vec![0.0], 1.0).unwrap();
    let r = estimate_regularity(&g, 1.0, 1.0, 1000, 1).unwrap();
    assert!(r.lipschitz < 1e-9);
    assert!((r.lower_bound - 0.9).abs() < 1e-12);
}

#[test]
fn regularity_lower_bound_of_shifted_gaussian() {
    let g = GaussianMixture::isotropic(vec![0.5], 1.0).unwrap();
    let r = estimate_regularity(&g, 1.0, 1.0, 1000, 1).unwrap();
    let want = 0.9 * (-0.625f64).exp();
    assert!((r.lower_bound - want).abs() < 1e-9 * want, "{} vs {want}", r.lower_bound);
    // f = exp(0.5 x - 0.125) has |f'| = |f''| = 0.5 f, largest at x = 1.
    let lip = 1.1 * 0.5 * 0.375f64.exp();
    assert!(r.lipschitz <= lip + 1e-9 && r.lipschitz > 0.99 * lip);
}

#[test]
fn regularity_estimate_is_stable_in_probe_count() {
    let g = two_bumps();
    let a = estimate_regularity(&g, 1.0, 1.0, 1000, 4).unwrap();
    let b = estimate_regularity(&g, 1.0, 1.0, 2000, 4).unwrap();
    assert!((a.lipschitz - b.lipschitz).abs() < 0.05 * b.lipschitz);
    assert!((a.lower_bound - b.lower_bound).abs() < 0.05 * b.lower_bound);
    assert!(estimate_regularity(&g, 1.0, 1.0, 999, 4).is_err());
}

#[test]
fn estimated_constants_pass_their_own_check() {
    let f = RadonNikodym::estimated(Arc::new(two_bumps()), 1.0, 1.0, 1500, 8).unwrap();
    f.check_constants(1200, 99).unwrap();
}

#[test]
fn marginal_examples() {
    let sched = unit_schedule();
    let g = two_bumps();
    assert_eq!(marginal_at(&g, &sched, 1.0, 0.0).unwrap(), g);
    let far = marginal_at(&g, &sched, 1.5, 40.0).unwrap();
    for c in far.components() {
        assert!(c.mean.iter().all(|m| m.abs() < 1e-15));
        assert!((c.cov[0] - 2.25).abs() < 1e-12 && c.cov[1].abs() < 1e-12);
    }
    let m = marginal_at(&GaussianMixture::isotropic(vec![3.0], 1.0).unwrap(), &sched, 1.0, 2f64.ln()).unwrap();
    assert!((m.mean()[0] - 1.5).abs() < 1e-14);
    assert!((m.covariance()[0] - 1.0).abs() < 1e-14);
    assert!(marginal_at(&g, &sched, 1.0, -0.1).is_err());
}

#[test]
fn oracle_score_examples() {
    let sched = unit_schedule();
    let reference = GaussianMixture::isotropic(vec![0.0, 0.0], 2.25).unwrap();
    let y = [0.4, -1.1];
    for t in [0.0, 0.3, 2.0] {
        let s = oracle_score(&reference, &sched, 1.5, t, &y).unwrap();
        assert!((s[0] + y[0] / 2.25).abs() < 1e-13 && (s[1] + y[1] / 2.25).abs() < 1e-13);
    }
    let g = GaussianMixture::isotropic(vec![2.0], 1.0).unwrap();
    for t in [0.0, 0.5, 1.7] {
        let s = oracle_score(&g, &sched, 1.0, t, &[0.3]).unwrap();
        assert!((s[0] + (0.3 - (-t).exp() * 2.0)).abs() < 1e-13);
    }
}

/// Moments of forward-noised particles against the closed-form marginal.
fn check_pushforward(g: &GaussianMixture, n: usize, times: &[f64], z_tol: f64, seed: u64) {
    let sched = unit_schedule();
    let d = g.dim();
    let mut rng = stream_rng(seed, "test/x0", 0);
    let x0: Vec<Vec<f64>> = (0..n).map(|_| g.sample(&mut rng)).collect();
    for (k, &t) in times.iter().enumerate() {
        let xt = forward_sample_batch(&sched, 1.0, &x0, t, seed + k as u64).unwrap();
        let m = marginal_at(g, &sched, 1.0, t).unwrap();
        let (mean, cov) = (m.mean(), m.covariance());
        let nf = n as f64;
        for i in 0..d {
            let emp = xt.iter().map(|x| x[i]).sum::<f64>() / nf;
            let se = (cov[i * d + i] / nf).sqrt();
            assert!((emp - mean[i]).abs() < z_tol * se, "t={t} mean[{i}]");
        }
        for i in 0..d {
            for j in 0..d {
                let mi = xt.iter().map(|x| x[i]).sum::<f64>() / nf;
                let mj = xt.iter().map(|x| x[j]).sum::<f64>() / nf;
                let emp = xt.iter().map(|x| (x[i] - mi) * (x[j] - mj)).sum::<f64>() / (nf - 1.0);
                let c = cov[i * d + j];
                // Gaussian-approximate SE; kurtosis of a mixture widens it a little.
                let se = ((cov[i * d + i] * cov[j * d + j] + c * c) / nf).sqrt() * 1.5;
                assert!((emp - c).abs() < z_tol * se, "t={t} cov[{i}{j}]: {emp} vs {c}");
            }
        }
    }
}

#[test]
fn pushforward_matches_marginal() {
    check_pushforward(&two_bumps(), 10_000, &[0.25, 0.5, 1.0, 2.0], 4.0, 11);
}

#[test]
fn half_life_marginal_matches_forward_samples() {
    let g = GaussianMixture::isotropic(vec![3.0], 1.0).unwrap();
    check_pushforward(&g, 100_000, &[2f64.ln()], 3.0, 12);
}

#[test]
fn target_trait_reports_mixture() {
    let g = two_bumps();
    let t: &dyn TargetDensity = &g;
    assert_eq!(t.log_normalizer(), Some(0.0));
    assert!(t.as_mixture().is_some());
}

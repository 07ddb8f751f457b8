use std::sync::Arc;

use rand::Rng;
use vpsde::rng::stream_rng;
use vpsde::sde::{
    forward_sample, forward_sample_batch, reverse_drift, simulate_reverse, EstimatorDrift, FnDrift,
    Init, NoiseSchedule, OracleDrift, ReferenceDrift, ReverseSampler,
};
use vpsde::semigroup::{sample_cloud, SemigroupEstimator};
use vpsde::targets::{GaussianMixture, RadonNikodym};

fn moments(xs: &[Vec<f64>], i: usize) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().map(|x| x[i]).sum::<f64>() / n;
    let v = xs.iter().map(|x| (x[i] - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Mean and variance are within `z` standard errors of `(mean, var)`.
fn assert_moments(xs: &[Vec<f64>], i: usize, mean: f64, var: f64, z: f64) {
    let n = xs.len() as f64;
    let (m, v) = moments(xs, i);
    let se_m = (var / n).sqrt();
    let se_v = var * (2.0 / (n - 1.0)).sqrt();
    assert!((m - mean).abs() < z * se_m, "mean {m} vs {mean} (se {se_m})");
    assert!((v - var).abs() < z * se_v, "var {v} vs {var} (se {se_v})");
}

#[test]
fn forward_sample_examples() {
    let sched = NoiseSchedule::constant(1.0, 2.0).unwrap();
    assert_eq!(forward_sample(&sched, 1.0, &[0.3, -2.0], 0.0, 4).unwrap(), vec![0.3, -2.0]);
    let a = forward_sample(&sched, 1.0, &[2.0], 1.0, 10).unwrap();
    assert_eq!(a, forward_sample(&sched, 1.0, &[2.0], 1.0, 10).unwrap());
    assert_ne!(a, forward_sample(&sched, 1.0, &[2.0], 1.0, 11).unwrap());
    let x0 = vec![vec![2.0]; 100_000];
    let xs = forward_sample_batch(&sched, 1.0, &x0, 1.0, 3).unwrap();
    assert_moments(&xs, 0, 2.0 * (-1.0f64).exp(), 1.0 - (-2.0f64).exp(), 4.0);
    assert_eq!(xs[0], forward_sample(&sched, 1.0, &[2.0], 1.0, 3).unwrap());
    assert!(forward_sample(&sched, 1.0, &[2.0], 2.5, 3).is_err());
}

#[test]
fn reverse_drift_examples() {
    let sched = NoiseSchedule::linear(0.5, 2.0, 2.0).unwrap();
    let reference = ReferenceDrift::new(sched, 2);
    let y = [0.7, -0.4];
    let b = reverse_drift(&reference, &y, 0.5).unwrap();
    let beta = sched.beta(1.5).unwrap();
    assert!((b[0] + beta * y[0]).abs() < 1e-15 && (b[1] + beta * y[1]).abs() < 1e-15);

    let unit = NoiseSchedule::constant(1.0, 3.0).unwrap();
    let flat = OracleDrift::new(GaussianMixture::isotropic(vec![0.0], 1.0).unwrap(), unit, 1.0);
    for t in [0.0, 1.0, 3.0] {
        assert!((reverse_drift(&flat, &[0.9], t).unwrap()[0] + 0.9).abs() < 1e-14);
    }
    let shifted = OracleDrift::new(GaussianMixture::isotropic(vec![1.5], 1.0).unwrap(), unit, 1.0);
    for (yv, t) in [(0.2, 0.0f64), (-1.0, 1.2), (2.0, 3.0)] {
        let want = -yv + 2.0 * (t - 3.0).exp() * 1.5;
        assert!((reverse_drift(&shifted, &[yv], t).unwrap()[0] - want).abs() < 1e-13);
    }
    assert!(reverse_drift(&shifted, &[0.0], 3.5).is_err());
}

#[test]
fn score_and_value_function_forms_agree() {
    let g = GaussianMixture::new(
        2,
        vec![
            (0.3, vec![-1.0, 0.5], vec![0.9, 0.2, 0.2, 0.6]),
            (0.7, vec![1.2, -0.3], vec![1.4, -0.1, -0.1, 0.8]),
        ],
    )
    .unwrap();
    let sched = NoiseSchedule::linear(0.2, 1.5, 2.5).unwrap();
    let drift = OracleDrift::new(g, sched, 1.3);
    let mut rng = stream_rng(1, "test", 0);
    for _ in 0..100 {
        let y = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let t = rng.random_range(0.0..2.5);
        let a = reverse_drift(&drift, &y, t).unwrap();
        let b = drift.value_function_form(&y, t).unwrap();
        for i in 0..2 {
            assert!((a[i] - b[i]).abs() < 1e-10);
        }
    }
}

#[test]
fn stationary_target_stays_put() {
    let sigma = 1.5;
    let sched = NoiseSchedule::constant(1.0, 2.0).unwrap();
    let flat = GaussianMixture::isotropic(vec![0.0, 0.0], sigma * sigma).unwrap();
    let sampler = ReverseSampler::new(sched, sigma, 50);
    let run = simulate_reverse(&sampler, &OracleDrift::new(flat, sched, sigma), Init::ReferenceGaussian, 40_000, 5).unwrap();
    for i in 0..2 {
        // Euler-Maruyama inflates the stationary variance by a factor 1/(1 - beta dt / 2).
        assert_moments(&run.samples, i, 0.0, sigma * sigma / (1.0 - 0.02), 4.0);
    }
    let run = simulate_reverse(&sampler, &ReferenceDrift::new(sched, 2), Init::ReferenceGaussian, 40_000, 6).unwrap();
    assert_moments(&run.samples, 0, 0.0, sigma * sigma / (1.0 - 0.02), 4.0);
}

#[test]
fn exact_reversal_recovers_target() {
    let g = GaussianMixture::isotropic(vec![2.0], 1.0).unwrap();
    let sched = NoiseSchedule::constant(1.0, 4.0).unwrap();
    let sampler = ReverseSampler::new(sched, 1.0, 400);
    let run = simulate_reverse(&sampler, &OracleDrift::new(g.clone(), sched, 1.0), Init::ExactTerminal(&g), 20_000, 7).unwrap();
    assert_moments(&run.samples, 0, 2.0, 1.0, 4.0);
}

#[test]
fn moment_bias_is_first_order_in_step() {
    let g = GaussianMixture::isotropic(vec![2.0], 1.0).unwrap();
    let sched = NoiseSchedule::constant(1.0, 4.0).unwrap();
    let drift = OracleDrift::new(g.clone(), sched, 1.0);
    // Shared Brownian path across step sizes isolates the discretization bias.
    let mut means = Vec::new();
    for (n, r) in [(50, 4), (100, 2), (200, 1)] {
        let s = ReverseSampler::new(sched, 1.0, n).with_noise_substeps(r);
        let run = simulate_reverse(&s, &drift, Init::ExactTerminal(&g), 20_000, 8).unwrap();
        means.push(moments(&run.samples, 0).0);
    }
    let ratio = (means[0] - means[1]) / (means[1] - means[2]);
    assert!((1.4..2.6).contains(&ratio), "{means:?} ratio {ratio}");
}

#[test]
fn runs_are_reproducible() {
    let g = GaussianMixture::isotropic(vec![1.0, -1.0], 1.0).unwrap();
    let sched = NoiseSchedule::constant(1.0, 1.0).unwrap();
    let s = ReverseSampler::new(sched, 1.0, 20).with_paths(true);
    let d = OracleDrift::new(g, sched, 1.0);
    let a = simulate_reverse(&s, &d, Init::ReferenceGaussian, 64, 9).unwrap();
    let b = simulate_reverse(&s, &d, Init::ReferenceGaussian, 64, 9).unwrap();
    assert_eq!(a.samples, b.samples);
    let pa = a.paths.unwrap();
    assert_eq!(pa, b.paths.unwrap());
    assert_eq!(pa[0].times.len(), 21);
    assert_eq!(pa[0].times[0], 0.0);
    assert!((pa[0].times[20] - 1.0).abs() < 1e-15);
    assert_eq!(pa[3].states[20], a.samples[3]);
    let c = simulate_reverse(&s, &d, Init::ReferenceGaussian, 64, 10).unwrap();
    assert_ne!(a.samples, c.samples);
    // A particle's path does not depend on how many particles run with it.
    let few = simulate_reverse(&s, &d, Init::ReferenceGaussian, 5, 9).unwrap();
    assert_eq!(few.samples[..], a.samples[..5]);
}

#[test]
fn divergence_names_the_first_particle() {
    let sched = NoiseSchedule::constant(1.0, 1.0).unwrap();
    let s = ReverseSampler::new(sched, 1.0, 20);
    let blowup = FnDrift::new(1, |_t: f64, y: &[f64], out: &mut [f64]| out[0] = 1e300 * y[0].abs().max(1.0) * 1e10);
    match simulate_reverse(&s, &blowup, Init::ReferenceGaussian, 10, 1) {
        Err(vpsde::Error::Divergence { particle, step }) => {
            assert_eq!(particle, 0);
            assert_eq!(step, 0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn sampler_contract_checks() {
    let sched = NoiseSchedule::constant(1.0, 1.0).unwrap();
    let other = NoiseSchedule::constant(2.0, 1.0).unwrap();
    let d = ReferenceDrift::new(other, 1);
    assert!(simulate_reverse(&ReverseSampler::new(sched, 1.0, 20), &d, Init::ReferenceGaussian, 5, 1).is_err());
    let d = ReferenceDrift::new(sched, 1);
    assert!(simulate_reverse(&ReverseSampler::new(sched, 1.0, 9), &d, Init::ReferenceGaussian, 5, 1).is_err());
    assert!(simulate_reverse(&ReverseSampler::new(sched, 1.0, 10), &d, Init::ReferenceGaussian, 0, 1).is_err());
}

#[test]
fn estimator_drift_tracks_oracle() {
    let g = GaussianMixture::isotropic(vec![1.0], 1.0).unwrap();
    let sched = NoiseSchedule::constant(1.0, 2.0).unwrap();
    let f = RadonNikodym::estimated(Arc::new(g.clone()), 1.0, 3.0, 1000, 1).unwrap();
    let est = SemigroupEstimator::new(Arc::new(sample_cloud(1, 20_000, 2).unwrap()), f).unwrap();
    let approx = EstimatorDrift::new(est, sched);
    let exact = OracleDrift::new(g, sched, 1.0);
    for (y, t) in [(0.3, 0.0), (-0.5, 1.0), (1.1, 1.9)] {
        let a = reverse_drift(&approx, &[y], t).unwrap()[0];
        let b = reverse_drift(&exact, &[y], t).unwrap()[0];
        assert!((a - b).abs() < 0.05, "{a} vs {b}");
    }
}

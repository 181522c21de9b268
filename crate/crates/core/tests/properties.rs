use cvar_sgd_core::losses::r_sigma;
use cvar_sgd_core::objective::{
    cvar_sorted, cvar_variational, g_alpha_estimate, grad_g_alpha_estimate, smoothed_g_estimate,
    smoothed_grad_g, smoothing_bias_bound, value_at_risk,
};
use cvar_sgd_core::optimizer::{cvar_sgd_step, lms_step};
use cvar_sgd_core::{
    ConfidenceLevel, Example, LossModel, ParamState, RidgeLoss, SmoothedSurrogate, StepSizes,
};
use proptest::prelude::*;

/// Exact empirical CV@R: the variational objective is piecewise linear and
/// convex in `t` with kinks at the samples, so its minimum is at a sample.
fn oracle_cvar(samples: &[f64], alpha: f64) -> f64 {
    let n = samples.len() as f64;
    samples
        .iter()
        .map(|&t| t + samples.iter().map(|s| (s - t).max(0.0)).sum::<f64>() / (alpha * n))
        .fold(f64::INFINITY, f64::min)
}

fn alpha_strategy() -> impl Strategy<Value = f64> {
    prop_oneof![Just(0.05), Just(0.2), Just(0.5), Just(0.9), Just(1.0), 0.01f64..1.0]
}

fn level(a: f64) -> ConfidenceLevel {
    ConfidenceLevel::new(a).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn sorted_and_variational_agree(
        samples in prop::collection::vec(-1e3f64..1e3, 10..2000),
        alpha in alpha_strategy(),
    ) {
        let a = level(alpha);
        let sorted = cvar_sorted(&samples, a).unwrap();
        let (var, _) = cvar_variational(&samples, a, 1e-10).unwrap();
        prop_assert!((sorted - var).abs() <= 1e-8 * (1.0 + sorted.abs()), "{sorted} vs {var}");
        let exact = oracle_cvar(&samples, alpha);
        prop_assert!((sorted - exact).abs() <= 1e-9 * (1.0 + exact.abs()), "{sorted} vs {exact}");
    }

    #[test]
    fn value_at_risk_attains_the_minimum(
        samples in prop::collection::vec(-50f64..50.0, 1..300),
        alpha in alpha_strategy(),
    ) {
        let a = level(alpha);
        let t = value_at_risk(&samples, a).unwrap();
        let n = samples.len() as f64;
        let at_t = t + samples.iter().map(|s| (s - t).max(0.0)).sum::<f64>() / (alpha * n);
        let c = cvar_sorted(&samples, a).unwrap();
        prop_assert!((at_t - c).abs() <= 1e-10 * (1.0 + c.abs()));
    }

    #[test]
    fn cvar_bounds_and_monotonicity(
        samples in prop::collection::vec(-10f64..10.0, 1..500),
        a1 in 0.01f64..1.0,
        a2 in 0.01f64..1.0,
    ) {
        let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
        let c_lo = cvar_sorted(&samples, level(lo)).unwrap();
        let c_hi = cvar_sorted(&samples, level(hi)).unwrap();
        let mean = samples.iter().sum::<f64>() / samples.len() as f64;
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(c_lo >= c_hi - 1e-12);
        prop_assert!(c_hi >= mean - 1e-12);
        prop_assert!(c_lo <= max + 1e-12);
        let c1 = cvar_sorted(&samples, level(1.0)).unwrap();
        prop_assert!((c1 - mean).abs() < 1e-12);
    }

    #[test]
    fn cvar_translation_and_scaling(
        samples in prop::collection::vec(-10f64..10.0, 1..500),
        alpha in alpha_strategy(),
        shift in -100f64..100.0,
        scale in 0.01f64..100.0,
    ) {
        let a = level(alpha);
        let base = cvar_sorted(&samples, a).unwrap();
        let shifted: Vec<f64> = samples.iter().map(|s| s + shift).collect();
        let scaled: Vec<f64> = samples.iter().map(|s| s * scale).collect();
        prop_assert!((cvar_sorted(&shifted, a).unwrap() - (base + shift)).abs() < 1e-9 * (1.0 + shift.abs()));
        prop_assert!((cvar_sorted(&scaled, a).unwrap() - base * scale).abs() < 1e-9 * (1.0 + (base * scale).abs()));
    }

    #[test]
    fn r_sigma_sandwich_convexity_and_symmetry(
        sigma in 1e-3f64..10.0,
        z in -50f64..50.0,
        h in 1e-3f64..1.0,
    ) {
        let r = r_sigma(sigma, z);
        let bound = sigma / (2.0 * std::f64::consts::PI).sqrt();
        prop_assert!(r >= z.max(0.0));
        prop_assert!(r <= z.max(0.0) + bound);
        prop_assert!((r - r_sigma(sigma, -z) - z).abs() <= 1e-12 * (1.0 + z.abs()));
        let mid = 2.0 * r - r_sigma(sigma, z - h) - r_sigma(sigma, z + h);
        prop_assert!(mid <= 1e-12 * (1.0 + z.abs()));
    }

    #[test]
    fn step_matches_update_rule(
        theta in prop::collection::vec(-2f64..2.0, 3),
        x in prop::collection::vec(0f64..2.0, 3),
        y in -3f64..3.0,
        t in -1f64..20.0,
        alpha in 0.05f64..1.0,
    ) {
        let loss = RidgeLoss::new(0.1).unwrap();
        let e = Example::new(x, y).unwrap();
        let steps = StepSizes::new(0.002, 0.001).unwrap();
        let s = ParamState::new(theta.clone(), t).unwrap();
        let (next, hit) = cvar_sgd_step(&s, &e, &loss, level(alpha), steps).unwrap();
        let l = loss.value(&theta, &e).unwrap();
        prop_assert_eq!(hit, l - t > 0.0);
        let b = if hit { 1.0 } else { 0.0 };
        prop_assert_eq!(next.t, t - 0.001 * (1.0 - b / alpha));
        if hit {
            let lms = lms_step(&theta, &e, &loss, 0.002 / alpha).unwrap();
            for (a, b) in next.theta.iter().zip(&lms) {
                prop_assert!((a - b).abs() <= 1e-15 * (1.0 + b.abs()));
            }
        } else {
            prop_assert_eq!(next.theta, theta);
        }
    }
}

fn batch(seed: u64, n: usize, m: usize) -> Vec<Example> {
    use cvar_sgd_core::datagen::{materialize_population, StreamSpec, StreamKind};
    let spec = StreamSpec {
        kind: StreamKind::LinearGaussianNoise,
        dim_d: m,
        theta_o: (0..m).map(|i| 1.0 - 0.3 * i as f64).collect(),
        noise_std: 0.5,
        x_low: -1.0,
        x_high: 2.0,
        seed,
        sigma_w: 0.0,
    };
    materialize_population(&spec, n)
}

/// Central differences of `f` at `z`, step `h`.
fn fd_grad(f: impl Fn(&[f64]) -> f64, z: &[f64], h: f64) -> Vec<f64> {
    (0..z.len())
        .map(|i| {
            let mut p = z.to_vec();
            let mut q = z.to_vec();
            p[i] += h;
            q[i] -= h;
            (f(&p) - f(&q)) / (2.0 * h)
        })
        .collect()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / scale.max(1e-8)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    /// Hinge gradient against finite differences. `t` sits midway between two
    /// sorted losses and the step is small enough that no loss crosses it.
    #[test]
    fn hinge_gradient_matches_finite_differences(
        seed in 0u64..1_000_000,
        theta in prop::collection::vec(-2f64..2.0, 4),
        q in 0.05f64..0.95,
        alpha in 0.05f64..1.0,
    ) {
        let loss = RidgeLoss::new(0.1).unwrap();
        let data = batch(seed, 64, 4);
        let mut losses: Vec<f64> = data.iter().map(|e| loss.value(&theta, e).unwrap()).collect();
        losses.sort_by(f64::total_cmp);
        let k = (q * 62.0) as usize;
        prop_assume!(losses[k + 1] - losses[k] > 1e-9);
        let t = 0.5 * (losses[k] + losses[k + 1]);
        let max_grad = data
            .iter()
            .map(|e| loss.grad_theta(&theta, e).unwrap().iter().fold(0.0f64, |m, g| m.max(g.abs())))
            .fold(1.0f64, f64::max);
        let gap = losses.iter().map(|l| (l - t).abs()).fold(f64::INFINITY, f64::min);
        let h = (0.01 * gap / max_grad).min(1e-5);

        let a = level(alpha);
        let mut z = theta.clone();
        z.push(t);
        let g = |zz: &[f64]| {
            let st = ParamState::new(zz[..4].to_vec(), zz[4]).unwrap();
            g_alpha_estimate(&st, &loss, &data, a).unwrap().value
        };
        let st = ParamState::new(theta.clone(), t).unwrap();
        let analytic = grad_g_alpha_estimate(&st, &loss, &data, a).unwrap();
        let numeric = fd_grad(g, &z, h);
        prop_assert!(rel_err(&analytic, &numeric) < 1e-4, "{analytic:?} vs {numeric:?}");
    }

    #[test]
    fn smoothed_gradient_matches_finite_differences(
        seed in 0u64..1_000_000,
        theta in prop::collection::vec(-2f64..2.0, 4),
        t in -1f64..15.0,
        alpha in 0.05f64..1.0,
        sigma in prop_oneof![Just(0.1), Just(1.0), 0.05f64..2.0],
    ) {
        let loss = RidgeLoss::new(0.1).unwrap();
        let data = batch(seed, 64, 4);
        let s = SmoothedSurrogate::new(loss, sigma).unwrap();
        let a = level(alpha);
        let mut z = theta.clone();
        z.push(t);
        let g = |zz: &[f64]| {
            let st = ParamState::new(zz[..4].to_vec(), zz[4]).unwrap();
            smoothed_g_estimate(&st, &s, &data, a).unwrap().value
        };
        let st = ParamState::new(theta.clone(), t).unwrap();
        let analytic = smoothed_grad_g(&st, &s, &data, a).unwrap();
        let numeric = fd_grad(g, &z, 1e-5);
        prop_assert!(rel_err(&analytic, &numeric) < 1e-4, "{analytic:?} vs {numeric:?}");
    }

    #[test]
    fn smoothing_sandwich_holds_exactly(
        seed in 0u64..1_000_000,
        theta in prop::collection::vec(-3f64..3.0, 4),
        t in -5f64..30.0,
        alpha in 0.05f64..1.0,
        sigma in prop_oneof![Just(0.1), Just(1.0)],
    ) {
        let loss = RidgeLoss::new(0.1).unwrap();
        let data = batch(seed, 100, 4);
        let s = SmoothedSurrogate::new(loss, sigma).unwrap();
        let a = level(alpha);
        let st = ParamState::new(theta, t).unwrap();
        let plain = g_alpha_estimate(&st, &loss, &data, a).unwrap().value;
        let smooth = smoothed_g_estimate(&st, &s, &data, a).unwrap().value;
        prop_assert!(plain <= smooth);
        prop_assert!(smooth <= plain + smoothing_bias_bound(sigma, a));
    }
}

use htb_core::env::{
    calibrate_moment, moment_certificate, moment_monte_carlo, student_t_abs_moment_closed,
    CorruptionSchedule, Environment, NoiseKind,
};
use htb_core::HeavyTailSpec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Trapezoid rule on a substituted integral `E|X|^e = int_0^inf x^e 2 f(x) dx`
/// for the Student-t density, using `x = u / (1 - u)`.
fn student_t_moment_trapezoid(dof: f64, e: f64) -> f64 {
    let ln_c = statrs::function::gamma::ln_gamma((dof + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(dof / 2.0)
        - 0.5 * (dof * std::f64::consts::PI).ln();
    let n = 400_000;
    let h = 1.0 / n as f64;
    let mut total = 0.0;
    for i in 1..n {
        let u = i as f64 * h;
        let x = u / (1.0 - u);
        let jac = 1.0 / ((1.0 - u) * (1.0 - u));
        let dens = (ln_c - (dof + 1.0) / 2.0 * (x * x / dof).ln_1p()).exp();
        total += 2.0 * x.powf(e) * dens * jac;
    }
    total * h
}

#[test]
fn student_t_moments_agree_across_methods() {
    for (dof, e) in [(3.0, 1.5), (2.5, 1.2), (5.0, 2.0), (10.0, 1.1)] {
        let quad = NoiseKind::StudentT { dof }.abs_moment(e).unwrap();
        let closed = student_t_abs_moment_closed(dof, e);
        let trap = student_t_moment_trapezoid(dof, e);
        assert!(
            (quad - closed).abs() < 1e-9 * closed,
            "{dof} {e}: {quad} vs {closed}"
        );
        assert!(
            (trap - closed).abs() < 1e-4 * closed,
            "{dof} {e}: {trap} vs {closed}"
        );
    }
    // variance of t_5 is 5/3
    assert!((student_t_abs_moment_closed(5.0, 2.0) - 5.0 / 3.0).abs() < 1e-12);
}

#[test]
fn bounded_and_pareto_moments_are_exact() {
    // E|U|^e for U ~ U(-h, h) is h^e / (e + 1)
    let b = NoiseKind::Bounded { half_width: 0.7 }
        .abs_moment(1.5)
        .unwrap();
    assert!((b - 0.7f64.powf(1.5) / 2.5).abs() < 1e-13);
    // E|X|^e for Pareto(1, a) is a / (a - e)
    let p = NoiseKind::SymmetricPareto { shape: 3.0 }
        .abs_moment(1.5)
        .unwrap();
    assert!((p - 2.0).abs() < 1e-15);
    assert!(NoiseKind::SymmetricPareto { shape: 1.5 }
        .abs_moment(1.5)
        .is_err());
}

#[test]
fn monte_carlo_moments_match_closed_forms() {
    let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
    // exponents where |X|^e has finite variance
    for (noise, e) in [
        (NoiseKind::SymmetricPareto { shape: 3.0 }, 1.0),
        (NoiseKind::StudentT { dof: 5.0 }, 1.5),
        (NoiseKind::Bounded { half_width: 1.0 }, 1.5),
    ] {
        let env = Environment::stochastic_mab(vec![0.0, 0.0], noise, spec)
            .unwrap()
            .with_scale(1.0)
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (mc, se) = moment_monte_carlo(&env, 1, 0, e, 400_000, &mut rng).unwrap();
        let exact = noise.abs_moment(e).unwrap();
        assert!(
            (mc - exact).abs() < 4.0 * se,
            "{noise:?}: {mc} vs {exact} (se {se})"
        );
    }
}

#[test]
fn calibration_saturates_the_certificate() {
    let spec = HeavyTailSpec::new(1.5, 2.0).unwrap();
    for noise in [
        NoiseKind::SymmetricPareto { shape: 2.5 },
        NoiseKind::StudentT { dof: 4.0 },
        NoiseKind::Bounded { half_width: 1.0 },
    ] {
        for mean in [0.0, 0.3, -0.9] {
            let cal = calibrate_moment(mean, &noise, spec).unwrap();
            let cert = moment_certificate(mean, &noise, cal.scale, 1.5).unwrap();
            assert!((cert - 2.0).abs() < 1e-12, "{noise:?} {mean}: {cert}");
            assert!((cal.certificate - cert).abs() < 1e-12);
            // hand arithmetic: 2^{1/2} (|m|^{3/2} + c^{3/2} E|X|^{3/2}) = 2
            let m = abs_pow(mean, 1.5);
            let c = ((2.0 / 2f64.sqrt() - m) / noise.abs_moment(1.5).unwrap()).powf(1.0 / 1.5);
            assert!((cal.scale - c).abs() < 1e-12 * c.max(1.0));
        }
    }
}

fn abs_pow(x: f64, e: f64) -> f64 {
    x.abs().powf(e)
}

#[test]
fn calibration_rejects_means_beyond_sigma() {
    let spec = HeavyTailSpec::new(2.0, 1.0).unwrap();
    let noise = NoiseKind::SymmetricPareto { shape: 3.0 };
    // 2^{eps-1} |m|^eps >= sigma leaves no room for noise
    assert!(calibrate_moment(0.8, &noise, spec).is_err());
    assert!(calibrate_moment(0.7, &noise, spec).is_ok());
}

#[test]
fn environment_scale_uses_largest_mean() {
    let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
    let noise = NoiseKind::StudentT { dof: 3.0 };
    let env = Environment::stochastic_mab(vec![0.1, -0.4, 0.2], noise, spec).unwrap();
    let want = calibrate_moment(0.4, &noise, spec).unwrap().scale;
    assert!((env.scale() - want).abs() < 1e-15);
    let certs = env.certificates(1.5).unwrap();
    assert!((certs[1] - 1.0).abs() < 1e-12);
    assert!(certs[0] < 1.0 && certs[2] < 1.0);
    env.check_certified().unwrap();
}

#[test]
fn zero_noise_certificate_is_mean_power() {
    let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
    let env = Environment::stochastic_mab(
        vec![0.25, -0.64],
        NoiseKind::Bounded { half_width: 0.0 },
        spec,
    )
    .unwrap();
    let certs = env.certificates(1.5).unwrap();
    assert!((certs[0] - 0.125).abs() < 1e-15);
    assert!((certs[1] - 0.512).abs() < 1e-15);
}

#[test]
fn scripts_cycle_and_corruption_is_budgeted() {
    let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
    let rows = vec![vec![0.0, 0.3], vec![0.2, 0.1], vec![0.1, 0.1]];
    let env =
        Environment::scripted(rows.clone(), NoiseKind::Bounded { half_width: 0.1 }, spec).unwrap();
    for t in 1..=10 {
        assert_eq!(env.expected_losses(t, &[]).unwrap(), rows[(t - 1) % 3]);
    }

    let sched = CorruptionSchedule::front_loaded(&[1, 2], -0.25, 1.1, 3).unwrap();
    assert!((sched.total_shift() - 1.1).abs() < 1e-12);
    assert!((sched.consumed_through(2) - 0.5).abs() < 1e-12);
    assert!((sched.consumed_through(4) - 1.0).abs() < 1e-12);
    let env = Environment::stochastic_mab(
        vec![0.0, 0.3, 0.3],
        NoiseKind::Bounded { half_width: 0.1 },
        spec,
    )
    .unwrap()
    .with_corruption(sched)
    .unwrap();
    let first = env.expected_losses(1, &[]).unwrap();
    for (x, y) in first.iter().zip([0.0, 0.05, 0.05]) {
        assert!((x - y).abs() < 1e-12);
    }
    let fifth = env.expected_losses(5, &[]).unwrap();
    assert!((fifth[1] - 0.2).abs() < 1e-12);
    assert_eq!(env.expected_losses(6, &[]).unwrap(), vec![0.0, 0.3, 0.3]);

    assert!(CorruptionSchedule::new(vec![(1, 0, 0.5), (2, 1, 0.6)], 1.0, 2).is_err());
    assert!(CorruptionSchedule::new(vec![(1, 2, 0.1)], 1.0, 2).is_err());
}

#[test]
fn adversary_sees_history() {
    let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
    let env = Environment::with_adversary(
        2,
        std::sync::Arc::new(|_t: usize, history: &[usize]| {
            let ones = history.iter().filter(|&&a| a == 1).count() as f64;
            vec![0.1, (0.05 * ones).min(0.5)]
        }),
        0.5,
        NoiseKind::Bounded { half_width: 0.1 },
        spec,
    )
    .unwrap();
    assert_eq!(env.expected_losses(3, &[1, 1]).unwrap(), vec![0.1, 0.1]);
    assert_eq!(env.expected_losses(3, &[0, 0]).unwrap(), vec![0.1, 0.0]);
}

proptest! {
    #[test]
    fn calibrated_environments_are_certified(
        means in prop::collection::vec(-0.6f64..0.6, 2..6),
        eps in 1.05f64..2.0,
        sigma in 0.9f64..4.0,
        kind in 0usize..3,
    ) {
        let spec = HeavyTailSpec::new(eps, sigma).unwrap();
        let noise = match kind {
            0 => NoiseKind::SymmetricPareto { shape: eps + 0.5 },
            1 => NoiseKind::StudentT { dof: eps + 1.0 },
            _ => NoiseKind::Bounded { half_width: 1.0 },
        };
        let env = Environment::stochastic_mab(means, noise, spec).unwrap();
        prop_assert!(env.max_certificate().unwrap() <= sigma * (1.0 + 1e-12));
        let doctored = env.with_scale(10.0).unwrap();
        prop_assert!(doctored.check_certified().is_err());
    }
}

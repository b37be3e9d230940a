//! Estimators checked by exact enumeration over (arm, noise atom) outcomes.

use htb_core::design::CovarianceKind;
use htb_core::estimators::{
    abs_pow, gram_matrix, linear_estimate, mab_estimate, variance_bound_check, vr_linear_estimate,
    EstimateBundle,
};
use htb_core::{FeatureSet, HeavyTailSpec, SimplexDistribution};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug)]
enum Kind {
    Iw,
    Ls,
    Vr,
}

/// Discrete zero-mean noise: atoms with probabilities.
fn noise_atoms(rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = rng.random_range(2..=5);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
    let ws: Vec<f64> = (0..n).map(|_| rng.random_range(0.1..1.0)).collect();
    let total: f64 = ws.iter().sum();
    let mean: f64 = xs.iter().zip(&ws).map(|(x, w)| x * w).sum::<f64>() / total;
    for x in &mut xs {
        *x -= mean;
    }
    xs.into_iter()
        .zip(ws.into_iter().map(|w| w / total))
        .collect()
}

fn random_p(rng: &mut ChaCha8Rng, k: usize) -> SimplexDistribution {
    let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let z: f64 = w.iter().sum();
    SimplexDistribution::from_weights(w.iter().map(|x| x / z).collect()).unwrap()
}

fn random_features(rng: &mut ChaCha8Rng, k: usize, d: usize) -> FeatureSet {
    loop {
        let rows: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let f = FeatureSet::new(rows).unwrap();
        if f.affine_rank() == d {
            return f;
        }
    }
}

fn estimate(
    kind: Kind,
    chosen: usize,
    loss: f64,
    p: &SimplexDistribution,
    f: &FeatureSet,
    s: &[f64],
    spec: HeavyTailSpec,
) -> EstimateBundle {
    match kind {
        Kind::Iw => mab_estimate(chosen, loss, p, s, spec),
        Kind::Ls => linear_estimate(chosen, loss, p, f, s, spec),
        Kind::Vr => vr_linear_estimate(chosen, loss, p, f, s, spec),
    }
    .unwrap()
}

struct Expectations {
    raw: Vec<f64>,
    clipped: Vec<f64>,
    bonus: Vec<f64>,
}

/// Exact expectations of raw and clipped estimates and the bonus vector,
/// enumerating every arm and noise atom.
fn enumerate(
    kind: Kind,
    p: &SimplexDistribution,
    f: &FeatureSet,
    means: &[f64],
    atoms: &[(f64, f64)],
    s: &[f64],
    spec: HeavyTailSpec,
) -> Expectations {
    let k = p.len();
    let mut raw = vec![0.0; k];
    let mut clipped = vec![0.0; k];
    let mut bonus = Vec::new();
    for arm in 0..k {
        for &(x, w) in atoms {
            let e = estimate(kind, arm, means[arm] + x, p, f, s, spec);
            let prob = p.get(arm) * w;
            for a in 0..k {
                raw[a] += prob * e.raw_estimate[a];
                clipped[a] += prob * e.clipped_estimate[a];
            }
            bonus = e.bonus;
        }
    }
    Expectations {
        raw,
        clipped,
        bonus,
    }
}

/// Largest `E|m_a + X|^eps` over arms.
fn moment(means: &[f64], atoms: &[(f64, f64)], eps: f64) -> f64 {
    means
        .iter()
        .map(|m| {
            atoms
                .iter()
                .map(|(x, w)| w * abs_pow(m + x, eps))
                .sum::<f64>()
        })
        .fold(0.0, f64::max)
}

fn linear_means(f: &FeatureSet, theta: &[f64], offset: f64) -> Vec<f64> {
    f.to_rows()
        .iter()
        .map(|r| offset + r.iter().zip(theta).map(|(x, y)| x * y).sum::<f64>())
        .collect()
}

#[test]
fn importance_weighting_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..30 {
        let k = rng.random_range(2..=4);
        let p = random_p(&mut rng, k);
        let f = FeatureSet::standard_basis(k);
        let means: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let atoms = noise_atoms(&mut rng);
        let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
        let s = vec![1e9; k];
        let ex = enumerate(Kind::Iw, &p, &f, &means, &atoms, &s, spec);
        for a in 0..k {
            assert!((ex.raw[a] - means[a]).abs() < 1e-12);
        }
    }
}

#[test]
fn least_squares_is_unbiased_for_linear_means() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..30 {
        let d = rng.random_range(1..=3);
        let k = rng.random_range((d + 1)..=4.max(d + 1));
        let f = random_features(&mut rng, k, d);
        let p = random_p(&mut rng, k);
        let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let means = linear_means(&f, &theta, 0.0);
        let atoms = noise_atoms(&mut rng);
        let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
        let s = vec![1e9; k];
        let ex = enumerate(Kind::Ls, &p, &f, &means, &atoms, &s, spec);
        for a in 0..k {
            assert!(
                (ex.raw[a] - means[a]).abs() < 1e-10,
                "{:?} {:?}",
                ex.raw,
                means
            );
        }
    }
}

#[test]
fn variance_reduced_differences_are_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..30 {
        let d = rng.random_range(1..=2);
        let k = rng.random_range((d + 1)..=4);
        let f = random_features(&mut rng, k, d);
        let p = random_p(&mut rng, k);
        let theta: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        // a common offset cancels in differences
        let means = linear_means(&f, &theta, rng.random_range(-0.5..0.5));
        let atoms = noise_atoms(&mut rng);
        let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
        let s = vec![1e9; k];
        let ex = enumerate(Kind::Vr, &p, &f, &means, &atoms, &s, spec);
        for a in 0..k {
            for b in 0..k {
                let got = ex.raw[a] - ex.raw[b];
                assert!((got - (means[a] - means[b])).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn clipping_bias_is_covered_by_bonus() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut clipped_cases = 0;
    for kind in [Kind::Iw, Kind::Ls, Kind::Vr] {
        for _ in 0..60 {
            let d = rng.random_range(1..=2);
            let k = rng.random_range((d + 1)..=4);
            let f = match kind {
                Kind::Iw => FeatureSet::standard_basis(k),
                _ => random_features(&mut rng, k, d),
            };
            let p = random_p(&mut rng, k);
            let means: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let atoms = noise_atoms(&mut rng);
            let eps = rng.random_range(1.05..2.0);
            // sigma is exactly the largest moment, the tightest admissible value
            let spec = HeavyTailSpec::new(eps, moment(&means, &atoms, eps)).unwrap();
            let s: Vec<f64> = (0..k).map(|_| rng.random_range(0.2..4.0)).collect();
            let ex = enumerate(kind, &p, &f, &means, &atoms, &s, spec);
            for a in 0..k {
                let bias = (ex.raw[a] - ex.clipped[a]).abs();
                if bias > 0.0 {
                    clipped_cases += 1;
                }
                assert!(
                    bias <= ex.bonus[a] * (1.0 + 1e-9),
                    "{kind:?}: bias {bias} exceeds bonus {}",
                    ex.bonus[a]
                );
            }
        }
    }
    assert!(
        clipped_cases > 50,
        "clipping rarely active: {clipped_cases}"
    );
}

#[test]
fn gram_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..20 {
        let d = rng.random_range(1..=4);
        let k = rng.random_range((d + 1)..=8);
        let f = random_features(&mut rng, k, d);
        let p = random_p(&mut rng, k);
        let x = f.matrix();
        let w = DVector::from_column_slice(p.weights());
        let mu = x.tr_mul(&w);
        let centered = DMatrix::from_fn(k, d, |i, j| x[(i, j)] - mu[j]);
        for (kind, rows) in [
            (CovarianceKind::Raw, x.clone()),
            (CovarianceKind::Centered, centered),
        ] {
            let mut v = DMatrix::zeros(d, d);
            for i in 0..k {
                let r = rows.row(i).transpose();
                v += p.get(i) * &r * r.transpose();
            }
            let inv = v.try_inverse().unwrap();
            let want = &rows * inv * rows.transpose();
            let got = gram_matrix(&p, &f, kind).unwrap();
            assert!((got - want).amax() < 1e-9);
        }
    }
}

proptest! {
    #[test]
    fn centered_spread_bound_holds(
        seed in 0u64..10_000,
        d in 1usize..=4,
        extra in 1usize..=6,
        eps in 1.01f64..2.0,
        dirac in 0.0f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = d + extra;
        let f = random_features(&mut rng, k, d);
        // mix a random distribution with a point mass to reach near-degenerate p
        let base = random_p(&mut rng, k);
        let star = rng.random_range(0..k);
        let w: Vec<f64> = (0..k)
            .map(|a| (1.0 - dirac) * base.get(a) + if a == star { dirac } else { 0.0 })
            .collect();
        let p = SimplexDistribution::from_weights(w).unwrap();
        let (lhs, rhs) = variance_bound_check(&p, &f, eps).unwrap();
        prop_assert!(lhs <= rhs * (1.0 + 1e-9), "{lhs} > {rhs}");
    }

    #[test]
    fn clipped_estimates_respect_thresholds(
        seed in 0u64..10_000,
        loss in -50.0f64..50.0,
        scale in 0.01f64..5.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(3..=6);
        let f = random_features(&mut rng, k, 2);
        let p = random_p(&mut rng, k);
        let s: Vec<f64> = (0..k).map(|_| scale * rng.random_range(0.5..2.0)).collect();
        let spec = HeavyTailSpec::new(1.5, 1.0).unwrap();
        let chosen = rng.random_range(0..k);
        for e in [
            mab_estimate(chosen, loss, &p, &s, spec).unwrap(),
            linear_estimate(chosen, loss, &p, &f, &s, spec).unwrap(),
            vr_linear_estimate(chosen, loss, &p, &f, &s, spec).unwrap(),
        ] {
            prop_assert!(e.clip_contained());
            for a in 0..k {
                let keep = e.raw_estimate[a].abs() <= s[a];
                let want = if keep { e.raw_estimate[a] } else { 0.0 };
                prop_assert_eq!(e.clipped_estimate[a], want);
            }
        }
    }
}

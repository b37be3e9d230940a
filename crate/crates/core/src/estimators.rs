//! Loss estimators, clipping, and the bonus terms paired with them.
//!
//! Three estimators are provided: importance weighting for multi-armed bandits,
//! least squares for linear bandits, and a variance-reduced least-squares
//! estimator built on mean-centered features.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::design::{covariance, CovarianceKind, SpdFactor};
use crate::error::{invalid, Error, Result};
use crate::types::{FeatureSet, HeavyTailSpec, SimplexDistribution, UNDERFLOW_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateBundle {
    pub raw_estimate: Vec<f64>,
    pub clipped_estimate: Vec<f64>,
    pub bonus: Vec<f64>,
    pub clip_thresholds: Vec<f64>,
    /// Number of arms whose raw estimate was zeroed by clipping.
    pub clipped_count: usize,
}

impl EstimateBundle {
    fn assemble(raw_estimate: Vec<f64>, bonus: Vec<f64>, s: &[f64]) -> Self {
        let mut clipped_count = 0;
        let clipped_estimate = raw_estimate
            .iter()
            .zip(s)
            .map(|(&x, &sa)| {
                if x.abs() <= sa {
                    x
                } else {
                    clipped_count += 1;
                    0.0
                }
            })
            .collect();
        Self {
            raw_estimate,
            clipped_estimate,
            bonus,
            clip_thresholds: s.to_vec(),
            clipped_count,
        }
    }

    /// `|clipped_a| <= s_a` for every arm.
    pub fn clip_contained(&self) -> bool {
        self.clipped_estimate
            .iter()
            .zip(&self.clip_thresholds)
            .all(|(x, s)| x.abs() <= *s)
    }

    /// `b_a <= s_a (1 + rel_tol)` for every arm.
    pub fn bonus_below_threshold(&self, rel_tol: f64) -> bool {
        self.bonus
            .iter()
            .zip(&self.clip_thresholds)
            .all(|(b, s)| *b >= 0.0 && *b <= s * (1.0 + rel_tol))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    ImportanceWeighted,
    LeastSquares,
    VarianceReduced,
}

/// `|x|^eps` as `exp(eps ln|x|)`, with `0^eps = 0`.
pub fn abs_pow(x: f64, eps: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        (eps * x.abs().ln()).exp()
    }
}

/// `x^e` for positive `x`, computed through logarithms like `abs_pow`.
fn pos_pow(x: f64, e: f64) -> f64 {
    (e * x.ln()).exp()
}

fn check_inputs(chosen: usize, loss: f64, p: &SimplexDistribution, s: &[f64]) -> Result<()> {
    if s.len() != p.len() {
        return Err(Error::DimensionMismatch {
            expected: p.len(),
            got: s.len(),
        });
    }
    if chosen >= p.len() {
        return Err(invalid("chosen_arm", format!("{chosen} out of range")));
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    if s.iter().any(|&x| !(x > 0.0)) {
        return Err(invalid("s", "clip thresholds must be positive"));
    }
    Ok(())
}

/// Importance-weighted estimate `loss * 1{a = chosen} / p_a` with bonus
/// `sigma p_a^{1-eps} s_a^{1-eps}`.
pub fn mab_estimate(
    chosen: usize,
    loss: f64,
    p: &SimplexDistribution,
    s: &[f64],
    spec: HeavyTailSpec,
) -> Result<EstimateBundle> {
    check_inputs(chosen, loss, p, s)?;
    let pc = p.get(chosen);
    if pc <= UNDERFLOW_FLOOR {
        return Err(Error::ZeroProbability { arm: chosen });
    }
    let mut raw = vec![0.0; p.len()];
    raw[chosen] = loss / pc;
    let e1 = 1.0 - spec.epsilon();
    let bonus = p
        .weights()
        .iter()
        .zip(s)
        .map(|(&pa, &sa)| {
            if pa == 0.0 {
                f64::INFINITY
            } else {
                spec.sigma() * pos_pow(pa * sa, e1)
            }
        })
        .collect();
    Ok(EstimateBundle::assemble(raw, bonus, s))
}

/// Least-squares estimate `phi_a^T S^{-1} phi_chosen loss` with bonus
/// `sigma s_a^{1-eps} (phi_a^T S^{-1} phi_a)^{eps/2}`.
pub fn linear_estimate(
    chosen: usize,
    loss: f64,
    p: &SimplexDistribution,
    features: &FeatureSet,
    s: &[f64],
    spec: HeavyTailSpec,
) -> Result<EstimateBundle> {
    check_inputs(chosen, loss, p, s)?;
    let gram = gram_matrix(p, features, CovarianceKind::Raw)?;
    let raw = gram.column(chosen).iter().map(|g| g * loss).collect();
    let eps = spec.epsilon();
    let bonus = s
        .iter()
        .enumerate()
        .map(|(a, &sa)| spec.sigma() * pos_pow(sa, 1.0 - eps) * abs_pow(gram[(a, a)], eps / 2.0))
        .collect();
    Ok(EstimateBundle::assemble(raw, bonus, s))
}

/// Variance-reduced estimate `phibar_a^T V^{-1} phibar_chosen loss` on centered
/// features, with bonus `sigma sum_b p_b |phibar_a^T V^{-1} phibar_b|^eps s_a^{1-eps}`.
pub fn vr_linear_estimate(
    chosen: usize,
    loss: f64,
    p: &SimplexDistribution,
    features: &FeatureSet,
    s: &[f64],
    spec: HeavyTailSpec,
) -> Result<EstimateBundle> {
    check_inputs(chosen, loss, p, s)?;
    let gram = gram_matrix(p, features, CovarianceKind::Centered)?;
    let raw = gram.column(chosen).iter().map(|g| g * loss).collect();
    let eps = spec.epsilon();
    let bonus = s
        .iter()
        .enumerate()
        .map(|(a, &sa)| {
            let spread: f64 = p
                .weights()
                .iter()
                .enumerate()
                .map(|(b, &pb)| pb * abs_pow(gram[(a, b)], eps))
                .sum();
            spec.sigma() * spread * pos_pow(sa, 1.0 - eps)
        })
        .collect();
    Ok(EstimateBundle::assemble(raw, bonus, s))
}

/// `G[a, b] = x_a^T M^{-1} x_b` where `x` are raw or centered features and `M`
/// the matching covariance under `p`.
pub fn gram_matrix(
    p: &SimplexDistribution,
    features: &FeatureSet,
    kind: CovarianceKind,
) -> Result<DMatrix<f64>> {
    let op = covariance(p, features, kind)?;
    let factor = SpdFactor::new(&op.matrix)?;
    let mut xt = features.matrix().transpose();
    for mut col in xt.column_iter_mut() {
        col -= &op.mean;
    }
    let solved = factor.solve_matrix(&xt);
    let mut g = xt.tr_mul(&solved);
    let k = g.nrows();
    for i in 0..k {
        for j in (i + 1)..k {
            let v = 0.5 * (g[(i, j)] + g[(j, i)]);
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UnbiasedCheck {
    /// Largest `|mean(l_a - l_b) - (m_a - m_b)|` over arm pairs.
    pub max_deviation: f64,
    /// Standard error of the pair attaining `max_deviation`.
    pub stderr: f64,
    /// Largest deviation measured in standard errors (pairs with zero spread
    /// contribute 0 when their deviation is below `1e-12`, infinity otherwise).
    pub max_z: f64,
}

/// Monte Carlo check that estimated loss differences are unbiased. Losses are
/// `true_means[a] + U(-half_width, half_width)`.
pub fn check_unbiased_differences(
    kind: EstimatorKind,
    p: &SimplexDistribution,
    features: &FeatureSet,
    true_means: &[f64],
    half_width: f64,
    n_samples: usize,
    seed: u64,
) -> Result<UnbiasedCheck> {
    let k = p.len();
    if true_means.len() != k {
        return Err(Error::DimensionMismatch {
            expected: k,
            got: true_means.len(),
        });
    }
    if n_samples < 2 {
        return Err(invalid("n_samples", "need at least two samples"));
    }
    let gram = match kind {
        EstimatorKind::ImportanceWeighted => {
            DMatrix::from_fn(k, k, |a, b| if a == b { 1.0 / p.get(a) } else { 0.0 })
        }
        EstimatorKind::LeastSquares => gram_matrix(p, features, CovarianceKind::Raw)?,
        EstimatorKind::VarianceReduced => gram_matrix(p, features, CovarianceKind::Centered)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf = cumulative(p.weights());
    let pairs: Vec<(usize, usize)> = (0..k)
        .flat_map(|a| ((a + 1)..k).map(move |b| (a, b)))
        .collect();
    let mut sum = vec![0.0; pairs.len()];
    let mut sum_sq = vec![0.0; pairs.len()];
    for _ in 0..n_samples {
        let arm = sample_index(&cdf, rng.random::<f64>());
        let noise = if half_width > 0.0 {
            rng.random_range(-half_width..=half_width)
        } else {
            0.0
        };
        let loss = true_means[arm] + noise;
        for (i, &(a, b)) in pairs.iter().enumerate() {
            let diff = (gram[(a, arm)] - gram[(b, arm)]) * loss;
            sum[i] += diff;
            sum_sq[i] += diff * diff;
        }
    }
    let n = n_samples as f64;
    let mut out = UnbiasedCheck {
        max_deviation: 0.0,
        stderr: 0.0,
        max_z: 0.0,
    };
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let mean = sum[i] / n;
        let var = ((sum_sq[i] - n * mean * mean) / (n - 1.0)).max(0.0);
        let se = (var / n).sqrt();
        let dev = (mean - (true_means[a] - true_means[b])).abs();
        let z = if se > 0.0 {
            dev / se
        } else if dev < 1e-12 {
            0.0
        } else {
            f64::INFINITY
        };
        if dev > out.max_deviation {
            out.max_deviation = dev;
            out.stderr = se;
        }
        out.max_z = out.max_z.max(z);
    }
    Ok(out)
}

/// Running sums of `w`, with the last entry pinned to 1.
pub fn cumulative(w: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = w
        .iter()
        .map(|x| {
            acc += x;
            acc
        })
        .collect();
    if let Some(last) = out.last_mut() {
        *last = 1.0;
    }
    out
}

/// Inverse-CDF lookup: the first index whose cumulative mass exceeds `u`,
/// skipping zero-probability arms.
pub fn sample_index(cdf: &[f64], u: f64) -> usize {
    let idx = cdf.partition_point(|&c| c <= u);
    idx.min(cdf.len() - 1)
}

/// Both sides of `sum_{a,b} p_a p_b |phibar_a^T V^{-1} phibar_b|^eps
/// <= 4 d^{eps/2} (1 - ||p||_inf)^{2-eps}`.
pub fn variance_bound_check(
    p: &SimplexDistribution,
    features: &FeatureSet,
    epsilon: f64,
) -> Result<(f64, f64)> {
    let gram = gram_matrix(p, features, CovarianceKind::Centered)?;
    let w = p.weights();
    let mut lhs = 0.0;
    for (a, &pa) in w.iter().enumerate() {
        for (b, &pb) in w.iter().enumerate() {
            lhs += pa * pb * abs_pow(gram[(a, b)], epsilon);
        }
    }
    let d = features.dim() as f64;
    let rhs = 4.0 * d.powf(epsilon / 2.0) * p.mass_off_mode().powf(2.0 - epsilon);
    Ok((lhs, rhs))
}

/// `phibar_a = phi_a - mu(p)` as rows.
pub fn centered_features(p: &SimplexDistribution, features: &FeatureSet) -> DMatrix<f64> {
    let mu: DVector<f64> = features
        .matrix()
        .tr_mul(&DVector::from_column_slice(p.weights()));
    let mut out = features.matrix().clone();
    for mut row in out.row_iter_mut() {
        row -= mu.transpose();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(eps: f64, sigma: f64) -> HeavyTailSpec {
        HeavyTailSpec::new(eps, sigma).unwrap()
    }

    fn fs(rows: &[&[f64]]) -> FeatureSet {
        FeatureSet::new(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    #[test]
    fn mab_examples() {
        let p = SimplexDistribution::uniform(2);
        let b = mab_estimate(0, 1.0, &p, &[2.0, 2.0], spec(2.0, 1.0)).unwrap();
        assert_eq!(b.raw_estimate, vec![2.0, 0.0]);
        assert_eq!(b.clipped_estimate, vec![2.0, 0.0]);
        assert!((b.bonus[0] - 1.0).abs() < 1e-15 && (b.bonus[1] - 1.0).abs() < 1e-15);
        assert_eq!(b.clipped_count, 0);

        let b2 = mab_estimate(0, 2.0, &p, &[2.0, 2.0], spec(2.0, 1.0)).unwrap();
        assert_eq!(b2.raw_estimate, vec![4.0, 0.0]);
        assert_eq!(b2.clipped_estimate, vec![0.0, 0.0]);
        assert_eq!(b2.clipped_count, 1);

        let z = mab_estimate(1, 0.0, &p, &[2.0, 2.0], spec(2.0, 1.0)).unwrap();
        assert_eq!(z.raw_estimate, vec![0.0, 0.0]);
        assert_eq!(z.bonus, b.bonus);
    }

    #[test]
    fn mab_zero_probability() {
        let p = SimplexDistribution::dirac(2, 0);
        assert_eq!(
            mab_estimate(1, 1.0, &p, &[1.0, 1.0], spec(1.5, 1.0)).unwrap_err(),
            Error::ZeroProbability { arm: 1 }
        );
    }

    #[test]
    fn clipping_keeps_values_equal_to_threshold() {
        let p = SimplexDistribution::uniform(2);
        let b = mab_estimate(0, 1.0, &p, &[2.0, 2.0], spec(1.5, 1.0)).unwrap();
        assert_eq!(b.clipped_estimate[0], 2.0);
    }

    #[test]
    fn linear_examples() {
        let p = SimplexDistribution::uniform(2);
        let f = fs(&[&[1.0], &[1.0]]);
        let b = linear_estimate(0, 0.3, &p, &f, &[10.0, 10.0], spec(2.0, 1.0)).unwrap();
        assert!((b.raw_estimate[0] - 0.3).abs() < 1e-15);
        assert!((b.raw_estimate[1] - 0.3).abs() < 1e-15);

        let f2 = FeatureSet::standard_basis(2);
        let b = linear_estimate(0, 1.0, &p, &f2, &[10.0, 10.0], spec(2.0, 1.0)).unwrap();
        assert!((b.raw_estimate[0] - 2.0).abs() < 1e-15);
        assert_eq!(b.raw_estimate[1], 0.0);
        let z = linear_estimate(0, 0.0, &p, &f2, &[10.0, 10.0], spec(2.0, 1.0)).unwrap();
        assert_eq!(z.raw_estimate, vec![0.0, 0.0]);
    }

    #[test]
    fn vr_examples() {
        let p = SimplexDistribution::uniform(2);
        let f = fs(&[&[0.0], &[1.0]]);
        let b = vr_linear_estimate(1, 1.0, &p, &f, &[2.0, 2.0], spec(2.0, 1.0)).unwrap();
        assert!((b.raw_estimate[0] + 1.0).abs() < 1e-14);
        assert!((b.raw_estimate[1] - 1.0).abs() < 1e-14);
        for &x in &b.bonus {
            assert!((x - 0.5).abs() < 1e-14);
        }
        let z = vr_linear_estimate(1, 0.0, &p, &f, &[2.0, 2.0], spec(2.0, 1.0)).unwrap();
        assert_eq!(z.raw_estimate, vec![0.0, 0.0]);
        assert_eq!(z.bonus, b.bonus);
    }

    #[test]
    fn variance_bound_examples() {
        let p = SimplexDistribution::uniform(2);
        let f = fs(&[&[0.0], &[1.0]]);
        let (lhs, rhs) = variance_bound_check(&p, &f, 2.0).unwrap();
        assert!((lhs - 1.0).abs() < 1e-14);
        assert!((rhs - 4.0).abs() < 1e-14);

        let near = SimplexDistribution::from_weights(vec![1.0 - 1e-6, 1e-6]).unwrap();
        let (lhs, rhs) = variance_bound_check(&near, &f, 1.5).unwrap();
        assert!(lhs <= rhs);
        assert!(rhs < 0.01);
    }

    #[test]
    fn abs_pow_zero() {
        assert_eq!(abs_pow(0.0, 1.5), 0.0);
        assert!((abs_pow(-4.0, 0.5) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sample_index_skips_zero_mass() {
        let cdf = cumulative(&[0.0, 0.5, 0.0, 0.5]);
        assert_eq!(sample_index(&cdf, 0.0), 1);
        assert_eq!(sample_index(&cdf, 0.49), 1);
        assert_eq!(sample_index(&cdf, 0.5), 3);
        assert_eq!(sample_index(&cdf, 0.999), 3);
    }

    #[test]
    fn zero_noise_unbiased() {
        let p = SimplexDistribution::uniform(3);
        let f = FeatureSet::standard_basis(3);
        let r = check_unbiased_differences(
            EstimatorKind::ImportanceWeighted,
            &p,
            &f,
            &[0.1, 0.2, 0.3],
            0.0,
            20_000,
            1,
        )
        .unwrap();
        assert!(r.max_z <= 3.0, "{r:?}");
    }
}

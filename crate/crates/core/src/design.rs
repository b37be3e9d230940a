//! Exploration designs over a finite arm set.
//!
//! Both designs maximize a log-determinant over the simplex with Frank-Wolfe
//! (Fedorov-Wynn) steps plus away steps, using the closed-form line search for
//! rank-one updates. The G-optimal design works on the raw features; the
//! centered design maximizes `log det V(p)` of the mean-centered covariance by
//! running the same solver on the lifted features `(1, phi_a)`, whose second
//! moment matrix has the same determinant as `V(p)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{normalize, FeatureSet, SimplexDistribution};

/// Relative slack on the Kiefer-Wolfowitz certificate.
pub const DEFAULT_DESIGN_TOL: f64 = 1e-3;
/// Weights below this are pruned from a finished design.
pub const PRUNE_BELOW: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignResult {
    pub distribution: SimplexDistribution,
    /// G-optimal: `max_a phi_a^T S(p)^{-1} phi_a`.
    /// Centered: `max_a ||phi_a - mu(p)||^2_{V(p)^{-1}}`.
    pub max_leverage: f64,
    pub iterations: usize,
}

impl DesignResult {
    pub fn support_size(&self) -> usize {
        self.distribution
            .weights()
            .iter()
            .filter(|&&w| w > 0.0)
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceKind {
    /// `S(p) = sum_a p_a phi_a phi_a^T`.
    Raw,
    /// `V(p) = sum_a p_a (phi_a - mu)(phi_a - mu)^T` with `mu = sum_a p_a phi_a`.
    Centered,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceOperator {
    pub matrix: DMatrix<f64>,
    pub kind: CovarianceKind,
    /// `mu(p)` for the centered kind, zero for the raw kind.
    pub mean: DVector<f64>,
}

/// Second-moment (raw) or covariance (centered) matrix of the features under `p`.
pub fn covariance(
    p: &SimplexDistribution,
    features: &FeatureSet,
    kind: CovarianceKind,
) -> Result<CovarianceOperator> {
    if p.len() != features.num_arms() {
        return Err(Error::DimensionMismatch {
            expected: features.num_arms(),
            got: p.len(),
        });
    }
    let phi = features.matrix();
    let d = features.dim();
    let mean = match kind {
        CovarianceKind::Raw => DVector::zeros(d),
        CovarianceKind::Centered => phi.tr_mul(&DVector::from_column_slice(p.weights())),
    };
    let mut matrix = DMatrix::zeros(d, d);
    for (a, &w) in p.weights().iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let x = phi.row(a).transpose() - &mean;
        matrix.ger(w, &x, &x, 1.0);
    }
    symmetrize(&mut matrix);
    Ok(CovarianceOperator { matrix, kind, mean })
}

fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// A verified positive definite operator with its Cholesky factor.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    pub condition: f64,
}

impl SpdFactor {
    /// Factors `m`, requiring the smallest eigenvalue to exceed `1e-12 * trace`.
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("covariance"));
        }
        let eig = m.clone().symmetric_eigenvalues();
        let lmin = eig.iter().copied().fold(f64::INFINITY, f64::min);
        let lmax = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let trace = m.trace();
        let condition = if lmin > 0.0 {
            lmax / lmin
        } else {
            f64::INFINITY
        };
        if !(trace > 0.0) || lmin <= 1e-12 * trace {
            return Err(Error::NearSingular { condition });
        }
        let chol = m
            .clone()
            .cholesky()
            .ok_or(Error::NearSingular { condition })?;
        Ok(Self { chol, condition })
    }

    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Solves `op.matrix * x = rhs` for a positive definite operator.
pub fn solve_spd(op: &CovarianceOperator, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    if rhs.len() != op.matrix.nrows() {
        return Err(Error::DimensionMismatch {
            expected: op.matrix.nrows(),
            got: rhs.len(),
        });
    }
    Ok(SpdFactor::new(&op.matrix)?.solve(rhs))
}

/// `phi_a^T S(p)^{-1} phi_a` for every arm.
pub fn raw_leverages(p: &SimplexDistribution, features: &FeatureSet) -> Result<Vec<f64>> {
    let op = covariance(p, features, CovarianceKind::Raw)?;
    quadratic_forms(&op, features)
}

/// `||phi_a - mu(p)||^2_{V(p)^{-1}}` for every arm.
pub fn centered_leverages(p: &SimplexDistribution, features: &FeatureSet) -> Result<Vec<f64>> {
    let op = covariance(p, features, CovarianceKind::Centered)?;
    quadratic_forms(&op, features)
}

fn quadratic_forms(op: &CovarianceOperator, features: &FeatureSet) -> Result<Vec<f64>> {
    let factor = SpdFactor::new(&op.matrix)?;
    let mut centered = features.matrix().transpose();
    for mut col in centered.column_iter_mut() {
        col -= &op.mean;
    }
    let solved = factor.solve_matrix(&centered);
    Ok(centered
        .column_iter()
        .zip(solved.column_iter())
        .map(|(x, y)| x.dot(&y))
        .collect())
}

/// `log det V(p)` computed from the centered covariance.
pub fn centered_log_det(p: &SimplexDistribution, features: &FeatureSet) -> Result<f64> {
    let op = covariance(p, features, CovarianceKind::Centered)?;
    Ok(log_det(&op.matrix))
}

/// `log det H'(p)` of the lifted features `(1, phi_a)`.
pub fn lifted_log_det(p: &SimplexDistribution, features: &FeatureSet) -> Result<f64> {
    let lifted = features.lifted();
    Ok(log_det(&second_moment(&lifted, p.weights())))
}

fn log_det(m: &DMatrix<f64>) -> f64 {
    match m.clone().cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|x| x.ln()).sum::<f64>(),
        None => f64::NEG_INFINITY,
    }
}

fn second_moment(points: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let m = points.ncols();
    let mut out = DMatrix::zeros(m, m);
    for (a, &wa) in w.iter().enumerate() {
        if wa > 0.0 {
            let x = points.row(a).transpose();
            out.ger(wa, &x, &x, 1.0);
        }
    }
    symmetrize(&mut out);
    out
}

/// `x_a^T M(w)^{-1} x_a` for all rows of `points`.
fn point_leverages(points: &DMatrix<f64>, w: &[f64]) -> Result<Vec<f64>> {
    let m = second_moment(points, w);
    let factor = SpdFactor::new(&m)?;
    let xt = points.transpose();
    let solved = factor.solve_matrix(&xt);
    Ok(xt
        .column_iter()
        .zip(solved.column_iter())
        .map(|(x, y)| x.dot(&y))
        .collect())
}

/// Iteration budget of the design solver: `50 d ln K`, scaled by the number of
/// decimal digits the tolerance asks for.
pub fn iteration_cap(dim: usize, arms: usize, tol: f64) -> usize {
    let digits = (1.0 / tol).log10().max(1.0);
    (50.0 * dim as f64 * (arms as f64).ln().max(1.0) * digits).ceil() as usize
}

/// Maximizes `log det M(w)` over the simplex for the rows of `points` until
/// `done(max_leverage)` holds.
fn d_optimal<F>(points: &DMatrix<f64>, cap: usize, done: F) -> Result<(Vec<f64>, usize)>
where
    F: Fn(f64) -> bool,
{
    let (k, m) = points.shape();
    let md = m as f64;
    let mut w = vec![1.0 / k as f64; k];
    let mut iterations = 0;
    loop {
        let g = point_leverages(points, &w)?;
        let (j, gmax) =
            g.iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (a, x)| if x > acc.1 { (a, x) } else { acc },
                );
        if done(gmax) {
            return Ok((w, iterations));
        }
        if iterations >= cap {
            return Err(Error::NoConvergence {
                what: "optimal design",
                iterations,
            });
        }
        iterations += 1;
        let (i, gmin) = g
            .iter()
            .copied()
            .enumerate()
            .filter(|&(a, _)| w[a] > 0.0)
            .fold(
                (0, f64::INFINITY),
                |acc, (a, x)| if x < acc.1 { (a, x) } else { acc },
            );

        if gmax - md >= md - gmin || w[i] >= 1.0 {
            // toward step: w <- (1 - lambda) w + lambda e_j
            let lambda = ((gmax - md) / (md * (gmax - 1.0))).clamp(0.0, 1.0);
            w.iter_mut().for_each(|x| *x *= 1.0 - lambda);
            w[j] += lambda;
        } else {
            // away step: w <- (1 + lambda) w - lambda e_i
            let max_step = w[i] / (1.0 - w[i]);
            let lambda = if gmin <= 1.0 {
                max_step
            } else {
                ((md - gmin) / (md * (gmin - 1.0))).min(max_step)
            };
            w.iter_mut().for_each(|x| *x *= 1.0 + lambda);
            w[i] -= lambda;
            if lambda == max_step || w[i] < 0.0 {
                w[i] = 0.0;
            }
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
    }
}

fn vech_with_unit(x: &[f64]) -> Vec<f64> {
    let m = x.len();
    let mut out = Vec::with_capacity(m * (m + 1) / 2 + 1);
    for i in 0..m {
        for j in i..m {
            out.push(x[i] * x[j]);
        }
    }
    out.push(1.0);
    out
}

/// Caratheodory reduction: moves mass along null combinations of the
/// `(vech(x x^T), 1)` vectors, which keeps `M(w)` fixed, until the support has at
/// most `m(m+1)/2 + 1` points.
fn reduce_support(points: &DMatrix<f64>, w: &mut [f64]) {
    let m = points.ncols();
    let limit = m * (m + 1) / 2 + 1;
    loop {
        let support: Vec<usize> = (0..w.len()).filter(|&a| w[a] > 0.0).collect();
        if support.len() <= limit {
            return;
        }
        let chosen = &support[..limit + 1];
        let cols: Vec<Vec<f64>> = chosen
            .iter()
            .map(|&a| vech_with_unit(points.row(a).iter().copied().collect::<Vec<_>>().as_slice()))
            .collect();
        // square system: `limit` constraint rows plus one zero row
        let n = limit + 1;
        let a = DMatrix::from_fn(n, n, |r, c| if r < limit { cols[c][r] } else { 0.0 });
        let svd = a.svd(false, true);
        let v_t = match svd.v_t {
            Some(v) => v,
            None => return,
        };
        let idx = svd
            .singular_values
            .iter()
            .enumerate()
            .fold(0, |best, (i, &s)| {
                if s < svd.singular_values[best] {
                    i
                } else {
                    best
                }
            });
        let mut c: Vec<f64> = v_t.row(idx).iter().copied().collect();
        if c.iter().all(|&x| x <= 0.0) {
            c.iter_mut().for_each(|x| *x = -*x);
        }
        let (drop, step) = chosen
            .iter()
            .zip(&c)
            .filter(|&(_, &ci)| ci > 0.0)
            .map(|(&a, &ci)| (a, w[a] / ci))
            .fold((usize::MAX, f64::INFINITY), |acc, x| {
                if x.1 < acc.1 {
                    x
                } else {
                    acc
                }
            });
        if drop == usize::MAX {
            return;
        }
        for (&a, &ci) in chosen.iter().zip(&c) {
            w[a] = (w[a] - step * ci).max(0.0);
        }
        w[drop] = 0.0;
    }
}

/// Drops negligible weights and reduces the support, keeping the result only if
/// it still satisfies `done`.
fn tidy<F>(points: &DMatrix<f64>, w: Vec<f64>, done: F) -> Vec<f64>
where
    F: Fn(f64) -> bool,
{
    let mut cand: Vec<f64> = w
        .iter()
        .map(|&x| if x < PRUNE_BELOW { 0.0 } else { x })
        .collect();
    reduce_support(points, &mut cand);
    let total: f64 = cand.iter().sum();
    cand.iter_mut().for_each(|x| *x /= total);
    match point_leverages(points, &cand) {
        Ok(g) if done(g.iter().copied().fold(f64::NEG_INFINITY, f64::max)) => cand,
        _ => w,
    }
}

fn check_tol(tol: f64) -> Result<()> {
    if tol.is_finite() && tol > 0.0 {
        Ok(())
    } else {
        Err(invalid("tol", format!("{tol} must be positive")))
    }
}

/// G-optimal design: `max_a phi_a^T S(p)^{-1} phi_a <= d (1 + tol)`.
pub fn g_optimal_design(features: &FeatureSet, tol: f64) -> Result<DesignResult> {
    check_tol(tol)?;
    let points = features.matrix();
    let d = features.dim();
    let k = features.num_arms();
    let target = d as f64 * (1.0 + tol);
    let done = |g: f64| g <= target;
    let (w, iterations) = d_optimal(points, iteration_cap(d, k, tol), done)?;
    let w = tidy(points, w, done);
    let distribution = normalize(&w)?;
    let max_leverage = raw_leverages(&distribution, features)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DesignResult {
        distribution,
        max_leverage,
        iterations,
    })
}

/// Maximizer of `log det V(p)`: `max_a ||phi_a - mu(p)||^2_{V(p)^{-1}} <= d (1 + tol)`.
pub fn centered_optimal_design(features: &FeatureSet, tol: f64) -> Result<DesignResult> {
    check_tol(tol)?;
    let d = features.dim();
    let k = features.num_arms();
    let affine_rank = features.affine_rank();
    if affine_rank < d {
        return Err(Error::AffinelyDegenerate {
            affine_rank,
            dim: d,
        });
    }
    let lifted = features.lifted();
    // lifted leverage = 1 + centered leverage
    let target = d as f64 * (1.0 + tol);
    let done = |g: f64| g - 1.0 <= target;
    let (w, iterations) = d_optimal(&lifted, iteration_cap(d + 1, k, tol), done)?;
    let w = tidy(&lifted, w, done);
    let distribution = normalize(&w)?;
    let max_leverage = centered_leverages(&distribution, features)?
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(DesignResult {
        distribution,
        max_leverage,
        iterations,
    })
}

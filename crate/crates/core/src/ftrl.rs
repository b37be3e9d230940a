//! Follow-the-regularized-leader steps over the probability simplex.
//!
//! Every solver minimizes `<L, q> + beta * psi(q) (+ beta_bar * psi_bar(q))` for a
//! cumulative loss vector `L`. Shannon entropy has a closed form. The Tsallis and
//! hybrid Tsallis objectives are solved through their one-dimensional dual: the
//! stationarity condition fixes each coordinate as a decreasing function of
//! `L_a + c` for a shared shift `c`, and `c` is found by a bracketed Newton
//! iteration on `sum_a q_a(c) = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::types::{SimplexDistribution, UNDERFLOW_FLOOR};

/// Iteration cap for the outer dual root search.
pub const MAX_DUAL_ITERATIONS: usize = 200;
const SUM_TOL: f64 = 1e-13;

/// Regularizer of an FTRL step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Regularizer {
    /// `psi(q) = sum_a q_a ln q_a`.
    Shannon,
    /// `psi(q) = -(1/alpha) sum_a (q_a^alpha - q_a)`.
    Tsallis { alpha: f64 },
    /// `beta * psi_alpha + beta_bar * psi_alpha_bar`.
    HybridTsallis {
        alpha: f64,
        alpha_bar: f64,
        beta_bar: f64,
    },
}

impl Regularizer {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Regularizer::Shannon => Ok(()),
            Regularizer::Tsallis { alpha } => check_alpha("alpha", alpha),
            Regularizer::HybridTsallis {
                alpha,
                alpha_bar,
                beta_bar,
            } => {
                check_alpha("alpha", alpha)?;
                check_alpha("alpha_bar", alpha_bar)?;
                if alpha_bar > alpha {
                    return Err(invalid(
                        "alpha_bar",
                        format!("{alpha_bar} must not exceed alpha = {alpha}"),
                    ));
                }
                if !(beta_bar.is_finite() && beta_bar >= 0.0) {
                    return Err(invalid("beta_bar", format!("{beta_bar} must be >= 0")));
                }
                Ok(())
            }
        }
    }

    /// Regularizer value at `q`, already scaled by `beta` (and `beta_bar`).
    pub fn scaled_value(&self, q: &[f64], beta: f64) -> f64 {
        match *self {
            Regularizer::Shannon => {
                beta * q
                    .iter()
                    .map(|&x| if x > 0.0 { x * x.ln() } else { 0.0 })
                    .sum::<f64>()
            }
            Regularizer::Tsallis { alpha } => beta * tsallis_psi(q, alpha),
            Regularizer::HybridTsallis {
                alpha,
                alpha_bar,
                beta_bar,
            } => beta * tsallis_psi(q, alpha) + beta_bar * tsallis_psi(q, alpha_bar),
        }
    }
}

fn check_alpha(name: &'static str, alpha: f64) -> Result<()> {
    if alpha.is_finite() && alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(invalid(name, format!("{alpha} is outside (0, 1)")))
    }
}

fn tsallis_psi(q: &[f64], alpha: f64) -> f64 {
    -q.iter().map(|&x| x.powf(alpha) - x).sum::<f64>() / alpha
}

/// FTRL objective `<L, q> + beta psi(q)` evaluated at an arbitrary point of the simplex.
pub fn objective(reg: &Regularizer, cum_loss: &[f64], beta: f64, q: &[f64]) -> f64 {
    let linear: f64 = cum_loss.iter().zip(q).map(|(l, x)| l * x).sum();
    linear + reg.scaled_value(q, beta)
}

/// Minimizer of an FTRL step.
#[derive(Debug, Clone, PartialEq)]
pub struct FtrlSolution {
    pub q: SimplexDistribution,
    /// Lagrange multiplier `lambda` of the simplex constraint:
    /// `L_a + beta d_a psi(q) = lambda` on every coordinate.
    pub dual_value: f64,
    pub iterations: usize,
    /// `|sum_a q_a - 1|` before the final renormalization.
    pub residual: f64,
}

fn check_inputs(cum_loss: &[f64], beta: f64) -> Result<()> {
    if cum_loss.is_empty() {
        return Err(invalid("cum_loss", "empty loss vector"));
    }
    if cum_loss.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("cum_loss"));
    }
    if !(beta.is_finite() && beta > 0.0) {
        return Err(invalid("beta", format!("{beta} must be positive")));
    }
    Ok(())
}

/// Exponential weights: `q_a ∝ exp(-L_a / beta)`.
pub fn solve_shannon(cum_loss: &[f64], beta: f64) -> Result<FtrlSolution> {
    check_inputs(cum_loss, beta)?;
    let min = cum_loss.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = cum_loss
        .iter()
        .map(|&l| (-(l - min) / beta).exp())
        .collect();
    let z: f64 = w.iter().sum();
    let q: Vec<f64> = w.iter().map(|x| x / z).collect();
    let residual = (q.iter().sum::<f64>() - 1.0).abs();
    Ok(FtrlSolution {
        q: SimplexDistribution::from_trusted(q),
        dual_value: min - beta * z.ln() + beta,
        iterations: 0,
        residual,
    })
}

/// Tsallis-entropy FTRL step (cold start).
pub fn solve_tsallis(cum_loss: &[f64], beta: f64, alpha: f64) -> Result<FtrlSolution> {
    solve_tsallis_warm(cum_loss, beta, alpha, None)
}

/// Tsallis-entropy FTRL step, optionally warm-started from a previous multiplier.
pub fn solve_tsallis_warm(
    cum_loss: &[f64],
    beta: f64,
    alpha: f64,
    warm_dual: Option<f64>,
) -> Result<FtrlSolution> {
    check_inputs(cum_loss, beta)?;
    check_alpha("alpha", alpha)?;
    let k = cum_loss.len() as f64;
    let expo = 1.0 / (alpha - 1.0);
    // beta q^(alpha-1) = y  <=>  q = (y / beta)^(1/(alpha-1))
    let inverse = |y: f64| {
        let q = (y / beta).powf(expo).max(UNDERFLOW_FLOOR);
        (q, expo * q / y)
    };
    let offset = beta / alpha;
    solve_dual(
        cum_loss,
        beta * k.powf(1.0 - alpha),
        offset,
        warm_dual,
        inverse,
    )
}

/// Hybrid Tsallis FTRL step (cold start).
pub fn solve_hybrid(
    cum_loss: &[f64],
    beta: f64,
    alpha: f64,
    beta_bar: f64,
    alpha_bar: f64,
) -> Result<FtrlSolution> {
    solve_hybrid_warm(cum_loss, beta, alpha, beta_bar, alpha_bar, None)
}

/// Hybrid Tsallis FTRL step, optionally warm-started.
pub fn solve_hybrid_warm(
    cum_loss: &[f64],
    beta: f64,
    alpha: f64,
    beta_bar: f64,
    alpha_bar: f64,
    warm_dual: Option<f64>,
) -> Result<FtrlSolution> {
    check_inputs(cum_loss, beta)?;
    Regularizer::HybridTsallis {
        alpha,
        alpha_bar,
        beta_bar,
    }
    .validate()?;
    let k = cum_loss.len() as f64;
    let inverse = |y: f64| hybrid_inverse(y, beta, alpha, beta_bar, alpha_bar);
    let offset = beta / alpha + beta_bar / alpha_bar;
    let span = beta * k.powf(1.0 - alpha) + beta_bar * k.powf(1.0 - alpha_bar);
    solve_dual(cum_loss, span, offset, warm_dual, inverse)
}

/// Solves `beta q^(alpha-1) + beta_bar q^(alpha_bar-1) = y` for `q > 0`, returning
/// `(q, dq/dy)`. The left side is strictly decreasing and convex in `u = ln q`, so
/// Newton from the left bracket end increases monotonically to the root.
fn hybrid_inverse(y: f64, beta: f64, alpha: f64, beta_bar: f64, alpha_bar: f64) -> (f64, f64) {
    let a1 = 1.0 - alpha;
    let a2 = 1.0 - alpha_bar;
    if beta_bar == 0.0 {
        let q = (y / beta).powf(-1.0 / a1).max(UNDERFLOW_FLOOR);
        return (q, -q / (a1 * y));
    }
    let mut u = f64::max((beta / y).ln() / a1, (beta_bar / y).ln() / a2);
    for _ in 0..100 {
        let t1 = beta * (-a1 * u).exp();
        let t2 = beta_bar * (-a2 * u).exp();
        let h = t1 + t2 - y;
        let dh = -a1 * t1 - a2 * t2;
        let step = h / dh;
        u -= step;
        if step.abs() <= 1e-15 * u.abs().max(1.0) {
            break;
        }
    }
    let q = u.exp().max(UNDERFLOW_FLOOR);
    let dg = -a1 * beta * q.powf(-a1 - 1.0) - a2 * beta_bar * q.powf(-a2 - 1.0);
    (q, 1.0 / dg)
}

/// Finds the shift `c` with `sum_a inverse(L_a + c).0 = 1`.
///
/// `span` is `g(1/K)` where `g` is the per-coordinate stationarity map, so the
/// root lies in `(-min L, -min L + span]`. `offset` converts between the shift
/// and the multiplier: `lambda = offset - c`.
fn solve_dual<F>(
    cum_loss: &[f64],
    span: f64,
    offset: f64,
    warm_dual: Option<f64>,
    inverse: F,
) -> Result<FtrlSolution>
where
    F: Fn(f64) -> (f64, f64),
{
    // Work with the offset from the minimum, delta = c + min L, so that the arm
    // with the smallest loss sees y = delta exactly.
    let min = cum_loss.iter().copied().fold(f64::INFINITY, f64::min);
    let gaps: Vec<f64> = cum_loss.iter().map(|&l| l - min).collect();
    let mut lo = 0.0;
    let mut hi = span;
    let eval = |delta: f64| {
        let mut total = 0.0;
        let mut slope = 0.0;
        for &g in &gaps {
            let (q, dq) = inverse(g + delta);
            total += q;
            slope += dq;
        }
        (total - 1.0, slope)
    };

    let mut delta = match warm_dual.map(|lambda| offset - lambda + min) {
        Some(w) if w > lo && w < hi => w,
        _ => hi,
    };
    let mut iterations = 0;
    loop {
        iterations += 1;
        let (f, df) = eval(delta);
        if f.abs() <= SUM_TOL {
            break;
        }
        if f > 0.0 {
            lo = delta;
        } else {
            hi = delta;
        }
        if iterations >= MAX_DUAL_ITERATIONS {
            return Err(Error::NoConvergence {
                what: "simplex dual search",
                iterations,
            });
        }
        let newton = delta - f / df;
        let next = if newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            lo + 0.5 * (hi - lo)
        };
        if next == delta || hi - lo <= 4.0 * f64::EPSILON * delta {
            break;
        }
        delta = next;
    }

    let mut q: Vec<f64> = gaps.iter().map(|&g| inverse(g + delta).0).collect();
    let total: f64 = q.iter().sum();
    let residual = (total - 1.0).abs();
    if !total.is_finite() || residual > 1e-10 {
        return Err(Error::NoConvergence {
            what: "simplex dual search",
            iterations,
        });
    }
    q.iter_mut().for_each(|x| *x /= total);
    Ok(FtrlSolution {
        q: SimplexDistribution::from_trusted(q),
        dual_value: offset - (delta - min),
        iterations,
        residual,
    })
}

/// Dispatches on the regularizer kind.
pub fn solve(
    reg: &Regularizer,
    cum_loss: &[f64],
    beta: f64,
    warm_dual: Option<f64>,
) -> Result<FtrlSolution> {
    match *reg {
        Regularizer::Shannon => solve_shannon(cum_loss, beta),
        Regularizer::Tsallis { alpha } => solve_tsallis_warm(cum_loss, beta, alpha, warm_dual),
        Regularizer::HybridTsallis {
            alpha,
            alpha_bar,
            beta_bar,
        } => solve_hybrid_warm(cum_loss, beta, alpha, beta_bar, alpha_bar, warm_dual),
    }
}

/// `(1/alpha)(sum_a q_a^alpha - 1)`, the negated Tsallis regularizer.
pub fn tsallis_entropy_value(q: &SimplexDistribution, alpha: f64) -> f64 {
    (q.weights().iter().map(|x| x.powf(alpha)).sum::<f64>() - 1.0) / alpha
}

/// Largest violation of the stationarity conditions at `q`:
/// `max_a |L_a + beta d_a psi(q) - lambda|`, with `lambda` the mean of the left side.
pub fn kkt_residual(reg: &Regularizer, cum_loss: &[f64], beta: f64, q: &[f64]) -> f64 {
    let grad: Vec<f64> = cum_loss
        .iter()
        .zip(q)
        .map(|(&l, &x)| {
            l + match *reg {
                Regularizer::Shannon => beta * (x.ln() + 1.0),
                Regularizer::Tsallis { alpha } => beta * (1.0 / alpha - x.powf(alpha - 1.0)),
                Regularizer::HybridTsallis {
                    alpha,
                    alpha_bar,
                    beta_bar,
                } => {
                    beta * (1.0 / alpha - x.powf(alpha - 1.0))
                        + beta_bar * (1.0 / alpha_bar - x.powf(alpha_bar - 1.0))
                }
            }
        })
        .collect();
    let lambda = grad.iter().sum::<f64>() / grad.len() as f64;
    grad.iter().map(|g| (g - lambda).abs()).fold(0.0, f64::max)
}

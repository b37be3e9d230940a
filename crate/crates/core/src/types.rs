//! Shared domain vocabulary: heavy-tail parameters, distributions over arms,
//! arm feature sets, per-round traces and gap profiles.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerance accepted on the total mass of a caller-supplied distribution.
pub const SIMPLEX_TOL: f64 = 1e-9;
/// Tolerance guaranteed on the total mass after normalization.
pub const NORMALIZED_TOL: f64 = 1e-12;
/// Entries below this are treated as exact zeros.
pub const UNDERFLOW_FLOOR: f64 = 1e-300;

/// Moment parameters `(eps, sigma)`: every loss satisfies `E|l|^eps <= sigma`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSpec")]
pub struct HeavyTailSpec {
    epsilon: f64,
    sigma: f64,
}

#[derive(Deserialize)]
struct RawSpec {
    epsilon: f64,
    sigma: f64,
}

impl TryFrom<RawSpec> for HeavyTailSpec {
    type Error = Error;
    fn try_from(raw: RawSpec) -> Result<Self> {
        HeavyTailSpec::new(raw.epsilon, raw.sigma)
    }
}

impl HeavyTailSpec {
    pub fn new(epsilon: f64, sigma: f64) -> Result<Self> {
        if !(epsilon.is_finite() && epsilon > 1.0 && epsilon <= 2.0) {
            return Err(invalid(
                "epsilon",
                format!("{epsilon} is outside the moment-order range (1, 2]"),
            ));
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(invalid(
                "sigma",
                format!("{sigma} must be positive and finite"),
            ));
        }
        Ok(Self { epsilon, sigma })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }
}

/// A probability vector over `K` arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct SimplexDistribution {
    weights: Vec<f64>,
}

impl TryFrom<Vec<f64>> for SimplexDistribution {
    type Error = Error;
    fn try_from(weights: Vec<f64>) -> Result<Self> {
        SimplexDistribution::from_weights(weights)
    }
}

impl From<SimplexDistribution> for Vec<f64> {
    fn from(d: SimplexDistribution) -> Vec<f64> {
        d.weights
    }
}

impl SimplexDistribution {
    /// Validates a vector that should already sum to one (within [`SIMPLEX_TOL`])
    /// and renormalizes it.
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        check_finite_nonneg(&weights)?;
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(invalid(
                "weights",
                format!("total mass {total} is not within {SIMPLEX_TOL} of 1"),
            ));
        }
        normalize(&weights)
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k > 0, "uniform distribution over zero arms");
        Self {
            weights: vec![1.0 / k as f64; k],
        }
    }

    pub fn dirac(k: usize, arm: usize) -> Self {
        assert!(arm < k, "arm {arm} out of range for {k} arms");
        let mut weights = vec![0.0; k];
        weights[arm] = 1.0;
        Self { weights }
    }

    /// Wraps weights already known to be a valid distribution.
    pub(crate) fn from_trusted(weights: Vec<f64>) -> Self {
        debug_assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        Self { weights }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn get(&self, arm: usize) -> f64 {
        self.weights[arm]
    }

    /// `||w||_inf`.
    pub fn max(&self) -> f64 {
        self.weights.iter().copied().fold(0.0, f64::max)
    }

    /// Index of the largest weight, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (a, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = a;
            }
        }
        best
    }

    /// Mass outside the heaviest arm, i.e. `1 - ||w||_inf` computed without cancellation.
    pub fn mass_off_mode(&self) -> f64 {
        let top = self.argmax();
        self.weights
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != top)
            .map(|(_, &w)| w)
            .sum()
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn dot(&self, values: &[f64]) -> f64 {
        self.weights.iter().zip(values).map(|(w, v)| w * v).sum()
    }
}

fn check_finite_nonneg(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::NonFinite("weights"));
    }
    if let Some(w) = weights.iter().find(|&&w| w < 0.0) {
        return Err(invalid("weights", format!("negative entry {w}")));
    }
    Ok(())
}

/// Rescales a nonnegative vector onto the simplex.
pub fn normalize(weights: &[f64]) -> Result<SimplexDistribution> {
    check_finite_nonneg(weights)?;
    let mut w: Vec<f64> = weights
        .iter()
        .map(|&x| if x < UNDERFLOW_FLOOR { 0.0 } else { x })
        .collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::AllZero);
    }
    if !total.is_finite() {
        // Entries near f64::MAX overflow the sum; rescale by the max first.
        let top = w.iter().copied().fold(0.0, f64::max);
        w.iter_mut().for_each(|x| *x /= top);
        return normalize(&w);
    }
    w.iter_mut().for_each(|x| *x /= total);
    Ok(SimplexDistribution { weights: w })
}

/// `(1 - gamma) q + gamma p0`.
pub fn mix(
    q: &SimplexDistribution,
    p0: &SimplexDistribution,
    gamma: f64,
) -> Result<SimplexDistribution> {
    if q.len() != p0.len() {
        return Err(Error::DimensionMismatch {
            expected: q.len(),
            got: p0.len(),
        });
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(invalid("gamma", format!("{gamma} is outside [0, 1]")));
    }
    let weights = q
        .weights
        .iter()
        .zip(&p0.weights)
        .map(|(&a, &b)| (1.0 - gamma) * a + gamma * b)
        .collect();
    Ok(SimplexDistribution { weights })
}

/// The arm feature vectors of a linear bandit, one row per arm.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: DMatrix<f64>,
}

impl FeatureSet {
    /// Builds a feature set; requires at least two arms and full linear rank.
    pub fn new(features: Vec<Vec<f64>>) -> Result<Self> {
        let k = features.len();
        if k < 2 {
            return Err(invalid(
                "features",
                format!("need at least 2 arms, got {k}"),
            ));
        }
        let d = features[0].len();
        if d == 0 {
            return Err(invalid("features", "feature dimension is zero"));
        }
        if let Some(row) = features.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: row.len(),
            });
        }
        if features.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
        let rows = DMatrix::from_fn(k, d, |i, j| features[i][j]);
        let rank = numerical_rank(&rows);
        if rank < d {
            return Err(Error::RankDeficient { rank, dim: d });
        }
        Ok(Self { rows })
    }

    /// Standard basis `e_1, ..., e_d` (a plain multi-armed bandit in linear form).
    pub fn standard_basis(d: usize) -> Self {
        Self {
            rows: DMatrix::identity(d, d),
        }
    }

    /// Reads one arm per row, comma-separated; `has_header` skips the first line.
    pub fn from_csv_reader<R: Read>(reader: R, has_header: bool) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(has_header)
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let mut features = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Io(e.to_string()))?;
            let row = record
                .iter()
                .map(|field| {
                    field.parse::<f64>().map_err(|_| {
                        Error::Config(format!("feature row {}: cannot parse `{field}`", line + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            features.push(row);
        }
        Self::new(features)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, has_header: bool) -> Result<Self> {
        let path = path.as_ref();
        let file =
            std::fs::File::open(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_csv_reader(file, has_header)
    }

    pub fn num_arms(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// `K x d` matrix with one arm per row.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn feature(&self, arm: usize) -> DVector<f64> {
        self.rows.row(arm).transpose()
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.num_arms())
            .map(|a| self.rows.row(a).iter().copied().collect())
            .collect()
    }

    /// Dimension of the affine hull of the arm features.
    pub fn affine_rank(&self) -> usize {
        let k = self.num_arms();
        let d = self.dim();
        let diffs = DMatrix::from_fn(k - 1, d, |i, j| self.rows[(i + 1, j)] - self.rows[(0, j)]);
        numerical_rank(&diffs)
    }

    /// Features lifted to `(1, phi_a)`; the affine span of the original set has
    /// dimension `d` iff the lifted set has linear rank `d + 1`.
    pub fn lifted(&self) -> DMatrix<f64> {
        let (k, d) = self.rows.shape();
        DMatrix::from_fn(
            k,
            d + 1,
            |i, j| if j == 0 { 1.0 } else { self.rows[(i, j - 1)] },
        )
    }

    /// Duplicates every arm `copies` times (used to test merging invariance).
    pub fn with_repeats(&self, copies: usize) -> Self {
        let (k, d) = self.rows.shape();
        let rows = DMatrix::from_fn(k * copies, d, |i, j| self.rows[(i % k, j)]);
        Self { rows }
    }
}

/// Numerical rank with cutoff `max(m, n) * eps * sigma_max`.
pub fn numerical_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    let top = sv.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    let cutoff = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * top;
    sv.iter().filter(|&&s| s > cutoff).count()
}

/// Named per-round invariant checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InvariantFlags {
    /// `p_t` and `q_t` sum to one.
    pub simplex: bool,
    /// `gamma_t <= 1/2`.
    pub gamma_half: bool,
    /// `b_{t,a} <= s_{t,a}` for all arms.
    pub bonus_below_threshold: bool,
    /// `|clipped_a| <= s_{t,a}` for all arms.
    pub clip_contained: bool,
    /// `beta_t >= beta_{t-1}`.
    pub beta_monotone: bool,
}

impl InvariantFlags {
    pub fn all_ok(&self) -> bool {
        self.simplex
            && self.gamma_half
            && self.bonus_below_threshold
            && self.clip_contained
            && self.beta_monotone
    }

    pub const NAMES: [&'static str; 5] = [
        "simplex",
        "gamma_half",
        "bonus_below_threshold",
        "clip_contained",
        "beta_monotone",
    ];

    pub fn as_array(&self) -> [bool; 5] {
        [
            self.simplex,
            self.gamma_half,
            self.bonus_below_threshold,
            self.clip_contained,
            self.beta_monotone,
        ]
    }
}

/// Trace of one interaction round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub t: usize,
    pub q: SimplexDistribution,
    pub p: SimplexDistribution,
    pub chosen_arm: usize,
    pub observed_loss: f64,
    pub raw_estimate: Vec<f64>,
    pub clipped_estimate: Vec<f64>,
    pub bonus: Vec<f64>,
    pub gamma: f64,
    pub clip_thresholds: Vec<f64>,
    pub beta: f64,
    /// Penalty value `h_t` (HT-SPM policies only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub entropy: Option<f64>,
    /// Stability coefficient `z_t` (HT-SPM policies only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub z: Option<f64>,
    /// Exploration coefficient `w_t` (HT-SPM policies only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub w: Option<f64>,
    /// `beta_{t+1}` (HT-SPM policies only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub next_beta: Option<f64>,
    pub invariant_flags: InvariantFlags,
}

/// Suboptimality gaps, optimal arm and corruption budget of a self-bounded regime.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapProfile {
    pub gaps: Vec<f64>,
    pub optimal_arm: usize,
    pub corruption_budget: f64,
}

impl GapProfile {
    /// Derives gaps from per-arm means; fails when the minimum is not unique.
    pub fn from_means(means: &[f64], corruption_budget: f64) -> Result<Self> {
        if means.is_empty() {
            return Err(invalid("means", "empty"));
        }
        let optimal_arm = means
            .iter()
            .enumerate()
            .fold(0, |best, (a, &m)| if m < means[best] { a } else { best });
        let best = means[optimal_arm];
        if let Some(other) = (0..means.len()).find(|&a| a != optimal_arm && means[a] == best) {
            return Err(Error::NonUniqueOptimum(
                optimal_arm.min(other),
                optimal_arm.max(other),
            ));
        }
        Ok(Self {
            gaps: means.iter().map(|m| m - best).collect(),
            optimal_arm,
            corruption_budget,
        })
    }

    pub fn min_gap(&self) -> f64 {
        self.gaps
            .iter()
            .enumerate()
            .filter(|&(a, _)| a != self.optimal_arm)
            .map(|(_, &g)| g)
            .fold(f64::INFINITY, f64::min)
    }
}

//! Loss environments with certified heavy-tailed noise.
//!
//! An environment produces per-round mean losses (fixed, scripted, or from a
//! callback that sees the action history), optionally shifts them by a
//! corruption schedule with a total budget, and adds scaled noise. The noise
//! scale is calibrated so that every arm's `eps`-th raw moment stays below
//! `sigma` through the bound `|m + cX|^eps <= 2^{eps-1} (|m|^eps + c^eps |X|^eps)`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{invalid, Error, Result};
use crate::estimators::abs_pow;
use crate::types::{FeatureSet, GapProfile, HeavyTailSpec};

/// Unit noise distributions `X`; losses are `mean + scale * X`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseKind {
    /// `|X| ~ Pareto(1, shape)` with a fair random sign.
    SymmetricPareto { shape: f64 },
    /// Student's t with `dof` degrees of freedom.
    StudentT { dof: f64 },
    /// Uniform on `[-half_width, half_width]`.
    Bounded { half_width: f64 },
}

impl NoiseKind {
    /// Rejects tails too heavy for a finite `eps`-th moment.
    pub fn validate(&self, eps: f64) -> Result<()> {
        match *self {
            NoiseKind::SymmetricPareto { shape } if !(shape.is_finite() && shape > eps) => Err(
                invalid("shape", format!("{shape} must exceed epsilon = {eps}")),
            ),
            NoiseKind::StudentT { dof } if !(dof.is_finite() && dof > eps) => {
                Err(invalid("dof", format!("{dof} must exceed epsilon = {eps}")))
            }
            NoiseKind::Bounded { half_width } if !(half_width.is_finite() && half_width >= 0.0) => {
                Err(invalid("half_width", format!("{half_width} must be >= 0")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        matches!(*self, NoiseKind::Bounded { half_width } if half_width == 0.0)
    }

    /// `E|X|^e`: closed form for the Pareto kind, tanh-sinh quadrature otherwise.
    pub fn abs_moment(&self, e: f64) -> Result<f64> {
        self.validate(e)?;
        Ok(match *self {
            NoiseKind::SymmetricPareto { shape } => shape / (shape - e),
            NoiseKind::StudentT { dof } => student_t_abs_moment_quadrature(dof, e),
            NoiseKind::Bounded { half_width } => {
                if half_width == 0.0 {
                    0.0
                } else {
                    // E|X|^e = h^e * int_0^1 u^e du
                    half_width.powf(e) * tanh_sinh(|u, _| abs_pow(u, e))
                }
            }
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            NoiseKind::SymmetricPareto { shape } => {
                let u: f64 = rng.random();
                let magnitude = (1.0 - u).powf(-1.0 / shape);
                if rng.random::<bool>() {
                    magnitude
                } else {
                    -magnitude
                }
            }
            NoiseKind::StudentT { dof } => StudentT::new(dof)
                .expect("dof validated at construction")
                .sample(rng),
            NoiseKind::Bounded { half_width } => {
                if half_width == 0.0 {
                    0.0
                } else {
                    rng.random_range(-half_width..=half_width)
                }
            }
        }
    }
}

/// `E|T|^e` for Student's t in closed form; used to cross-check quadrature.
pub fn student_t_abs_moment_closed(dof: f64, e: f64) -> f64 {
    (0.5 * e * dof.ln() + ln_gamma((e + 1.0) / 2.0) + ln_gamma((dof - e) / 2.0)
        - 0.5 * std::f64::consts::PI.ln()
        - ln_gamma(dof / 2.0))
    .exp()
}

fn student_t_abs_moment_quadrature(dof: f64, e: f64) -> f64 {
    let log_norm =
        ln_gamma((dof + 1.0) / 2.0) - ln_gamma(dof / 2.0) - 0.5 * (dof * std::f64::consts::PI).ln();
    // 2 int_0^inf x^e f(x) dx with x = u / (1 - u)
    2.0 * tanh_sinh(|u, v| {
        if u == 0.0 || v == 0.0 {
            return 0.0;
        }
        let ln_x = u.ln() - v.ln();
        let ln_tail = if ln_x > 100.0 {
            2.0 * ln_x - dof.ln()
        } else {
            ((2.0 * ln_x).exp() / dof).ln_1p()
        };
        (e * ln_x + log_norm - 0.5 * (dof + 1.0) * ln_tail - 2.0 * v.ln()).exp()
    })
}

/// Tanh-sinh quadrature of `f(u, 1 - u)` over `[0, 1]`. Passing the complement
/// separately keeps endpoint singularities resolvable.
pub fn tanh_sinh<F: Fn(f64, f64) -> f64>(f: F) -> f64 {
    let half_pi = std::f64::consts::FRAC_PI_2;
    let node = |t: f64| -> (f64, f64, f64) {
        let v = half_pi * t.sinh();
        let u = 1.0 / (1.0 + (-2.0 * v).exp());
        let w_c = 1.0 / (1.0 + (2.0 * v).exp());
        let weight = half_pi * t.cosh() / (2.0 * v.cosh() * v.cosh());
        (u, w_c, weight)
    };
    let t_max = 6.5;
    let mut h = 0.5;
    let mut sum = {
        let (u, c, w) = node(0.0);
        w * f(u, c)
    };
    let mut k = 1;
    while k as f64 * h <= t_max {
        for t in [k as f64 * h, -(k as f64) * h] {
            let (u, c, w) = node(t);
            if w > 0.0 {
                sum += w * f(u, c);
            }
        }
        k += 1;
    }
    let mut estimate = sum * h;
    for _ in 0..12 {
        h /= 2.0;
        let mut k = 1;
        while k as f64 * h <= t_max {
            for t in [k as f64 * h, -(k as f64) * h] {
                let (u, c, w) = node(t);
                if w > 0.0 {
                    sum += w * f(u, c);
                }
            }
            k += 2;
        }
        let next = sum * h;
        let done = (next - estimate).abs() <= 1e-13 * next.abs().max(1e-300);
        estimate = next;
        if done {
            break;
        }
    }
    estimate
}

/// Noise scale and the moment bound it certifies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Calibration {
    pub scale: f64,
    /// Upper bound on `E|mean + scale X|^eps`.
    pub certificate: f64,
}

/// Certified bound on `E|mean + scale X|^e`.
pub fn moment_certificate(mean: f64, noise: &NoiseKind, scale: f64, e: f64) -> Result<f64> {
    let m = abs_pow(mean, e);
    if noise.is_degenerate() || scale == 0.0 {
        return Ok(m);
    }
    let noise_part = abs_pow(scale, e) * noise.abs_moment(e)?;
    // (a + b)^e <= 2^{e-1}(a^e + b^e) for e >= 1 and <= a^e + b^e for e < 1
    Ok(2f64.powf(e - 1.0).max(1.0) * (m + noise_part))
}

/// Largest scale `c` with `2^{eps-1}(|mean|^eps + c^eps E|X|^eps) <= sigma`.
pub fn calibrate_moment(mean: f64, noise: &NoiseKind, spec: HeavyTailSpec) -> Result<Calibration> {
    let eps = spec.epsilon();
    let sigma = spec.sigma();
    noise.validate(eps)?;
    let m = abs_pow(mean, eps);
    if noise.is_degenerate() {
        if m > sigma {
            return Err(Error::Infeasible {
                mean_moment: m,
                limit: sigma,
            });
        }
        return Ok(Calibration {
            scale: 1.0,
            certificate: m,
        });
    }
    let limit = sigma / 2f64.powf(eps - 1.0);
    if m >= limit {
        return Err(Error::Infeasible {
            mean_moment: m,
            limit,
        });
    }
    let scale = ((limit - m) / noise.abs_moment(eps)?).powf(1.0 / eps);
    Ok(Calibration {
        scale,
        certificate: moment_certificate(mean, noise, scale, eps)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RegimeConfig {
    StochasticMab {
        means: Vec<f64>,
    },
    StochasticLinear {
        theta: Vec<f64>,
    },
    /// One mean row per round, repeated cyclically when shorter than the horizon.
    AdversarialScript {
        #[serde(default)]
        rows: Option<Vec<Vec<f64>>>,
        #[serde(default)]
        path: Option<PathBuf>,
    },
    /// One parameter vector per round, repeated cyclically; means are `<phi_a, theta_t>`.
    AdversarialLinear {
        thetas: Vec<Vec<f64>>,
    },
}

impl RegimeConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RegimeConfig::StochasticMab { .. } => "stochastic_mab",
            RegimeConfig::StochasticLinear { .. } => "stochastic_linear",
            RegimeConfig::AdversarialScript { .. } => "adversarial_script",
            RegimeConfig::AdversarialLinear { .. } => "adversarial_linear",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    #[serde(flatten)]
    pub kind: NoiseKind,
    /// Fixed scale; calibrated from the means when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
}

/// Corruption either read from a CSV schedule (`t, arm, shift`) or generated by
/// shifting the listed arms by `shift` from round 1 until the budget is spent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionConfig {
    pub budget: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arms: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvironmentConfig {
    pub regime: RegimeConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_path: Option<PathBuf>,
    pub noise: NoiseConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corruption: Option<CorruptionConfig>,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl EnvironmentConfig {
    /// Loads the feature set named by the config, if any.
    pub fn load_features(&self, base: &Path) -> Result<Option<FeatureSet>> {
        match (&self.features, &self.features_path) {
            (Some(_), Some(_)) => Err(Error::Config(
                "environment: give either `features` or `features_path`, not both".into(),
            )),
            (Some(rows), None) => FeatureSet::new(rows.clone()).map(Some),
            (None, Some(p)) => FeatureSet::from_csv_path(resolve(base, p), false).map(Some),
            (None, None) => Ok(None),
        }
    }
}

/// Additive per-round mean shifts.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorruptionSchedule {
    shifts: BTreeMap<usize, Vec<(usize, f64)>>,
    budget: f64,
}

impl CorruptionSchedule {
    /// Builds a schedule from `(t, arm, shift)` entries; rounds start at 1.
    pub fn new(entries: Vec<(usize, usize, f64)>, budget: f64, num_arms: usize) -> Result<Self> {
        if !(budget.is_finite() && budget >= 0.0) {
            return Err(invalid("budget", format!("{budget} must be >= 0")));
        }
        let mut shifts: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
        for (t, arm, shift) in entries {
            if t == 0 || arm >= num_arms || !shift.is_finite() {
                return Err(Error::Config(format!(
                    "corruption entry ({t}, {arm}, {shift}) is out of range"
                )));
            }
            let row = shifts.entry(t).or_default();
            match row.iter_mut().find(|(a, _)| *a == arm) {
                Some(entry) => entry.1 += shift,
                None => row.push((arm, shift)),
            }
        }
        let schedule = Self { shifts, budget };
        let used = schedule.total_shift();
        if used > budget * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Config(format!(
                "corruption schedule uses {used}, above its budget {budget}"
            )));
        }
        Ok(schedule)
    }

    /// Shifts every arm in `arms` by `shift` from round 1 on until `budget` is
    /// used up, with the remainder applied in the last round. Each round costs
    /// `|shift|`.
    pub fn front_loaded(arms: &[usize], shift: f64, budget: f64, num_arms: usize) -> Result<Self> {
        if !(shift.is_finite() && shift != 0.0) {
            return Err(invalid("shift", format!("{shift} must be nonzero")));
        }
        if arms.is_empty() {
            return Err(invalid("arms", "no arms to corrupt"));
        }
        let mut entries = Vec::new();
        let full = (budget / shift.abs()).floor() as usize;
        for t in 1..=full {
            entries.extend(arms.iter().map(|&a| (t, a, shift)));
        }
        let rest = budget - full as f64 * shift.abs();
        if rest > 0.0 {
            entries.extend(arms.iter().map(|&a| (full + 1, a, rest.copysign(shift))));
        }
        Self::new(entries, budget, num_arms)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, budget: f64, num_arms: usize) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .comment(Some(b'#'))
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec.map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            if line == 0 && rec.get(0).is_some_and(|f| f.parse::<usize>().is_err()) {
                continue;
            }
            let field = |i: usize| {
                rec.get(i).ok_or_else(|| {
                    Error::Config(format!(
                        "{}: row {} needs t, arm, shift",
                        path.display(),
                        line + 1
                    ))
                })
            };
            let bad = |what: &str| {
                Error::Config(format!("{}: row {}: bad {what}", path.display(), line + 1))
            };
            let t = field(0)?.parse().map_err(|_| bad("round"))?;
            let arm = field(1)?.parse().map_err(|_| bad("arm"))?;
            let shift = field(2)?.parse().map_err(|_| bad("shift"))?;
            entries.push((t, arm, shift));
        }
        Self::new(entries, budget, num_arms)
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    /// `sum_t max_a |shift_{t,a}|` over the whole schedule.
    pub fn total_shift(&self) -> f64 {
        self.consumed_through(usize::MAX)
    }

    /// Budget consumed in rounds `1..=t`.
    pub fn consumed_through(&self, t: usize) -> f64 {
        self.shifts
            .range(..=t)
            .map(|(_, row)| row.iter().map(|(_, s)| s.abs()).fold(0.0, f64::max))
            .sum()
    }

    pub fn apply(&self, t: usize, means: &mut [f64]) {
        if let Some(row) = self.shifts.get(&t) {
            for &(arm, shift) in row {
                means[arm] += shift;
            }
        }
    }

    /// Per-arm extreme shifts `(min, max)` including zero.
    fn extremes(&self, num_arms: usize) -> Vec<(f64, f64)> {
        let mut out = vec![(0.0, 0.0); num_arms];
        for row in self.shifts.values() {
            for &(arm, s) in row {
                out[arm].0 = f64::min(out[arm].0, s);
                out[arm].1 = f64::max(out[arm].1, s);
            }
        }
        out
    }
}

/// Mean losses as a function of the round and the actions played so far.
pub type AdversaryFn = dyn Fn(usize, &[usize]) -> Vec<f64> + Send + Sync;

#[derive(Clone)]
enum MeanSource {
    Fixed(Vec<f64>),
    Script(Vec<Vec<f64>>),
    Callback(Arc<AdversaryFn>),
}

impl fmt::Debug for MeanSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanSource::Fixed(m) => f.debug_tuple("Fixed").field(m).finish(),
            MeanSource::Script(r) => f.debug_tuple("Script").field(&r.len()).finish(),
            MeanSource::Callback(_) => f.write_str("Callback"),
        }
    }
}

/// A loss-generating environment. Immutable once built; randomness comes from
/// the generator passed to [`Environment::sample_loss`].
#[derive(Debug, Clone)]
pub struct Environment {
    spec: HeavyTailSpec,
    num_arms: usize,
    regime: &'static str,
    features: Option<FeatureSet>,
    means: MeanSource,
    noise: NoiseKind,
    scale: f64,
    calibrated: bool,
    corruption: Option<CorruptionSchedule>,
    /// Bound on `|mean|` used for calibration when the means are not known up front.
    mean_bound: Option<f64>,
}

impl Environment {
    pub fn from_config(cfg: &EnvironmentConfig, spec: HeavyTailSpec, base: &Path) -> Result<Self> {
        let features = cfg.load_features(base)?;
        let need = |what: &str| {
            features
                .clone()
                .ok_or_else(|| Error::Config(format!("environment: {what} regime needs features")))
        };
        let dim_check = |theta: &[f64], f: &FeatureSet| {
            if theta.len() != f.dim() {
                Err(Error::DimensionMismatch {
                    expected: f.dim(),
                    got: theta.len(),
                })
            } else {
                Ok(linear_means(f, theta))
            }
        };
        let means = match &cfg.regime {
            RegimeConfig::StochasticMab { means } => MeanSource::Fixed(means.clone()),
            RegimeConfig::StochasticLinear { theta } => {
                MeanSource::Fixed(dim_check(theta, &need("stochastic_linear")?)?)
            }
            RegimeConfig::AdversarialScript { rows, path } => match (rows, path) {
                (Some(r), None) => MeanSource::Script(r.clone()),
                (None, Some(p)) => MeanSource::Script(read_rows(&resolve(base, p))?),
                _ => {
                    return Err(Error::Config(
                        "adversarial_script: give exactly one of `rows` or `path`".into(),
                    ))
                }
            },
            RegimeConfig::AdversarialLinear { thetas } => {
                let f = need("adversarial_linear")?;
                MeanSource::Script(
                    thetas
                        .iter()
                        .map(|th| dim_check(th, &f))
                        .collect::<Result<_>>()?,
                )
            }
        };
        let num_arms = match &means {
            MeanSource::Fixed(m) => m.len(),
            MeanSource::Script(rows) => rows.first().map_or(0, Vec::len),
            MeanSource::Callback(_) => unreachable!(),
        };
        if let Some(f) = &features {
            if f.num_arms() != num_arms {
                return Err(Error::DimensionMismatch {
                    expected: f.num_arms(),
                    got: num_arms,
                });
            }
        }
        let corruption = match &cfg.corruption {
            None => None,
            Some(c) => Some(match (&c.schedule_path, &c.arms, c.shift) {
                (Some(p), None, None) => {
                    CorruptionSchedule::from_csv_path(resolve(base, p), c.budget, num_arms)?
                }
                (None, Some(arms), Some(shift)) => {
                    CorruptionSchedule::front_loaded(arms, shift, c.budget, num_arms)?
                }
                (None, None, None) if c.budget == 0.0 => CorruptionSchedule::default(),
                _ => {
                    return Err(Error::Config(
                        "corruption: give either `schedule_path` or both `arms` and `shift`".into(),
                    ))
                }
            }),
        };
        Self::build(
            spec,
            num_arms,
            cfg.regime.name(),
            features,
            means,
            cfg.noise.kind,
            cfg.noise.scale,
            corruption,
            None,
        )
    }

    /// Stochastic MAB environment with calibrated noise.
    pub fn stochastic_mab(means: Vec<f64>, noise: NoiseKind, spec: HeavyTailSpec) -> Result<Self> {
        let k = means.len();
        Self::build(
            spec,
            k,
            "stochastic_mab",
            None,
            MeanSource::Fixed(means),
            noise,
            None,
            None,
            None,
        )
    }

    /// Scripted means, cycled when shorter than the run.
    pub fn scripted(rows: Vec<Vec<f64>>, noise: NoiseKind, spec: HeavyTailSpec) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        Self::build(
            spec,
            k,
            "adversarial_script",
            None,
            MeanSource::Script(rows),
            noise,
            None,
            None,
            None,
        )
    }

    /// Means produced by `adversary(t, actions_so_far)`. Calibration assumes
    /// `|mean| <= mean_bound`; larger means are rejected when sampled.
    pub fn with_adversary(
        num_arms: usize,
        adversary: Arc<AdversaryFn>,
        mean_bound: f64,
        noise: NoiseKind,
        spec: HeavyTailSpec,
    ) -> Result<Self> {
        Self::build(
            spec,
            num_arms,
            "callback",
            None,
            MeanSource::Callback(adversary),
            noise,
            None,
            None,
            Some(mean_bound),
        )
    }

    /// Replaces the corruption schedule.
    pub fn with_corruption(mut self, schedule: CorruptionSchedule) -> Result<Self> {
        self.corruption = Some(schedule);
        self.recalibrate(None)?;
        Ok(self)
    }

    /// Uses a fixed noise scale instead of the calibrated one.
    pub fn with_scale(mut self, scale: f64) -> Result<Self> {
        self.recalibrate(Some(scale))?;
        Ok(self)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        spec: HeavyTailSpec,
        num_arms: usize,
        regime: &'static str,
        features: Option<FeatureSet>,
        means: MeanSource,
        noise: NoiseKind,
        scale: Option<f64>,
        corruption: Option<CorruptionSchedule>,
        mean_bound: Option<f64>,
    ) -> Result<Self> {
        if num_arms < 2 {
            return Err(Error::Config(format!(
                "environment needs >= 2 arms, got {num_arms}"
            )));
        }
        match &means {
            MeanSource::Fixed(m) if m.iter().any(|x| !x.is_finite()) => {
                return Err(Error::NonFinite("means"))
            }
            MeanSource::Script(rows) => {
                if rows.is_empty() {
                    return Err(Error::Config("mean script is empty".into()));
                }
                if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != num_arms) {
                    return Err(Error::Config(format!(
                        "mean script row {} has {} entries, expected {num_arms}",
                        i + 1,
                        r.len()
                    )));
                }
                if rows.iter().flatten().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite("mean script"));
                }
            }
            _ => {}
        }
        noise.validate(spec.epsilon())?;
        let mut env = Self {
            spec,
            num_arms,
            regime,
            features,
            means,
            noise,
            scale: 1.0,
            calibrated: true,
            corruption,
            mean_bound,
        };
        env.recalibrate(scale)?;
        Ok(env)
    }

    fn recalibrate(&mut self, scale: Option<f64>) -> Result<()> {
        let worst = self.max_abs_mean();
        match scale {
            Some(s) => {
                if !(s.is_finite() && s >= 0.0) {
                    return Err(invalid("scale", format!("{s} must be >= 0")));
                }
                self.scale = s;
                self.calibrated = false;
            }
            None => {
                self.scale = calibrate_moment(worst, &self.noise, self.spec)?.scale;
                self.calibrated = true;
            }
        }
        Ok(())
    }

    /// Largest `|mean|` any arm can take in any round, corruption included.
    fn max_abs_mean(&self) -> f64 {
        let base: Vec<(f64, f64)> = match &self.means {
            MeanSource::Fixed(m) => m.iter().map(|&x| (x, x)).collect(),
            MeanSource::Script(rows) => (0..self.num_arms)
                .map(|a| {
                    rows.iter()
                        .fold((f64::INFINITY, f64::NEG_INFINITY), |acc, r| {
                            (acc.0.min(r[a]), acc.1.max(r[a]))
                        })
                })
                .collect(),
            MeanSource::Callback(_) => {
                let b = self.mean_bound.unwrap_or(0.0);
                vec![(-b, b); self.num_arms]
            }
        };
        let shifts = self
            .corruption
            .as_ref()
            .map_or(vec![(0.0, 0.0); self.num_arms], |c| {
                c.extremes(self.num_arms)
            });
        base.iter()
            .zip(&shifts)
            .map(|(&(lo, hi), &(slo, shi))| (lo + slo).abs().max((hi + shi).abs()))
            .fold(0.0, f64::max)
    }

    pub fn spec(&self) -> HeavyTailSpec {
        self.spec
    }

    pub fn num_arms(&self) -> usize {
        self.num_arms
    }

    pub fn regime_name(&self) -> &'static str {
        self.regime
    }

    pub fn features(&self) -> Option<&FeatureSet> {
        self.features.as_ref()
    }

    pub fn noise(&self) -> NoiseKind {
        self.noise
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Whether the scale came from calibration rather than the config.
    pub fn is_calibrated(&self) -> bool {
        self.calibrated
    }

    pub fn corruption(&self) -> Option<&CorruptionSchedule> {
        self.corruption.as_ref()
    }

    /// Mean loss of every arm in round `t` (1-based), corruption included.
    /// `history` holds the arms played in rounds `1..t`.
    pub fn expected_losses(&self, t: usize, history: &[usize]) -> Result<Vec<f64>> {
        let mut m = match &self.means {
            MeanSource::Fixed(m) => m.clone(),
            MeanSource::Script(rows) => rows[(t.max(1) - 1) % rows.len()].clone(),
            MeanSource::Callback(f) => {
                let m = f(t, history);
                if m.len() != self.num_arms {
                    return Err(Error::DimensionMismatch {
                        expected: self.num_arms,
                        got: m.len(),
                    });
                }
                let bound = self.mean_bound.unwrap_or(0.0);
                if m.iter().any(|x| !(x.abs() <= bound)) {
                    return Err(Error::InvariantViolation(format!(
                        "adversary mean outside the calibrated bound {bound}"
                    )));
                }
                m
            }
        };
        if let Some(c) = &self.corruption {
            c.apply(t, &mut m);
        }
        Ok(m)
    }

    /// Draws `mean + scale X`. One noise draw is consumed per call regardless of
    /// the arm, so noise streams line up across policies.
    pub fn sample_loss<R: Rng + ?Sized>(&self, means: &[f64], arm: usize, rng: &mut R) -> f64 {
        let x = self.noise.sample(rng);
        means[arm] + self.scale * x
    }

    /// Per-arm upper bound on `E|loss|^e` over all rounds.
    pub fn certificates(&self, e: f64) -> Result<Vec<f64>> {
        let rows: Vec<Vec<f64>> = match &self.means {
            MeanSource::Fixed(m) => {
                let mut rows = vec![m.clone()];
                if let Some(c) = &self.corruption {
                    for &t in c.shifts.keys() {
                        let mut r = m.clone();
                        c.apply(t, &mut r);
                        rows.push(r);
                    }
                }
                rows
            }
            MeanSource::Script(rows) => {
                let mut out = rows.clone();
                if let Some(c) = &self.corruption {
                    for &t in c.shifts.keys() {
                        let mut r = rows[(t - 1) % rows.len()].clone();
                        c.apply(t, &mut r);
                        out.push(r);
                    }
                }
                out
            }
            MeanSource::Callback(_) => vec![vec![self.max_abs_mean(); self.num_arms]],
        };
        (0..self.num_arms)
            .map(|a| {
                rows.iter()
                    .map(|r| moment_certificate(r[a], &self.noise, self.scale, e))
                    .try_fold(0.0, |acc: f64, x| x.map(|x| acc.max(x)))
            })
            .collect()
    }

    /// Largest certificate at the spec's `eps`.
    pub fn max_certificate(&self) -> Result<f64> {
        Ok(self
            .certificates(self.spec.epsilon())?
            .into_iter()
            .fold(0.0, f64::max))
    }

    /// Fails with `Infeasible` unless every arm's certificate is within `sigma`.
    pub fn check_certified(&self) -> Result<()> {
        let worst = self.max_certificate()?;
        if worst > self.spec.sigma() * (1.0 + 1e-12) {
            return Err(Error::Infeasible {
                mean_moment: worst,
                limit: self.spec.sigma(),
            });
        }
        Ok(())
    }

    /// Gaps and corruption budget for fixed-mean regimes; `None` for scripts
    /// and callbacks.
    pub fn self_bounding_certificate(&self) -> Result<Option<GapProfile>> {
        match &self.means {
            MeanSource::Fixed(m) => {
                let c = self.corruption.as_ref().map_or(0.0, |c| c.budget);
                GapProfile::from_means(m, c).map(Some)
            }
            _ => Ok(None),
        }
    }
}

fn linear_means(f: &FeatureSet, theta: &[f64]) -> Vec<f64> {
    (0..f.num_arms())
        .map(|a| {
            f.matrix()
                .row(a)
                .iter()
                .zip(theta)
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect()
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let row: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse::<f64>).collect();
        rows.push(row.map_err(|_| {
            Error::Config(format!("{}: row {} is not numeric", path.display(), i + 1))
        })?);
    }
    Ok(rows)
}

/// Monte Carlo estimate of `E|loss|^e` for one arm and round: `(mean, stderr)`.
pub fn moment_monte_carlo<R: Rng + ?Sized>(
    env: &Environment,
    t: usize,
    arm: usize,
    e: f64,
    n: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if n < 2 {
        return Err(invalid("n", "need at least two samples"));
    }
    let means = env.expected_losses(t, &[])?;
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n {
        let v = abs_pow(env.sample_loss(&means, arm, rng), e);
        sum += v;
        sum_sq += v * v;
    }
    let nf = n as f64;
    let mean = sum / nf;
    let var = ((sum_sq - nf * mean * mean) / (nf - 1.0)).max(0.0);
    Ok((mean, (var / nf).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(eps: f64, sigma: f64) -> HeavyTailSpec {
        HeavyTailSpec::new(eps, sigma).unwrap()
    }

    #[test]
    fn pareto_moment() {
        let n = NoiseKind::SymmetricPareto { shape: 3.0 };
        assert_eq!(n.abs_moment(1.5).unwrap(), 2.0);
    }

    #[test]
    fn calibration_example() {
        let n = NoiseKind::SymmetricPareto { shape: 3.0 };
        let c = calibrate_moment(0.0, &n, spec(2.0, 1.0)).unwrap();
        assert!((c.scale - (1.0f64 / 6.0).sqrt()).abs() < 1e-12);
        assert!((c.certificate - 1.0).abs() < 1e-12);
    }

    #[test]
    fn calibration_infeasible() {
        let n = NoiseKind::SymmetricPareto { shape: 3.0 };
        assert!(matches!(
            calibrate_moment(0.8, &n, spec(2.0, 1.0)),
            Err(Error::Infeasible { .. })
        ));
    }

    #[test]
    fn degenerate_noise_certificate_is_mean_moment() {
        let n = NoiseKind::Bounded { half_width: 0.0 };
        let c = calibrate_moment(0.5, &n, spec(1.5, 1.0)).unwrap();
        assert!((c.certificate - 0.5f64.powf(1.5)).abs() < 1e-15);
        let env = Environment::stochastic_mab(vec![0.5, -0.2], n, spec(1.5, 1.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = env.expected_losses(1, &[]).unwrap();
        assert_eq!(env.sample_loss(&m, 0, &mut rng), 0.5);
    }

    #[test]
    fn bounded_quadrature_matches_closed_form() {
        let n = NoiseKind::Bounded { half_width: 2.0 };
        for e in [1.1, 1.5, 2.0] {
            let exact = 2f64.powf(e) / (1.0 + e);
            assert!((n.abs_moment(e).unwrap() - exact).abs() < 1e-12 * exact);
        }
    }

    #[test]
    fn student_t_quadrature_matches_closed_form() {
        for &(dof, e) in &[(3.0, 1.5), (2.5, 2.0), (10.0, 1.2), (2.2, 2.0)] {
            let q = NoiseKind::StudentT { dof }.abs_moment(e).unwrap();
            let c = student_t_abs_moment_closed(dof, e);
            assert!((q - c).abs() < 1e-8 * c, "dof {dof} e {e}: {q} vs {c}");
        }
        // Var of t_3 is 3
        assert!((student_t_abs_moment_closed(3.0, 2.0) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn linear_means_example() {
        let cfg = EnvironmentConfig {
            regime: RegimeConfig::StochasticLinear { theta: vec![0.3] },
            features: Some(vec![vec![0.0], vec![1.0]]),
            features_path: None,
            noise: NoiseConfig {
                kind: NoiseKind::Bounded { half_width: 0.1 },
                scale: None,
            },
            corruption: None,
        };
        let env = Environment::from_config(&cfg, spec(2.0, 1.0), Path::new(".")).unwrap();
        assert_eq!(env.expected_losses(5, &[]).unwrap(), vec![0.0, 0.3]);
    }

    #[test]
    fn corruption_accounting() {
        let entries = (1..=10).map(|t| (t, 0, 0.1)).collect();
        let c = CorruptionSchedule::new(entries, 1.0, 2).unwrap();
        assert!((c.total_shift() - 1.0).abs() < 1e-12);
        assert!((c.consumed_through(5) - 0.5).abs() < 1e-12);
        let over = (1..=11).map(|t| (t, 0, 0.1)).collect();
        assert!(CorruptionSchedule::new(over, 1.0, 2).is_err());

        let f = CorruptionSchedule::front_loaded(&[1], 0.4, 1.0, 3).unwrap();
        assert!((f.total_shift() - 1.0).abs() < 1e-12);
        let mut m = vec![0.0; 3];
        f.apply(3, &mut m);
        assert!((m[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn gap_profiles() {
        let n = NoiseKind::Bounded { half_width: 0.1 };
        let env = Environment::stochastic_mab(vec![0.1, 0.3, 0.3], n, spec(2.0, 1.0)).unwrap();
        let g = env.self_bounding_certificate().unwrap().unwrap();
        assert_eq!(g.optimal_arm, 0);
        assert_eq!(g.corruption_budget, 0.0);
        assert!((g.gaps[1] - 0.2).abs() < 1e-15);
        let c = env
            .clone()
            .with_corruption(CorruptionSchedule::front_loaded(&[1], 0.1, 5.0, 3).unwrap())
            .unwrap();
        assert_eq!(
            c.self_bounding_certificate()
                .unwrap()
                .unwrap()
                .corruption_budget,
            5.0
        );
        let tie = Environment::stochastic_mab(vec![0.1, 0.1], n, spec(2.0, 1.0)).unwrap();
        assert_eq!(
            tie.self_bounding_certificate().unwrap_err(),
            Error::NonUniqueOptimum(0, 1)
        );
        let s = Environment::scripted(vec![vec![0.0, 0.5]], n, spec(2.0, 1.0)).unwrap();
        assert_eq!(s.self_bounding_certificate().unwrap(), None);
    }

    #[test]
    fn script_cycles() {
        let n = NoiseKind::Bounded { half_width: 0.0 };
        let s =
            Environment::scripted(vec![vec![0.0, 0.5], vec![0.5, 0.0]], n, spec(2.0, 1.0)).unwrap();
        assert_eq!(s.expected_losses(1, &[]).unwrap(), vec![0.0, 0.5]);
        assert_eq!(s.expected_losses(2, &[]).unwrap(), vec![0.5, 0.0]);
        assert_eq!(s.expected_losses(3, &[]).unwrap(), vec![0.0, 0.5]);
    }

    #[test]
    fn calibrated_certificates_within_sigma() {
        let n = NoiseKind::StudentT { dof: 3.0 };
        let env = Environment::stochastic_mab(vec![0.2, -0.4, 0.0], n, spec(1.5, 2.0)).unwrap();
        env.check_certified().unwrap();
        let scale = env.scale();
        let doctored = env.with_scale(10.0 * scale).unwrap();
        assert!(doctored.check_certified().is_err());
    }
}

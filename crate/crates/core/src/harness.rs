//! Experiment runner: seeded repetitions of a policy against an environment,
//! pseudo-regret at checkpoints, invariant monitors, and CSV / JSON output.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{Environment, EnvironmentConfig};
use crate::error::{Error, Result};
use crate::estimators::{cumulative, sample_index};
use crate::policies::{Policy, PolicyConfig};
use crate::types::{HeavyTailSpec, InvariantFlags, RoundRecord, SimplexDistribution};

/// Version accepted in the `schema_version` field.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    /// Count rounds where `h_t > factor * h_{t-1} + 1e-12`.
    #[serde(default = "yes")]
    pub entropy_growth: bool,
    #[serde(default = "eight")]
    pub entropy_factor: f64,
}

fn yes() -> bool {
    true
}

fn eight() -> f64 {
    8.0
}

fn one() -> usize {
    1
}

impl Default for MonitorConfig {
    fn default() -> Self {
        Self {
            entropy_growth: true,
            entropy_factor: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_id: Option<String>,
    pub epsilon: f64,
    pub sigma: f64,
    pub horizon: usize,
    #[serde(default = "one")]
    pub repetitions: usize,
    #[serde(default)]
    pub seed: u64,
    /// Rounds at which regret is recorded; powers of two up to the horizon by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoints: Option<Vec<usize>>,
    pub policy: PolicyConfig,
    pub environment: EnvironmentConfig,
    #[serde(default)]
    pub monitors: MonitorConfig,
    /// Fixed `(arm, loss)` pairs fed to the policy by `trace` instead of sampling.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<Vec<(usize, f64)>>,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses JSON; syntax and schema errors carry line and column.
    pub fn from_json_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: Self = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("line {}, column {}: {e}", e.line(), e.column())))?;
        cfg.base_dir = base_dir.into();
        Ok(cfg)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json_str(&text, base).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn spec(&self) -> Result<HeavyTailSpec> {
        HeavyTailSpec::new(self.epsilon, self.sigma)
    }

    pub fn run_id(&self) -> String {
        self.run_id.clone().unwrap_or_else(|| {
            format!(
                "{}-{}-s{}",
                self.policy.name(),
                self.environment.regime.name(),
                self.seed
            )
        })
    }

    /// Checks the config and builds the environment. Every error here is a
    /// configuration problem.
    pub fn prepare(&self) -> Result<Prepared> {
        let config_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let spec = self.spec().map_err(config_err)?;
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        let checkpoints = match &self.checkpoints {
            Some(c) => {
                if c.is_empty()
                    || c.windows(2).any(|w| w[0] >= w[1])
                    || c[0] == 0
                    || *c.last().unwrap() > self.horizon
                {
                    return Err(Error::Config(
                        "checkpoints must be strictly increasing within 1..=horizon".into(),
                    ));
                }
                c.clone()
            }
            None => default_checkpoints(self.horizon),
        };
        if !(self.monitors.entropy_factor.is_finite() && self.monitors.entropy_factor > 0.0) {
            return Err(Error::Config(
                "monitors.entropy_factor must be positive".into(),
            ));
        }
        let env = Environment::from_config(&self.environment, spec, &self.base_dir)
            .map_err(config_err)?;
        if self.policy.needs_features() && env.features().is_none() {
            return Err(Error::Config(format!(
                "policy {} needs `environment.features`",
                self.policy.name()
            )));
        }
        // build once so parameter problems surface as configuration errors
        self.policy
            .build(spec, env.num_arms(), env.features(), self.horizon)
            .map_err(config_err)?;
        Ok(Prepared {
            config: self.clone(),
            spec,
            env,
            checkpoints,
        })
    }
}

/// Powers of two below `horizon`, then `horizon` itself.
pub fn default_checkpoints(horizon: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..usize::BITS)
        .map(|i| 1usize << i)
        .take_while(|&c| c < horizon)
        .collect();
    out.push(horizon);
    out
}

/// A validated config with its environment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub spec: HeavyTailSpec,
    pub env: Environment,
    pub checkpoints: Vec<usize>,
}

impl Prepared {
    /// Same experiment with a different environment (for example one with a
    /// callback adversary).
    pub fn with_environment(mut self, env: Environment) -> Self {
        self.env = env;
        self
    }

    fn build_policy(&self) -> Result<Box<dyn Policy>> {
        self.config.policy.build(
            self.spec,
            self.env.num_arms(),
            self.env.features(),
            self.config.horizon,
        )
    }
}

/// `<p, m> - m_comparator`.
pub fn pseudo_regret_increment(p: &SimplexDistribution, means: &[f64], comparator: usize) -> f64 {
    p.dot(means) - means[comparator]
}

/// Aggregated regret over repetitions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegretCurve {
    pub checkpoints: Vec<usize>,
    pub mean_regret: Vec<f64>,
    pub stderr: Vec<f64>,
    /// `repetitions x checkpoints`, in repetition order.
    pub per_seed: Vec<Vec<f64>>,
    /// Violation counts per invariant flag, summed over repetitions.
    pub invariant_summary: BTreeMap<String, u64>,
    pub violations_total: u64,
    /// Rounds where the penalty grew faster than the monitor factor; reported,
    /// not counted as violations.
    pub entropy_growth_events: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RepetitionOutcome {
    pub regret: Vec<f64>,
    pub violations: [u64; 5],
    pub entropy_growth_events: u64,
    /// Arm with the smallest summed mean over the full run.
    pub comparator: usize,
}

/// Runs one repetition with `seed`. `observer` sees every round's record and
/// mean vector.
pub fn run_repetition(
    prep: &Prepared,
    seed: u64,
    observer: &mut dyn FnMut(&RoundRecord, &[f64]),
) -> Result<RepetitionOutcome> {
    let cfg = &prep.config;
    let env = &prep.env;
    env.check_certified()?;
    let mut policy = prep.build_policy()?;
    let mut policy_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let k = env.num_arms();
    let mut history = Vec::with_capacity(cfg.horizon);
    let mut played = 0.0;
    let mut arm_sums = vec![0.0; k];
    let mut regret = Vec::with_capacity(prep.checkpoints.len());
    let mut next_cp = 0;
    let mut violations = [0u64; 5];
    let mut entropy_events = 0;
    let mut last_h: Option<f64> = None;

    for t in 1..=cfg.horizon {
        let p = policy.distribution()?;
        let means = env.expected_losses(t, &history)?;
        played += p.dot(&means);
        for (s, m) in arm_sums.iter_mut().zip(&means) {
            *s += m;
        }
        let arm = sample_index(&cumulative(p.weights()), policy_rng.random::<f64>());
        let loss = env.sample_loss(&means, arm, &mut noise_rng);
        let rec = policy.observe(arm, loss)?;
        for (count, ok) in violations.iter_mut().zip(rec.invariant_flags.as_array()) {
            if !ok {
                *count += 1;
            }
        }
        if let Some(h) = rec.entropy {
            if cfg.monitors.entropy_growth {
                if let Some(prev) = last_h {
                    if h > cfg.monitors.entropy_factor * prev + 1e-12 {
                        entropy_events += 1;
                    }
                }
            }
            last_h = Some(h);
        }
        observer(&rec, &means);
        history.push(arm);
        if next_cp < prep.checkpoints.len() && prep.checkpoints[next_cp] == t {
            let best = arm_sums.iter().copied().fold(f64::INFINITY, f64::min);
            regret.push(played - best);
            next_cp += 1;
        }
    }
    let comparator = arm_sums
        .iter()
        .enumerate()
        .fold(0, |best, (a, &s)| if s < arm_sums[best] { a } else { best });
    Ok(RepetitionOutcome {
        regret,
        violations,
        entropy_growth_events: entropy_events,
        comparator,
    })
}

/// Runs all repetitions (concurrently on the current rayon pool) with seeds
/// `seed + r` and aggregates them in repetition order.
pub fn run_experiment(prep: &Prepared) -> Result<RegretCurve> {
    let cfg = &prep.config;
    let outcomes: Vec<Result<RepetitionOutcome>> = (0..cfg.repetitions)
        .into_par_iter()
        .map(|r| run_repetition(prep, cfg.seed.wrapping_add(r as u64), &mut |_, _| {}))
        .collect();
    let mut reps = Vec::with_capacity(outcomes.len());
    let mut failures = Vec::new();
    for (r, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => reps.push(o),
            Err(e) => failures.push(format!("repetition {r}: {e}")),
        }
    }
    if !failures.is_empty() {
        return Err(Error::InvariantViolation(format!(
            "{} of {} repetitions failed; {}",
            failures.len(),
            cfg.repetitions,
            failures.join("; ")
        )));
    }
    Ok(aggregate(&prep.checkpoints, &reps))
}

fn aggregate(checkpoints: &[usize], reps: &[RepetitionOutcome]) -> RegretCurve {
    let n = reps.len() as f64;
    let mut mean_regret = Vec::with_capacity(checkpoints.len());
    let mut stderr = Vec::with_capacity(checkpoints.len());
    for i in 0..checkpoints.len() {
        let mean = reps.iter().map(|r| r.regret[i]).sum::<f64>() / n;
        let se = if reps.len() > 1 {
            let var = reps
                .iter()
                .map(|r| (r.regret[i] - mean).powi(2))
                .sum::<f64>()
                / (n - 1.0);
            (var / n).sqrt()
        } else {
            0.0
        };
        mean_regret.push(mean);
        stderr.push(se);
    }
    let mut invariant_summary = BTreeMap::new();
    let mut total = 0;
    for (j, name) in InvariantFlags::NAMES.iter().enumerate() {
        let c: u64 = reps.iter().map(|r| r.violations[j]).sum();
        total += c;
        invariant_summary.insert((*name).to_string(), c);
    }
    RegretCurve {
        checkpoints: checkpoints.to_vec(),
        mean_regret,
        stderr,
        per_seed: reps.iter().map(|r| r.regret.clone()).collect(),
        invariant_summary,
        violations_total: total,
        entropy_growth_events: reps.iter().map(|r| r.entropy_growth_events).sum(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScalingRow {
    pub horizon: usize,
    pub mean_regret: f64,
    pub stderr: f64,
    /// `mean_regret / T^{1/eps}`.
    pub ratio_t_root: f64,
    /// `mean_regret / ln T`.
    pub ratio_log: f64,
    pub violations_total: u64,
    pub curve: RegretCurve,
}

/// Reruns the experiment once per horizon.
pub fn scaling_probe(template: &ExperimentConfig, horizons: &[usize]) -> Result<Vec<ScalingRow>> {
    if horizons.len() < 3 || horizons.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(
            "scaling probe needs at least three increasing horizons".into(),
        ));
    }
    let eps = template.epsilon;
    horizons
        .iter()
        .map(|&h| {
            let mut cfg = template.clone();
            cfg.horizon = h;
            cfg.checkpoints = Some(match &template.checkpoints {
                Some(c) => {
                    let mut c: Vec<usize> = c.iter().copied().filter(|&x| x < h).collect();
                    c.push(h);
                    c
                }
                None => default_checkpoints(h),
            });
            let curve = run_experiment(&cfg.prepare()?)?;
            let mean_regret = *curve.mean_regret.last().unwrap();
            Ok(ScalingRow {
                horizon: h,
                mean_regret,
                stderr: *curve.stderr.last().unwrap(),
                ratio_t_root: mean_regret / (h as f64).powf(1.0 / eps),
                ratio_log: mean_regret / (h as f64).ln(),
                violations_total: curve.violations_total,
                curve,
            })
        })
        .collect()
}

/// Per-round records of one repetition. With a `script` in the config the
/// scripted `(arm, loss)` pairs replace sampling.
pub fn trace(prep: &Prepared, seed: u64) -> Result<Vec<RoundRecord>> {
    match &prep.config.script {
        Some(script) => {
            let mut policy = prep.build_policy()?;
            script
                .iter()
                .map(|&(arm, loss)| {
                    policy.distribution()?;
                    policy.observe(arm, loss)
                })
                .collect()
        }
        None => {
            let mut out = Vec::with_capacity(prep.config.horizon);
            run_repetition(prep, seed, &mut |rec, _| out.push(rec.clone()))?;
            Ok(out)
        }
    }
}

pub const CSV_HEADER: [&str; 9] = [
    "run_id",
    "policy",
    "regime",
    "epsilon",
    "sigma",
    "T_checkpoint",
    "mean_regret",
    "stderr",
    "violations_total",
];

fn io_err(e: impl std::fmt::Display) -> Error {
    Error::Io(e.to_string())
}

/// Writes one row per checkpoint.
pub fn write_curve_csv<W: Write>(w: W, cfg: &ExperimentConfig, curve: &RegretCurve) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_HEADER).map_err(io_err)?;
    for row in curve_rows(cfg, curve) {
        out.write_record(&row).map_err(io_err)?;
    }
    out.flush().map_err(io_err)
}

fn curve_rows(cfg: &ExperimentConfig, curve: &RegretCurve) -> Vec<Vec<String>> {
    (0..curve.checkpoints.len())
        .map(|i| {
            vec![
                cfg.run_id(),
                cfg.policy.name().to_string(),
                cfg.environment.regime.name().to_string(),
                cfg.epsilon.to_string(),
                cfg.sigma.to_string(),
                curve.checkpoints[i].to_string(),
                curve.mean_regret[i].to_string(),
                curve.stderr[i].to_string(),
                curve.violations_total.to_string(),
            ]
        })
        .collect()
}

/// Sweep CSV: the run columns plus the horizon `T` and the two scaling ratios
/// of each checkpoint.
pub fn write_sweep_csv<W: Write>(w: W, cfg: &ExperimentConfig, rows: &[ScalingRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<&str> = CSV_HEADER.to_vec();
    header.insert(5, "T");
    header.extend(["ratio_t_root", "ratio_log"]);
    out.write_record(&header).map_err(io_err)?;
    for row in rows {
        for (i, mut rec) in curve_rows(cfg, &row.curve).into_iter().enumerate() {
            let t = row.curve.checkpoints[i] as f64;
            let m = row.curve.mean_regret[i];
            rec.insert(5, row.horizon.to_string());
            rec.push((m / t.powf(1.0 / cfg.epsilon)).to_string());
            rec.push(if t > 1.0 {
                (m / t.ln()).to_string()
            } else {
                String::new()
            });
            out.write_record(&rec).map_err(io_err)?;
        }
    }
    out.flush().map_err(io_err)
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary<'a> {
    pub run_id: String,
    pub policy: &'static str,
    pub regime: &'static str,
    pub epsilon: f64,
    pub sigma: f64,
    pub noise_scale: f64,
    pub rows: Vec<SummaryRow>,
    pub invariant_summary: &'a BTreeMap<String, u64>,
    pub violations_total: u64,
    pub entropy_growth_events: u64,
    pub config: &'a ExperimentConfig,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    #[serde(rename = "T_checkpoint")]
    pub checkpoint: usize,
    pub mean_regret: f64,
    pub stderr: f64,
}

pub fn summary<'a>(prep: &'a Prepared, curve: &'a RegretCurve) -> Summary<'a> {
    let cfg = &prep.config;
    Summary {
        run_id: cfg.run_id(),
        policy: cfg.policy.name(),
        regime: cfg.environment.regime.name(),
        epsilon: cfg.epsilon,
        sigma: cfg.sigma,
        noise_scale: prep.env.scale(),
        rows: (0..curve.checkpoints.len())
            .map(|i| SummaryRow {
                checkpoint: curve.checkpoints[i],
                mean_regret: curve.mean_regret[i],
                stderr: curve.stderr[i],
            })
            .collect(),
        invariant_summary: &curve.invariant_summary,
        violations_total: curve.violations_total,
        entropy_growth_events: curve.entropy_growth_events,
        config: cfg,
    }
}

/// Writes one JSON object per line.
pub fn write_trace_jsonl<W: Write>(mut w: W, records: &[RoundRecord]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(io_err)?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

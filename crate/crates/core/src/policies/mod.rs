//! Bandit policies driven by a select / observe cycle.
//!
//! Each round the caller asks for the sampling distribution `p_t`, draws an arm
//! from it, and reports the observed loss back. [`MabPolicy`] is the
//! heavy-tailed multi-armed bandit learner, [`AdversarialLinearPolicy`] the
//! fixed-horizon linear learner, and [`BobwLinearPolicy`] the linear learner with
//! the stability-penalty-matched learning rate. Two control policies are
//! included for tests.

mod adversarial_linear;
mod baselines;
mod bobw_linear;
mod mab;

use serde::{Deserialize, Serialize};

pub use adversarial_linear::{alg2_constants, AdversarialLinearPolicy};
pub use baselines::{ExpWeightsPolicy, UniformPolicy};
pub use bobw_linear::{
    alg3_round_params, beta_bar, default_alpha, htspm_update, initial_beta, BobwLinearPolicy,
};
pub use mab::{mab_beta_schedule, mab_round_params, MabPolicy};

use crate::error::{invalid, Error, Result};
use crate::estimators::EstimateBundle;
use crate::types::{
    FeatureSet, HeavyTailSpec, InvariantFlags, RoundRecord, SimplexDistribution, NORMALIZED_TOL,
};

/// Design tolerance used when policies build their exploration distribution.
pub const POLICY_DESIGN_TOL: f64 = 1e-10;
/// Relative slack allowed when checking `b <= s`.
pub const BONUS_REL_TOL: f64 = 1e-9;
/// Slack allowed when checking `gamma <= 1/2`.
pub const GAMMA_TOL: f64 = 1e-12;

pub trait Policy: Send {
    fn name(&self) -> &'static str;
    fn num_arms(&self) -> usize;
    /// Number of completed rounds.
    fn round(&self) -> usize;
    /// Sampling distribution for the next round. Calling it twice without an
    /// intervening `observe` returns the same distribution.
    fn distribution(&mut self) -> Result<SimplexDistribution>;
    /// Feeds back the loss of `arm`, closing the round opened by `distribution`.
    fn observe(&mut self, arm: usize, loss: f64) -> Result<RoundRecord>;
}

/// Intermediate quantities of a round.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DerivedRoundParams {
    /// `min(max_a q_a, 1 - max_a q_a)`.
    pub q_star: f64,
    pub q_tilde: Vec<f64>,
    pub a_tilde: usize,
    pub gamma: f64,
    pub s: Vec<f64>,
    pub z: f64,
    pub w: f64,
}

/// Policy selection as it appears in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyConfig {
    /// Heavy-tailed MAB learner with Tsallis regularization.
    HtMab {
        /// Multiplies the clip thresholds after the exploration rate is set.
        /// Values below 1 break `b <= s`; only useful for exercising monitors.
        #[serde(default = "one")]
        clip_scale: f64,
    },
    /// Adversarial linear learner; needs the horizon up front.
    HtLinear,
    /// Linear learner with the HT-SPM learning rate.
    HtSpmLinear {
        #[serde(default)]
        alpha: Option<f64>,
    },
    Uniform,
    ExpWeights {
        learning_rate: f64,
    },
}

fn one() -> f64 {
    1.0
}

impl PolicyConfig {
    pub fn name(&self) -> &'static str {
        match self {
            PolicyConfig::HtMab { .. } => "ht_mab",
            PolicyConfig::HtLinear => "ht_linear",
            PolicyConfig::HtSpmLinear { .. } => "ht_spm_linear",
            PolicyConfig::Uniform => "uniform",
            PolicyConfig::ExpWeights { .. } => "exp_weights",
        }
    }

    pub fn needs_features(&self) -> bool {
        matches!(
            self,
            PolicyConfig::HtLinear | PolicyConfig::HtSpmLinear { .. }
        )
    }

    /// Builds a fresh policy. Linear policies need `features`; the adversarial
    /// linear policy also needs `horizon`.
    pub fn build(
        &self,
        spec: HeavyTailSpec,
        num_arms: usize,
        features: Option<&FeatureSet>,
        horizon: usize,
    ) -> Result<Box<dyn Policy>> {
        let need = || {
            features
                .ok_or_else(|| invalid("features", format!("{} needs a feature set", self.name())))
        };
        Ok(match *self {
            PolicyConfig::HtMab { clip_scale } => {
                Box::new(MabPolicy::new(num_arms, spec)?.with_clip_scale(clip_scale)?)
            }
            PolicyConfig::HtLinear => Box::new(AdversarialLinearPolicy::new(
                need()?.clone(),
                horizon,
                spec,
            )?),
            PolicyConfig::HtSpmLinear { alpha } => {
                let f = need()?;
                let alpha = alpha.unwrap_or_else(|| default_alpha(f.num_arms()));
                Box::new(BobwLinearPolicy::new(f.clone(), spec, alpha)?)
            }
            PolicyConfig::Uniform => Box::new(UniformPolicy::new(num_arms)?),
            PolicyConfig::ExpWeights { learning_rate } => {
                Box::new(ExpWeightsPolicy::new(num_arms, learning_rate)?)
            }
        })
    }
}

/// Splits `q` into `q_star`, `q_tilde` and the lowest-index mode.
pub(crate) fn mode_split(q: &SimplexDistribution) -> (f64, Vec<f64>, usize) {
    let q_star = q.max().min(q.mass_off_mode());
    let q_tilde = q.weights().iter().map(|&x| x.min(q_star)).collect();
    (q_star, q_tilde, q.argmax())
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !gamma.is_finite() || gamma > 0.5 + GAMMA_TOL {
        return Err(Error::InvariantViolation(format!(
            "exploration rate {gamma} exceeds 1/2"
        )));
    }
    Ok(())
}

pub(crate) fn check_arm(arm: usize, k: usize) -> Result<()> {
    if arm >= k {
        return Err(invalid("arm", format!("{arm} out of range for {k} arms")));
    }
    Ok(())
}

pub(crate) fn flags(
    q: &SimplexDistribution,
    p: &SimplexDistribution,
    gamma: f64,
    bundle: &EstimateBundle,
    beta: f64,
    prev_beta: Option<f64>,
) -> InvariantFlags {
    InvariantFlags {
        simplex: (q.total() - 1.0).abs() <= NORMALIZED_TOL
            && (p.total() - 1.0).abs() <= NORMALIZED_TOL,
        gamma_half: (0.0..=0.5 + GAMMA_TOL).contains(&gamma),
        bonus_below_threshold: bundle.bonus_below_threshold(BONUS_REL_TOL),
        clip_contained: bundle.clip_contained(),
        beta_monotone: prev_beta.is_none_or(|b| beta >= b),
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn record(
    t: usize,
    q: SimplexDistribution,
    p: SimplexDistribution,
    arm: usize,
    loss: f64,
    gamma: f64,
    beta: f64,
    bundle: EstimateBundle,
    flags: InvariantFlags,
) -> RoundRecord {
    RoundRecord {
        t,
        q,
        p,
        chosen_arm: arm,
        observed_loss: loss,
        raw_estimate: bundle.raw_estimate,
        clipped_estimate: bundle.clipped_estimate,
        bonus: bundle.bonus,
        gamma,
        clip_thresholds: bundle.clip_thresholds,
        beta,
        entropy: None,
        z: None,
        w: None,
        next_beta: None,
        invariant_flags: flags,
    }
}

use crate::error::{invalid, Error, Result};
use crate::estimators::EstimateBundle;
use crate::types::{normalize, InvariantFlags, RoundRecord, SimplexDistribution};

use super::{check_arm, Policy};

fn control_record(
    t: usize,
    p: SimplexDistribution,
    arm: usize,
    loss: f64,
    estimate: Vec<f64>,
    beta: f64,
) -> RoundRecord {
    let k = p.len();
    let bundle = EstimateBundle {
        clipped_estimate: estimate.clone(),
        raw_estimate: estimate,
        bonus: vec![0.0; k],
        clip_thresholds: vec![f64::MAX; k],
        clipped_count: 0,
    };
    RoundRecord {
        t,
        q: p.clone(),
        p,
        chosen_arm: arm,
        observed_loss: loss,
        raw_estimate: bundle.raw_estimate,
        clipped_estimate: bundle.clipped_estimate,
        bonus: bundle.bonus,
        gamma: 0.0,
        clip_thresholds: bundle.clip_thresholds,
        beta,
        entropy: None,
        z: None,
        w: None,
        next_beta: None,
        invariant_flags: InvariantFlags {
            simplex: true,
            gamma_half: true,
            bonus_below_threshold: true,
            clip_contained: true,
            beta_monotone: true,
        },
    }
}

/// Plays the uniform distribution every round.
#[derive(Debug, Clone)]
pub struct UniformPolicy {
    k: usize,
    t: usize,
}

impl UniformPolicy {
    pub fn new(k: usize) -> Result<Self> {
        if k < 2 {
            return Err(invalid("num_arms", format!("{k} < 2")));
        }
        Ok(Self { k, t: 0 })
    }
}

impl Policy for UniformPolicy {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn num_arms(&self) -> usize {
        self.k
    }

    fn round(&self) -> usize {
        self.t
    }

    fn distribution(&mut self) -> Result<SimplexDistribution> {
        Ok(SimplexDistribution::uniform(self.k))
    }

    fn observe(&mut self, arm: usize, loss: f64) -> Result<RoundRecord> {
        check_arm(arm, self.k)?;
        self.t += 1;
        Ok(control_record(
            self.t,
            SimplexDistribution::uniform(self.k),
            arm,
            loss,
            vec![0.0; self.k],
            1.0,
        ))
    }
}

/// Exponential weights on unclipped importance-weighted estimates with a fixed
/// learning rate.
#[derive(Debug, Clone)]
pub struct ExpWeightsPolicy {
    eta: f64,
    cum: Vec<f64>,
    t: usize,
}

impl ExpWeightsPolicy {
    pub fn new(k: usize, learning_rate: f64) -> Result<Self> {
        if k < 2 {
            return Err(invalid("num_arms", format!("{k} < 2")));
        }
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(invalid(
                "learning_rate",
                format!("{learning_rate} must be positive"),
            ));
        }
        Ok(Self {
            eta: learning_rate,
            cum: vec![0.0; k],
            t: 0,
        })
    }
}

impl Policy for ExpWeightsPolicy {
    fn name(&self) -> &'static str {
        "exp_weights"
    }

    fn num_arms(&self) -> usize {
        self.cum.len()
    }

    fn round(&self) -> usize {
        self.t
    }

    fn distribution(&mut self) -> Result<SimplexDistribution> {
        let min = self.cum.iter().copied().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = self
            .cum
            .iter()
            .map(|c| (-self.eta * (c - min)).exp())
            .collect();
        normalize(&w)
    }

    fn observe(&mut self, arm: usize, loss: f64) -> Result<RoundRecord> {
        check_arm(arm, self.cum.len())?;
        let p = self.distribution()?;
        if p.get(arm) <= 0.0 {
            return Err(Error::ZeroProbability { arm });
        }
        let mut est = vec![0.0; self.cum.len()];
        est[arm] = loss / p.get(arm);
        self.cum[arm] += est[arm];
        self.t += 1;
        Ok(control_record(self.t, p, arm, loss, est, 1.0 / self.eta))
    }
}

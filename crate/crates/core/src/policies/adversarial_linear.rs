use crate::design::g_optimal_design;
use crate::error::{invalid, Error, Result};
use crate::estimators::linear_estimate;
use crate::ftrl::solve_shannon;
use crate::types::{mix, FeatureSet, HeavyTailSpec, RoundRecord, SimplexDistribution};

use super::{check_arm, flags, record, Policy, POLICY_DESIGN_TOL};

/// `beta = (ln K / (sigma d^{eps/2} T))^{-1/eps}`, `gamma = 4 sigma^{2/eps} d beta^{-2}`
/// and `s = beta / 2`.
pub fn alg2_constants(
    k: usize,
    d: usize,
    horizon: usize,
    spec: HeavyTailSpec,
) -> Result<(f64, f64, f64)> {
    if k < 2 {
        return Err(invalid("num_arms", format!("{k} < 2")));
    }
    if d == 0 || horizon == 0 {
        return Err(invalid("horizon", "dimension and horizon must be positive"));
    }
    let eps = spec.epsilon();
    let sigma = spec.sigma();
    let d = d as f64;
    let beta = ((k as f64).ln() / (sigma * d.powf(eps / 2.0) * horizon as f64)).powf(-1.0 / eps);
    let gamma = 4.0 * sigma.powf(2.0 / eps) * d / (beta * beta);
    if gamma > 0.5 {
        return Err(Error::HorizonTooShort { gamma });
    }
    Ok((beta, gamma, beta / 2.0))
}

#[derive(Debug, Clone)]
struct Pending {
    q: SimplexDistribution,
    p: SimplexDistribution,
}

/// Heavy-tailed adversarial linear learner: exponential weights on clipped,
/// bonus-shifted least-squares estimates, mixed with a G-optimal design.
#[derive(Debug, Clone)]
pub struct AdversarialLinearPolicy {
    spec: HeavyTailSpec,
    features: FeatureSet,
    horizon: usize,
    beta: f64,
    gamma: f64,
    s: Vec<f64>,
    design: SimplexDistribution,
    cum: Vec<f64>,
    t: usize,
    pending: Option<Pending>,
}

impl AdversarialLinearPolicy {
    pub fn new(features: FeatureSet, horizon: usize, spec: HeavyTailSpec) -> Result<Self> {
        let k = features.num_arms();
        let (beta, gamma, s) = alg2_constants(k, features.dim(), horizon, spec)?;
        let design = g_optimal_design(&features, POLICY_DESIGN_TOL)?.distribution;
        Ok(Self {
            spec,
            features,
            horizon,
            beta,
            gamma,
            s: vec![s; k],
            design,
            cum: vec![0.0; k],
            t: 0,
            pending: None,
        })
    }

    pub fn design(&self) -> &SimplexDistribution {
        &self.design
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }
}

impl Policy for AdversarialLinearPolicy {
    fn name(&self) -> &'static str {
        "ht_linear"
    }

    fn num_arms(&self) -> usize {
        self.features.num_arms()
    }

    fn round(&self) -> usize {
        self.t
    }

    fn distribution(&mut self) -> Result<SimplexDistribution> {
        if let Some(p) = &self.pending {
            return Ok(p.p.clone());
        }
        if self.t >= self.horizon {
            return Err(invalid(
                "horizon",
                format!("round {} beyond horizon {}", self.t + 1, self.horizon),
            ));
        }
        let q = solve_shannon(&self.cum, self.beta)?.q;
        let p = mix(&q, &self.design, self.gamma)?;
        self.pending = Some(Pending { q, p: p.clone() });
        Ok(p)
    }

    fn observe(&mut self, arm: usize, loss: f64) -> Result<RoundRecord> {
        check_arm(arm, self.num_arms())?;
        if self.pending.is_none() {
            self.distribution()?;
        }
        let pending = self.pending.take().expect("round opened above");
        let bundle = linear_estimate(arm, loss, &pending.p, &self.features, &self.s, self.spec)?;
        for (c, (l, b)) in self
            .cum
            .iter_mut()
            .zip(bundle.clipped_estimate.iter().zip(&bundle.bonus))
        {
            *c += l - b;
        }
        let prev = (self.t > 0).then_some(self.beta);
        let f = flags(&pending.q, &pending.p, self.gamma, &bundle, self.beta, prev);
        self.t += 1;
        Ok(record(
            self.t, pending.q, pending.p, arm, loss, self.gamma, self.beta, bundle, f,
        ))
    }
}

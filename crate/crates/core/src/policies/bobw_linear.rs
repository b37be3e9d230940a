use crate::design::centered_optimal_design;
use crate::error::{invalid, Error, Result};
use crate::estimators::vr_linear_estimate;
use crate::ftrl::{solve_hybrid_warm, tsallis_entropy_value};
use crate::types::{
    mix, FeatureSet, HeavyTailSpec, RoundRecord, SimplexDistribution, UNDERFLOW_FLOOR,
};

use super::{
    check_arm, check_gamma, flags, mode_split, record, DerivedRoundParams, Policy,
    POLICY_DESIGN_TOL,
};

/// `max(1/2, 1 - 1/ln(max(K, 3)))`.
pub fn default_alpha(k: usize) -> f64 {
    (1.0 - 1.0 / (k.max(3) as f64).ln()).max(0.5)
}

/// `beta_1 = 32 (1-alpha)^{-1} sigma^{1/eps} sqrt(d) (1/2)^{1-alpha}`, which keeps
/// `gamma_t <= 1/4` for every `q`.
pub fn initial_beta(alpha: f64, d: usize, spec: HeavyTailSpec) -> f64 {
    1024f64.sqrt() / (1.0 - alpha)
        * spec.sigma().powf(1.0 / spec.epsilon())
        * (d as f64).sqrt()
        * 0.5f64.powf(1.0 - alpha)
}

/// `beta_bar = 64 (1-alpha)^{-3} d^eps beta_1^{1-eps} max(sigma^{3/eps}, sigma)`.
pub fn beta_bar(alpha: f64, d: usize, beta1: f64, spec: HeavyTailSpec) -> f64 {
    let eps = spec.epsilon();
    let sigma = spec.sigma();
    64.0 / (1.0 - alpha).powi(3)
        * (d as f64).powf(eps)
        * beta1.powf(1.0 - eps)
        * sigma.powf(3.0 / eps).max(sigma)
}

/// Exploration rate `gamma = 256 (1-alpha)^{-2} sigma^{2/eps} d beta^{-2} q*^{2(1-alpha)}`,
/// common threshold `s = (1-alpha) beta q*^{alpha-1} / 8` and
/// `w = sigma^{3/eps} (1-alpha)^{-2} d q*^{2(1-alpha)}`. `z` is left at zero; it
/// depends on the mixed distribution, see [`htspm_z`].
pub fn alg3_round_params(
    q: &SimplexDistribution,
    beta: f64,
    d: usize,
    spec: HeavyTailSpec,
    alpha: f64,
) -> Result<DerivedRoundParams> {
    let eps = spec.epsilon();
    let sigma = spec.sigma();
    let d = d as f64;
    let (q_star, q_tilde, a_tilde) = mode_split(q);
    let qs = q_star.max(UNDERFLOW_FLOOR);
    let one_minus = 1.0 - alpha;
    let q_pow = qs.powf(2.0 * one_minus);
    let gamma = 256.0 / (one_minus * one_minus) * sigma.powf(2.0 / eps) * d / (beta * beta) * q_pow;
    check_gamma(gamma)?;
    let s = one_minus * beta * qs.powf(alpha - 1.0) / 8.0;
    let w = sigma.powf(3.0 / eps) / (one_minus * one_minus) * d * q_pow;
    Ok(DerivedRoundParams {
        q_star,
        q_tilde,
        a_tilde,
        gamma,
        s: vec![s; q.len()],
        z: 0.0,
        w,
    })
}

/// `z = (1-alpha)^{1-eps} sigma q*^{(eps-1)(1-alpha)} d^{eps/2} (1 - ||p||_inf)^{2-eps}`.
pub fn htspm_z(
    q_star: f64,
    p: &SimplexDistribution,
    d: usize,
    spec: HeavyTailSpec,
    alpha: f64,
) -> f64 {
    let eps = spec.epsilon();
    (1.0 - alpha).powf(1.0 - eps)
        * spec.sigma()
        * q_star.powf((eps - 1.0) * (1.0 - alpha))
        * (d as f64).powf(eps / 2.0)
        * p.mass_off_mode().powf(2.0 - eps)
}

/// `beta_{t+1} = beta_t + (beta_t^{1-eps} z_t + beta_t^{-2} w_t) / h_t`.
pub fn htspm_update(beta: f64, z: f64, w: f64, h: f64, spec: HeavyTailSpec) -> Result<f64> {
    if !(beta.is_finite() && beta > 0.0) {
        return Err(invalid("beta", format!("{beta} must be positive")));
    }
    if !(z >= 0.0 && w >= 0.0) {
        return Err(invalid("z, w", format!("({z}, {w}) must be nonnegative")));
    }
    if !(h > UNDERFLOW_FLOOR) {
        return Err(Error::ZeroEntropy(h));
    }
    let eps = spec.epsilon();
    Ok(beta + (beta.powf(1.0 - eps) * z + w / (beta * beta)) / h)
}

#[derive(Debug, Clone)]
struct Pending {
    q: SimplexDistribution,
    p: SimplexDistribution,
    params: DerivedRoundParams,
}

/// Best-of-both-worlds heavy-tailed linear learner: hybrid Tsallis FTRL with
/// the HT-SPM learning rate on clipped, bonus-shifted variance-reduced
/// estimates, mixed with the centered log-det design.
#[derive(Debug, Clone)]
pub struct BobwLinearPolicy {
    spec: HeavyTailSpec,
    features: FeatureSet,
    alpha: f64,
    alpha_bar: f64,
    beta: f64,
    beta_bar: f64,
    design: SimplexDistribution,
    cum: Vec<f64>,
    t: usize,
    warm: Option<f64>,
    prev_beta: Option<f64>,
    last_h: Option<f64>,
    pending: Option<Pending>,
}

impl BobwLinearPolicy {
    pub fn new(features: FeatureSet, spec: HeavyTailSpec, alpha: f64) -> Result<Self> {
        if !(0.5..1.0).contains(&alpha) {
            return Err(invalid("alpha", format!("{alpha} not in [1/2, 1)")));
        }
        let d = features.dim();
        let alpha_bar = (spec.epsilon() - 1.0) * (1.0 - alpha);
        let beta = initial_beta(alpha, d, spec);
        let beta_bar = beta_bar(alpha, d, beta, spec);
        let design = centered_optimal_design(&features, POLICY_DESIGN_TOL)?.distribution;
        let k = features.num_arms();
        Ok(Self {
            spec,
            features,
            alpha,
            alpha_bar,
            beta,
            beta_bar,
            design,
            cum: vec![0.0; k],
            t: 0,
            warm: None,
            prev_beta: None,
            last_h: None,
            pending: None,
        })
    }

    pub fn design(&self) -> &SimplexDistribution {
        &self.design
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn alpha_bar(&self) -> f64 {
        self.alpha_bar
    }

    /// Learning rate of the next round.
    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn beta_bar(&self) -> f64 {
        self.beta_bar
    }

    /// `h` of the last completed round.
    pub fn last_entropy(&self) -> Option<f64> {
        self.last_h
    }
}

impl Policy for BobwLinearPolicy {
    fn name(&self) -> &'static str {
        "ht_spm_linear"
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
        let sol = solve_hybrid_warm(
            &self.cum,
            self.beta,
            self.alpha,
            self.beta_bar,
            self.alpha_bar,
            self.warm,
        )?;
        self.warm = Some(sol.dual_value);
        let d = self.features.dim();
        let mut params = alg3_round_params(&sol.q, self.beta, d, self.spec, self.alpha)?;
        let p = mix(&sol.q, &self.design, params.gamma)?;
        params.z = htspm_z(params.q_star, &p, d, self.spec, self.alpha);
        self.pending = Some(Pending {
            q: sol.q,
            p: p.clone(),
            params,
        });
        Ok(p)
    }

    fn observe(&mut self, arm: usize, loss: f64) -> Result<RoundRecord> {
        check_arm(arm, self.num_arms())?;
        if self.pending.is_none() {
            self.distribution()?;
        }
        let pending = self.pending.take().expect("round opened above");
        let bundle = vr_linear_estimate(
            arm,
            loss,
            &pending.p,
            &self.features,
            &pending.params.s,
            self.spec,
        )?;
        for (c, (l, b)) in self
            .cum
            .iter_mut()
            .zip(bundle.clipped_estimate.iter().zip(&bundle.bonus))
        {
            *c += l - b;
        }
        let h = tsallis_entropy_value(&pending.q, self.alpha);
        let next = htspm_update(self.beta, pending.params.z, pending.params.w, h, self.spec)?;
        let beta = self.beta;
        let f = flags(
            &pending.q,
            &pending.p,
            pending.params.gamma,
            &bundle,
            beta,
            self.prev_beta,
        );
        self.t += 1;
        self.prev_beta = Some(beta);
        self.beta = next;
        self.last_h = Some(h);
        let mut rec = record(
            self.t,
            pending.q,
            pending.p,
            arm,
            loss,
            pending.params.gamma,
            beta,
            bundle,
            f,
        );
        rec.entropy = Some(h);
        rec.z = Some(pending.params.z);
        rec.w = Some(pending.params.w);
        rec.next_beta = Some(next);
        Ok(rec)
    }
}

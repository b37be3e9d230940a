use crate::error::{invalid, Result};
use crate::estimators::mab_estimate;
use crate::ftrl::solve_tsallis_warm;
use crate::types::{mix, HeavyTailSpec, RoundRecord, SimplexDistribution, UNDERFLOW_FLOOR};

use super::{check_arm, check_gamma, flags, mode_split, record, DerivedRoundParams, Policy};

/// `sigma^{1/eps} max{8 eps K^{(eps-1)/eps} / (eps-1), t^{1/eps}}`.
pub fn mab_beta_schedule(t: usize, k: usize, spec: HeavyTailSpec) -> f64 {
    let eps = spec.epsilon();
    let floor = 8.0 * eps * (k as f64).powf((eps - 1.0) / eps) / (eps - 1.0);
    spec.sigma().powf(1.0 / eps) * floor.max((t as f64).powf(1.0 / eps))
}

/// Clip thresholds `s_a = (1-alpha) q_tilde_a^{alpha-1} beta / 8` and exploration
/// rate `gamma = sigma^{1/(eps-1)} K s_{a_tilde}^{eps/(1-eps)}` with `alpha = 1/eps`.
pub fn mab_round_params(
    q: &SimplexDistribution,
    beta: f64,
    spec: HeavyTailSpec,
) -> Result<DerivedRoundParams> {
    let eps = spec.epsilon();
    let alpha = 1.0 / eps;
    let k = q.len() as f64;
    let (q_star, q_tilde, a_tilde) = mode_split(q);
    let s: Vec<f64> = q_tilde
        .iter()
        .map(|&x| (1.0 - alpha) * x.max(UNDERFLOW_FLOOR).powf(alpha - 1.0) * beta / 8.0)
        .collect();
    let gamma = spec.sigma().powf(1.0 / (eps - 1.0)) * k * s[a_tilde].powf(eps / (1.0 - eps));
    check_gamma(gamma)?;
    Ok(DerivedRoundParams {
        q_star,
        q_tilde,
        a_tilde,
        gamma,
        s,
        z: 0.0,
        w: 0.0,
    })
}

#[derive(Debug, Clone)]
struct Pending {
    q: SimplexDistribution,
    p: SimplexDistribution,
    params: DerivedRoundParams,
    beta: f64,
}

/// Best-of-both-worlds heavy-tailed MAB learner: Tsallis FTRL with
/// `alpha = 1/eps` on clipped, bonus-shifted importance-weighted losses, mixed
/// with uniform exploration.
#[derive(Debug, Clone)]
pub struct MabPolicy {
    spec: HeavyTailSpec,
    k: usize,
    cum: Vec<f64>,
    t: usize,
    warm: Option<f64>,
    prev_beta: Option<f64>,
    clip_scale: f64,
    pending: Option<Pending>,
}

impl MabPolicy {
    pub fn new(k: usize, spec: HeavyTailSpec) -> Result<Self> {
        if k < 2 {
            return Err(invalid("num_arms", format!("{k} < 2")));
        }
        Ok(Self {
            spec,
            k,
            cum: vec![0.0; k],
            t: 0,
            warm: None,
            prev_beta: None,
            clip_scale: 1.0,
            pending: None,
        })
    }

    pub fn with_clip_scale(mut self, clip_scale: f64) -> Result<Self> {
        if !(clip_scale.is_finite() && clip_scale > 0.0) {
            return Err(invalid(
                "clip_scale",
                format!("{clip_scale} must be positive"),
            ));
        }
        self.clip_scale = clip_scale;
        Ok(self)
    }

    /// `sum_s (clipped_s - bonus_s)` so far.
    pub fn cumulative_shifted_loss(&self) -> &[f64] {
        &self.cum
    }

    /// Round parameters of the currently open round.
    pub fn current_params(&self) -> Option<&DerivedRoundParams> {
        self.pending.as_ref().map(|p| &p.params)
    }
}

impl Policy for MabPolicy {
    fn name(&self) -> &'static str {
        "ht_mab"
    }

    fn num_arms(&self) -> usize {
        self.k
    }

    fn round(&self) -> usize {
        self.t
    }

    fn distribution(&mut self) -> Result<SimplexDistribution> {
        if let Some(p) = &self.pending {
            return Ok(p.p.clone());
        }
        let beta = mab_beta_schedule(self.t + 1, self.k, self.spec);
        let sol = solve_tsallis_warm(&self.cum, beta, 1.0 / self.spec.epsilon(), self.warm)?;
        self.warm = Some(sol.dual_value);
        let mut params = mab_round_params(&sol.q, beta, self.spec)?;
        if self.clip_scale != 1.0 {
            params.s.iter_mut().for_each(|s| *s *= self.clip_scale);
        }
        let p = mix(&sol.q, &SimplexDistribution::uniform(self.k), params.gamma)?;
        self.pending = Some(Pending {
            q: sol.q,
            p: p.clone(),
            params,
            beta,
        });
        Ok(p)
    }

    fn observe(&mut self, arm: usize, loss: f64) -> Result<RoundRecord> {
        check_arm(arm, self.k)?;
        if self.pending.is_none() {
            self.distribution()?;
        }
        let pending = self.pending.take().expect("round opened above");
        let bundle = mab_estimate(arm, loss, &pending.p, &pending.params.s, self.spec)?;
        for (c, (l, b)) in self
            .cum
            .iter_mut()
            .zip(bundle.clipped_estimate.iter().zip(&bundle.bonus))
        {
            *c += l - b;
        }
        let f = flags(
            &pending.q,
            &pending.p,
            pending.params.gamma,
            &bundle,
            pending.beta,
            self.prev_beta,
        );
        self.t += 1;
        self.prev_beta = Some(pending.beta);
        Ok(record(
            self.t,
            pending.q,
            pending.p,
            arm,
            loss,
            pending.params.gamma,
            pending.beta,
            bundle,
            f,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(eps: f64, sigma: f64) -> HeavyTailSpec {
        HeavyTailSpec::new(eps, sigma).unwrap()
    }

    #[test]
    fn beta_schedule_examples() {
        let b1 = mab_beta_schedule(1, 2, spec(2.0, 1.0));
        assert!((b1 - 16.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((mab_beta_schedule(1_000_000, 2, spec(2.0, 1.0)) - 1000.0).abs() < 1e-9);
        let s = spec(1.3, 2.5);
        let mut prev = 0.0;
        for t in 1..5000 {
            let b = mab_beta_schedule(t, 7, s);
            assert!(b >= prev);
            prev = b;
        }
    }

    #[test]
    fn round_params_example() {
        let q = SimplexDistribution::uniform(2);
        let r = mab_round_params(&q, 16.0 * 2f64.sqrt(), spec(2.0, 1.0)).unwrap();
        assert_eq!(r.q_star, 0.5);
        assert_eq!(r.q_tilde, vec![0.5, 0.5]);
        assert_eq!(r.a_tilde, 0);
        assert!((r.s[0] - 2.0).abs() < 1e-12 && (r.s[1] - 2.0).abs() < 1e-12);
        assert!((r.gamma - 0.5).abs() < 1e-12);
    }

    #[test]
    fn round_params_near_dirac() {
        let q = SimplexDistribution::from_weights(vec![1.0 - 1e-9, 1e-9]).unwrap();
        let r = mab_round_params(&q, 16.0 * 2f64.sqrt(), spec(2.0, 1.0)).unwrap();
        assert!((r.q_star - 1e-9).abs() < 1e-18);
        assert!(r.s[0] > 1e4);
        assert!(r.gamma < 1e-8);
    }

    #[test]
    fn gamma_too_large_is_an_error() {
        let q = SimplexDistribution::uniform(2);
        assert!(mab_round_params(&q, 1.0, spec(2.0, 1.0)).is_err());
    }

    #[test]
    fn first_round_is_uniform() {
        let mut pol = MabPolicy::new(3, spec(1.5, 1.0)).unwrap();
        let p = pol.distribution().unwrap();
        for &x in p.weights() {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        let r = pol.observe(1, 0.4).unwrap();
        assert!(r.invariant_flags.all_ok());
        assert_eq!(pol.round(), 1);
    }

    #[test]
    fn shrunken_thresholds_are_flagged() {
        let mut pol = MabPolicy::new(2, spec(1.5, 1.0))
            .unwrap()
            .with_clip_scale(1e-3)
            .unwrap();
        pol.distribution().unwrap();
        let r = pol.observe(0, 0.1).unwrap();
        assert!(!r.invariant_flags.bonus_below_threshold);
    }
}

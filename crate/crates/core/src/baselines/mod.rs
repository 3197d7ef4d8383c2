//! Comparison learners. Centralized CPO and MACPO reuse the trainer's
//! constrained update (see [`crate::trainer::Algorithm`]); this module adds
//! PPO on an emission-penalized reward and the no-flexibility reference
//! schedule.

use crate::env::{AgentAction, Forced};
use crate::neural::{log_prob, log_prob_grad, Adam, HybridPolicy, NeuralError};
use crate::scalar::Scalar;
use crate::trainer::{mean_kl, PolicyBatch, RolloutBuffer, StepMode, UpdateReport};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    /// Adam step size for the actor.
    pub lr: f64,
    /// $ per tCO₂ above the aggregate quota.
    pub penalty_weight: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { clip: 0.2, epochs: 10, lr: 3e-4, penalty_weight: 500.0 }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip > 0.0) || self.epochs == 0 || !(self.lr > 0.0) {
            return Err("ppo clip, epochs and lr must be positive".into());
        }
        if !(self.penalty_weight > 0.0) {
            return Err(format!("ppo penalty_weight must be positive, got {}", self.penalty_weight));
        }
        Ok(())
    }
}

/// Environment rewards with `−weight · max(0, Σ emission − Σ quota)` added
/// on each episode's final step.
pub fn penalized_rewards<T: Scalar>(buf: &RolloutBuffer<T>, quotas: &[f64], weight: f64) -> Vec<f64> {
    let total_quota: f64 = quotas.iter().sum();
    let mut r: Vec<f64> = buf.steps.iter().map(|s| s.reward).collect();
    for ep in &buf.episodes {
        let last = ep.end - 1;
        let emission: f64 = buf.steps[last].costs.iter().sum();
        r[last] -= weight * (emission - total_quota).max(0.0);
    }
    r
}

/// Mean clipped surrogate `E[min(ρÂ, clip(ρ, 1 ± ε)Â)]` over the batch
/// and its gradient; samples in the flat clipped region contribute nothing.
/// Also returns how many samples were clipped.
pub fn clipped_surrogate<T: Scalar>(
    policy: &HybridPolicy<T>,
    batch: &PolicyBatch<T>,
    clip: T,
) -> Result<(T, Vec<T>, usize), NeuralError> {
    let mut grad = vec![T::zero(); policy.params.len()];
    let mut obj = T::zero();
    let mut clipped = 0;
    if batch.is_empty() {
        return Ok((obj, grad, 0));
    }
    let inv_n = T::one() / T::from_usize_lossy(batch.len());
    let (lo, hi) = (T::one() - clip, T::one() + clip);
    for s in &batch.samples {
        let (d, cache) = policy.dist_cached(s.obs)?;
        let rho = (log_prob(&d, s.action, s.mask) - s.old_log_prob()).exp();
        if !rho.is_finite() {
            return Err(NeuralError::NonFinite("importance ratio".into()));
        }
        let a = s.adv;
        let unclipped = rho * a;
        let bounded = rho.max(lo).min(hi) * a;
        obj += inv_n * unclipped.min(bounded);
        if (a > T::zero() && rho > hi) || (a < T::zero() && rho < lo) {
            clipped += 1;
            continue;
        }
        policy.accumulate_grad(&cache, &log_prob_grad(&d, s.action, s.mask), inv_n * unclipped, &mut grad);
    }
    Ok((obj, grad, clipped))
}

/// `epochs` Adam ascent steps on the clipped surrogate. Reported KL is the
/// measured mean KL of the final parameters; no radius is enforced.
pub fn ppo_penalty_update<T: Scalar>(
    policy: &mut HybridPolicy<T>,
    batch: &PolicyBatch<T>,
    opt: &mut Adam<T>,
    cfg: &PpoConfig,
) -> Result<UpdateReport, NeuralError> {
    for _ in 0..cfg.epochs {
        let (_, grad, _) = clipped_surrogate(policy, batch, T::lit(cfg.clip))?;
        let descent: Vec<T> = grad.iter().map(|&g| -g).collect();
        opt.step(policy.params.as_mut_slice(), &descent);
        if !policy.params.is_finite() {
            return Err(NeuralError::NonFinite("ppo policy".into()));
        }
    }
    let kl = mean_kl(policy, batch)?.to_f64_lossy();
    Ok(UpdateReport { accepted: true, kl, mode: StepMode::Optimal, trust_region: false })
}

/// No-flexibility reference: every adjustable load at its maximum and each
/// transferable block started as soon as the day begins.
pub fn no_flexibility_actions(mask: &[Forced]) -> Vec<AgentAction> {
    mask.iter().map(|_| AgentAction { alpha: 1.0, on: true }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Manifest, ParamVector, PolicySample};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bandit_policy() -> HybridPolicy<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        HybridPolicy::new(1, &[8], 0, 1, 0.0, &mut rng)
    }

    #[test]
    fn zero_advantages_leave_policy() {
        let mut pol = bandit_policy();
        let before = pol.params.clone();
        let obs = [1.0];
        let acts: Vec<PolicySample<f64>> = (0..4).map(|k| PolicySample { u: vec![], on: vec![k % 2 == 0] }).collect();
        let items = acts.iter().map(|a| (&obs[..], a, &[false][..], 0.0, 0.0));
        let batch = PolicyBatch::new(&pol, items, 1).unwrap();
        let mut opt = Adam::new(pol.params.len(), 3e-4);
        ppo_penalty_update(&mut pol, &batch, &mut opt, &PpoConfig::default()).unwrap();
        for (a, b) in pol.params.as_slice().iter().zip(before.as_slice()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn clipped_samples_have_no_gradient() {
        let mut p = ParamVector::<f64>::zeros(Manifest::new(vec![1, 1], 0));
        p.set(&[0.0, 0.0]);
        let old = HybridPolicy::from_params(p, 0, 1).unwrap();
        let obs = [1.0];
        let on = PolicySample { u: vec![], on: vec![true] };
        let batch = PolicyBatch::new(&old, [(&obs[..], &on, &[false][..], 1.0, 0.0)], 1).unwrap();
        // push the logit up: ρ = 2σ(2) ≈ 1.76 > 1.2 with a positive advantage
        let mut new = old.clone();
        new.params.set(&[1.0, 1.0]);
        let (_, g, n) = clipped_surrogate(&new, &batch, 0.2).unwrap();
        assert_eq!(n, 1);
        assert!(g.iter().all(|&x| x == 0.0));
        // inside the band the gradient is ρ Â ∇log π
        let (_, g, n) = clipped_surrogate(&old, &batch, 0.2).unwrap();
        assert_eq!(n, 0);
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn bandit_converges_to_better_arm() {
        // on pays 1, off pays 0: the optimum is P(on) = 1
        let mut pol = bandit_policy();
        let cfg = PpoConfig { lr: 1e-2, ..PpoConfig::default() };
        let mut opt = Adam::new(pol.params.len(), cfg.lr);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let obs = [1.0];
        for _ in 0..500 {
            let d = pol.dist(&obs).unwrap();
            let acts: Vec<PolicySample<f64>> = (0..32).map(|_| d.sample(&mut rng)).collect();
            let mut adv: Vec<f64> = acts.iter().map(|a| if a.on[0] { 1.0 } else { 0.0 }).collect();
            crate::neural::normalize(&mut adv);
            let items = acts.iter().zip(&adv).map(|(a, &x)| (&obs[..], a, &[false][..], x, 0.0));
            let batch = PolicyBatch::new(&pol, items, 1).unwrap();
            ppo_penalty_update(&mut pol, &batch, &mut opt, &cfg).unwrap();
        }
        let p = pol.dist(&obs).unwrap().prob(0);
        assert!(p >= 0.95, "P(on) = {p}");
    }

    #[test]
    fn penalty_only_above_quota() {
        use crate::trainer::RolloutStep;
        let step = |reward: f64, costs: Vec<f64>, done: bool| RolloutStep::<f64> {
            obs: vec![],
            next_obs: vec![],
            reward,
            costs,
            done,
            actions: vec![],
            masks: vec![],
            log_probs: vec![],
        };
        let buf = RolloutBuffer {
            steps: vec![step(1.0, vec![0.0, 0.0], false), step(2.0, vec![1.0, 1.0], true), step(3.0, vec![2.0, 1.5], true)],
            episodes: vec![0..2, 2..3],
            records: vec![],
            metrics: vec![],
        };
        let r = penalized_rewards(&buf, &[1.5, 1.5], 500.0);
        assert_eq!(r, vec![1.0, 2.0, 3.0 - 500.0 * 0.5]);
    }
}

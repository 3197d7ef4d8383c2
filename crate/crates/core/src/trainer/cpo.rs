//! Constrained trust-region policy step: surrogate gradients, Fisher-vector
//! products, conjugate gradient, the analytic dual of the linearized
//! subproblem and backtracking line search.

use crate::neural::mlp::Activations;
use crate::neural::{fisher_weights, kl_divergence, kl_grad, log_prob, HybridPolicy, PolicyDistribution, PolicySample};
use crate::neural::{DistGrad, NeuralError};
use crate::scalar::{axpy, dot, Scalar};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One on-policy sample with the data frozen at the old parameters.
#[derive(Debug, Clone)]
pub struct PolicySampleData<'a, T> {
    pub obs: &'a [T],
    pub action: &'a PolicySample<T>,
    pub mask: &'a [bool],
    pub adv: T,
    pub cost_adv: T,
    old: PolicyDistribution<T>,
    old_log_prob: T,
    cache: Activations<T>,
}

impl<T: Scalar> PolicySampleData<'_, T> {
    pub fn old_log_prob(&self) -> T {
        self.old_log_prob
    }

    pub fn old_dist(&self) -> &PolicyDistribution<T> {
        &self.old
    }
}

/// Samples of one controller plus the episode count used to turn sums into
/// per-episode expectations.
#[derive(Debug, Clone)]
pub struct PolicyBatch<'a, T> {
    pub samples: Vec<PolicySampleData<'a, T>>,
    pub n_episodes: usize,
}

impl<'a, T: Scalar> PolicyBatch<'a, T> {
    /// `items`: `(obs, action, mask, advantage, cost advantage)`.
    pub fn new(
        policy: &HybridPolicy<T>,
        items: impl IntoIterator<Item = (&'a [T], &'a PolicySample<T>, &'a [bool], T, T)>,
        n_episodes: usize,
    ) -> Result<Self, NeuralError> {
        let mut samples = Vec::new();
        for (obs, action, mask, adv, cost_adv) in items {
            let (old, cache) = policy.dist_cached(obs)?;
            let old_log_prob = log_prob(&old, action, mask);
            samples.push(PolicySampleData { obs, action, mask, adv, cost_adv, old, old_log_prob, cache });
        }
        Ok(PolicyBatch { samples, n_episodes: n_episodes.max(1) })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn per_episode(&self) -> T {
        T::one() / T::from_usize_lossy(self.n_episodes)
    }
}

/// `g = E_episode[Σ_t ∇log π(a_t|s_t) Â_t]` and `b` likewise with cost
/// advantages, at the parameters the batch was built with.
pub fn surrogate_gradients<T: Scalar>(
    policy: &HybridPolicy<T>,
    batch: &PolicyBatch<T>,
) -> Result<(Vec<T>, Vec<T>), NeuralError> {
    let w = batch.per_episode();
    let mut g = vec![T::zero(); policy.params.len()];
    let mut b = vec![T::zero(); policy.params.len()];
    for s in &batch.samples {
        let lg = crate::neural::log_prob_grad(&s.old, s.action, s.mask);
        if s.adv != T::zero() {
            policy.accumulate_grad(&s.cache, &lg, w * s.adv, &mut g);
        }
        if s.cost_adv != T::zero() {
            policy.accumulate_grad(&s.cache, &lg, w * s.cost_adv, &mut b);
        }
    }
    if g.iter().chain(&b).any(|x| !x.is_finite()) {
        return Err(NeuralError::NonFinite("surrogate gradient".into()));
    }
    Ok((g, b))
}

fn weighted<T: Scalar>(w: &DistGrad<T>, t: &DistGrad<T>) -> DistGrad<T> {
    let mul = |a: &[T], b: &[T]| a.iter().zip(b).map(|(&x, &y)| x * y).collect();
    DistGrad { mean: mul(&w.mean, &t.mean), log_std: mul(&w.log_std, &t.log_std), logit: mul(&w.logit, &t.logit) }
}

/// `H v + damping · v` with `H` the Hessian of the mean KL from the old
/// distributions, taken at the old parameters. There the KL's first
/// derivative in distribution space vanishes, so `H = E[Jᵀ F J]` with `F`
/// the closed-form Fisher of each distribution.
pub fn fisher_vector_product<T: Scalar>(policy: &HybridPolicy<T>, batch: &PolicyBatch<T>, v: &[T], damping: T) -> Vec<T> {
    let mut out = vec![T::zero(); v.len()];
    if !batch.is_empty() {
        let scale = T::one() / T::from_usize_lossy(batch.len());
        for s in &batch.samples {
            let t = policy.tangent(&s.cache, v);
            let ft = weighted(&fisher_weights(&s.old, s.mask), &t);
            policy.accumulate_grad(&s.cache, &ft, scale, &mut out);
        }
    }
    axpy(damping, v, &mut out);
    out
}

/// Mean `KL(π_old ‖ π_new)` over the batch.
pub fn mean_kl<T: Scalar>(new: &HybridPolicy<T>, batch: &PolicyBatch<T>) -> Result<T, NeuralError> {
    if batch.is_empty() {
        return Ok(T::zero());
    }
    let mut kl = T::zero();
    for s in &batch.samples {
        kl += kl_divergence(&s.old, &new.dist(s.obs)?, s.mask);
    }
    Ok(kl / T::from_usize_lossy(batch.len()))
}

/// Gradient of [`mean_kl`] with respect to the new parameters.
pub fn mean_kl_gradient<T: Scalar>(new: &HybridPolicy<T>, batch: &PolicyBatch<T>) -> Result<Vec<T>, NeuralError> {
    let mut g = vec![T::zero(); new.params.len()];
    if batch.is_empty() {
        return Ok(g);
    }
    let scale = T::one() / T::from_usize_lossy(batch.len());
    for s in &batch.samples {
        let (q, cache) = new.dist_cached(s.obs)?;
        new.accumulate_grad(&cache, &kl_grad(&s.old, &q, s.mask), scale, &mut g);
    }
    Ok(g)
}

/// Change of the importance-weighted reward and cost surrogates,
/// `E_episode[Σ_t (ρ_t − 1) Â_t]`, when moving to `new`.
pub fn surrogate_change<T: Scalar>(new: &HybridPolicy<T>, batch: &PolicyBatch<T>) -> Result<(T, T), NeuralError> {
    let w = batch.per_episode();
    let (mut gain, mut cost) = (T::zero(), T::zero());
    for s in &batch.samples {
        let lp = log_prob(&new.dist(s.obs)?, s.action, s.mask);
        let rho = (lp - s.old_log_prob).exp() - T::one();
        gain += w * rho * s.adv;
        cost += w * rho * s.cost_adv;
    }
    if !gain.is_finite() || !cost.is_finite() {
        return Err(NeuralError::NonFinite("importance ratio".into()));
    }
    Ok((gain, cost))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgResult<T> {
    pub x: Vec<T>,
    pub iterations: usize,
    /// `‖A x − rhs‖`, tracked by the recurrence.
    pub residual: T,
    pub converged: bool,
    /// A search direction with `pᵀ A p ≤ 0` stopped the iteration.
    pub breakdown: bool,
}

/// Conjugate gradient for an SPD operator; stops at
/// `‖r‖ ≤ tol · ‖rhs‖` or after `iters` iterations.
pub fn conjugate_gradient<T: Scalar>(mut op: impl FnMut(&[T]) -> Vec<T>, rhs: &[T], iters: usize, tol: T) -> CgResult<T> {
    let n = rhs.len();
    let mut x = vec![T::zero(); n];
    let mut r = rhs.to_vec();
    let mut p = r.clone();
    let mut rr = dot(&r, &r);
    let target = tol * rr.sqrt();
    if rr.sqrt() <= target || rr == T::zero() {
        return CgResult { x, iterations: 0, residual: rr.sqrt(), converged: true, breakdown: false };
    }
    for k in 0..iters {
        let ap = op(&p);
        let pap = dot(&p, &ap);
        if !(pap > T::zero()) {
            return CgResult { x, iterations: k, residual: rr.sqrt(), converged: false, breakdown: true };
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        let rr_new = dot(&r, &r);
        if rr_new.sqrt() <= target {
            return CgResult { x, iterations: k + 1, residual: rr_new.sqrt(), converged: true, breakdown: false };
        }
        let beta = rr_new / rr;
        for (pi, &ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
        rr = rr_new;
    }
    CgResult { x, iterations: iters, residual: rr.sqrt(), converged: false, breakdown: false }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepMode {
    Optimal,
    Recovery,
}

#[derive(Debug, Error, PartialEq)]
pub enum TrustRegionError {
    #[error("trust region: {0}")]
    Input(String),
    #[error("constraint violated (c = {c:.3e}) but the cost gradient is numerically zero (s = {s:.3e}); no recovery direction")]
    NoRecovery { c: f64, s: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionStep<T> {
    pub g: Vec<T>,
    pub b: Vec<T>,
    /// `J_C − d`.
    pub c: T,
    pub delta: T,
    pub mu: T,
    pub q: T,
    pub r: T,
    pub s: T,
    pub lambda: T,
    pub nu: T,
    pub mode: StepMode,
    /// Unscaled subproblem solution `x*`; in recovery mode the pure cost
    /// step `−√(2δ/s) H⁻¹b`.
    pub full_step: Vec<T>,
    /// `θ + μ x*` (optimal) or `θ + x*` (recovery).
    pub solution: Vec<T>,
}

const TINY: f64 = 1e-12;
/// `q − r²/s` below this fraction of `q`: `g` and `b` count as parallel.
const PARALLEL: f64 = 1e-10;

/// Lagrange multipliers of
/// `max gᵀx  s.t.  bᵀx + c ≤ 0,  ½ xᵀHx ≤ δ`
/// from `q = gᵀH⁻¹g`, `r = gᵀH⁻¹b`, `s = bᵀH⁻¹b`, when feasible.
/// Returns `None` when the linearized constraint cannot be met inside the
/// trust region.
pub fn dual_multipliers(q: f64, r: f64, s: f64, c: f64, delta: f64) -> Option<(f64, f64)> {
    let q = q.max(TINY);
    let lam_free = (q / (2.0 * delta)).sqrt();
    if s <= TINY {
        return if c > 0.0 { None } else { Some((lam_free, 0.0)) };
    }
    let a = q - r * r / s;
    let bb = 2.0 * delta - c * c / s;
    if c > 0.0 && bb < 0.0 {
        return None;
    }
    if c < 0.0 && bb < 0.0 {
        // the whole trust region is feasible
        return Some((lam_free, 0.0));
    }
    // ν(λ) = max(0, (λc + r)/s). Split λ > 0 into the piece where ν > 0
    // (dual f_a) and where ν = 0 (dual f_b), maximize each in closed form
    // on its interval and keep the better one.
    let f_a = |l: f64| -0.5 * (a / l + bb * l) + r * c / s;
    let f_b = |l: f64| -0.5 * (q / l + 2.0 * delta * l);
    let lam_a_star = if bb > 0.0 { (a.max(0.0) / bb).sqrt() } else { f64::INFINITY };
    let (active, inactive) = if c == 0.0 {
        if r > 0.0 {
            ((0.0, f64::INFINITY), None)
        } else {
            ((0.0, 0.0), Some((0.0, f64::INFINITY)))
        }
    } else {
        let brk = -r / c;
        if c < 0.0 {
            ((0.0, brk.max(0.0)), Some((brk.max(0.0), f64::INFINITY)))
        } else if brk > 0.0 {
            ((brk, f64::INFINITY), Some((0.0, brk)))
        } else {
            ((0.0, f64::INFINITY), None)
        }
    };
    let mut best: Option<(f64, f64)> = None;
    if active.1 > active.0 {
        let l = lam_a_star.clamp(active.0, active.1).max(TINY);
        if l.is_finite() {
            best = Some((f_a(l), l));
        }
    }
    if let Some((lo, hi)) = inactive {
        if hi > lo {
            let l = lam_free.clamp(lo, hi).max(TINY);
            let v = f_b(l);
            if best.map_or(true, |(bv, _)| v > bv) {
                best = Some((v, l));
            }
        }
    }
    let (_, lam) = best?;
    let nu = ((lam * c + r) / s).max(0.0);
    Some((lam, nu))
}

/// Solve the linearized constrained trust-region subproblem given
/// `H⁻¹g` and `H⁻¹b`.
#[allow(clippy::too_many_arguments)]
pub fn solve_trust_region<T: Scalar>(
    theta: &[T],
    g: &[T],
    b: &[T],
    c: T,
    hinv_g: &[T],
    hinv_b: &[T],
    delta: T,
    mu: T,
) -> Result<TrustRegionStep<T>, TrustRegionError> {
    let n = theta.len();
    if g.len() != n || b.len() != n || hinv_g.len() != n || hinv_b.len() != n {
        return Err(TrustRegionError::Input("vectors must share the parameter length".into()));
    }
    if !(delta > T::zero()) {
        return Err(TrustRegionError::Input(format!("delta must be positive, got {delta}")));
    }
    let (q, r, s) = (dot(g, hinv_g), dot(g, hinv_b), dot(b, hinv_b));
    let (qf, rf, sf, cf, df) = (q.to_f64_lossy(), r.to_f64_lossy(), s.to_f64_lossy(), c.to_f64_lossy(), delta.to_f64_lossy());
    if ![qf, rf, sf, cf].iter().all(|x| x.is_finite()) {
        return Err(TrustRegionError::Input("non-finite gradient products".into()));
    }
    let mut full = vec![T::zero(); n];
    let (lambda, nu, mode) = match dual_multipliers(qf, rf, sf, cf, df) {
        Some((lam, nu)) if nu > 0.0 => {
            // with ν = (λc + r)/s the step is (H⁻¹g − (r/s)H⁻¹b)/λ − (c/s)H⁻¹b;
            // λ is small only when g is nearly parallel to b, and the
            // H-orthogonal part of H⁻¹g is then pure rounding
            let a = qf - rf * rf / sf;
            if a > PARALLEL * qf {
                let inv = T::lit(1.0 / lam);
                axpy(inv, hinv_g, &mut full);
                axpy(-inv * T::lit(rf / sf), hinv_b, &mut full);
            }
            axpy(-T::lit(cf / sf), hinv_b, &mut full);
            (T::lit(lam), T::lit(nu), StepMode::Optimal)
        }
        Some((lam, nu)) => {
            axpy(T::lit(1.0 / lam), hinv_g, &mut full);
            (T::lit(lam), T::lit(nu), StepMode::Optimal)
        }
        None => {
            if sf <= TINY {
                return Err(TrustRegionError::NoRecovery { c: cf, s: sf });
            }
            let nu = (2.0 * df / sf).sqrt();
            axpy(-T::lit(nu), hinv_b, &mut full);
            (T::zero(), T::lit(nu), StepMode::Recovery)
        }
    };
    let scale = if mode == StepMode::Optimal { mu } else { T::one() };
    let mut solution = theta.to_vec();
    axpy(scale, &full, &mut solution);
    Ok(TrustRegionStep {
        g: g.to_vec(),
        b: b.to_vec(),
        c,
        delta,
        mu,
        q,
        r,
        s,
        lambda,
        nu,
        mode,
        full_step: full,
        solution,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineSearchResult<T> {
    /// Accepted parameters, or the old ones when no trial passed.
    pub params: Vec<T>,
    pub accepted: bool,
    /// Trials evaluated.
    pub trials: usize,
    /// Fraction of the proposed step that was taken.
    pub step_fraction: T,
    pub kl: T,
    pub gain: T,
    pub cost_change: T,
}

/// Backtrack from `proposed` towards the old parameters by `backoff` until
/// the mean KL is within `delta`, the reward surrogate does not decrease
/// (skipped in recovery mode) and the cost surrogate stays within
/// `max(0, −c)` of its current value, i.e. ends up below the limit or
/// does not grow.
#[allow(clippy::too_many_arguments)]
pub fn line_search<T: Scalar>(
    old: &HybridPolicy<T>,
    batch: &PolicyBatch<T>,
    proposed: &[T],
    c: T,
    mode: StepMode,
    delta: T,
    backoff: T,
    max_steps: usize,
) -> Result<LineSearchResult<T>, NeuralError> {
    let theta = old.params.as_slice();
    let step: Vec<T> = proposed.iter().zip(theta).map(|(&p, &t)| p - t).collect();
    let cost_room = (-c).max(T::zero());
    let mut frac = T::one();
    let mut trial = old.clone();
    for k in 0..max_steps {
        let cand: Vec<T> = theta.iter().zip(&step).map(|(&t, &d)| t + frac * d).collect();
        trial.params.set(&cand);
        let kl = mean_kl(&trial, batch)?;
        let (gain, cost_change) = surrogate_change(&trial, batch)?;
        let improves = mode == StepMode::Recovery || gain >= T::zero();
        if kl <= delta && improves && cost_change <= cost_room && trial.params.is_finite() {
            return Ok(LineSearchResult { params: cand, accepted: true, trials: k + 1, step_fraction: frac, kl, gain, cost_change });
        }
        frac *= backoff;
    }
    Ok(LineSearchResult {
        params: theta.to_vec(),
        accepted: false,
        trials: max_steps,
        step_fraction: T::zero(),
        kl: T::zero(),
        gain: T::zero(),
        cost_change: T::zero(),
    })
}

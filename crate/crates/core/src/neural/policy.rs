//! Hybrid continuous/discrete policy head.
//!
//! Each continuous dimension is a Gaussian over a pre-squash variable `u`
//! (the action is `sigmoid(u)` in `[0, 1]`) with a state-independent
//! log-std. Each discrete dimension is a Bernoulli on/off flag with a
//! network-produced logit. Discrete dimensions forced by the environment are
//! masked out of log-probabilities, KL terms and their gradients.

use super::mlp::{self, Activations};
use super::{Manifest, NeuralError, ParamVector};
use crate::scalar::Scalar;
use rand::Rng;
use rand_distr::StandardNormal;

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
/// Logits are clamped so probabilities stay strictly inside (0, 1) in `f32`.
pub const LOGIT_CLAMP: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDistribution<T> {
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
    pub logit: Vec<T>,
}

/// One action in policy coordinates: pre-squash `u` and on/off flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicySample<T> {
    pub u: Vec<T>,
    pub on: Vec<bool>,
}

/// Same layout as a distribution; used for gradients, tangents and Fisher
/// weights with respect to `(mean, log_std, logit)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistGrad<T> {
    pub mean: Vec<T>,
    pub log_std: Vec<T>,
    pub logit: Vec<T>,
}

impl<T: Scalar> DistGrad<T> {
    pub fn zeros(n_cont: usize, n_disc: usize) -> Self {
        DistGrad { mean: vec![T::zero(); n_cont], log_std: vec![T::zero(); n_cont], logit: vec![T::zero(); n_disc] }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `log σ(x)` without overflow.
fn log_sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

impl<T: Scalar> PolicyDistribution<T> {
    pub fn n_cont(&self) -> usize {
        self.mean.len()
    }

    pub fn n_disc(&self) -> usize {
        self.logit.len()
    }

    pub fn prob(&self, i: usize) -> T {
        sigmoid(self.logit[i])
    }

    /// Continuous actions in `[0, 1]` for a pre-squash sample.
    pub fn squash(u: &[T]) -> Vec<T> {
        u.iter().map(|&x| sigmoid(x)).collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PolicySample<T> {
        let u = self
            .mean
            .iter()
            .zip(&self.log_std)
            .map(|(&m, &ls)| m + ls.exp() * T::lit(rng.sample::<f64, _>(StandardNormal)))
            .collect();
        let on = (0..self.n_disc()).map(|i| rng.gen::<f64>() < self.prob(i).to_f64_lossy()).collect();
        PolicySample { u, on }
    }

    /// Mean for continuous dims, most likely value for discrete dims.
    pub fn greedy(&self) -> PolicySample<T> {
        PolicySample { u: self.mean.clone(), on: self.logit.iter().map(|&l| l > T::zero()).collect() }
    }
}

fn half_ln_2pi<T: Scalar>() -> T {
    T::lit(0.5 * (2.0 * std::f64::consts::PI).ln())
}

/// Log-density of `u` plus log-mass of unmasked flags. `mask[i] = true`
/// marks discrete dim `i` as forced.
pub fn log_prob<T: Scalar>(dist: &PolicyDistribution<T>, action: &PolicySample<T>, mask: &[bool]) -> T {
    let mut lp = T::zero();
    for j in 0..dist.n_cont() {
        let z = (action.u[j] - dist.mean[j]) / dist.log_std[j].exp();
        lp += -T::lit(0.5) * z * z - dist.log_std[j] - half_ln_2pi();
    }
    for i in 0..dist.n_disc() {
        if !mask[i] {
            let l = dist.logit[i];
            lp += if action.on[i] { log_sigmoid(l) } else { log_sigmoid(-l) };
        }
    }
    lp
}

/// Gradient of [`log_prob`] with respect to the distribution parameters.
pub fn log_prob_grad<T: Scalar>(dist: &PolicyDistribution<T>, action: &PolicySample<T>, mask: &[bool]) -> DistGrad<T> {
    let mut g = DistGrad::zeros(dist.n_cont(), dist.n_disc());
    for j in 0..dist.n_cont() {
        let inv_var = (-T::lit(2.0) * dist.log_std[j]).exp();
        let d = action.u[j] - dist.mean[j];
        g.mean[j] = d * inv_var;
        g.log_std[j] = d * d * inv_var - T::one();
    }
    for i in 0..dist.n_disc() {
        if !mask[i] {
            let o = if action.on[i] { T::one() } else { T::zero() };
            g.logit[i] = o - dist.prob(i);
        }
    }
    g
}

/// `KL(p ‖ q)` summed over continuous dims and unmasked discrete dims.
pub fn kl_divergence<T: Scalar>(p: &PolicyDistribution<T>, q: &PolicyDistribution<T>, mask: &[bool]) -> T {
    let mut kl = T::zero();
    let half = T::lit(0.5);
    for j in 0..p.n_cont() {
        let var_ratio = (T::lit(2.0) * (p.log_std[j] - q.log_std[j])).exp();
        let d = (p.mean[j] - q.mean[j]) / q.log_std[j].exp();
        kl += q.log_std[j] - p.log_std[j] + half * (var_ratio + d * d) - half;
    }
    for i in 0..p.n_disc() {
        if !mask[i] {
            let (lp, lq) = (p.logit[i], q.logit[i]);
            let pp = sigmoid(lp);
            kl += pp * (log_sigmoid(lp) - log_sigmoid(lq)) + (T::one() - pp) * (log_sigmoid(-lp) - log_sigmoid(-lq));
        }
    }
    kl.max(T::zero())
}

/// Gradient of `KL(p ‖ q)` with respect to the parameters of `q`.
pub fn kl_grad<T: Scalar>(p: &PolicyDistribution<T>, q: &PolicyDistribution<T>, mask: &[bool]) -> DistGrad<T> {
    let mut g = DistGrad::zeros(p.n_cont(), p.n_disc());
    for j in 0..p.n_cont() {
        let inv_var_q = (-T::lit(2.0) * q.log_std[j]).exp();
        let d = q.mean[j] - p.mean[j];
        g.mean[j] = d * inv_var_q;
        g.log_std[j] = T::one() - ((T::lit(2.0) * p.log_std[j]).exp() + d * d) * inv_var_q;
    }
    for i in 0..p.n_disc() {
        if !mask[i] {
            g.logit[i] = q.prob(i) - p.prob(i);
        }
    }
    g
}

/// Diagonal Fisher information of the distribution in `(mean, log_std,
/// logit)` coordinates: `1/σ²`, `2` and `p(1 − p)`; zero on masked dims.
pub fn fisher_weights<T: Scalar>(dist: &PolicyDistribution<T>, mask: &[bool]) -> DistGrad<T> {
    let mut w = DistGrad::zeros(dist.n_cont(), dist.n_disc());
    for j in 0..dist.n_cont() {
        w.mean[j] = (-T::lit(2.0) * dist.log_std[j]).exp();
        w.log_std[j] = T::lit(2.0);
    }
    for i in 0..dist.n_disc() {
        if !mask[i] {
            let p = dist.prob(i);
            w.logit[i] = p * (T::one() - p);
        }
    }
    w
}

/// MLP trunk producing `[means | logits]`, plus one free log-std per
/// continuous dim stored as the manifest's extra parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridPolicy<T> {
    pub params: ParamVector<T>,
    pub n_cont: usize,
    pub n_disc: usize,
}

impl<T: Scalar> HybridPolicy<T> {
    pub fn new<R: Rng + ?Sized>(
        obs_dim: usize,
        hidden: &[usize],
        n_cont: usize,
        n_disc: usize,
        init_log_std: f64,
        rng: &mut R,
    ) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(n_cont + n_disc);
        let params = ParamVector::orthogonal(Manifest::new(sizes, n_cont), rng, T::lit(init_log_std));
        HybridPolicy { params, n_cont, n_disc }
    }

    pub fn from_params(params: ParamVector<T>, n_cont: usize, n_disc: usize) -> Result<Self, NeuralError> {
        let m = params.manifest();
        if m.output_dim() != n_cont + n_disc || m.extra != n_cont {
            return Err(NeuralError::Shape { what: "policy head", expected: n_cont + n_disc, got: m.output_dim() });
        }
        Ok(HybridPolicy { params, n_cont, n_disc })
    }

    pub fn obs_dim(&self) -> usize {
        self.params.manifest().input_dim()
    }

    fn log_std_active(&self, j: usize) -> bool {
        let x = self.params.extra()[j];
        x >= T::lit(LOG_STD_MIN) && x <= T::lit(LOG_STD_MAX)
    }

    fn head(&self, out: &[T]) -> PolicyDistribution<T> {
        let c = T::lit(LOGIT_CLAMP);
        PolicyDistribution {
            mean: out[..self.n_cont].to_vec(),
            log_std: self.params.extra().iter().map(|&x| x.max(T::lit(LOG_STD_MIN)).min(T::lit(LOG_STD_MAX))).collect(),
            logit: out[self.n_cont..].iter().map(|&l| l.max(-c).min(c)).collect(),
        }
    }

    pub fn dist(&self, obs: &[T]) -> Result<PolicyDistribution<T>, NeuralError> {
        Ok(self.head(&mlp::forward(&self.params, obs)?))
    }

    pub fn dist_cached(&self, obs: &[T]) -> Result<(PolicyDistribution<T>, Activations<T>), NeuralError> {
        let cache = mlp::forward_cached(&self.params, obs)?;
        Ok((self.head(cache.output()), cache))
    }

    /// Chain a distribution-space gradient back to the parameters:
    /// `grad += scale · Jᵀ g`.
    pub fn accumulate_grad(&self, cache: &Activations<T>, g: &DistGrad<T>, scale: T, grad: &mut [T]) {
        let out = cache.output();
        let c = T::lit(LOGIT_CLAMP);
        let mut g_out = g.mean.clone();
        g_out.extend(g.logit.iter().zip(&out[self.n_cont..]).map(|(&gl, &l)| if l.abs() <= c { gl } else { T::zero() }));
        mlp::backward(&self.params, cache, &g_out, scale, grad);
        let off = self.params.manifest().network_len();
        for j in 0..self.n_cont {
            if self.log_std_active(j) {
                grad[off + j] += scale * g.log_std[j];
            }
        }
    }

    /// Change of the distribution parameters along parameter direction `v`.
    pub fn tangent(&self, cache: &Activations<T>, v: &[T]) -> DistGrad<T> {
        let t = mlp::jvp(&self.params, cache, v);
        let out = cache.output();
        let c = T::lit(LOGIT_CLAMP);
        let off = self.params.manifest().network_len();
        DistGrad {
            mean: t[..self.n_cont].to_vec(),
            log_std: (0..self.n_cont).map(|j| if self.log_std_active(j) { v[off + j] } else { T::zero() }).collect(),
            logit: (0..self.n_disc)
                .map(|i| if out[self.n_cont + i].abs() <= c { t[self.n_cont + i] } else { T::zero() })
                .collect(),
        }
    }

    /// `Σ_k w_k ∇_θ log π(a_k | s_k)` over a batch.
    pub fn log_prob_gradient(&self, batch: &[(&[T], &PolicySample<T>, &[bool], T)]) -> Result<Vec<T>, NeuralError> {
        let mut grad = vec![T::zero(); self.params.len()];
        for &(obs, action, mask, w) in batch {
            if w == T::zero() {
                continue;
            }
            let (d, cache) = self.dist_cached(obs)?;
            self.accumulate_grad(&cache, &log_prob_grad(&d, action, mask), w, &mut grad);
        }
        if grad.iter().any(|x| !x.is_finite()) {
            return Err(NeuralError::NonFinite("policy gradient".into()));
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dist(mean: f64, log_std: f64, logit: f64) -> PolicyDistribution<f64> {
        PolicyDistribution { mean: vec![mean], log_std: vec![log_std], logit: vec![logit] }
    }

    #[test]
    fn bernoulli_half_on() {
        let d = PolicyDistribution { mean: vec![], log_std: vec![], logit: vec![0.0] };
        let a = PolicySample { u: vec![], on: vec![true] };
        assert!((log_prob(&d, &a, &[false]) - 0.5f64.ln()).abs() < 1e-15);
        assert_eq!(log_prob(&d, &a, &[true]), 0.0);
    }

    #[test]
    fn standard_normal_at_zero() {
        let d = PolicyDistribution { mean: vec![0.0], log_std: vec![0.0], logit: vec![] };
        let a = PolicySample { u: vec![0.0], on: vec![] };
        assert!((log_prob(&d, &a, &[]) + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_closed_forms() {
        let p = dist(0.3, -0.2, 1.1);
        assert_eq!(kl_divergence(&p, &p, &[false]), 0.0);
        let bp = PolicyDistribution { mean: vec![], log_std: vec![], logit: vec![0.0] };
        let bq = PolicyDistribution { mean: vec![], log_std: vec![], logit: vec![(0.25f64 / 0.75).ln()] };
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((kl_divergence(&bp, &bq, &[false]) - expected).abs() < 1e-12);
        assert!((expected - 0.143_841_036).abs() < 1e-8);
        let g1 = PolicyDistribution::<f64> { mean: vec![0.0], log_std: vec![0.0], logit: vec![] };
        let g2 = PolicyDistribution { mean: vec![1.0], log_std: vec![0.0], logit: vec![] };
        assert!((kl_divergence(&g1, &g2, &[]) - 0.5).abs() < 1e-15);
        // masked dims do not count even when different
        assert!(kl_divergence(&bp, &bq, &[true]) == 0.0);
    }

    #[test]
    fn sampling_is_seeded() {
        let d = dist(0.1, -0.5, 0.3);
        let a = d.sample(&mut ChaCha8Rng::seed_from_u64(9));
        let b = d.sample(&mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
        assert_eq!(d.greedy(), PolicySample { u: vec![0.1], on: vec![true] });
    }

    fn fd_check(f: impl Fn(&PolicyDistribution<f64>) -> f64, d: &PolicyDistribution<f64>, g: &DistGrad<f64>) {
        let h = 1e-6;
        let bump = |which: usize, i: usize, s: f64| {
            let mut e = d.clone();
            match which {
                0 => e.mean[i] += s,
                1 => e.log_std[i] += s,
                _ => e.logit[i] += s,
            }
            f(&e)
        };
        for (which, v) in [&g.mean, &g.log_std, &g.logit].into_iter().enumerate() {
            for (i, &an) in v.iter().enumerate() {
                let fd = (bump(which, i, h) - bump(which, i, -h)) / (2.0 * h);
                assert!((an - fd).abs() <= 1e-6 * an.abs().max(1.0), "part {which} dim {i}: {an} vs {fd}");
            }
        }
    }

    proptest! {
        #[test]
        fn kl_nonneg_and_gradients_match_fd(
            m in prop::collection::vec(-2.0f64..2.0, 4), s in prop::collection::vec(-1.5f64..1.0, 4),
            l in prop::collection::vec(-4.0f64..4.0, 4), mask in prop::collection::vec(any::<bool>(), 2),
            u in prop::collection::vec(-3.0f64..3.0, 2), on in prop::collection::vec(any::<bool>(), 2),
        ) {
            let p = PolicyDistribution { mean: m[..2].to_vec(), log_std: s[..2].to_vec(), logit: l[..2].to_vec() };
            let q = PolicyDistribution { mean: m[2..].to_vec(), log_std: s[2..].to_vec(), logit: l[2..].to_vec() };
            prop_assert!(kl_divergence(&p, &q, &mask) >= 0.0);
            fd_check(|x| kl_divergence(&p, x, &mask), &q, &kl_grad(&p, &q, &mask));
            let a = PolicySample { u: u.clone(), on: on.clone() };
            fd_check(|x| log_prob(x, &a, &mask), &p, &log_prob_grad(&p, &a, &mask));
        }

        #[test]
        fn fisher_is_kl_hessian(m in -2.0f64..2.0, s in -1.5f64..1.0, l in -4.0f64..4.0) {
            // ∂²KL(p‖q)/∂q² at q = p equals the Fisher weight
            let p = dist(m, s, l);
            let w = fisher_weights(&p, &[false]);
            let h = 1e-4;
            let second = |f: &dyn Fn(f64) -> PolicyDistribution<f64>| {
                (kl_divergence(&p, &f(h), &[false]) + kl_divergence(&p, &f(-h), &[false])) / (h * h)
            };
            prop_assert!((second(&|e| dist(m + e, s, l)) - w.mean[0]).abs() <= 1e-4 * w.mean[0].max(1.0));
            prop_assert!((second(&|e| dist(m, s + e, l)) - w.log_std[0]).abs() <= 1e-4 * 2.0);
            prop_assert!((second(&|e| dist(m, s, l + e)) - w.logit[0]).abs() <= 1e-4);
        }
    }

    #[test]
    fn policy_backprop_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pol = HybridPolicy::<f64>::new(4, &[16, 8], 2, 2, -0.3, &mut rng);
        let obs = [0.2, -0.4, 0.9, 0.1];
        let a = PolicySample { u: vec![0.5, -0.2], on: vec![true, false] };
        let mask = [false, true];
        let g = pol.log_prob_gradient(&[(&obs, &a, &mask, 1.0)]).unwrap();
        let h = 1e-5;
        for k in (0..pol.params.len()).step_by(7).chain([pol.params.len() - 1]) {
            let eval = |s: f64| {
                let mut p = pol.clone();
                p.params.as_mut_slice()[k] += s;
                log_prob(&p.dist(&obs).unwrap(), &a, &mask)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-4 * g[k].abs().max(fd.abs()).max(1e-4), "param {k}: {} vs {fd}", g[k]);
        }
    }

    #[test]
    fn clamped_log_std_has_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pol = HybridPolicy::<f64>::new(2, &[4], 1, 0, 0.0, &mut rng);
        pol.params.extra_mut()[0] = 3.0;
        let d = pol.dist(&[0.1, 0.2]).unwrap();
        assert_eq!(d.log_std[0], LOG_STD_MAX);
        let a = PolicySample { u: vec![2.0], on: vec![] };
        let g = pol.log_prob_gradient(&[(&[0.1, 0.2], &a, &[], 1.0)]).unwrap();
        assert_eq!(*g.last().unwrap(), 0.0);
    }
}

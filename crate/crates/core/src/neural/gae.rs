use crate::scalar::Scalar;

/// Generalized advantage estimates `Â_t = Σ_l (γλ)^l δ_{t+l}` with
/// `δ_t = r_t + γ V_{t+1} − V_t`. `values` has one more entry than
/// `rewards`; its last element is the bootstrap (0 at a terminal state).
pub fn gae<T: Scalar>(rewards: &[T], values: &[T], gamma: T, lambda: T) -> Vec<T> {
    assert_eq!(values.len(), rewards.len() + 1, "values needs a bootstrap entry");
    let mut adv = vec![T::zero(); rewards.len()];
    let mut acc = T::zero();
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * values[t + 1] - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
    }
    adv
}

/// `G_t = Σ_l γ^l r_{t+l} + γ^{T−t} bootstrap`.
pub fn discounted_returns<T: Scalar>(rewards: &[T], gamma: T, bootstrap: T) -> Vec<T> {
    let mut out = vec![T::zero(); rewards.len()];
    let mut acc = bootstrap;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Shift to zero mean and scale to unit standard deviation in place.
pub fn normalize<T: Scalar>(x: &mut [T]) {
    if x.len() < 2 {
        return;
    }
    let n = T::from_usize_lossy(x.len());
    let mean = x.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = x.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    let sd = var.sqrt().max(T::lit(1e-8));
    x.iter_mut().for_each(|v| *v = (*v - mean) / sd);
}

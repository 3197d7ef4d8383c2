use super::mlp;
use super::{Manifest, NeuralError, ParamVector};
use crate::scalar::Scalar;
use rand::Rng;

/// Quadratic within `±delta`, linear outside.
pub fn huber<T: Scalar>(x: T, delta: T) -> T {
    let a = x.abs();
    if a <= delta {
        T::lit(0.5) * x * x
    } else {
        delta * (a - T::lit(0.5) * delta)
    }
}

pub fn huber_grad<T: Scalar>(x: T, delta: T) -> T {
    x.max(-delta).min(delta)
}

/// State-value network with a single linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueNet<T> {
    pub params: ParamVector<T>,
}

impl<T: Scalar> ValueNet<T> {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        ValueNet { params: ParamVector::orthogonal(Manifest::new(sizes, 0), rng, T::zero()) }
    }

    pub fn from_params(params: ParamVector<T>) -> Result<Self, NeuralError> {
        if params.manifest().output_dim() != 1 {
            return Err(NeuralError::Shape { what: "value head", expected: 1, got: params.manifest().output_dim() });
        }
        Ok(ValueNet { params })
    }

    pub fn value(&self, obs: &[T]) -> Result<T, NeuralError> {
        Ok(mlp::forward(&self.params, obs)?[0])
    }

    /// Mean Huber loss against fixed targets and its gradient.
    pub fn loss_gradient(&self, batch: &[(&[T], T)], delta: T) -> Result<(T, Vec<T>), NeuralError> {
        let mut grad = vec![T::zero(); self.params.len()];
        let mut loss = T::zero();
        if batch.is_empty() {
            return Ok((loss, grad));
        }
        let inv_n = T::one() / T::from_usize_lossy(batch.len());
        for &(obs, target) in batch {
            let cache = mlp::forward_cached(&self.params, obs)?;
            let err = cache.output()[0] - target;
            loss += huber(err, delta) * inv_n;
            mlp::backward(&self.params, &cache, &[huber_grad(err, delta)], inv_n, &mut grad);
        }
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(NeuralError::NonFinite("value loss".into()));
        }
        Ok((loss, grad))
    }
}

/// One TD(0) sample; `next_obs = None` marks a terminal transition.
#[derive(Debug, Clone, Copy)]
pub struct Transition<'a, T> {
    pub obs: &'a [T],
    pub reward: T,
    pub next_obs: Option<&'a [T]>,
}

/// Semi-gradient of the mean Huber TD(0) loss: the bootstrap target
/// `r + γ V(s')` is held fixed.
pub fn td_gradient<T: Scalar>(
    critic: &ValueNet<T>,
    batch: &[Transition<T>],
    gamma: T,
    huber_delta: T,
) -> Result<(T, Vec<T>), NeuralError> {
    let mut targets = Vec::with_capacity(batch.len());
    for tr in batch {
        let boot = match tr.next_obs {
            Some(s) => gamma * critic.value(s)?,
            None => T::zero(),
        };
        targets.push((tr.obs, tr.reward + boot));
    }
    critic.loss_gradient(&targets, huber_delta)
}

/// One batched semi-gradient descent step; returns the updated parameters
/// (before any consensus averaging).
pub fn td_update<T: Scalar>(
    critic: &ValueNet<T>,
    batch: &[Transition<T>],
    gamma: T,
    learning_rate: T,
) -> Result<ParamVector<T>, NeuralError> {
    let (_, grad) = td_gradient(critic, batch, gamma, T::one())?;
    let mut p = critic.params.clone();
    for (x, g) in p.as_mut_slice().iter_mut().zip(&grad) {
        *x -= learning_rate * *g;
    }
    if !p.is_finite() {
        return Err(NeuralError::NonFinite(format!("critic diverged (lr {learning_rate})")));
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn huber_pieces() {
        assert_eq!(huber(0.5, 1.0), 0.125);
        assert_eq!(huber(-3.0, 1.0), 2.5);
        assert_eq!(huber_grad(-3.0, 1.0), -1.0);
    }

    #[test]
    fn zero_td_error_leaves_params() {
        let net = ValueNet::<f64> { params: ParamVector::zeros(Manifest::new(vec![2, 1], 0)) };
        let obs = [1.0, 0.0];
        let next = [0.0, 1.0];
        let b = [Transition { obs: &obs, reward: 0.0, next_obs: Some(&next) }];
        assert_eq!(td_update(&net, &b, 0.95, 5e-4).unwrap(), net.params);
    }

    #[test]
    fn linear_single_transition_closed_form() {
        // V(s) = wᵀs + c; Δ = β·δ·∇V = β·δ·[s, 1] while |δ| ≤ 1
        let mut p = ParamVector::<f64>::zeros(Manifest::new(vec![2, 1], 0));
        p.set(&[0.2, -0.1, 0.05]);
        let net = ValueNet { params: p };
        let s = [1.0, 2.0];
        let s2 = [0.5, 0.5];
        let (gamma, beta, r) = (0.95, 5e-4, 0.3);
        let v = 0.2 - 0.2 + 0.05;
        let v2 = 0.1 - 0.05 + 0.05;
        let delta = r + gamma * v2 - v;
        let out = td_update(&net, &[Transition { obs: &s, reward: r, next_obs: Some(&s2) }], gamma, beta).unwrap();
        let exp = [0.2 + beta * delta * 1.0, -0.1 + beta * delta * 2.0, 0.05 + beta * delta];
        for (a, b) in out.as_slice().iter().zip(exp) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn three_state_mrp_converges() {
        // 0 → 1 → 2 → 0 cycle with rewards 1, 0, 2 and γ = 0.9:
        // V = r + γ P V solved by hand
        let gamma: f64 = 0.9;
        let g3 = gamma.powi(3);
        let v0 = (1.0 + gamma * 0.0 + gamma * gamma * 2.0) / (1.0 - g3);
        let v1 = (0.0 + gamma * 2.0 + gamma * gamma * 1.0) / (1.0 - g3);
        let v2 = (2.0 + gamma * 1.0 + gamma * gamma * 0.0) / (1.0 - g3);
        let onehot = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let rewards = [1.0, 0.0, 2.0];
        let mut net = ValueNet::<f64> { params: ParamVector::zeros(Manifest::new(vec![3, 1], 0)) };
        for _ in 0..10_000 {
            let batch: Vec<Transition<f64>> = (0..3)
                .map(|s| Transition { obs: &onehot[s], reward: rewards[s], next_obs: Some(&onehot[(s + 1) % 3]) })
                .collect();
            // the Huber clip only binds early on; lr chosen for the 1e4 budget
            net.params = td_update(&net, &batch, gamma, 0.5).unwrap();
        }
        for (s, v) in [v0, v1, v2].into_iter().enumerate() {
            assert!((net.value(&onehot[s]).unwrap() - v).abs() < 1e-3, "state {s}");
        }
    }

    #[test]
    fn value_loss_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = ValueNet::<f64>::new(3, &[12, 6], &mut rng);
        let xs = [[0.1, 0.5, -0.3], [1.0, -1.0, 0.2], [0.0, 0.3, 0.9]];
        let batch: Vec<(&[f64], f64)> = vec![(&xs[0], 0.4), (&xs[1], -2.5), (&xs[2], 0.0)];
        let (_, g) = net.loss_gradient(&batch, 1.0).unwrap();
        let h = 1e-5;
        for k in 0..net.params.len() {
            let eval = |s: f64| {
                let mut n = net.clone();
                n.params.as_mut_slice()[k] += s;
                n.loss_gradient(&batch, 1.0).unwrap().0
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((g[k] - fd).abs() <= 1e-4 * g[k].abs().max(fd.abs()).max(1e-4), "param {k}");
        }
    }
}

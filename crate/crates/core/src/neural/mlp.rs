//! Fully connected ReLU network over a [`ParamVector`]: forward pass,
//! reverse-mode gradient and forward-mode directional derivative.

use super::{NeuralError, ParamVector};
use crate::scalar::Scalar;

/// Layer outputs of one forward pass; `acts[0]` is the input and
/// `acts[k + 1]` the (post-ReLU for hidden layers) output of layer `k`.
#[derive(Debug, Clone)]
pub struct Activations<T> {
    pub acts: Vec<Vec<T>>,
}

impl<T: Scalar> Activations<T> {
    pub fn output(&self) -> &[T] {
        self.acts.last().unwrap()
    }
}

pub fn forward<T: Scalar>(p: &ParamVector<T>, input: &[T]) -> Result<Vec<T>, NeuralError> {
    Ok(forward_cached(p, input)?.acts.pop().unwrap())
}

pub fn forward_cached<T: Scalar>(p: &ParamVector<T>, input: &[T]) -> Result<Activations<T>, NeuralError> {
    let m = p.manifest();
    if input.len() != m.input_dim() {
        return Err(NeuralError::Shape { what: "network input", expected: m.input_dim(), got: input.len() });
    }
    let n = m.n_layers();
    let mut acts = Vec::with_capacity(n + 1);
    acts.push(input.to_vec());
    for k in 0..n {
        let (n_in, n_out) = (m.sizes[k], m.sizes[k + 1]);
        let w = p.weights(k);
        let b = p.bias(k);
        let a = &acts[k];
        let mut z: Vec<T> = (0..n_out)
            .map(|o| {
                let row = &w[o * n_in..(o + 1) * n_in];
                row.iter().zip(a).fold(b[o], |s, (&wi, &ai)| s + wi * ai)
            })
            .collect();
        if k + 1 < n {
            z.iter_mut().for_each(|x| *x = x.max(T::zero()));
        }
        acts.push(z);
    }
    Ok(Activations { acts })
}

/// Add `scale · ∂(grad_outᵀ f)/∂θ` into `grad[..network_len]`.
pub fn backward<T: Scalar>(p: &ParamVector<T>, cache: &Activations<T>, grad_out: &[T], scale: T, grad: &mut [T]) {
    let m = p.manifest();
    let n = m.n_layers();
    debug_assert_eq!(grad_out.len(), m.output_dim());
    let mut delta: Vec<T> = grad_out.iter().map(|&g| g * scale).collect();
    for k in (0..n).rev() {
        let (n_in, n_out) = (m.sizes[k], m.sizes[k + 1]);
        if k + 1 < n {
            for (d, &a) in delta.iter_mut().zip(&cache.acts[k + 1]) {
                if a <= T::zero() {
                    *d = T::zero();
                }
            }
        }
        let (wo, bo) = m.layer_offsets(k);
        let a = &cache.acts[k];
        for o in 0..n_out {
            let d = delta[o];
            if d == T::zero() {
                continue;
            }
            let gw = &mut grad[wo + o * n_in..wo + (o + 1) * n_in];
            for (g, &ai) in gw.iter_mut().zip(a) {
                *g += d * ai;
            }
            grad[bo + o] += d;
        }
        if k > 0 {
            let w = p.weights(k);
            let mut prev = vec![T::zero(); n_in];
            for o in 0..n_out {
                let d = delta[o];
                if d == T::zero() {
                    continue;
                }
                for (pv, &wi) in prev.iter_mut().zip(&w[o * n_in..(o + 1) * n_in]) {
                    *pv += d * wi;
                }
            }
            delta = prev;
        }
    }
}

/// Directional derivative of the output along parameter direction `v`
/// (only the network part of `v` is read).
pub fn jvp<T: Scalar>(p: &ParamVector<T>, cache: &Activations<T>, v: &[T]) -> Vec<T> {
    let m = p.manifest();
    let n = m.n_layers();
    let mut t = vec![T::zero(); m.input_dim()];
    for k in 0..n {
        let (n_in, n_out) = (m.sizes[k], m.sizes[k + 1]);
        let (wo, bo) = m.layer_offsets(k);
        let w = p.weights(k);
        let a = &cache.acts[k];
        let mut next: Vec<T> = (0..n_out)
            .map(|o| {
                let mut s = v[bo + o];
                for i in 0..n_in {
                    s += w[o * n_in + i] * t[i] + v[wo + o * n_in + i] * a[i];
                }
                s
            })
            .collect();
        if k + 1 < n {
            for (x, &a) in next.iter_mut().zip(&cache.acts[k + 1]) {
                if a <= T::zero() {
                    *x = T::zero();
                }
            }
        }
        t = next;
    }
    t
}

//! Agent communication graph and consensus averaging of critic parameters.

use crate::linalg::DenseMatrix;
use crate::neural::ParamVector;
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph: edge ({0}, {1}) references a missing agent")]
    Edge(usize, usize),
    #[error("graph: agents are not all connected")]
    Disconnected,
    #[error("graph: weights {0}")]
    Weights(String),
}

/// Undirected graph over agents with a doubly stochastic weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommunicationGraph {
    pub n: usize,
    pub edges: Vec<(usize, usize)>,
    /// Row-major `n × n`.
    pub weights: Vec<f64>,
}

const STOCHASTIC_TOL: f64 = 1e-9;

fn normalize_edges(n: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>, GraphError> {
    let mut out = Vec::new();
    for &(a, b) in edges {
        if a >= n || b >= n {
            return Err(GraphError::Edge(a, b));
        }
        if a != b {
            let e = (a.min(b), a.max(b));
            if !out.contains(&e) {
                out.push(e);
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

impl CommunicationGraph {
    /// Metropolis-Hastings weights: `1 / (1 + max(deg_i, deg_j))` on edges,
    /// the remainder on the diagonal.
    pub fn metropolis(n: usize, edges: &[(usize, usize)]) -> Result<Self, GraphError> {
        let edges = normalize_edges(n, edges)?;
        let mut deg = vec![0usize; n];
        for &(a, b) in &edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        let mut w = vec![0.0; n * n];
        for &(a, b) in &edges {
            let c = 1.0 / (1.0 + deg[a].max(deg[b]) as f64);
            w[a * n + b] = c;
            w[b * n + a] = c;
        }
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[i * n + j]).sum();
            w[i * n + i] = 1.0 - off;
        }
        let g = CommunicationGraph { n, edges, weights: w };
        g.validate()?;
        Ok(g)
    }

    pub fn ring(n: usize) -> Self {
        let edges: Vec<_> = match n {
            0 | 1 => vec![],
            2 => vec![(0, 1)],
            _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        };
        Self::metropolis(n, &edges).expect("ring is connected")
    }

    pub fn complete(n: usize) -> Self {
        let edges: Vec<_> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        Self::metropolis(n, &edges).expect("complete graph is connected")
    }

    /// Custom weights, checked against the edge set.
    pub fn with_weights(n: usize, edges: &[(usize, usize)], weights: Vec<f64>) -> Result<Self, GraphError> {
        let edges = normalize_edges(n, edges)?;
        let g = CommunicationGraph { n, edges, weights };
        g.validate()?;
        Ok(g)
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[i * self.n + j]
    }

    pub fn matrix<T: Scalar>(&self) -> DenseMatrix<T> {
        let rows: Vec<Vec<T>> =
            (0..self.n).map(|i| (0..self.n).map(|j| T::lit(self.weight(i, j))).collect()).collect();
        DenseMatrix::from_rows(&rows)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.n;
        if self.weights.len() != n * n {
            return Err(GraphError::Weights(format!("matrix has {} entries for {n} agents", self.weights.len())));
        }
        for i in 0..n {
            for j in 0..n {
                let w = self.weight(i, j);
                if !(0.0..=1.0).contains(&w) {
                    return Err(GraphError::Weights(format!("c({i},{j}) = {w} outside [0, 1]")));
                }
                let linked = i == j || self.edges.contains(&(i.min(j), i.max(j)));
                if w > 0.0 && !linked {
                    return Err(GraphError::Weights(format!("c({i},{j}) = {w} without an edge")));
                }
            }
            let row: f64 = (0..n).map(|j| self.weight(i, j)).sum();
            let col: f64 = (0..n).map(|j| self.weight(j, i)).sum();
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(GraphError::Weights(format!(
                    "not doubly stochastic: row {i} sums to {row}, column {i} to {col}"
                )));
            }
        }
        if n > 0 {
            let mut seen = vec![false; n];
            let mut stack = vec![0];
            seen[0] = true;
            while let Some(v) = stack.pop() {
                for &(a, b) in &self.edges {
                    let other = if a == v { b } else if b == v { a } else { continue };
                    if !seen[other] {
                        seen[other] = true;
                        stack.push(other);
                    }
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(GraphError::Disconnected);
            }
        }
        Ok(())
    }
}

/// `ϕ_i ← Σ_j c(i, j) ϕ̃_j`.
pub fn consensus_update<T: Scalar>(phis: &[ParamVector<T>], graph: &CommunicationGraph) -> Vec<ParamVector<T>> {
    assert_eq!(phis.len(), graph.n, "one parameter vector per agent");
    (0..graph.n)
        .map(|i| {
            let mut out = phis[i].clone();
            let slot = out.as_mut_slice();
            slot.iter_mut().for_each(|x| *x = T::zero());
            for (j, phi) in phis.iter().enumerate() {
                let c = graph.weight(i, j);
                if c != 0.0 {
                    crate::scalar::axpy(T::lit(c), phi.as_slice(), slot);
                }
            }
            out
        })
        .collect()
}

/// `max_{i,j} ‖ϕ_i − ϕ_j‖∞`.
pub fn disagreement<T: Scalar>(phis: &[ParamVector<T>]) -> T {
    let mut worst = T::zero();
    for i in 0..phis.len() {
        for j in i + 1..phis.len() {
            for (&a, &b) in phis[i].as_slice().iter().zip(phis[j].as_slice()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Manifest;
    use proptest::prelude::*;

    fn pv(x: &[f64]) -> ParamVector<f64> {
        ParamVector::from_vec(Manifest::new(vec![x.len() - 1, 1], 0), x.to_vec()).unwrap()
    }

    #[test]
    fn ring_of_five_is_metropolis() {
        let g = CommunicationGraph::ring(5);
        assert_eq!(g.edges.len(), 5);
        for i in 0..5 {
            assert!((g.weight(i, i) - 1.0 / 3.0).abs() < 1e-15);
            assert!((g.weight(i, (i + 1) % 5) - 1.0 / 3.0).abs() < 1e-15);
            assert_eq!(g.weight(i, (i + 2) % 5), 0.0);
        }
    }

    #[test]
    fn star_weights_use_max_degree() {
        let g = CommunicationGraph::metropolis(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        assert!((g.weight(0, 1) - 0.25).abs() < 1e-15);
        assert!((g.weight(0, 0) - 0.25).abs() < 1e-15);
        assert!((g.weight(1, 1) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_graphs() {
        assert_eq!(CommunicationGraph::metropolis(3, &[(0, 1)]), Err(GraphError::Disconnected));
        assert_eq!(CommunicationGraph::metropolis(2, &[(0, 2)]), Err(GraphError::Edge(0, 2)));
        let e = CommunicationGraph::with_weights(2, &[(0, 1)], vec![0.6, 0.4, 0.6, 0.4]).unwrap_err();
        assert!(matches!(e, GraphError::Weights(m) if m.contains("doubly stochastic")));
        let e = CommunicationGraph::with_weights(3, &[(0, 1), (1, 2)], vec![0.5, 0.0, 0.5, 0.0, 0.5, 0.5, 0.5, 0.5, 0.0])
            .unwrap_err();
        assert!(matches!(e, GraphError::Weights(m) if m.contains("without an edge")));
    }

    #[test]
    fn two_agents_average() {
        let g = CommunicationGraph::with_weights(2, &[(0, 1)], vec![0.5; 4]).unwrap();
        let out = consensus_update(&[pv(&[1.0, 2.0]), pv(&[3.0, -2.0])], &g);
        assert_eq!(out[0].as_slice(), &[2.0, 0.0]);
        assert_eq!(out[1].as_slice(), &[2.0, 0.0]);
    }

    #[test]
    fn identical_params_are_a_fixed_point() {
        let p = pv(&[0.3, -1.5, 2.25]);
        let out = consensus_update(&vec![p.clone(); 5], &CommunicationGraph::ring(5));
        assert!(out.iter().all(|o| *o == p));
    }

    proptest! {
        #[test]
        fn ring_averaging_contracts_to_mean(vals in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 4), 5)) {
            let g = CommunicationGraph::ring(5);
            let mut phis: Vec<_> = vals.iter().map(|v| pv(v)).collect();
            let mean: Vec<f64> = (0..4).map(|k| vals.iter().map(|v| v[k]).sum::<f64>() / 5.0).collect();
            let mut prev = disagreement(&phis);
            for _ in 0..200 {
                phis = consensus_update(&phis, &g);
                for k in 0..4 {
                    let m = phis.iter().map(|p| p.as_slice()[k]).sum::<f64>() / 5.0;
                    prop_assert!((m - mean[k]).abs() <= 1e-10);
                }
                let d = disagreement(&phis);
                prop_assert!(d <= prev + 1e-12);
                prev = d;
            }
            prop_assert!(prev <= 1e-8);
        }
    }
}

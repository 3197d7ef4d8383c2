use super::{GridError, Line};
use std::collections::VecDeque;

/// Rooted-tree view of a radial network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Topology {
    pub root: usize,
    /// Breadth-first order from the root.
    pub order: Vec<usize>,
    pub parent_line: Vec<Option<usize>>,
    pub child_lines: Vec<Vec<usize>>,
    pub depth: Vec<usize>,
}

impl Topology {
    /// Build the rooted tree and orient every line parent → child.
    pub(crate) fn build(n: usize, root: usize, lines: &mut [Line]) -> Result<Self, GridError> {
        let mut adjacency: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (l, line) in lines.iter().enumerate() {
            adjacency[line.from_bus].push(l);
            adjacency[line.to_bus].push(l);
        }
        let mut parent_line = vec![None; n];
        let mut child_lines = vec![Vec::new(); n];
        let mut depth = vec![0; n];
        let mut seen = vec![false; n];
        let mut used = vec![false; lines.len()];
        let mut order = Vec::with_capacity(n);
        let mut queue = VecDeque::from([root]);
        seen[root] = true;
        while let Some(bus) = queue.pop_front() {
            order.push(bus);
            for &l in &adjacency[bus] {
                if used[l] {
                    continue;
                }
                used[l] = true;
                let other = if lines[l].from_bus == bus { lines[l].to_bus } else { lines[l].from_bus };
                if seen[other] {
                    return Err(GridError::Invalid(format!("line {l} closes a loop at bus {other}")));
                }
                if lines[l].from_bus != bus {
                    let line = &mut lines[l];
                    std::mem::swap(&mut line.from_bus, &mut line.to_bus);
                }
                seen[other] = true;
                parent_line[other] = Some(l);
                child_lines[bus].push(l);
                depth[other] = depth[bus] + 1;
                queue.push_back(other);
            }
        }
        if let Some(orphan) = seen.iter().position(|s| !s) {
            return Err(GridError::Invalid(format!(
                "network is not connected: bus {orphan} unreachable from slack"
            )));
        }
        Ok(Topology { root, order, parent_line, child_lines, depth })
    }

    pub fn parent_bus(&self, bus: usize, lines: &[Line]) -> Option<usize> {
        self.parent_line[bus].map(|l| lines[l].from_bus)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::NetworkModel;

    fn l(a: usize, b: usize) -> Line {
        Line { from_bus: a, to_bus: b, r: 0.0, x: 0.0, i_max_sq: 1.0 }
    }

    #[test]
    fn path_graph_order() {
        let mut lines = vec![l(0, 1), l(1, 2)];
        let t = Topology::build(3, 0, &mut lines).unwrap();
        assert_eq!(t.order, vec![0, 1, 2]);
    }

    #[test]
    fn star_root_first_stable_leaves() {
        let mut lines = vec![l(0, 3), l(0, 1), l(2, 0)];
        let t = Topology::build(4, 0, &mut lines).unwrap();
        assert_eq!(t.order, vec![0, 3, 1, 2]);
        let again = Topology::build(4, 0, &mut lines.clone()).unwrap();
        assert_eq!(t.order, again.order);
    }

    #[test]
    fn ieee33_order_is_parent_before_child() {
        let net = NetworkModel::ieee33();
        let order = net.topological_order();
        assert_eq!(order.len(), 33);
        assert_eq!(order[0], 0);
        let mut position = vec![usize::MAX; 33];
        for (k, &b) in order.iter().enumerate() {
            assert_eq!(position[b], usize::MAX, "bus {b} appears twice");
            position[b] = k;
        }
        for line in &net.lines {
            assert!(position[line.from_bus] < position[line.to_bus]);
        }
    }
}

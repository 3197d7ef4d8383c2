use super::DEAD_INFLUX_MW;
use crate::dispatch::DispatchSolution;
use crate::grid::NetworkModel;
use std::collections::VecDeque;

/// Bus-by-bus weighted average of upstream intensities, visiting buses in a
/// topological order of the directed flow graph (not the feeder tree, since
/// flows may run toward the slack). Shares no code with the matrix path.
pub fn iterative_intensity_oracle(net: &NetworkModel, sol: &DispatchSolution, gen_intensity: &[f64]) -> Vec<f64> {
    let n = net.n_buses();
    // (sender, receiver, received MW)
    let mut edges = Vec::new();
    for (l, line) in net.lines.iter().enumerate() {
        let p = sol.p_flow[l];
        let loss = sol.p_loss[l];
        if p > 0.0 && p - loss > 0.0 {
            edges.push((line.from_bus, line.to_bus, p - loss));
        } else if p < 0.0 && loss - p > 0.0 {
            edges.push((line.to_bus, line.from_bus, -p));
        }
    }
    let mut indeg = vec![0usize; n];
    let mut out: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut inc: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (e, &(s, r, _)) in edges.iter().enumerate() {
        indeg[r] += 1;
        out[s].push(e);
        inc[r].push(e);
    }
    let mut gen_p = vec![0.0; n];
    let mut gen_e = vec![0.0; n];
    for (z, g) in net.generators.iter().enumerate() {
        let p = sol.p_gen[z].max(0.0);
        gen_p[g.bus] += p;
        gen_e[g.bus] += p * gen_intensity[z];
    }

    let mut psi = vec![0.0; n];
    let mut queue: VecDeque<usize> = (0..n).filter(|&b| indeg[b] == 0).collect();
    while let Some(b) = queue.pop_front() {
        let mut flow = gen_p[b];
        let mut emis = gen_e[b];
        for &e in &inc[b] {
            let (s, _, p) = edges[e];
            flow += p;
            emis += p * psi[s];
        }
        psi[b] = if flow > DEAD_INFLUX_MW { emis / flow } else { 0.0 };
        for &e in &out[b] {
            let r = edges[e].1;
            indeg[r] -= 1;
            if indeg[r] == 0 {
                queue.push_back(r);
            }
        }
    }
    psi
}

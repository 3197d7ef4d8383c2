//! Carbon emission flow: attribution of generator emissions to buses along
//! the dispatched power flows.
//!
//! Each line is seen as two terminal injections, `P_from` out of the sending
//! bus and `−(P_from − loss)` out of the receiving bus. Only the power that
//! actually arrives at a bus counts toward its influx, so line losses are
//! charged to the sender at the sender's intensity.

mod ledger;
mod oracle;

pub use ledger::{accrue_agent_emissions, EmissionLedger};
pub use oracle::iterative_intensity_oracle;

use crate::dispatch::DispatchSolution;
use crate::grid::{GeneratorKind, NetworkModel};
use crate::linalg::{lu_solve, DenseMatrix};
use crate::scalar::Scalar;
use thiserror::Error;

/// Buses whose total influx is at or below this value (MW) are dead: they
/// carry no power, receive intensity 0 and are excluded from bound checks.
pub const DEAD_INFLUX_MW: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CarbonError {
    #[error("invalid carbon-flow input: {0}")]
    Input(String),
    #[error("nodal intensity system is singular at buses {buses:?} (power circulates without a source)")]
    Singular { buses: Vec<usize> },
}

/// Received active power per line end, MW. `(to, from)`: power delivered to
/// the to-bus and to the from-bus respectively; at most one is non-zero.
fn received(p_from: f64, loss: f64) -> (f64, f64) {
    let to = if p_from > 0.0 { (p_from - loss).max(0.0) } else { 0.0 };
    let from = if loss - p_from > 0.0 { (-p_from).max(0.0) } else { 0.0 };
    (to, from)
}

/// Gross power pushed into the line at each end, MW: `(from, to)`.
fn sent(p_from: f64, loss: f64) -> (f64, f64) {
    (p_from.max(0.0), (loss - p_from).max(0.0))
}

/// `N×N` matrix of received flows: entry `(n, m)` is the power arriving at
/// `m` over a line from `n`, zero if the flow runs the other way.
pub fn build_branch_flow_matrix<T: Scalar>(net: &NetworkModel, sol: &DispatchSolution) -> DenseMatrix<T> {
    let mut pb = DenseMatrix::zeros(net.n_buses(), net.n_buses());
    for (l, line) in net.lines.iter().enumerate() {
        let (to, from) = received(sol.p_flow[l], sol.p_loss[l]);
        if to > 0.0 {
            pb[(line.from_bus, line.to_bus)] = T::lit(to);
        }
        if from > 0.0 {
            pb[(line.to_bus, line.from_bus)] = T::lit(from);
        }
    }
    pb
}

/// Per-generator intensity for one step, with the grid connection at
/// `psi_grid` and every other unit at its nameplate value.
pub fn gen_intensities(net: &NetworkModel, psi_grid: f64) -> Vec<f64> {
    net.generators
        .iter()
        .map(|g| if g.kind == GeneratorKind::Grid { psi_grid } else { g.carbon_intensity })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CarbonFlowState<T> {
    /// Received directed flows, MW.
    pub p_branch: DenseMatrix<T>,
    /// `N×Z`, generator output at its bus, MW.
    pub p_gen_inj: DenseMatrix<T>,
    /// tCO₂/MWh per generator.
    pub gen_intensity: Vec<T>,
    /// Diagonal of the influx matrix, MW.
    pub p_node_diag: Vec<T>,
    /// tCO₂/MWh per bus, empty until solved.
    pub nodal_intensity: Vec<T>,
}

impl<T: Scalar> CarbonFlowState<T> {
    pub fn from_dispatch(net: &NetworkModel, sol: &DispatchSolution, gen_intensity: &[f64]) -> Result<Self, CarbonError> {
        check_inputs(net, sol, gen_intensity)?;
        let n = net.n_buses();
        let p_branch = build_branch_flow_matrix::<T>(net, sol);
        let mut p_gen_inj = DenseMatrix::zeros(n, net.generators.len());
        for (z, g) in net.generators.iter().enumerate() {
            p_gen_inj[(g.bus, z)] = T::lit(sol.p_gen[z].max(0.0));
        }
        Ok(Self::from_parts(p_branch, p_gen_inj, gen_intensity.iter().map(|&x| T::lit(x)).collect()))
    }

    /// Assemble from raw matrices; the influx diagonal is derived.
    pub fn from_parts(p_branch: DenseMatrix<T>, p_gen_inj: DenseMatrix<T>, gen_intensity: Vec<T>) -> Self {
        let p_node_diag = (0..p_branch.rows()).map(|m| p_branch.col_sum(m) + p_gen_inj.row_sum(m)).collect();
        CarbonFlowState { p_branch, p_gen_inj, gen_intensity, p_node_diag, nodal_intensity: Vec::new() }
    }

    pub fn n_buses(&self) -> usize {
        self.p_node_diag.len()
    }

    pub fn dead_buses(&self) -> Vec<usize> {
        let tol = T::lit(DEAD_INFLUX_MW);
        (0..self.n_buses()).filter(|&m| self.p_node_diag[m] <= tol).collect()
    }

    /// Solve in place and return the intensities.
    pub fn solve(&mut self) -> Result<&[T], CarbonError> {
        self.nodal_intensity = solve_nodal_intensity(self)?;
        Ok(&self.nodal_intensity)
    }
}

fn check_inputs(net: &NetworkModel, sol: &DispatchSolution, gen_intensity: &[f64]) -> Result<(), CarbonError> {
    if !sol.is_optimal() {
        return Err(CarbonError::Input("dispatch solution is not optimal".into()));
    }
    if sol.p_flow.len() != net.n_lines() || sol.p_loss.len() != net.n_lines() || sol.p_gen.len() != net.generators.len() {
        return Err(CarbonError::Input("dispatch solution does not match the network".into()));
    }
    if gen_intensity.len() != net.generators.len() {
        return Err(CarbonError::Input(format!(
            "{} generator intensities for {} generators",
            gen_intensity.len(),
            net.generators.len()
        )));
    }
    if gen_intensity.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) {
        return Err(CarbonError::Input("generator intensities must be finite and non-negative".into()));
    }
    Ok(())
}

/// `(P^N − P^Bᵀ) Ψ^N = P^G Ψ^G`, with dead-bus rows replaced by `ψ = 0`.
pub fn solve_nodal_intensity<T: Scalar>(state: &CarbonFlowState<T>) -> Result<Vec<T>, CarbonError> {
    let n = state.n_buses();
    let dead = state.dead_buses();
    let mut is_dead = vec![false; n];
    for &m in &dead {
        is_dead[m] = true;
    }
    let mut a = DenseMatrix::zeros(n, n);
    let mut rhs = state.p_gen_inj.mul_vec(&state.gen_intensity);
    for m in 0..n {
        if is_dead[m] {
            a[(m, m)] = T::one();
            rhs[m] = T::zero();
            continue;
        }
        a[(m, m)] = state.p_node_diag[m];
        for k in 0..n {
            if k != m && !is_dead[k] {
                a[(m, k)] -= state.p_branch[(k, m)];
            }
        }
    }
    let psi = lu_solve(&a, &rhs, T::epsilon() * T::lit(64.0)).map_err(|e| CarbonError::Singular { buses: e.rows })?;
    if psi.iter().any(|x| !x.is_finite()) {
        return Err(CarbonError::Singular { buses: (0..n).filter(|&m| !psi[m].is_finite()).collect() });
    }
    // rounding can leave −1e-17 on pure-renewable buses
    Ok(psi.into_iter().map(|x| x.max(T::zero())).collect())
}

/// Convenience: matrix-path intensities in `f64` for one dispatch result.
pub fn nodal_intensity(net: &NetworkModel, sol: &DispatchSolution, gen_intensity: &[f64]) -> Result<Vec<f64>, CarbonError> {
    let mut st = CarbonFlowState::<f64>::from_dispatch(net, sol, gen_intensity)?;
    st.solve()?;
    Ok(st.nodal_intensity)
}

/// Where the step's generator emissions end up, tCO₂ over `dt_h` hours.
#[derive(Debug, Clone, PartialEq)]
pub struct EmissionBreakdown {
    /// Served load per bus implied by the flows, MW.
    pub load_mw: Vec<f64>,
    pub load_emission: Vec<f64>,
    pub loss_emission: Vec<f64>,
    pub generation_emission: f64,
}

impl EmissionBreakdown {
    /// `Σ load + Σ loss − generation`.
    pub fn imbalance(&self) -> f64 {
        self.load_emission.iter().sum::<f64>() + self.loss_emission.iter().sum::<f64>() - self.generation_emission
    }
}

pub fn emission_breakdown(
    net: &NetworkModel,
    sol: &DispatchSolution,
    gen_intensity: &[f64],
    nodal: &[f64],
    dt_h: f64,
) -> EmissionBreakdown {
    let n = net.n_buses();
    let mut influx = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut generation_emission = 0.0;
    for (z, g) in net.generators.iter().enumerate() {
        let p = sol.p_gen[z].max(0.0);
        influx[g.bus] += p;
        generation_emission += p * gen_intensity[z] * dt_h;
    }
    let mut loss_emission = Vec::with_capacity(net.n_lines());
    for (l, line) in net.lines.iter().enumerate() {
        let (a, b) = (line.from_bus, line.to_bus);
        let (rx_to, rx_from) = received(sol.p_flow[l], sol.p_loss[l]);
        let (tx_from, tx_to) = sent(sol.p_flow[l], sol.p_loss[l]);
        influx[b] += rx_to;
        influx[a] += rx_from;
        out[a] += tx_from;
        out[b] += tx_to;
        // whatever is sent but not delivered is lost at the sender's intensity
        let e = nodal[a] * (tx_from - rx_to) + nodal[b] * (tx_to - rx_from);
        loss_emission.push(e * dt_h);
    }
    let load_mw: Vec<f64> = (0..n).map(|m| influx[m] - out[m]).collect();
    let load_emission = (0..n).map(|m| nodal[m] * load_mw[m] * dt_h).collect();
    EmissionBreakdown { load_mw, load_emission, loss_emission, generation_emission }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use crate::dispatch::{solve_dispatch, DispatchInput};
    use proptest::prelude::*;

    fn path3(psi: f64) -> Case {
        radial_case(psi, &[(0.99, 1.0, 0.0, 0.5, 0.01), (0.99, 2.0, 0.0, 0.5, 0.02)])
    }

    #[test]
    fn forward_flow_fills_upper_entry_net_of_loss() {
        let c = radial_case(0.5, &[(0.0, 1.9, 0.0, 0.5, 0.1 / 1.9)]);
        assert!((c.sol.p_flow[0] - 2.0).abs() < 1e-12);
        let pb = build_branch_flow_matrix::<f64>(&c.net, &c.sol);
        assert!((pb[(0, 1)] - 1.9).abs() < 1e-12);
        assert_eq!(pb[(1, 0)], 0.0);
        assert_eq!(pb[(0, 0)], 0.0);
    }

    #[test]
    fn reversed_flow_fills_lower_entry() {
        // bus 1 generates 3 MW against 1 MW of load
        let c = radial_case(0.5, &[(0.0, 1.0, 0.4 + 3.0 / 2.6, 0.2, 0.05)]);
        assert!(c.sol.p_flow[0] < 0.0);
        let pb = build_branch_flow_matrix::<f64>(&c.net, &c.sol);
        assert_eq!(pb[(0, 1)], 0.0);
        assert!((pb[(1, 0)] - (2.0 - 0.1)).abs() < 1e-12);
    }

    #[test]
    fn single_source_path() {
        let c = path3(0.9);
        let psi = nodal_intensity(&c.net, &c.sol, &c.psi).unwrap();
        for x in psi {
            assert!((x - 0.9).abs() < 1e-12);
        }
    }

    #[test]
    fn two_sources_mix_at_a_bus() {
        let pb = DenseMatrix::<f64>::from_rows(&[vec![0.0, 10.0], vec![0.0, 0.0]]);
        let pg = DenseMatrix::from_rows(&[vec![10.0, 0.0], vec![0.0, 5.0]]);
        let mut st = CarbonFlowState::from_parts(pb, pg, vec![0.9, 0.1]);
        let psi = st.solve().unwrap();
        assert!((psi[1] - (10.0 * 0.9 + 5.0 * 0.1) / 15.0).abs() < 1e-12);
        assert!((psi[1] - 0.633_333_333_333_333_3).abs() < 1e-12);
    }

    #[test]
    fn all_renewable_is_uniform() {
        let c = radial_case(0.1, &[(0.0, 1.0, 0.9, 0.1, 0.01), (0.5, 0.5, 0.0, 0.1, 0.01), (0.9, 0.3, 0.7, 0.1, 0.0)]);
        for x in nodal_intensity(&c.net, &c.sol, &c.psi).unwrap() {
            assert!((x - 0.1).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_flow_network_is_all_dead() {
        let c = radial_case(0.6, &[(0.0, 0.0, 0.0, 0.5, 0.0), (0.5, 0.0, 0.0, 0.5, 0.0)]);
        let st = CarbonFlowState::<f64>::from_dispatch(&c.net, &c.sol, &c.psi).unwrap();
        assert_eq!(st.dead_buses(), vec![0, 1, 2]);
        assert_eq!(nodal_intensity(&c.net, &c.sol, &c.psi).unwrap(), vec![0.0; 3]);
        assert_eq!(iterative_intensity_oracle(&c.net, &c.sol, &c.psi), vec![0.0; 3]);
    }

    #[test]
    fn circulating_flow_is_singular() {
        let pb = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let pg = DenseMatrix::zeros(2, 1);
        let err = solve_nodal_intensity(&CarbonFlowState::from_parts(pb, pg, vec![0.5])).unwrap_err();
        assert!(matches!(err, CarbonError::Singular { .. }), "{err}");
    }

    #[test]
    fn rejects_unsolved_dispatch_and_bad_lengths() {
        let c = path3(0.5);
        assert!(matches!(nodal_intensity(&c.net, &c.sol, &[0.5, 0.5]), Err(CarbonError::Input(_))));
        let mut bad = c.sol.clone();
        bad.status = crate::dispatch::DispatchStatus::Infeasible;
        assert!(matches!(nodal_intensity(&c.net, &bad, &c.psi), Err(CarbonError::Input(_))));
    }

    #[test]
    fn ieee33_column_sums_match_flow_accounting() {
        let net = NetworkModel::ieee33();
        let inp = DispatchInput::nominal(&net, 80.0);
        let sol = solve_dispatch(&inp).unwrap();
        let pb = build_branch_flow_matrix::<f64>(&net, &sol);
        for m in 0..net.n_buses() {
            // what must arrive over lines = load + what leaves − local generation
            let gen: f64 = net.generators_at(m).map(|(z, _)| sol.p_gen[z].max(0.0)).sum();
            let mut leaves = 0.0;
            for &l in net.child_lines(m) {
                leaves += sol.p_flow[l].max(0.0);
            }
            if let Some(l) = net.parent_line(m) {
                leaves += (sol.p_loss[l] - sol.p_flow[l]).max(0.0);
            }
            let expected = inp.nodal_load_p[m] + leaves - gen;
            assert!((pb.col_sum(m) - expected).abs() < 1e-6, "bus {m}: {} vs {expected}", pb.col_sum(m));
        }
        let psi = gen_intensities(&net, 0.6);
        let matrix = nodal_intensity(&net, &sol, &psi).unwrap();
        let oracle = iterative_intensity_oracle(&net, &sol, &psi);
        for (a, b) in matrix.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-9);
        }
        let br = emission_breakdown(&net, &sol, &psi, &matrix, 1.0);
        assert!(br.imbalance().abs() < 1e-8);
        for m in 0..net.n_buses() {
            assert!((br.load_mw[m] - inp.nodal_load_p[m]).abs() < 1e-6);
        }
    }

    #[test]
    fn single_precision_matches_double() {
        let c = radial_case(0.7, &[(0.0, 1.0, 0.9, 0.2, 0.01), (0.5, 0.5, 0.0, 0.3, 0.02), (0.9, 0.8, 0.0, 0.9, 0.01)]);
        let mut s32 = CarbonFlowState::<f32>::from_dispatch(&c.net, &c.sol, &c.psi).unwrap();
        let psi32 = s32.solve().unwrap().to_vec();
        let psi64 = nodal_intensity(&c.net, &c.sol, &c.psi).unwrap();
        for (a, b) in psi32.iter().zip(&psi64) {
            assert!((*a as f64 - b).abs() < 1e-5);
        }
    }

    fn draws() -> impl Strategy<Value = (f64, Vec<BusDraw>)> {
        (
            0.05f64..1.0,
            prop::collection::vec((0.0f64..1.0, 0.0f64..3.0, 0.0f64..1.0, 0.0f64..1.2, 0.0f64..0.08), 1..40),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(256))]

        #[test]
        fn matrix_solve_matches_oracle((root, d) in draws()) {
            let c = radial_case(root, &d);
            let a = nodal_intensity(&c.net, &c.sol, &c.psi).unwrap();
            let b = iterative_intensity_oracle(&c.net, &c.sol, &c.psi);
            for m in 0..a.len() {
                prop_assert!((a[m] - b[m]).abs() <= 1e-9, "bus {m}: {} vs {}", a[m], b[m]);
            }
        }

        #[test]
        fn intensities_are_convex_combinations((root, d) in draws()) {
            let c = radial_case(root, &d);
            let st = CarbonFlowState::<f64>::from_dispatch(&c.net, &c.sol, &c.psi).unwrap();
            let dead = st.dead_buses();
            let used: Vec<f64> = (0..c.psi.len()).filter(|&z| c.sol.p_gen[z] > 0.0).map(|z| c.psi[z]).collect();
            let lo = used.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = used.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let psi = nodal_intensity(&c.net, &c.sol, &c.psi).unwrap();
            for m in 0..psi.len() {
                if !dead.contains(&m) {
                    prop_assert!(psi[m] >= lo - 1e-12 && psi[m] <= hi + 1e-12, "bus {m}: {} not in [{lo}, {hi}]", psi[m]);
                }
            }
        }

        #[test]
        fn emissions_are_conserved((root, d) in draws()) {
            let c = radial_case(root, &d);
            let psi = nodal_intensity(&c.net, &c.sol, &c.psi).unwrap();
            let br = emission_breakdown(&c.net, &c.sol, &c.psi, &psi, 1.0);
            prop_assert!(br.imbalance().abs() <= 1e-8, "imbalance {}", br.imbalance());
            for m in 0..psi.len() {
                prop_assert!((br.load_mw[m] - c.load[m]).abs() < 1e-9);
            }
        }

        #[test]
        fn scaling_flows_leaves_intensity_unchanged((root, d) in draws(), k in 0.01f64..100.0) {
            let c = radial_case(root, &d);
            let st = CarbonFlowState::<f64>::from_dispatch(&c.net, &c.sol, &c.psi).unwrap();
            let mut scaled = CarbonFlowState::from_parts(st.p_branch.map(|x| x * k), st.p_gen_inj.map(|x| x * k), st.gen_intensity.clone());
            let mut base = st;
            let a = base.solve().unwrap().to_vec();
            let b = scaled.solve().unwrap();
            for m in 0..a.len() {
                prop_assert!((a[m] - b[m]).abs() <= 1e-9 * a[m].abs().max(1.0));
            }
        }
    }
}

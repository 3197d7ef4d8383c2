use super::{solve_dispatch, DispatchError, DispatchInput, DispatchSolution};
use crate::grid::NetworkModel;
use serde::{Deserialize, Serialize};

/// Per-line distance between the relaxed cone and the branch-flow equality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactnessReport {
    /// `(v_from·I − P² − Q²) / (v_from·I_max)` per line, in p.u. of the line's
    /// squared apparent-power rating.
    pub gaps: Vec<f64>,
    /// Lines whose gap exceeds the tolerance.
    pub inexact: Vec<usize>,
    pub max_gap: f64,
    pub tol: f64,
}

impl ExactnessReport {
    pub fn is_exact(&self) -> bool {
        self.inexact.is_empty()
    }
}

pub fn check_soc_exactness(net: &NetworkModel, sol: &DispatchSolution, tol: f64) -> ExactnessReport {
    let s = net.s_base;
    let gaps: Vec<f64> = net
        .lines
        .iter()
        .enumerate()
        .map(|(l, line)| {
            let v = sol.v_sq[line.from_bus];
            let p = sol.p_flow[l] / s;
            let q = sol.q_flow[l] / s;
            (v * sol.i_sq[l] - p * p - q * q) / (v * line.i_max_sq)
        })
        .collect();
    let inexact = gaps.iter().enumerate().filter(|(_, &g)| g > tol).map(|(l, _)| l).collect();
    let max_gap = gaps.iter().fold(0.0f64, |m, &g| m.max(g));
    ExactnessReport { gaps, inexact, max_gap, tol }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCheck {
    /// Reported locational price at the bus, $/MWh.
    pub dual: f64,
    /// `(obj(load + eps) − obj(load)) / eps`.
    pub finite_difference: f64,
    /// `(obj(load) − obj(load − eps)) / eps`.
    pub backward_difference: f64,
    /// Forward and backward slopes disagree (kink in the value function).
    pub degenerate: bool,
}

impl SensitivityCheck {
    pub fn relative_error(&self) -> f64 {
        (self.dual - self.finite_difference).abs() / self.dual.abs().max(1e-12)
    }
}

/// Compare the reported price at `bus` with a finite difference of the
/// optimal cost. `tol` is the relative agreement expected of a regular point;
/// a kink is flagged when the one-sided slopes differ by more than `10·tol`.
pub fn dlmp_sensitivity_check(
    input: &DispatchInput,
    bus: usize,
    eps: f64,
    tol: f64,
) -> Result<SensitivityCheck, DispatchError> {
    let base = solve_dispatch(input)?;
    if !base.is_optimal() {
        return Err(DispatchError::Input("base case is infeasible".into()));
    }
    let shifted = |delta: f64| -> Result<f64, DispatchError> {
        let mut inp = input.clone();
        inp.nodal_load_p[bus] = (inp.nodal_load_p[bus] + delta).max(0.0);
        let actual = inp.nodal_load_p[bus] - input.nodal_load_p[bus];
        let sol = solve_dispatch(&inp)?;
        if !sol.is_optimal() {
            return Err(DispatchError::Input(format!("perturbed case (bus {bus}, {delta:+} MW) is infeasible")));
        }
        Ok((sol.objective - base.objective) / actual)
    };
    let forward = shifted(eps)?;
    let backward = if input.nodal_load_p[bus] >= eps { shifted(-eps)? } else { forward };
    let scale = base.dlmp[bus].abs().max(1.0);
    Ok(SensitivityCheck {
        dual: base.dlmp[bus],
        finite_difference: forward,
        backward_difference: backward,
        degenerate: (forward - backward).abs() > 10.0 * tol * scale,
    })
}

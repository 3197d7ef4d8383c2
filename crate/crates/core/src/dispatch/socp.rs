//! Conic-form assembly of the DistFlow dispatch and solution extraction.
//!
//! Variables (all p.u.): `[p_gen | q_gen | P_line | Q_line | I_line | v_bus]`.
//! Rows are written as `A x + s = b`: equalities first (zero cone, including
//! boxes with no interior), then box bounds (non-negative cone), then one
//! rotated cone per line written as the 4-dimensional standard cone
//! `(I + v_from, 2P, 2Q, I − v_from)`.

use super::{DispatchError, DispatchInput, DispatchSolution, DispatchStatus};
use crate::grid::GeneratorKind;
use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};

struct Layout {
    z: usize,
    l: usize,
    n: usize,
}

impl Layout {
    fn p(&self, g: usize) -> usize {
        g
    }
    fn q(&self, g: usize) -> usize {
        self.z + g
    }
    fn pf(&self, l: usize) -> usize {
        2 * self.z + l
    }
    fn qf(&self, l: usize) -> usize {
        2 * self.z + self.l + l
    }
    fn i(&self, l: usize) -> usize {
        2 * self.z + 2 * self.l + l
    }
    fn v(&self, b: usize) -> usize {
        2 * self.z + 3 * self.l + b
    }
    fn len(&self) -> usize {
        2 * self.z + 3 * self.l + self.n
    }
}

/// Per-unit active-power bounds per generator after applying the period's
/// renewable maxima and grid import cap.
pub(super) fn generator_bounds(input: &DispatchInput) -> (Vec<f64>, Vec<f64>) {
    let net = input.net;
    let s = net.s_base;
    let mut res = input.res_cap.iter();
    let mut lo = Vec::with_capacity(net.generators.len());
    let mut hi = Vec::with_capacity(net.generators.len());
    for g in &net.generators {
        match g.kind {
            GeneratorKind::Renewable => {
                let cap = res.next().copied().unwrap_or(0.0) / s;
                lo.push(0.0);
                hi.push(cap.min(g.p_max));
            }
            GeneratorKind::Grid => {
                lo.push(0.0);
                hi.push(input.grid_cap / s);
            }
            _ => {
                lo.push(g.p_min);
                hi.push(g.p_max);
            }
        }
    }
    (lo, hi)
}

#[derive(Default)]
struct Rows {
    i: Vec<usize>,
    j: Vec<usize>,
    v: Vec<f64>,
    b: Vec<f64>,
}

impl Rows {
    fn push_row(&mut self, entries: &[(usize, f64)], rhs: f64) {
        let row = self.b.len();
        for &(col, val) in entries {
            if val != 0.0 {
                self.i.push(row);
                self.j.push(col);
                self.v.push(val);
            }
        }
        self.b.push(rhs);
    }
}

fn settings() -> DefaultSettings<f64> {
    DefaultSettings {
        verbose: false,
        max_iter: 200,
        tol_gap_abs: 1e-9,
        tol_gap_rel: 1e-9,
        tol_feas: 1e-9,
        tol_ktratio: 1e-7,
        presolve_enable: false,
        ..DefaultSettings::default()
    }
}

/// Second attempt when the first one stalls: default tolerances and
/// shorter steps, which keeps iterates away from the cone boundaries.
fn fallback_settings() -> DefaultSettings<f64> {
    DefaultSettings { verbose: false, max_iter: 200, presolve_enable: false, max_step_fraction: 0.9, ..DefaultSettings::default() }
}

/// A stalled solve is still used when its point checks out on its own:
/// balance and bounds within `ACCEPT_RESIDUAL` p.u., duality gap within
/// `ACCEPT_GAP` relative.
const ACCEPT_RESIDUAL: f64 = 1e-7;
const ACCEPT_GAP: f64 = 1e-6;
/// Minimum total phase-one mismatch, p.u., that counts as infeasible.
const INFEASIBLE_MISMATCH: f64 = 1e-6;

struct Conic {
    p: CscMatrix<f64>,
    q: Vec<f64>,
    a: CscMatrix<f64>,
    b: Vec<f64>,
    cones: Vec<SupportedConeT<f64>>,
    constant: f64,
}

impl Conic {
    fn solve(&self, settings: DefaultSettings<f64>) -> Result<DefaultSolver<f64>, DispatchError> {
        let mut solver = DefaultSolver::new(&self.p, &self.q, &self.a, &self.b, &self.cones, settings)
            .map_err(|e| DispatchError::Setup(format!("{e:?}")))?;
        solver.solve();
        Ok(solver)
    }
}

/// The dispatch SOCP, or with `elastic` its phase-one problem: free
/// active/reactive mismatch at every bus, total absolute mismatch minimized.
fn assemble(input: &DispatchInput, lay: &Layout, elastic: bool) -> Conic {
    let net = input.net;
    let s = net.s_base;
    let nx = lay.len();

    // objective ½xᵀPx + qᵀx (+ constant)
    let mut p_diag = vec![0.0; nx];
    let mut q = vec![0.0; nx];
    let mut constant = 0.0;
    for (z, g) in net.generators.iter().enumerate() {
        match g.kind {
            GeneratorKind::Diesel | GeneratorKind::Gas => {
                p_diag[lay.p(z)] = 2.0 * g.cost_a;
                q[lay.p(z)] = g.cost_b;
                constant += g.cost_c;
            }
            GeneratorKind::Renewable => q[lay.p(z)] = g.cost_k,
            GeneratorKind::Grid => q[lay.p(z)] = input.wholesale_price * s,
        }
    }
    if elastic {
        // phase one: only the mismatch is priced
        p_diag.iter_mut().for_each(|x| *x = 0.0);
        q.iter_mut().for_each(|x| *x = 0.0);
        constant = 0.0;
        p_diag.resize(nx + 4 * lay.n, 0.0);
        q.resize(nx + 4 * lay.n, 1.0);
    }
    let ncols = q.len();
    let nz: Vec<usize> = (0..ncols).filter(|&k| p_diag[k] != 0.0).collect();
    let p_mat = CscMatrix::new_from_triplets(ncols, ncols, nz.clone(), nz.clone(), nz.iter().map(|&k| p_diag[k]).collect());
    // slack pairs per bus: active +/−, reactive +/−
    let shed = |bus: usize, k: usize| nx + 4 * bus + k;

    let mut rows = Rows::default();
    // nodal active balance: these rows carry the locational prices
    for bus in 0..lay.n {
        let mut e: Vec<(usize, f64)> = net.generators_at(bus).map(|(z, _)| (lay.p(z), 1.0)).collect();
        if let Some(l) = net.parent_line(bus) {
            e.push((lay.pf(l), 1.0));
            e.push((lay.i(l), -net.lines[l].r));
        }
        for &l in net.child_lines(bus) {
            e.push((lay.pf(l), -1.0));
        }
        if elastic {
            e.extend([(shed(bus, 0), 1.0), (shed(bus, 1), -1.0)]);
        }
        rows.push_row(&e, input.nodal_load_p[bus] / s);
    }
    for bus in 0..lay.n {
        let mut e: Vec<(usize, f64)> = net.generators_at(bus).map(|(z, _)| (lay.q(z), 1.0)).collect();
        if let Some(l) = net.parent_line(bus) {
            e.push((lay.qf(l), 1.0));
            e.push((lay.i(l), -net.lines[l].x));
        }
        for &l in net.child_lines(bus) {
            e.push((lay.qf(l), -1.0));
        }
        if elastic {
            e.extend([(shed(bus, 2), 1.0), (shed(bus, 3), -1.0)]);
        }
        rows.push_row(&e, input.nodal_load_q[bus] / s);
    }
    for (l, line) in net.lines.iter().enumerate() {
        rows.push_row(
            &[
                (lay.v(line.to_bus), 1.0),
                (lay.v(line.from_bus), -1.0),
                (lay.pf(l), 2.0 * line.r),
                (lay.qf(l), 2.0 * line.x),
                (lay.i(l), -(line.r * line.r + line.x * line.x)),
            ],
            0.0,
        );
    }
    rows.push_row(&[(lay.v(net.slack()), 1.0)], net.slack_v_sq);

    // a box with no interior stalls the interior-point method; pin it instead
    let (lo, hi) = generator_bounds(input);
    let boxes: Vec<(usize, f64, f64)> = net
        .generators
        .iter()
        .enumerate()
        .flat_map(|(z, g)| {
            let (qlo, qhi) = if g.kind == GeneratorKind::Renewable { (0.0, 0.0) } else { (g.q_min, g.q_max) };
            [(lay.p(z), lo[z], hi[z]), (lay.q(z), qlo, qhi)]
        })
        .collect();
    let pinned = |lo: f64, hi: f64| hi - lo <= 1e-12;
    for &(col, lo, hi) in &boxes {
        if pinned(lo, hi) {
            rows.push_row(&[(col, 1.0)], 0.5 * (lo + hi));
        }
    }
    let n_eq = rows.b.len();

    for &(col, lo, hi) in &boxes {
        if !pinned(lo, hi) {
            rows.push_row(&[(col, 1.0)], hi);
            rows.push_row(&[(col, -1.0)], -lo);
        }
    }
    for bus in &net.buses {
        if !bus.is_slack {
            rows.push_row(&[(lay.v(bus.id), 1.0)], bus.v_max_sq);
            rows.push_row(&[(lay.v(bus.id), -1.0)], -bus.v_min_sq);
        }
    }
    for (l, line) in net.lines.iter().enumerate() {
        rows.push_row(&[(lay.i(l), 1.0)], line.i_max_sq);
        rows.push_row(&[(lay.i(l), -1.0)], 0.0);
    }
    for col in nx..ncols {
        rows.push_row(&[(col, -1.0)], 0.0);
    }
    let n_ineq = rows.b.len() - n_eq;

    for (l, line) in net.lines.iter().enumerate() {
        let vf = lay.v(line.from_bus);
        rows.push_row(&[(lay.i(l), -1.0), (vf, -1.0)], 0.0);
        rows.push_row(&[(lay.pf(l), -2.0)], 0.0);
        rows.push_row(&[(lay.qf(l), -2.0)], 0.0);
        rows.push_row(&[(lay.i(l), -1.0), (vf, 1.0)], 0.0);
    }

    let a = CscMatrix::new_from_triplets(rows.b.len(), ncols, rows.i, rows.j, rows.v);
    let mut cones = vec![SupportedConeT::ZeroConeT(n_eq), SupportedConeT::NonnegativeConeT(n_ineq)];
    cones.extend((0..lay.l).map(|_| SupportedConeT::SecondOrderConeT(4)));
    Conic { p: p_mat, q, a, b: rows.b, cones, constant }
}

pub(super) fn solve(input: &DispatchInput) -> Result<DispatchSolution, DispatchError> {
    let net = input.net;
    let lay = Layout { z: net.generators.len(), l: net.n_lines(), n: net.n_buses() };
    let conic = assemble(input, &lay, false);
    let mut iterations = 0;
    let mut last = SolverStatus::Unsolved;
    for (attempt, settings) in [settings(), fallback_settings()].into_iter().enumerate() {
        let solver = conic.solve(settings)?;
        let sol = &solver.solution;
        iterations += sol.iterations;
        last = sol.status;
        match sol.status {
            SolverStatus::Solved => return Ok(extract(input, &lay, &conic, sol, iterations, attempt > 0)),
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                return Ok(DispatchSolution::infeasible(iterations))
            }
            SolverStatus::AlmostSolved => {
                let out = extract(input, &lay, &conic, sol, iterations, true);
                let gap = (sol.obj_val - sol.obj_val_dual).abs() / sol.obj_val.abs().max(1.0);
                if out.balance_residual(input) <= ACCEPT_RESIDUAL
                    && out.bound_violation(input) <= ACCEPT_RESIDUAL
                    && gap <= ACCEPT_GAP
                {
                    return Ok(out);
                }
            }
            _ => {}
        }
    }
    // Divergent iterates without an infeasibility certificate: settle
    // feasibility on the phase-one problem, which always has a solution.
    let phase_one = assemble(input, &lay, true).solve(fallback_settings())?;
    iterations += phase_one.solution.iterations;
    if matches!(phase_one.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved)
        && phase_one.solution.obj_val > INFEASIBLE_MISMATCH
    {
        return Ok(DispatchSolution::infeasible(iterations));
    }
    Err(DispatchError::NotConverged { status: format!("{last:?}"), iterations })
}

fn extract(
    input: &DispatchInput,
    lay: &Layout,
    conic: &Conic,
    sol: &clarabel::solver::DefaultSolution<f64>,
    iterations: u32,
    reduced_accuracy: bool,
) -> DispatchSolution {
    let net = input.net;
    let s = net.s_base;
    let x = &sol.x;
    let z_dual = &sol.z;
    let p_gen: Vec<f64> = (0..lay.z).map(|g| x[lay.p(g)] * s).collect();
    let p_grid = net
        .generators_of_kind(GeneratorKind::Grid)
        .map(|(g, _)| p_gen[g])
        .sum();
    DispatchSolution {
        status: DispatchStatus::Optimal,
        q_gen: (0..lay.z).map(|g| x[lay.q(g)] * s).collect(),
        p_gen,
        p_grid,
        p_flow: (0..lay.l).map(|l| x[lay.pf(l)] * s).collect(),
        q_flow: (0..lay.l).map(|l| x[lay.qf(l)] * s).collect(),
        p_loss: net.lines.iter().enumerate().map(|(l, line)| line.r * x[lay.i(l)] * s).collect(),
        v_sq: (0..lay.n).map(|b| x[lay.v(b)]).collect(),
        i_sq: (0..lay.l).map(|l| x[lay.i(l)]).collect(),
        // Lagrangian f + zᵀ(Ax − b): ∂f*/∂b = −z, then $/(p.u. h) → $/MWh
        dlmp: (0..lay.n).map(|b| -z_dual[b] / s).collect(),
        objective: sol.obj_val + conic.constant,
        iterations,
        reduced_accuracy,
    }
}

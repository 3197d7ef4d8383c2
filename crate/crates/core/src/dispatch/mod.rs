//! Operator-side economic dispatch on the DistFlow second-order-cone relaxation.
//!
//! Each call is an independent single-period solve. Locational prices are the
//! multipliers of the per-bus active-power balance rows, reported with the
//! sign convention `dlmp[n] = ∂ objective / ∂ load[n]` in $/MWh.

mod exactness;
mod socp;

pub use exactness::{check_soc_exactness, dlmp_sensitivity_check, ExactnessReport, SensitivityCheck};

use crate::grid::{GeneratorKind, NetworkModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DispatchError {
    #[error("invalid dispatch input: {0}")]
    Input(String),
    #[error("conic solver did not converge (status {status}) after {iterations} iterations")]
    NotConverged { status: String, iterations: u32 },
    #[error("conic solver setup failed: {0}")]
    Setup(String),
}

/// One period's operating point submitted to the operator.
#[derive(Debug, Clone)]
pub struct DispatchInput<'a> {
    pub net: &'a NetworkModel,
    /// MW per bus.
    pub nodal_load_p: Vec<f64>,
    /// MVAr per bus.
    pub nodal_load_q: Vec<f64>,
    /// MW, one entry per renewable generator in network order.
    pub res_cap: Vec<f64>,
    /// $/MWh paid for grid import.
    pub wholesale_price: f64,
    /// MW import limit.
    pub grid_cap: f64,
}

impl<'a> DispatchInput<'a> {
    /// Nominal background loads, renewables at nameplate, grid at its file limit.
    pub fn nominal(net: &'a NetworkModel, wholesale_price: f64) -> Self {
        let s = net.s_base;
        let grid_cap = net
            .generators_of_kind(GeneratorKind::Grid)
            .map(|(_, g)| g.p_max * s)
            .sum();
        DispatchInput {
            net,
            nodal_load_p: net.buses.iter().map(|b| b.p_load * s).collect(),
            nodal_load_q: net.buses.iter().map(|b| b.q_load * s).collect(),
            res_cap: net.generators_of_kind(GeneratorKind::Renewable).map(|(_, g)| g.p_max * s).collect(),
            wholesale_price,
            grid_cap,
        }
    }

    pub fn validate(&self) -> Result<(), DispatchError> {
        let n = self.net.n_buses();
        if self.nodal_load_p.len() != n || self.nodal_load_q.len() != n {
            return Err(DispatchError::Input(format!("load vectors must have {n} entries")));
        }
        if self.nodal_load_p.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(DispatchError::Input("active loads must be finite and non-negative".into()));
        }
        if self.nodal_load_q.iter().any(|q| !q.is_finite()) {
            return Err(DispatchError::Input("reactive loads must be finite".into()));
        }
        let renewables: Vec<_> = self.net.generators_of_kind(GeneratorKind::Renewable).collect();
        if self.res_cap.len() != renewables.len() {
            return Err(DispatchError::Input(format!(
                "res_cap has {} entries for {} renewable units",
                self.res_cap.len(),
                renewables.len()
            )));
        }
        for (&cap, (_, g)) in self.res_cap.iter().zip(&renewables) {
            let limit = g.p_max * self.net.s_base;
            if !(cap >= 0.0) || cap > limit * (1.0 + 1e-9) + 1e-12 {
                return Err(DispatchError::Input(format!(
                    "renewable {} cap {cap} MW outside [0, {limit}]",
                    g.name
                )));
            }
        }
        if !(self.grid_cap >= 0.0) || !self.wholesale_price.is_finite() {
            return Err(DispatchError::Input("grid cap must be non-negative and price finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchStatus {
    Optimal,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DispatchSolution {
    pub status: DispatchStatus,
    /// MW per generator (network order, grid included).
    pub p_gen: Vec<f64>,
    /// MVAr per generator.
    pub q_gen: Vec<f64>,
    /// MW imported at the point of common coupling.
    pub p_grid: f64,
    /// Sending-end (from-bus) active flow per line, MW.
    pub p_flow: Vec<f64>,
    /// Sending-end reactive flow per line, MVAr.
    pub q_flow: Vec<f64>,
    /// Active loss `r·I` per line, MW.
    pub p_loss: Vec<f64>,
    /// Squared voltage per bus, p.u.
    pub v_sq: Vec<f64>,
    /// Squared current per line, p.u.
    pub i_sq: Vec<f64>,
    /// $/MWh per bus.
    pub dlmp: Vec<f64>,
    /// $/h, including constant generator terms.
    pub objective: f64,
    pub iterations: u32,
    /// The first solve stalled; the point comes from the fallback solve or
    /// passed the stand-alone residual and gap checks.
    pub reduced_accuracy: bool,
}

impl DispatchSolution {
    fn infeasible(iterations: u32) -> Self {
        DispatchSolution {
            status: DispatchStatus::Infeasible,
            p_gen: Vec::new(),
            q_gen: Vec::new(),
            p_grid: 0.0,
            p_flow: Vec::new(),
            q_flow: Vec::new(),
            p_loss: Vec::new(),
            v_sq: Vec::new(),
            i_sq: Vec::new(),
            dlmp: Vec::new(),
            objective: f64::NAN,
            iterations,
            reduced_accuracy: false,
        }
    }

    pub fn is_optimal(&self) -> bool {
        self.status == DispatchStatus::Optimal
    }

    /// Receiving-end (to-bus) active flow per line in MW: `p_flow − p_loss`.
    pub fn p_flow_received(&self) -> Vec<f64> {
        self.p_flow.iter().zip(&self.p_loss).map(|(p, l)| p - l).collect()
    }

    /// Worst absolute active/reactive nodal balance residual in p.u.
    pub fn balance_residual(&self, input: &DispatchInput) -> f64 {
        let net = input.net;
        let s = net.s_base;
        let mut worst = 0.0f64;
        for bus in 0..net.n_buses() {
            let mut p = -input.nodal_load_p[bus];
            let mut q = -input.nodal_load_q[bus];
            for (z, _) in net.generators_at(bus) {
                p += self.p_gen[z];
                q += self.q_gen[z];
            }
            if let Some(l) = net.parent_line(bus) {
                p += self.p_flow[l] - self.p_loss[l];
                q += self.q_flow[l] - net.lines[l].x * self.i_sq[l] * s;
            }
            for &l in net.child_lines(bus) {
                p -= self.p_flow[l];
                q -= self.q_flow[l];
            }
            worst = worst.max(p.abs() / s).max(q.abs() / s);
        }
        worst
    }

    /// Worst violation of voltage, current, and generator bounds (p.u.).
    pub fn bound_violation(&self, input: &DispatchInput) -> f64 {
        let net = input.net;
        let s = net.s_base;
        let mut worst = 0.0f64;
        for (bus, v) in net.buses.iter().zip(&self.v_sq) {
            if !bus.is_slack {
                worst = worst.max(bus.v_min_sq - v).max(v - bus.v_max_sq);
            }
        }
        for (line, i) in net.lines.iter().zip(&self.i_sq) {
            worst = worst.max(i - line.i_max_sq).max(-i);
        }
        let (lo, hi) = socp::generator_bounds(input);
        for z in 0..net.generators.len() {
            worst = worst.max(lo[z] - self.p_gen[z] / s).max(self.p_gen[z] / s - hi[z]);
        }
        worst.max(0.0)
    }
}

/// Solve the single-period DistFlow SOCP dispatch.
///
/// Infeasibility is reported through [`DispatchStatus::Infeasible`]; only
/// solver breakdowns are errors.
pub fn solve_dispatch(input: &DispatchInput) -> Result<DispatchSolution, DispatchError> {
    input.validate()?;
    socp::solve(input)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{Bus, Generator, Line};

    /// Two buses, one quadratic unit at the slack, load at bus 1.
    fn two_bus(r: f64, x: f64, cost_a: f64, cost_b: f64) -> NetworkModel {
        let bus = |id, slack| Bus { id, is_slack: slack, v_min_sq: 0.5, v_max_sq: 1.5, p_load: 0.0, q_load: 0.0 };
        NetworkModel::new(
            "two-bus",
            1.0,
            1.0,
            1.0,
            vec![bus(0, true), bus(1, false)],
            vec![Line { from_bus: 0, to_bus: 1, r, x, i_max_sq: 100.0 }],
            vec![Generator {
                name: "g".into(),
                bus: 0,
                kind: GeneratorKind::Diesel,
                p_min: 0.0,
                p_max: 10.0,
                q_min: -10.0,
                q_max: 10.0,
                cost_a,
                cost_b,
                cost_c: 0.0,
                cost_k: 0.0,
                carbon_intensity: 0.9,
            }],
        )
        .unwrap()
    }

    fn input(net: &NetworkModel, load: f64) -> DispatchInput<'_> {
        DispatchInput {
            net,
            nodal_load_p: vec![0.0, load],
            nodal_load_q: vec![0.0, 0.0],
            res_cap: vec![],
            wholesale_price: 0.0,
            grid_cap: 0.0,
        }
    }

    #[test]
    fn two_bus_hand_kkt() {
        // lossless: p = 1, objective a p² + b p = 11, λ = 2 a p + b = 12
        let net = two_bus(0.0, 0.0, 1.0, 10.0);
        let sol = solve_dispatch(&input(&net, 1.0)).unwrap();
        assert!(sol.is_optimal());
        assert!((sol.p_gen[0] - 1.0).abs() < 1e-6, "{}", sol.p_gen[0]);
        assert!((sol.objective - 11.0).abs() < 1e-6, "{}", sol.objective);
        assert!((sol.dlmp[1] - 12.0).abs() < 1e-5, "{:?}", sol.dlmp);
        assert!((sol.dlmp[0] - 12.0).abs() < 1e-5);
    }

    #[test]
    fn linear_cost_price_is_marginal_cost() {
        let net = two_bus(0.0, 0.0, 0.0, 42.0);
        let sol = solve_dispatch(&input(&net, 0.7)).unwrap();
        assert!((sol.dlmp[1] - 42.0).abs() < 1e-5, "{:?}", sol.dlmp);
    }

    #[test]
    fn zero_load_zero_cost() {
        let net = NetworkModel::ieee33();
        let mut inp = DispatchInput::nominal(&net, 50.0);
        inp.nodal_load_p.iter_mut().for_each(|p| *p = 0.0);
        inp.nodal_load_q.iter_mut().for_each(|q| *q = 0.0);
        let sol = solve_dispatch(&inp).unwrap();
        assert!(sol.is_optimal());
        let constant: f64 = net.generators.iter().map(|g| g.cost_c).sum();
        assert!((sol.objective - constant).abs() < 1e-5, "{} vs {}", sol.objective, constant);
        assert!(sol.p_gen.iter().all(|p| p.abs() < 1e-5), "{:?}", sol.p_gen);
    }

    /// 33-bus operating point at power factor 0.95 with the given loads.
    fn operating_point(net: &NetworkModel, p: Vec<f64>, res_cap: Vec<f64>, price: f64) -> DispatchInput<'_> {
        let tan_phi = (1.0 / (0.95f64 * 0.95) - 1.0).sqrt();
        DispatchInput {
            net,
            nodal_load_q: p.iter().map(|x| x * tan_phi).collect(),
            nodal_load_p: p,
            res_cap,
            wholesale_price: price,
            grid_cap: 5.0,
        }
    }

    fn assert_clean(inp: &DispatchInput) {
        let sol = solve_dispatch(inp).unwrap();
        assert!(sol.is_optimal());
        assert!(sol.balance_residual(inp) <= 1e-6, "{}", sol.balance_residual(inp));
        assert!(sol.bound_violation(inp) <= 1e-6, "{}", sol.bound_violation(inp));
        assert!(sol.dlmp.iter().all(|l| l.is_finite() && *l > 0.0), "{:?}", sol.dlmp);
    }

    // operating points seen in training where the solver used to stall

    #[test]
    fn stalled_operating_point_solves() {
        let net = NetworkModel::ieee33();
        let p = vec![
            0.0, 0.08828232213289715, 0.07945408991960742, 0.10593878655947657, 0.052969393279738285,
            0.052969393279738285, 0.1765646442657943, 0.1765646442657943, 0.052969393279738285,
            0.052969393279738285, 0.03972704495980371, 0.052969393279738285, 0.0432373899161638,
            0.10593878655947657, 0.052969393279738285, 0.052969393279738285, 0.052969393279738285,
            0.0320259220707583, 0.07945408991960742, 0.038689676222481, 0.07945408991960742,
            0.07945408991960742, 0.048032499480036475, 0.3707857529581679, 0.3707857529581679,
            0.06601376064633858, 0.052969393279738285, 0.052969393279738285, 0.10593878655947657,
            0.1765646442657943, 0.13242348319934572, 0.18539287647908395, 0.052969393279738285,
        ];
        assert_clean(&operating_point(&net, p, vec![0.1949101691067374, 0.8085083559661297], 80.8428747446604));
    }

    #[test]
    fn zero_renewable_cap_solves() {
        let net = NetworkModel::ieee33();
        let p = vec![
            0.0, 0.0555775214152321, 0.05001976927370889, 0.06669302569827852, 0.03334651284913926,
            0.03334651284913926, 0.1111550428304642, 0.1111550428304642, 0.03334651284913926,
            0.03334651284913926, 0.025009884636854444, 0.03334651284913926, 0.0768643713937766,
            0.06669302569827852, 0.03334651284913926, 0.03334651284913926, 0.03334651284913926,
            0.0567641533497736, 0.05001976927370889, 0.07165297047516149, 0.05001976927370889,
            0.05001976927370889, 0.09510068899113536, 0.23342558994397478, 0.23342558994397478,
            0.08220438626540974, 0.03334651284913926, 0.03334651284913926, 0.06669302569827852,
            0.1111550428304642, 0.08336628212284815, 0.11671279497198739, 0.03334651284913926,
        ];
        let inp = operating_point(&net, p, vec![0.6800941565052742, 0.0], 38.730068799898916);
        assert_clean(&inp);
        let sol = solve_dispatch(&inp).unwrap();
        assert!(sol.p_gen[6].abs() <= 1e-9, "{}", sol.p_gen[6]);
    }

    #[test]
    fn uncertified_infeasible_point_is_reported_infeasible() {
        // iterates diverge without an infeasibility certificate; phase one settles it
        let net = NetworkModel::ieee33();
        let inp = DispatchInput {
            net: &net,
            nodal_load_p: vec![
            0.0, 0.12224014380354027, 0.1445540479681894, 0.10538249434321739, 0.1400946927145348,
            0.12694326031187494, 0.26288597721946955, 0.32828396027081125, 0.14512101763220683,
            0.11673558814011074, 0.08158625010514721, 0.11814283584752944, 0.13832903540643968,
            0.17412265626478615, 0.09357922329886269, 0.05866509577902253, 0.12485317031898073,
            0.15478159651945608, 0.07631697976123096, 0.15737248688265404, 0.1745690479913251,
            0.12311833560966783, 0.16391420697516942, 0.6611068118423844, 0.4475427011928149,
            0.061739611587862245, 0.06112700034672132, 0.14283504827180313, 0.18493901573536461,
            0.19764049105352927, 0.14034761838421375, 0.2462100790716824, 0.11864222490689483,
            ],
            nodal_load_q: vec![
            0.0, 0.07334408628212416, 0.06424624354141752, 0.0702549962288116, 0.0700473463572674,
            0.04231442010395831, 0.13144298860973477, 0.16414198013540562, 0.04837367254406894,
            0.03891186271337025, 0.05439083340343147, 0.06891665424439218, 0.08069193732042315,
            0.11608177084319078, 0.015596537216477116, 0.01955503192634084, 0.04161772343966025,
            0.06879182067531382, 0.033918657671658206, 0.06994332750340179, 0.07758624355170006,
            0.05471926027096348, 0.09106344831953857, 0.3148127675439927, 0.2131155719965786,
            0.02572483816160927, 0.025469583477800553, 0.04761168275726771, 0.10788109251229604,
            0.5929214731605877, 0.06549555524596642, 0.11724289479603928, 0.07909481660459655,
            ],
            res_cap: vec![0.6394224459996772, 0.8117613634163923],
            wholesale_price: 170.33275706874574,
            grid_cap: 5.0,
        };
        assert_eq!(solve_dispatch(&inp).unwrap().status, DispatchStatus::Infeasible);
    }

    #[test]
    fn excessive_load_is_infeasible_not_an_error() {
        let net = NetworkModel::ieee33();
        let mut inp = DispatchInput::nominal(&net, 50.0);
        let supply: f64 = net.generators.iter().map(|g| g.p_max * net.s_base).sum();
        inp.nodal_load_p[1] = supply + 1.0;
        let sol = solve_dispatch(&inp).unwrap();
        assert_eq!(sol.status, DispatchStatus::Infeasible);
    }

    #[test]
    fn ieee33_nominal_is_feasible_and_balanced() {
        let net = NetworkModel::ieee33();
        let inp = DispatchInput::nominal(&net, 80.0);
        let sol = solve_dispatch(&inp).unwrap();
        assert!(sol.is_optimal());
        assert!(sol.balance_residual(&inp) <= 1e-7, "{}", sol.balance_residual(&inp));
        assert!(sol.bound_violation(&inp) <= 1e-7, "{}", sol.bound_violation(&inp));
        assert!(sol.dlmp.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn doubling_loads_never_lowers_cost() {
        let net = NetworkModel::ieee33();
        let base = DispatchInput::nominal(&net, 80.0);
        let mut doubled = base.clone();
        doubled.nodal_load_p.iter_mut().for_each(|p| *p *= 2.0);
        doubled.nodal_load_q.iter_mut().for_each(|q| *q *= 2.0);
        let a = solve_dispatch(&base).unwrap();
        let b = solve_dispatch(&doubled).unwrap();
        if b.is_optimal() {
            assert!(b.objective >= a.objective);
        }
    }

    #[test]
    fn slack_price_tracks_wholesale_when_import_interior() {
        let net = NetworkModel::ieee33();
        let inp = DispatchInput::nominal(&net, 80.0);
        let sol = solve_dispatch(&inp).unwrap();
        assert!(sol.p_grid > 1e-3 && sol.p_grid < inp.grid_cap - 1e-3);
        assert!((sol.dlmp[0] - 80.0).abs() <= 1e-4 * 80.0, "{}", sol.dlmp[0]);
    }

    #[test]
    fn rejects_malformed_input() {
        let net = NetworkModel::ieee33();
        let mut inp = DispatchInput::nominal(&net, 50.0);
        inp.res_cap.pop();
        assert!(matches!(solve_dispatch(&inp), Err(DispatchError::Input(_))));
        let mut inp = DispatchInput::nominal(&net, 50.0);
        inp.nodal_load_p[3] = -1.0;
        assert!(matches!(solve_dispatch(&inp), Err(DispatchError::Input(_))));
    }
}

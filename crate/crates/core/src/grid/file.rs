//! JSON network file schema (physical units). See `docs/network-format.md`.

use super::{Bus, Generator, GeneratorKind, GridError, Line, NetworkModel};
use serde::{Deserialize, Serialize};

fn default_s_base() -> f64 {
    10.0
}
fn default_v_base() -> f64 {
    12.66
}
fn one() -> f64 {
    1.0
}
fn default_v_min() -> f64 {
    0.93
}
fn default_v_max() -> f64 {
    1.05
}
fn default_i_max() -> f64 {
    400.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkFile {
    pub name: String,
    #[serde(default = "default_s_base")]
    pub s_base_mva: f64,
    #[serde(default = "default_v_base")]
    pub v_base_kv: f64,
    #[serde(default = "one")]
    pub slack_voltage_pu: f64,
    #[serde(default = "default_v_min")]
    pub v_min_pu: f64,
    #[serde(default = "default_v_max")]
    pub v_max_pu: f64,
    #[serde(default = "default_i_max")]
    pub default_i_max_amps: f64,
    pub buses: Vec<BusRecord>,
    pub lines: Vec<LineRecord>,
    #[serde(default)]
    pub generators: Vec<GeneratorRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusRecord {
    pub id: usize,
    #[serde(default)]
    pub slack: bool,
    #[serde(default)]
    pub p_load_mw: f64,
    #[serde(default)]
    pub q_load_mvar: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_min_pu: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_max_pu: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LineRecord {
    pub from: usize,
    pub to: usize,
    pub r_ohm: f64,
    pub x_ohm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub i_max_amps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorRecord {
    pub name: String,
    pub bus: usize,
    pub kind: GeneratorKind,
    #[serde(default)]
    pub p_min_mw: f64,
    pub p_max_mw: f64,
    #[serde(default)]
    pub q_min_mvar: f64,
    #[serde(default)]
    pub q_max_mvar: f64,
    /// $/MW²h
    #[serde(default)]
    pub cost_a: f64,
    /// $/MWh
    #[serde(default)]
    pub cost_b: f64,
    /// $/h
    #[serde(default)]
    pub cost_c: f64,
    /// $/MWh
    #[serde(default)]
    pub cost_k: f64,
    /// tCO₂/MWh
    pub carbon_intensity: f64,
}

impl NetworkFile {
    pub fn into_model(self) -> Result<NetworkModel, GridError> {
        let s = self.s_base_mva;
        if !(s > 0.0) || !(self.v_base_kv > 0.0) {
            return Err(GridError::Invalid("s_base_mva and v_base_kv must be positive".into()));
        }
        let z_base = self.v_base_kv * self.v_base_kv / s;
        let i_base = s * 1e3 / (3f64.sqrt() * self.v_base_kv);
        let buses = self
            .buses
            .iter()
            .map(|b| {
                let vmin = b.v_min_pu.unwrap_or(self.v_min_pu);
                let vmax = b.v_max_pu.unwrap_or(self.v_max_pu);
                Bus {
                    id: b.id,
                    is_slack: b.slack,
                    v_min_sq: vmin * vmin,
                    v_max_sq: vmax * vmax,
                    p_load: b.p_load_mw / s,
                    q_load: b.q_load_mvar / s,
                }
            })
            .collect();
        let lines = self
            .lines
            .iter()
            .map(|l| {
                let i = l.i_max_amps.unwrap_or(self.default_i_max_amps) / i_base;
                Line { from_bus: l.from, to_bus: l.to, r: l.r_ohm / z_base, x: l.x_ohm / z_base, i_max_sq: i * i }
            })
            .collect();
        let generators = self
            .generators
            .iter()
            .map(|g| Generator {
                name: g.name.clone(),
                bus: g.bus,
                kind: g.kind,
                p_min: g.p_min_mw / s,
                p_max: g.p_max_mw / s,
                q_min: g.q_min_mvar / s,
                q_max: g.q_max_mvar / s,
                cost_a: g.cost_a * s * s,
                cost_b: g.cost_b * s,
                cost_c: g.cost_c,
                cost_k: g.cost_k * s,
                carbon_intensity: g.carbon_intensity,
            })
            .collect();
        NetworkModel::new(
            self.name,
            s,
            self.v_base_kv,
            self.slack_voltage_pu * self.slack_voltage_pu,
            buses,
            lines,
            generators,
        )
    }
}

impl NetworkModel {
    /// Convert back to the physical-unit file representation.
    pub fn to_file(&self) -> NetworkFile {
        let s = self.s_base;
        let z_base = self.z_base();
        let i_base = self.i_base_amps();
        NetworkFile {
            name: self.name.clone(),
            s_base_mva: s,
            v_base_kv: self.v_base_kv,
            slack_voltage_pu: self.slack_v_sq.sqrt(),
            v_min_pu: default_v_min(),
            v_max_pu: default_v_max(),
            default_i_max_amps: default_i_max(),
            buses: self
                .buses
                .iter()
                .map(|b| BusRecord {
                    id: b.id,
                    slack: b.is_slack,
                    p_load_mw: b.p_load * s,
                    q_load_mvar: b.q_load * s,
                    v_min_pu: Some(b.v_min_sq.sqrt()),
                    v_max_pu: Some(b.v_max_sq.sqrt()),
                })
                .collect(),
            lines: self
                .lines
                .iter()
                .map(|l| LineRecord {
                    from: l.from_bus,
                    to: l.to_bus,
                    r_ohm: l.r * z_base,
                    x_ohm: l.x * z_base,
                    i_max_amps: Some(l.i_max_sq.sqrt() * i_base),
                })
                .collect(),
            generators: self
                .generators
                .iter()
                .map(|g| GeneratorRecord {
                    name: g.name.clone(),
                    bus: g.bus,
                    kind: g.kind,
                    p_min_mw: g.p_min * s,
                    p_max_mw: g.p_max * s,
                    q_min_mvar: g.q_min * s,
                    q_max_mvar: g.q_max * s,
                    cost_a: g.cost_a / (s * s),
                    cost_b: g.cost_b / s,
                    cost_c: g.cost_c,
                    cost_k: g.cost_k / s,
                    carbon_intensity: g.carbon_intensity,
                })
                .collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("network serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rel_eq(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300)
    }

    #[test]
    fn minimal_file_parses_with_defaults() {
        let text = r#"{
            "name": "two-bus",
            "buses": [{"id": 0, "slack": true}, {"id": 1, "p_load_mw": 1.0}],
            "lines": [{"from": 0, "to": 1, "r_ohm": 0.1, "x_ohm": 0.1}],
            "generators": [{"name": "grid", "bus": 0, "kind": "grid", "p_max_mw": 5, "carbon_intensity": 0.5}]
        }"#;
        let net = NetworkModel::from_json(text).unwrap();
        assert_eq!(net.s_base, 10.0);
        assert!((net.buses[1].p_load - 0.1).abs() < 1e-15);
        assert!((net.buses[1].v_min_sq - 0.93 * 0.93).abs() < 1e-15);
    }

    #[test]
    fn unknown_field_is_a_parse_error() {
        let text = r#"{"name": "x", "buses": [], "lines": [], "bogus": 1}"#;
        assert!(matches!(NetworkModel::from_json(text), Err(GridError::Parse(_))));
    }

    #[test]
    fn bundled_case_round_trips() {
        let net = NetworkModel::ieee33();
        let back = NetworkModel::from_json(&net.to_json()).unwrap();
        for (a, b) in net.lines.iter().zip(&back.lines) {
            assert!(rel_eq(a.r, b.r) && rel_eq(a.x, b.x) && rel_eq(a.i_max_sq, b.i_max_sq));
        }
        for (a, b) in net.generators.iter().zip(&back.generators) {
            assert!(rel_eq(a.cost_a, b.cost_a) && rel_eq(a.cost_b, b.cost_b) && rel_eq(a.p_max, b.p_max));
        }
    }

    proptest! {
        #[test]
        fn per_unit_round_trip(
            s in 0.5f64..200.0, kv in 0.4f64..35.0,
            r in 0.0f64..5.0, x in 0.0f64..5.0, amps in 10.0f64..2000.0,
            p in 0.0f64..10.0, a in 0.0f64..100.0, b in 0.0f64..300.0,
        ) {
            let file = NetworkFile {
                name: "p".into(), s_base_mva: s, v_base_kv: kv, slack_voltage_pu: 1.0,
                v_min_pu: 0.9, v_max_pu: 1.1, default_i_max_amps: 400.0,
                buses: vec![
                    BusRecord { id: 0, slack: true, p_load_mw: 0.0, q_load_mvar: 0.0, v_min_pu: None, v_max_pu: None },
                    BusRecord { id: 1, slack: false, p_load_mw: p, q_load_mvar: p / 3.0, v_min_pu: None, v_max_pu: None },
                ],
                lines: vec![LineRecord { from: 0, to: 1, r_ohm: r, x_ohm: x, i_max_amps: Some(amps) }],
                generators: vec![GeneratorRecord {
                    name: "g".into(), bus: 0, kind: GeneratorKind::Diesel, p_min_mw: 0.0, p_max_mw: p + 1.0,
                    q_min_mvar: -1.0, q_max_mvar: 1.0, cost_a: a, cost_b: b, cost_c: 3.0, cost_k: 0.0,
                    carbon_intensity: 0.9,
                }],
            };
            let back = file.clone().into_model().unwrap().to_file();
            prop_assert!(rel_eq(back.lines[0].r_ohm, r) || r == 0.0);
            prop_assert!(rel_eq(back.lines[0].x_ohm, x) || x == 0.0);
            prop_assert!(rel_eq(back.lines[0].i_max_amps.unwrap(), amps));
            prop_assert!(rel_eq(back.buses[1].p_load_mw, p) || p == 0.0);
            prop_assert!(rel_eq(back.generators[0].cost_a, a) || a == 0.0);
            prop_assert!(rel_eq(back.generators[0].cost_b, b) || b == 0.0);
            prop_assert!(rel_eq(back.generators[0].p_max_mw, p + 1.0));
        }
    }
}

//! Radial distribution network model.
//!
//! All electrical quantities are held in per-unit on the network's `s_base`
//! (MVA) and voltage base. Costs are stored against per-unit power so that the
//! dispatch problem can be assembled directly; [`NetworkModel::to_file`]
//! converts back to physical units.

mod file;
mod topology;

pub use file::{BusRecord, GeneratorRecord, LineRecord, NetworkFile};
pub use topology::Topology;

use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("cannot read network file {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse network file: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid network: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, GridError> {
    Err(GridError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: usize,
    pub is_slack: bool,
    pub v_min_sq: f64,
    pub v_max_sq: f64,
    /// Nominal active background load (p.u.).
    pub p_load: f64,
    /// Nominal reactive background load (p.u.).
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Line {
    pub from_bus: usize,
    pub to_bus: usize,
    pub r: f64,
    pub x: f64,
    pub i_max_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Diesel,
    Gas,
    Renewable,
    Grid,
}

impl GeneratorKind {
    pub fn has_quadratic_cost(self) -> bool {
        matches!(self, GeneratorKind::Diesel | GeneratorKind::Gas)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generator {
    pub name: String,
    pub bus: usize,
    pub kind: GeneratorKind,
    /// p.u.
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    pub q_max: f64,
    /// $/(p.u.)²h
    pub cost_a: f64,
    /// $/(p.u. h)
    pub cost_b: f64,
    /// $/h
    pub cost_c: f64,
    /// $/(p.u. h), renewables only
    pub cost_k: f64,
    /// tCO₂/MWh. For the grid this is the nominal value; the environment
    /// supplies a per-step profile.
    pub carbon_intensity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkModel {
    pub name: String,
    /// MVA
    pub s_base: f64,
    /// kV (line-to-line)
    pub v_base_kv: f64,
    /// Fixed squared voltage at the point of common coupling.
    pub slack_v_sq: f64,
    pub buses: Vec<Bus>,
    /// Oriented away from the slack bus after validation.
    pub lines: Vec<Line>,
    pub generators: Vec<Generator>,
    #[serde(skip)]
    topology: Topology,
}

impl NetworkModel {
    /// Assemble and validate a network from per-unit parts. Lines may be given
    /// in either orientation; they are re-oriented parent → child.
    pub fn new(
        name: impl Into<String>,
        s_base: f64,
        v_base_kv: f64,
        slack_v_sq: f64,
        buses: Vec<Bus>,
        lines: Vec<Line>,
        generators: Vec<Generator>,
    ) -> Result<Self, GridError> {
        let mut net = NetworkModel {
            name: name.into(),
            s_base,
            v_base_kv,
            slack_v_sq,
            buses,
            lines,
            generators,
            topology: Topology::default(),
        };
        net.validate()?;
        Ok(net)
    }

    /// Read a JSON network file (physical units) and convert to per-unit.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| GridError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, GridError> {
        let file: NetworkFile = serde_json::from_str(text)?;
        file.into_model()
    }

    /// Modified IEEE 33-bus feeder bundled with the crate.
    pub fn ieee33() -> Self {
        Self::from_json(include_str!("../../data/ieee33.json")).expect("bundled 33-bus case is valid")
    }

    /// Six-bus feeder with one gas unit and one PV unit, for smoke tests.
    pub fn toy6() -> Self {
        Self::from_json(include_str!("../../data/toy6.json")).expect("bundled 6-bus case is valid")
    }

    /// Synthetic 123-bus radial feeder bundled with the crate.
    pub fn feeder123() -> Self {
        Self::from_json(include_str!("../../data/feeder123.json")).expect("bundled 123-bus case is valid")
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_lines(&self) -> usize {
        self.lines.len()
    }

    pub fn slack(&self) -> usize {
        self.topology.root
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    /// Bus order in which every parent precedes its children, slack first.
    pub fn topological_order(&self) -> &[usize] {
        &self.topology.order
    }

    /// Index of the line feeding `bus` from its parent, if any.
    pub fn parent_line(&self, bus: usize) -> Option<usize> {
        self.topology.parent_line[bus]
    }

    pub fn child_lines(&self, bus: usize) -> &[usize] {
        &self.topology.child_lines[bus]
    }

    pub fn generators_at(&self, bus: usize) -> impl Iterator<Item = (usize, &Generator)> {
        self.generators.iter().enumerate().filter(move |(_, g)| g.bus == bus)
    }

    pub fn generators_of_kind(&self, kind: GeneratorKind) -> impl Iterator<Item = (usize, &Generator)> {
        self.generators.iter().enumerate().filter(move |(_, g)| g.kind == kind)
    }

    /// Impedance base in ohms.
    pub fn z_base(&self) -> f64 {
        self.v_base_kv * self.v_base_kv / self.s_base
    }

    /// Current base in amperes.
    pub fn i_base_amps(&self) -> f64 {
        self.s_base * 1e3 / (3f64.sqrt() * self.v_base_kv)
    }

    fn validate(&mut self) -> Result<(), GridError> {
        if !(self.s_base > 0.0 && self.s_base.is_finite()) {
            return invalid(format!("s_base must be positive, got {}", self.s_base));
        }
        if !(self.v_base_kv > 0.0) {
            return invalid(format!("v_base_kv must be positive, got {}", self.v_base_kv));
        }
        let n = self.buses.len();
        if n < 2 {
            return invalid("network needs at least two buses");
        }
        for (k, bus) in self.buses.iter().enumerate() {
            if bus.id != k {
                return invalid(format!("bus ids must be 0..N-1 in order; position {k} has id {}", bus.id));
            }
            if !(bus.v_min_sq > 0.0 && bus.v_min_sq < bus.v_max_sq) {
                return invalid(format!(
                    "bus {k}: voltage bounds must satisfy 0 < v_min_sq < v_max_sq (got {}, {})",
                    bus.v_min_sq, bus.v_max_sq
                ));
            }
            if bus.p_load < 0.0 {
                return invalid(format!("bus {k}: negative nominal load"));
            }
        }
        let slacks: Vec<usize> = self.buses.iter().filter(|b| b.is_slack).map(|b| b.id).collect();
        let root = match slacks.as_slice() {
            [r] => *r,
            [] => return invalid("no slack bus"),
            _ => return invalid(format!("exactly one slack bus required, found {:?}", slacks)),
        };
        if !(self.slack_v_sq > 0.0) {
            return invalid("slack voltage must be positive");
        }
        for (l, line) in self.lines.iter().enumerate() {
            if line.from_bus >= n || line.to_bus >= n {
                return invalid(format!("line {l} references unknown bus"));
            }
            if line.from_bus == line.to_bus {
                return invalid(format!("line {l} is a self-loop"));
            }
            if !(line.r >= 0.0 && line.x >= 0.0) {
                return invalid(format!("line {l}: r and x must be non-negative"));
            }
            if !(line.i_max_sq > 0.0) {
                return invalid(format!("line {l}: i_max_sq must be positive"));
            }
        }
        if self.lines.len() != n - 1 {
            return invalid(format!(
                "network is not radial: {} lines for {} buses (a tree needs {})",
                self.lines.len(),
                n,
                n - 1
            ));
        }
        for (k, g) in self.generators.iter().enumerate() {
            if g.bus >= n {
                return invalid(format!("generator {k} ({}) at unknown bus {}", g.name, g.bus));
            }
            if !(g.p_min <= g.p_max) || !(g.q_min <= g.q_max) {
                return invalid(format!("generator {k} ({}): min exceeds max", g.name));
            }
            if !(g.carbon_intensity >= 0.0) {
                return invalid(format!("generator {k} ({}): negative carbon intensity", g.name));
            }
            if g.kind == GeneratorKind::Grid && g.bus != root {
                return invalid(format!("grid connection {} must sit at the slack bus", g.name));
            }
        }
        let topology = Topology::build(n, root, &mut self.lines)?;
        self.topology = topology;
        Ok(())
    }
}

use super::HarnessError;
use crate::env::{AgentSpec, EnvConfig, ResKind, DEFAULT_BACKGROUND, DEFAULT_PRICE, DEFAULT_PSI_GRID};
use crate::grid::{GeneratorKind, NetworkModel};
use crate::trainer::{Algorithm, CommunicationGraph, TrainerConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    pub bus: usize,
    /// $/MW²h, negative.
    pub utility_a: f64,
    /// $/MWh.
    pub utility_b: f64,
    /// MW, the same every hour.
    pub p_adj_max: f64,
    /// MW while the transferable block runs.
    pub p_tr: f64,
    pub duration: usize,
    /// Mean uncontrollable load, MW. Also sets the agent's share of the quota.
    pub uc_base: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RenewableConfig {
    pub kind: ResKind,
    pub capacity_mw: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileConfig {
    pub train_days: usize,
    pub eval_days: usize,
    /// Profile CSVs used instead of synthetic days.
    pub train_file: Option<PathBuf>,
    pub eval_file: Option<PathBuf>,
    /// One entry per renewable unit in network order. Empty means nameplate
    /// capacity, PV for units named `pv*` and wind otherwise.
    pub renewables: Vec<RenewableConfig>,
    pub price: Vec<f64>,
    pub psi_grid: Vec<f64>,
    pub background: Vec<f64>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            train_days: 200,
            eval_days: 100,
            train_file: None,
            eval_file: None,
            renewables: Vec::new(),
            price: DEFAULT_PRICE.to_vec(),
            psi_grid: DEFAULT_PSI_GRID.to_vec(),
            background: DEFAULT_BACKGROUND.to_vec(),
        }
    }
}

/// Communication graph. No edges means a ring over the agents in config
/// order; no weights means Metropolis weights.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub edges: Vec<[usize; 2]>,
    pub weights: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Network JSON, relative to the config file, or `builtin:<name>`.
    pub network: String,
    pub agents: Vec<AgentConfig>,
    /// tCO₂ per day over all agents.
    pub total_quota: f64,
    #[serde(default = "default_algorithm")]
    pub algorithm: Algorithm,
    pub episodes: usize,
    #[serde(default = "default_eval_episodes")]
    pub eval_episodes: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub profiles: ProfileConfig,
    #[serde(default)]
    pub graph: GraphConfig,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_algorithm() -> Algorithm {
    Algorithm::Cmacpo
}

fn default_eval_episodes() -> usize {
    100
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn load_network(&self) -> Result<NetworkModel, HarnessError> {
        match self.network.strip_prefix("builtin:") {
            Some("ieee33") => Ok(NetworkModel::ieee33()),
            Some("feeder123") => Ok(NetworkModel::feeder123()),
            Some("toy6") => Ok(NetworkModel::toy6()),
            Some(other) => Err(HarnessError::Config(format!("unknown builtin network {other:?}"))),
            None => {
                let p = self.resolve(Path::new(&self.network));
                NetworkModel::load(&p).map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))
            }
        }
    }

    /// Quota of each agent: the total split in proportion to `uc_base`.
    pub fn quotas(&self) -> Vec<f64> {
        let total: f64 = self.agents.iter().map(|a| a.uc_base).sum();
        self.agents.iter().map(|a| self.total_quota * a.uc_base / total).collect()
    }

    pub fn agent_specs(&self) -> Vec<AgentSpec> {
        let horizon = self.env.horizon;
        self.agents
            .iter()
            .zip(self.quotas())
            .map(|(a, quota)| AgentSpec {
                bus: a.bus,
                utility_a: a.utility_a,
                utility_b: a.utility_b,
                p_adj_max: vec![a.p_adj_max; horizon],
                p_tr: a.p_tr,
                duration: a.duration,
                quota,
            })
            .collect()
    }

    pub fn renewables(&self, net: &NetworkModel) -> Vec<(ResKind, f64)> {
        if !self.profiles.renewables.is_empty() {
            return self.profiles.renewables.iter().map(|r| (r.kind, r.capacity_mw)).collect();
        }
        net.generators_of_kind(GeneratorKind::Renewable)
            .map(|(_, g)| {
                let kind = if g.name.to_ascii_lowercase().starts_with("pv") { ResKind::Pv } else { ResKind::Wind };
                (kind, g.p_max * net.s_base)
            })
            .collect()
    }

    pub fn communication_graph(&self) -> Result<CommunicationGraph, HarnessError> {
        let n = self.agents.len();
        let edges: Vec<(usize, usize)> = self.graph.edges.iter().map(|e| (e[0], e[1])).collect();
        let g = match (&self.graph.weights, edges.is_empty()) {
            (None, true) => CommunicationGraph::ring(n),
            (None, false) => CommunicationGraph::metropolis(n, &edges)?,
            (Some(w), _) => {
                if w.len() != n || w.iter().any(|r| r.len() != n) {
                    return Err(HarnessError::Config(format!("graph weights must be {n}x{n}")));
                }
                let edges = if edges.is_empty() { ring_edges(n) } else { edges };
                CommunicationGraph::with_weights(n, &edges, w.concat())?
            }
        };
        Ok(g)
    }
}

fn ring_edges(n: usize) -> Vec<(usize, usize)> {
    match n {
        0 | 1 => vec![],
        2 => vec![(0, 1)],
        _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<Check>,
}

impl ValidationReport {
    pub fn push(&mut self, name: impl Into<String>, result: Result<String, String>) {
        let (passed, detail) = match result {
            Ok(d) => (true, d),
            Err(d) => (false, d),
        };
        self.checks.push(Check { name: name.into(), passed, detail });
    }

    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.passed)
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for c in &self.checks {
            writeln!(f, "{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
network = "builtin:toy6"
total_quota = 1.0
episodes = 10
seeds = [3]

[[agents]]
bus = 2
utility_a = -10.0
utility_b = 120.0
p_adj_max = 0.1
p_tr = 0.03
duration = 3
uc_base = 0.01

[[agents]]
bus = 4
utility_a = -10.0
utility_b = 120.0
p_adj_max = 0.1
p_tr = 0.03
duration = 2
uc_base = 0.03
"#;

    #[test]
    fn parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.algorithm, Algorithm::Cmacpo);
        assert_eq!(cfg.eval_episodes, 100);
        assert_eq!(cfg.trainer, TrainerConfig::default());
        assert_eq!(cfg.env, EnvConfig::default());
        assert_eq!(cfg.profiles.price, DEFAULT_PRICE.to_vec());
    }

    #[test]
    fn quota_follows_uncontrollable_load() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let q = cfg.quotas();
        assert!((q[0] - 0.25).abs() < 1e-15 && (q[1] - 0.75).abs() < 1e-15);
        let specs = cfg.agent_specs();
        assert_eq!(specs[1].p_adj_max, vec![0.1; 24]);
        assert_eq!(specs[1].quota, q[1]);
    }

    #[test]
    fn unknown_keys_and_missing_seeds_are_rejected() {
        let e = ExperimentConfig::from_toml(&format!("{BASE}\n[trainer]\nlearning_rate = 1.0\n")).unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let no_seeds = BASE.replace("seeds = [3]", "");
        assert!(ExperimentConfig::from_toml(&no_seeds).is_err());
    }

    #[test]
    fn renewables_default_to_nameplate() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        let net = cfg.load_network().unwrap();
        assert_eq!(cfg.renewables(&net), vec![(ResKind::Pv, 0.3)]);
    }

    #[test]
    fn graph_defaults_to_ring_and_checks_weights() {
        let cfg = ExperimentConfig::from_toml(BASE).unwrap();
        assert_eq!(cfg.communication_graph().unwrap(), CommunicationGraph::ring(2));
        let skewed = format!("{BASE}\n[graph]\nweights = [[0.7, 0.3], [0.7, 0.3]]\n");
        let cfg = ExperimentConfig::from_toml(&skewed).unwrap();
        assert!(cfg.communication_graph().is_err());
    }
}

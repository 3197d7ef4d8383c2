use serde::{Deserialize, Serialize};

/// Running per-agent emissions against their quotas, tCO₂.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmissionLedger {
    pub cumulative: Vec<f64>,
    pub quota: Vec<f64>,
}

impl EmissionLedger {
    pub fn new(quota: Vec<f64>) -> Self {
        EmissionLedger { cumulative: vec![0.0; quota.len()], quota }
    }

    pub fn reset(&mut self) {
        self.cumulative.iter_mut().for_each(|e| *e = 0.0);
    }

    pub fn n_agents(&self) -> usize {
        self.quota.len()
    }

    pub fn total(&self) -> f64 {
        self.cumulative.iter().sum()
    }

    /// `cumulative − quota` per agent (positive when over).
    pub fn excess(&self) -> Vec<f64> {
        self.cumulative.iter().zip(&self.quota).map(|(e, q)| e - q).collect()
    }
}

/// Charge each agent `ψ(bus) · load · dt` and return the increments.
pub fn accrue_agent_emissions(
    ledger: &mut EmissionLedger,
    nodal_intensity: &[f64],
    agent_buses: &[usize],
    agent_load_mw: &[f64],
    dt_h: f64,
) -> Vec<f64> {
    assert_eq!(agent_buses.len(), ledger.n_agents());
    assert_eq!(agent_load_mw.len(), ledger.n_agents());
    let inc: Vec<f64> = agent_buses
        .iter()
        .zip(agent_load_mw)
        .map(|(&b, &p)| nodal_intensity[b] * p.max(0.0) * dt_h)
        .collect();
    for (c, d) in ledger.cumulative.iter_mut().zip(&inc) {
        *c += d;
    }
    inc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arithmetic() {
        let mut l = EmissionLedger::new(vec![1.0]);
        accrue_agent_emissions(&mut l, &[0.3, 0.5], &[1], &[2.0], 1.0);
        assert_eq!(l.cumulative, vec![1.0]);
        accrue_agent_emissions(&mut l, &[0.3, 0.5], &[1], &[0.0], 1.0);
        assert_eq!(l.cumulative, vec![1.0]);
        assert_eq!(l.excess(), vec![0.0]);
        l.reset();
        assert_eq!(l.total(), 0.0);
    }
}

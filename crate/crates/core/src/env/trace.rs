use super::{StepOutcome, ProfileError};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::path::Path;

/// One JSON-lines row of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub episode: usize,
    pub t: usize,
    pub feasible: bool,
    pub alpha: Vec<f64>,
    pub on: Vec<bool>,
    pub overridden: Vec<bool>,
    pub agent_load: Vec<f64>,
    pub adjustable_load: Vec<f64>,
    pub dlmp: Vec<f64>,
    pub intensity: Vec<f64>,
    pub emission: Vec<f64>,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub em_cum: Vec<f64>,
    pub quota: Vec<f64>,
}

impl StepRecord {
    pub fn from_outcome(episode: usize, t: usize, o: &StepOutcome) -> Self {
        StepRecord {
            episode,
            t,
            feasible: o.info.feasible,
            alpha: o.info.applied.iter().map(|a| a.alpha).collect(),
            on: o.info.applied.iter().map(|a| a.on).collect(),
            overridden: o.info.overridden.clone(),
            agent_load: o.info.agent_load.clone(),
            adjustable_load: o.info.adjustable_load.clone(),
            dlmp: o.info.dlmp.clone(),
            intensity: o.info.intensity.clone(),
            emission: o.info.emission.clone(),
            reward: o.reward,
            costs: o.costs.clone(),
            em_cum: o.next_state.em_cum().to_vec(),
            quota: o.cost_limits.clone(),
        }
    }
}

/// Episode totals recomputed from the trace alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    /// $.
    pub reward: f64,
    /// tCO₂ summed over agents.
    pub emission: f64,
    pub quota: f64,
    /// `max(0, emission − quota) / quota` on the totals, in percent.
    pub violation_rate: f64,
    pub agent_emission: Vec<f64>,
    pub agent_violation_rate: Vec<f64>,
    pub feasible: bool,
}

impl EpisodeMetrics {
    pub fn within_quota(&self) -> bool {
        self.emission <= self.quota
    }
}

/// Violation of `emission` against `quota` as a percentage.
pub fn violation_rate(emission: f64, quota: f64) -> f64 {
    100.0 * (emission - quota).max(0.0) / quota
}

pub fn episode_metrics(trace: &[StepRecord]) -> EpisodeMetrics {
    let n = trace.first().map_or(0, |r| r.quota.len());
    let mut agent_emission = vec![0.0; n];
    for r in trace {
        for (e, x) in agent_emission.iter_mut().zip(&r.emission) {
            *e += x;
        }
    }
    let quota_v = trace.first().map(|r| r.quota.clone()).unwrap_or_default();
    let emission = agent_emission.iter().sum();
    let quota = quota_v.iter().sum();
    EpisodeMetrics {
        reward: trace.iter().map(|r| r.reward).sum(),
        emission,
        quota,
        violation_rate: violation_rate(emission, quota),
        agent_violation_rate: agent_emission.iter().zip(&quota_v).map(|(&e, &q)| violation_rate(e, q)).collect(),
        agent_emission,
        feasible: trace.iter().all(|r| r.feasible),
    }
}

pub fn write_trace(path: impl AsRef<Path>, records: &[StepRecord]) -> Result<(), ProfileError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(|e| ProfileError::Invalid(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<Vec<StepRecord>, ProfileError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| ProfileError::Invalid(e.to_string()))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(emission: Vec<f64>, quota: Vec<f64>) -> StepRecord {
        let n = quota.len();
        StepRecord {
            episode: 0,
            t: 0,
            feasible: true,
            alpha: vec![0.0; n],
            on: vec![false; n],
            overridden: vec![false; n],
            agent_load: vec![0.0; n],
            adjustable_load: vec![0.0; n],
            dlmp: vec![0.0; n],
            intensity: vec![0.0; n],
            emission,
            reward: 1.5,
            costs: vec![0.0; n],
            em_cum: vec![0.0; n],
            quota,
        }
    }

    #[test]
    fn table_values() {
        let m = episode_metrics(&[rec(vec![4.20], vec![4.25])]);
        assert_eq!(m.violation_rate, 0.0);
        assert!(m.within_quota());
        assert_eq!(episode_metrics(&[rec(vec![4.25], vec![4.25])]).violation_rate, 0.0);
        let m = episode_metrics(&[rec(vec![3.0, 3.041], vec![2.0, 2.25])]);
        assert!((m.violation_rate - 42.14).abs() < 0.005, "{}", m.violation_rate);
        assert_eq!(m.reward, 1.5);
    }

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.jsonl");
        let rs = vec![rec(vec![0.1, 0.2], vec![1.0, 1.0]), rec(vec![0.3, 0.0], vec![1.0, 1.0])];
        write_trace(&p, &rs).unwrap();
        assert_eq!(read_trace(&p).unwrap(), rs);
    }
}

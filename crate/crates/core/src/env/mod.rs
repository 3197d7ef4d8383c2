//! Flexible-load environment: agents at feeder buses choose adjustable load
//! fractions and transferable-load on/off flags each hour; the operator
//! dispatches the feeder, prices every bus and carbon flow assigns emissions.

mod profiles;
mod trace;

pub use profiles::{
    read_csv, synthesize, write_csv, DayProfile, ProfileError, ResKind, SynthSpec, DEFAULT_BACKGROUND, DEFAULT_PRICE,
    DEFAULT_PSI_GRID, HOURS, SYNTH_HEADER,
};
pub use trace::{episode_metrics, read_trace, write_trace, EpisodeMetrics, StepRecord};

use crate::carbon::{accrue_agent_emissions, gen_intensities, nodal_intensity, EmissionLedger};
use crate::dispatch::{check_soc_exactness, solve_dispatch, DispatchError, DispatchInput};
use crate::grid::{GeneratorKind, NetworkModel};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("agent {agent}: {msg}")]
    Agent { agent: usize, msg: String },
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error("dispatch failed at step {t}: {source}")]
    Dispatch {
        t: usize,
        #[source]
        source: DispatchError,
    },
    #[error("carbon flow failed at step {t}: {msg}")]
    Carbon { t: usize, msg: String },
    #[error("invalid step: {0}")]
    Step(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub bus: usize,
    /// $/MW²h, must be negative.
    pub utility_a: f64,
    /// $/MWh.
    pub utility_b: f64,
    /// MW per step.
    pub p_adj_max: Vec<f64>,
    /// MW while the transferable block runs.
    pub p_tr: f64,
    /// Steps the transferable block must run consecutively.
    pub duration: usize,
    /// tCO₂ per day.
    pub quota: f64,
}

impl AgentSpec {
    pub fn validate(&self, net: &NetworkModel, horizon: usize, agent: usize) -> Result<(), EnvError> {
        let err = |msg: String| Err(EnvError::Agent { agent, msg });
        if self.bus >= net.n_buses() {
            return err(format!("bus {} not in network", self.bus));
        }
        if !(self.utility_a < 0.0) {
            return err(format!("utility_a must be negative (strictly concave utility), got {}", self.utility_a));
        }
        if self.duration == 0 || self.duration > horizon {
            return err(format!(
                "transferable duration {} must satisfy 0 < duration <= T = {horizon} (the block must fit in the day)",
                self.duration
            ));
        }
        if !(self.quota > 0.0) {
            return err(format!("quota must be positive, got {}", self.quota));
        }
        if self.p_adj_max.len() != horizon {
            return err(format!("p_adj_max has {} entries for horizon {horizon}", self.p_adj_max.len()));
        }
        if self.p_adj_max.iter().any(|&p| !(p >= 0.0)) || !(self.p_tr >= 0.0) {
            return err("load magnitudes must be non-negative".into());
        }
        Ok(())
    }

    /// Largest load the agent can draw, MW; used to scale observations.
    pub fn power_scale(&self) -> f64 {
        self.p_adj_max.iter().cloned().fold(0.0, f64::max) + self.p_tr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub horizon: usize,
    pub dt_h: f64,
    /// Power factor of all loads (lagging).
    pub power_factor: f64,
    /// Reward assigned to a step whose dispatch is infeasible.
    pub infeasible_reward: f64,
    /// Relaxation-gap tolerance reported in step info.
    pub soc_tol: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig { horizon: HOURS, dt_h: 1.0, power_factor: 0.95, infeasible_reward: -1e4, soc_tol: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub t: usize,
    /// MW per agent at step `t` (zero once the day is over).
    pub p_uc: Vec<f64>,
    /// MW per renewable unit at step `t`.
    pub res_cap: Vec<f64>,
    pub o_prev: Vec<bool>,
    pub run_elapsed: Vec<usize>,
    pub ledger: EmissionLedger,
    /// Set when a dispatch failure cut the episode short.
    pub truncated: bool,
}

impl EnvState {
    pub fn em_cum(&self) -> &[f64] {
        &self.ledger.cumulative
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Forced {
    Free,
    On,
    Off,
}

impl Forced {
    pub fn is_forced(self) -> bool {
        self != Forced::Free
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgentAction {
    pub alpha: f64,
    pub on: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    pub feasible: bool,
    /// Actions after clamping and masking.
    pub applied: Vec<AgentAction>,
    /// Agents whose requested on/off flag was overwritten by the mask.
    pub overridden: Vec<bool>,
    /// MW per agent.
    pub agent_load: Vec<f64>,
    pub adjustable_load: Vec<f64>,
    /// $/MWh at each agent bus.
    pub dlmp: Vec<f64>,
    /// tCO₂/MWh at each agent bus.
    pub intensity: Vec<f64>,
    /// tCO₂ charged to each agent this step.
    pub emission: Vec<f64>,
    /// $/h.
    pub dispatch_objective: f64,
    pub max_exactness_gap: f64,
    pub inexact_lines: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub next_state: EnvState,
    pub reward: f64,
    pub costs: Vec<f64>,
    pub cost_limits: Vec<f64>,
    pub done: bool,
    pub info: StepInfo,
}

/// Which on/off values are admissible for each agent in `state`.
pub fn feasible_mask(state: &EnvState, agents: &[AgentSpec], horizon: usize) -> Vec<Forced> {
    agents
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let run = state.run_elapsed[i];
            if run >= a.duration {
                Forced::Off
            } else if run > 0 || a.duration - run >= horizon.saturating_sub(state.t) {
                Forced::On
            } else {
                Forced::Free
            }
        })
        .collect()
}

/// Per-agent welfare of one step, $: `a·P_a² + b·P_a − λ·P_load` times `dt`.
pub fn agent_welfare(a: &AgentSpec, p_adj: f64, p_load: f64, dlmp: f64, dt_h: f64) -> f64 {
    (a.utility_a * p_adj * p_adj + a.utility_b * p_adj - dlmp * p_load) * dt_h
}

#[derive(Debug, Clone)]
pub struct FlexEnv {
    pub net: NetworkModel,
    pub agents: Vec<AgentSpec>,
    pub cfg: EnvConfig,
    renewables: Vec<usize>,
    grid_cap: f64,
}

impl FlexEnv {
    pub fn new(net: NetworkModel, agents: Vec<AgentSpec>, cfg: EnvConfig) -> Result<Self, EnvError> {
        for (i, a) in agents.iter().enumerate() {
            a.validate(&net, cfg.horizon, i)?;
        }
        let mut seen = std::collections::HashSet::new();
        for (i, a) in agents.iter().enumerate() {
            if !seen.insert(a.bus) {
                return Err(EnvError::Agent { agent: i, msg: format!("bus {} already hosts another agent", a.bus) });
            }
        }
        let renewables = net.generators_of_kind(GeneratorKind::Renewable).map(|(z, _)| z).collect();
        let grid_cap = net.generators_of_kind(GeneratorKind::Grid).map(|(_, g)| g.p_max * net.s_base).sum();
        Ok(FlexEnv { net, agents, cfg, renewables, grid_cap })
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn n_renewables(&self) -> usize {
        self.renewables.len()
    }

    pub fn horizon(&self) -> usize {
        self.cfg.horizon
    }

    pub fn quotas(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.quota).collect()
    }

    pub fn agent_buses(&self) -> Vec<usize> {
        self.agents.iter().map(|a| a.bus).collect()
    }

    pub fn check_day(&self, day: &DayProfile) -> Result<(), EnvError> {
        day.validate(self.n_agents(), self.n_renewables(), self.cfg.horizon)?;
        for (r, &z) in self.renewables.iter().enumerate() {
            let cap = self.net.generators[z].p_max * self.net.s_base;
            if day.res_cap[r].iter().any(|&x| x > cap * (1.0 + 1e-9)) {
                return Err(ProfileError::Invalid(format!("renewable {r} profile exceeds nameplate {cap} MW")).into());
            }
        }
        Ok(())
    }

    fn exogenous(&self, day: &DayProfile, t: usize) -> (Vec<f64>, Vec<f64>) {
        if t < self.cfg.horizon {
            (day.uc_load.iter().map(|s| s[t]).collect(), day.res_cap.iter().map(|s| s[t]).collect())
        } else {
            (vec![0.0; self.n_agents()], vec![0.0; self.n_renewables()])
        }
    }

    pub fn reset(&self, day: &DayProfile) -> Result<EnvState, EnvError> {
        self.check_day(day)?;
        let (p_uc, res_cap) = self.exogenous(day, 0);
        Ok(EnvState {
            t: 0,
            p_uc,
            res_cap,
            o_prev: vec![false; self.n_agents()],
            run_elapsed: vec![0; self.n_agents()],
            ledger: EmissionLedger::new(self.quotas()),
            truncated: false,
        })
    }

    pub fn is_terminal(&self, state: &EnvState) -> bool {
        state.t >= self.cfg.horizon || state.truncated
    }

    pub fn mask(&self, state: &EnvState) -> Vec<Forced> {
        feasible_mask(state, &self.agents, self.cfg.horizon)
    }

    /// Global observation shared by all agents.
    pub fn observe(&self, day: &DayProfile, state: &EnvState) -> Vec<f64> {
        let t_n = self.cfg.horizon;
        let t = state.t.min(t_n - 1);
        let hour = std::f64::consts::TAU * state.t as f64 / t_n as f64;
        let mut o = vec![
            state.t as f64 / t_n as f64,
            hour.sin(),
            hour.cos(),
            day.price[t] / 100.0,
            day.psi_grid[t],
            day.background[t],
        ];
        for (r, &z) in self.renewables.iter().enumerate() {
            o.push(state.res_cap[r] / (self.net.generators[z].p_max * self.net.s_base));
        }
        let left = t_n.saturating_sub(state.t).max(1) as f64;
        for (i, a) in self.agents.iter().enumerate() {
            let scale = a.power_scale().max(1e-9);
            o.push(state.p_uc[i] / scale);
            o.push(a.p_adj_max[t] / scale);
            o.push(if state.o_prev[i] { 1.0 } else { 0.0 });
            o.push(state.run_elapsed[i] as f64 / a.duration as f64);
            o.push((a.duration - state.run_elapsed[i].min(a.duration)) as f64 / left);
            o.push(state.ledger.cumulative[i] / a.quota);
        }
        o
    }

    pub fn obs_dim(&self) -> usize {
        6 + self.n_renewables() + 6 * self.n_agents()
    }

    /// Bus loads for one step: nominal background scaled by the day's
    /// multiplier, with each agent bus replaced by the agent's total load.
    pub fn nodal_loads(&self, day: &DayProfile, t: usize, agent_load: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let s = self.net.s_base;
        let mut p: Vec<f64> = self.net.buses.iter().map(|b| b.p_load * s * day.background[t]).collect();
        for (a, &load) in self.agents.iter().zip(agent_load) {
            p[a.bus] = load;
        }
        let tan_phi = (1.0 / (self.cfg.power_factor * self.cfg.power_factor) - 1.0).sqrt();
        let q = p.iter().map(|x| x * tan_phi).collect();
        (p, q)
    }

    pub fn step(&self, day: &DayProfile, state: &EnvState, actions: &[AgentAction]) -> Result<StepOutcome, EnvError> {
        let t = state.t;
        if self.is_terminal(state) {
            return Err(EnvError::Step(format!("episode already finished at t = {t}")));
        }
        if actions.len() != self.n_agents() {
            return Err(EnvError::Step(format!("{} actions for {} agents", actions.len(), self.n_agents())));
        }
        let mask = self.mask(state);
        let mut applied = Vec::with_capacity(actions.len());
        let mut overridden = Vec::with_capacity(actions.len());
        for (act, m) in actions.iter().zip(&mask) {
            let alpha = if act.alpha.is_nan() { 0.0 } else { act.alpha.clamp(0.0, 1.0) };
            let on = match m {
                Forced::Free => act.on,
                Forced::On => true,
                Forced::Off => false,
            };
            overridden.push(on != act.on);
            applied.push(AgentAction { alpha, on });
        }
        let adjustable: Vec<f64> = self.agents.iter().zip(&applied).map(|(a, x)| x.alpha * a.p_adj_max[t]).collect();
        let agent_load: Vec<f64> = (0..self.n_agents())
            .map(|i| state.p_uc[i] + adjustable[i] + if applied[i].on { self.agents[i].p_tr } else { 0.0 })
            .collect();

        let (p, q) = self.nodal_loads(day, t, &agent_load);
        let input = DispatchInput {
            net: &self.net,
            nodal_load_p: p,
            nodal_load_q: q,
            res_cap: state.res_cap.clone(),
            wholesale_price: day.price[t],
            grid_cap: self.grid_cap,
        };
        let sol = solve_dispatch(&input).map_err(|source| EnvError::Dispatch { t, source })?;

        let mut next = state.clone();
        next.t = t + 1;
        for i in 0..self.n_agents() {
            next.o_prev[i] = applied[i].on;
            if applied[i].on {
                next.run_elapsed[i] += 1;
            }
        }
        let (p_uc, res_cap) = self.exogenous(day, t + 1);
        next.p_uc = p_uc;
        next.res_cap = res_cap;

        let n = self.n_agents();
        let buses = self.agent_buses();
        let (reward, dlmp, intensity, emission, objective, gap, inexact) = if sol.is_optimal() {
            let psi_gen = gen_intensities(&self.net, day.psi_grid[t]);
            let psi = nodal_intensity(&self.net, &sol, &psi_gen).map_err(|e| EnvError::Carbon { t, msg: e.to_string() })?;
            let emission = accrue_agent_emissions(&mut next.ledger, &psi, &buses, &agent_load, self.cfg.dt_h);
            let dlmp: Vec<f64> = buses.iter().map(|&b| sol.dlmp[b]).collect();
            let reward = (0..n)
                .map(|i| agent_welfare(&self.agents[i], adjustable[i], agent_load[i], dlmp[i], self.cfg.dt_h))
                .sum();
            let rep = check_soc_exactness(&self.net, &sol, self.cfg.soc_tol);
            let intensity = buses.iter().map(|&b| psi[b]).collect();
            (reward, dlmp, intensity, emission, sol.objective, rep.max_gap, rep.inexact)
        } else {
            next.truncated = true;
            (self.cfg.infeasible_reward, vec![f64::NAN; n], vec![f64::NAN; n], vec![0.0; n], f64::NAN, f64::NAN, Vec::new())
        };
        let done = next.t >= self.cfg.horizon || next.truncated;
        let costs = if done { next.ledger.cumulative.clone() } else { vec![0.0; n] };
        Ok(StepOutcome {
            reward,
            costs,
            cost_limits: self.quotas(),
            done,
            info: StepInfo {
                feasible: sol.is_optimal(),
                applied,
                overridden,
                agent_load,
                adjustable_load: adjustable,
                dlmp,
                intensity,
                emission,
                dispatch_objective: objective,
                max_exactness_gap: gap,
                inexact_lines: inexact,
            },
            next_state: next,
        })
    }
}


#[cfg(test)]
mod tests {
    use super::fixtures::*;
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn state(t: usize, run: usize) -> EnvState {
        EnvState {
            t,
            p_uc: vec![0.0],
            res_cap: vec![],
            o_prev: vec![run > 0],
            run_elapsed: vec![run],
            ledger: EmissionLedger::new(vec![1.0]),
            truncated: false,
        }
    }

    fn one_agent(duration: usize) -> Vec<AgentSpec> {
        vec![AgentSpec {
            bus: 1,
            utility_a: -10.0,
            utility_b: 100.0,
            p_adj_max: vec![1.0; HOURS],
            p_tr: 0.5,
            duration,
            quota: 1.0,
        }]
    }

    #[test]
    fn mask_rules() {
        assert_eq!(feasible_mask(&state(5, 1), &one_agent(3), 24), vec![Forced::On]);
        assert_eq!(feasible_mask(&state(20, 0), &one_agent(4), 24), vec![Forced::On]);
        assert_eq!(feasible_mask(&state(19, 0), &one_agent(4), 24), vec![Forced::Free]);
        assert_eq!(feasible_mask(&state(7, 3), &one_agent(3), 24), vec![Forced::Off]);
    }

    #[test]
    fn welfare_arithmetic() {
        let a = &one_agent(3)[0];
        // alpha = 1 with P_max = 1 MW, λ = 50, only the adjustable block drawn
        assert_eq!(agent_welfare(a, 1.0, 1.0, 50.0, 1.0), 40.0);
        assert_eq!(agent_welfare(a, 0.0, 0.0, 50.0, 1.0), 0.0);
    }

    #[test]
    fn reset_is_clean_and_agents_sit_at_reference_buses() {
        let env = env33();
        let day = &days(1)[0];
        let s = env.reset(day).unwrap();
        assert_eq!(s.em_cum(), &[0.0; 5]);
        assert_eq!(s, env.reset(day).unwrap());
        assert_eq!(env.agent_buses(), vec![12, 17, 19, 22, 25]);
        assert_eq!(env.observe(day, &s).len(), env.obs_dim());
    }

    #[test]
    fn idle_agents_with_no_load_earn_nothing() {
        let env = env33();
        let mut day = days(1).remove(0);
        day.uc_load.iter_mut().for_each(|s| s.iter_mut().for_each(|x| *x = 0.0));
        let s = env.reset(&day).unwrap();
        let out = env.step(&day, &s, &vec![AgentAction { alpha: 0.0, on: false }; 5]).unwrap();
        assert!(out.info.feasible);
        assert_eq!(out.info.agent_load, vec![0.0; 5]);
        assert_eq!(out.reward, 0.0);
        assert_eq!(out.costs, vec![0.0; 5]);
    }

    #[test]
    fn rejects_bad_agents() {
        let mut a = agents();
        a[0].duration = 25;
        let err = FlexEnv::new(NetworkModel::ieee33(), a, EnvConfig::default()).unwrap_err();
        assert!(err.to_string().contains("duration"));
        let mut a = agents();
        a[1].utility_a = 1.0;
        assert!(FlexEnv::new(NetworkModel::ieee33(), a, EnvConfig::default()).is_err());
    }

    fn random_episode(env: &FlexEnv, day: &DayProfile, rng: &mut ChaCha8Rng) -> Vec<StepOutcome> {
        let mut s = env.reset(day).unwrap();
        let mut out = Vec::new();
        while !env.is_terminal(&s) {
            let acts: Vec<AgentAction> =
                (0..env.n_agents()).map(|_| AgentAction { alpha: rng.gen(), on: rng.gen_bool(0.3) }).collect();
            let o = env.step(day, &s, &acts).unwrap();
            s = o.next_state.clone();
            out.push(o);
        }
        out
    }

    #[test]
    fn episode_replay_matches_ledger_and_reward_formula() {
        let env = env33();
        let day = &days(2)[1];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = random_episode(&env, day, &mut rng);
        assert_eq!(ep.len(), 24);
        let mut replay = vec![0.0; 5];
        for (t, o) in ep.iter().enumerate() {
            assert!(o.info.feasible);
            let mut r = 0.0;
            for i in 0..5 {
                replay[i] += o.info.intensity[i] * o.info.agent_load[i];
                r += agent_welfare(&env.agents[i], o.info.adjustable_load[i], o.info.agent_load[i], o.info.dlmp[i], 1.0);
            }
            assert!((o.reward - r).abs() <= 1e-9);
            if t < 23 {
                assert_eq!(o.costs, vec![0.0; 5]);
            }
        }
        let last = ep.last().unwrap();
        for i in 0..5 {
            assert_eq!(last.costs[i], last.next_state.em_cum()[i]);
            assert!((last.costs[i] - replay[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn masked_schedules_run_exactly_duration_consecutive_steps() {
        let env = env33();
        let day = &days(1)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let ep = random_episode(&env, day, &mut rng);
            for i in 0..5 {
                let on: Vec<bool> = ep.iter().map(|o| o.info.applied[i].on).collect();
                assert_eq!(on.iter().filter(|&&x| x).count(), env.agents[i].duration);
                let first = on.iter().position(|&x| x).unwrap();
                assert!(on[first..first + env.agents[i].duration].iter().all(|&x| x));
            }
        }
    }

    #[test]
    fn infeasible_dispatch_truncates_with_sentinel() {
        let mut env = env33();
        env.agents[0].p_adj_max = vec![50.0; HOURS];
        let day = &days(1)[0];
        let s = env.reset(day).unwrap();
        let o = env.step(day, &s, &vec![AgentAction { alpha: 1.0, on: false }; 5]).unwrap();
        assert!(!o.info.feasible);
        assert_eq!(o.reward, -1e4);
        assert!(o.done && o.next_state.truncated);
        assert!(env.step(day, &o.next_state, &vec![AgentAction { alpha: 0.0, on: false }; 5]).is_err());
    }
}

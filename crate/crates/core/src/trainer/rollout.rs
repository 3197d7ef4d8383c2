//! On-policy trajectory collection.

use super::TrainError;
use crate::env::{AgentAction, DayProfile, EpisodeMetrics, FlexEnv, Forced, StepRecord, episode_metrics};
use crate::neural::{HybridPolicy, PolicyDistribution, PolicySample, log_prob};
use crate::scalar::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// One policy controlling a set of agents; `agents[k]` receives the
/// policy's continuous dim `k` and discrete dim `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Controller<T> {
    pub policy: HybridPolicy<T>,
    pub agents: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep<T> {
    pub obs: Vec<T>,
    pub next_obs: Vec<T>,
    pub reward: f64,
    /// Per agent; non-zero only on the final step of an episode.
    pub costs: Vec<f64>,
    pub done: bool,
    /// Per controller.
    pub actions: Vec<PolicySample<T>>,
    pub masks: Vec<Vec<bool>>,
    pub log_probs: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutBuffer<T> {
    pub steps: Vec<RolloutStep<T>>,
    pub episodes: Vec<Range<usize>>,
    pub records: Vec<StepRecord>,
    pub metrics: Vec<EpisodeMetrics>,
}

impl<T> Default for RolloutBuffer<T> {
    fn default() -> Self {
        RolloutBuffer { steps: Vec::new(), episodes: Vec::new(), records: Vec::new(), metrics: Vec::new() }
    }
}

impl<T: Scalar> RolloutBuffer<T> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn n_episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn clear(&mut self) {
        *self = Self::default();
    }

    /// Sum of per-agent costs over `agents` for each step.
    pub fn group_costs(&self, agents: &[usize]) -> Vec<f64> {
        self.steps.iter().map(|s| agents.iter().map(|&i| s.costs[i]).sum()).collect()
    }

    /// Episode-mean terminal cost summed over `agents`.
    pub fn mean_episode_cost(&self, agents: &[usize]) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.group_costs(agents).iter().sum::<f64>() / self.episodes.len() as f64
    }

    pub fn mean_episode_reward(&self) -> f64 {
        if self.episodes.is_empty() {
            return 0.0;
        }
        self.steps.iter().map(|s| s.reward).sum::<f64>() / self.episodes.len() as f64
    }
}

/// How actions are drawn from the policies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    /// Continuous mean, most likely on/off flag.
    Greedy,
}

pub fn to_scalar<T: Scalar>(x: &[f64]) -> Vec<T> {
    x.iter().map(|&v| T::lit(v)).collect()
}

/// Run one episode with an arbitrary action rule. The rule sees the
/// observation and the on/off mask and returns one action per agent.
pub fn run_episode(
    env: &FlexEnv,
    day: &DayProfile,
    episode: usize,
    mut act: impl FnMut(&[f64], &[Forced]) -> Result<Vec<AgentAction>, TrainError>,
) -> Result<(Vec<StepRecord>, EpisodeMetrics), TrainError> {
    let mut s = env.reset(day)?;
    let mut records = Vec::with_capacity(env.horizon());
    while !env.is_terminal(&s) {
        let obs = env.observe(day, &s);
        let actions = act(&obs, &env.mask(&s))?;
        let out = env.step(day, &s, &actions)?;
        records.push(StepRecord::from_outcome(episode, s.t, &out));
        s = out.next_state;
    }
    let m = episode_metrics(&records);
    Ok((records, m))
}

/// Joint agent actions from the controllers; also returns each
/// controller's sample, discrete mask and log-probability.
pub fn act<T: Scalar>(
    controllers: &[Controller<T>],
    obs: &[T],
    mask: &[Forced],
    n_agents: usize,
    mode: ActionMode,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<AgentAction>, Vec<PolicySample<T>>, Vec<Vec<bool>>, Vec<T>), TrainError> {
    let mut actions = vec![AgentAction { alpha: 0.0, on: false }; n_agents];
    let mut samples = Vec::with_capacity(controllers.len());
    let mut masks = Vec::with_capacity(controllers.len());
    let mut lps = Vec::with_capacity(controllers.len());
    for c in controllers {
        let d = c.policy.dist(obs)?;
        let sample = match mode {
            ActionMode::Sample => d.sample(rng),
            ActionMode::Greedy => d.greedy(),
        };
        let m: Vec<bool> = c.agents.iter().map(|&i| mask[i].is_forced()).collect();
        let alpha = PolicyDistribution::squash(&sample.u);
        for (k, &i) in c.agents.iter().enumerate() {
            actions[i] = AgentAction { alpha: alpha[k].to_f64_lossy(), on: sample.on[k] };
        }
        lps.push(log_prob(&d, &sample, &m));
        samples.push(sample);
        masks.push(m);
    }
    Ok((actions, samples, masks, lps))
}

/// One episode per entry of `days`; episode `e` draws its randomness from
/// stream `e` of a generator seeded with `seed`.
pub fn collect_rollouts<T: Scalar>(
    env: &FlexEnv,
    days: &[&DayProfile],
    controllers: &[Controller<T>],
    mode: ActionMode,
    seed: u64,
) -> Result<RolloutBuffer<T>, TrainError> {
    let n = env.n_agents();
    let mut buf = RolloutBuffer::default();
    for (e, day) in days.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(e as u64);
        let start = buf.steps.len();
        let mut s = env.reset(day)?;
        let mut records = Vec::with_capacity(env.horizon());
        while !env.is_terminal(&s) {
            let obs: Vec<T> = to_scalar(&env.observe(day, &s));
            let (actions, samples, masks, lps) = act(controllers, &obs, &env.mask(&s), n, mode, &mut rng)?;
            let out = env.step(day, &s, &actions)?;
            records.push(StepRecord::from_outcome(e, s.t, &out));
            let next_obs = to_scalar(&env.observe(day, &out.next_state));
            buf.steps.push(RolloutStep {
                obs,
                next_obs,
                reward: out.reward,
                costs: out.costs.clone(),
                done: out.done,
                actions: samples,
                masks,
                log_probs: lps,
            });
            s = out.next_state;
        }
        buf.episodes.push(start..buf.steps.len());
        buf.metrics.push(episode_metrics(&records));
        buf.records.extend(records);
    }
    Ok(buf)
}

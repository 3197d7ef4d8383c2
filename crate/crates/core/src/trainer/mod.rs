//! Consensus multi-agent constrained policy optimization and the shared
//! training loop used by the baselines.
//!
//! Each iteration collects fresh on-policy episodes, estimates reward and
//! cost advantages with each controller's critics, takes one constrained
//! trust-region step per controller, fits the critics by TD(0), and finally
//! averages the reward critics over the communication graph.

mod cpo;
mod graph;
mod rollout;

pub use cpo::{
    conjugate_gradient, dual_multipliers, fisher_vector_product, line_search, mean_kl, mean_kl_gradient, solve_trust_region,
    surrogate_change, surrogate_gradients, CgResult, LineSearchResult, PolicyBatch, PolicySampleData, StepMode,
    TrustRegionError, TrustRegionStep,
};
pub use graph::{consensus_update, disagreement, CommunicationGraph, GraphError};
pub use rollout::{act, collect_rollouts, run_episode, to_scalar, ActionMode, Controller, RolloutBuffer, RolloutStep};

use crate::baselines::{self, PpoConfig};
use crate::env::{DayProfile, EnvError, FlexEnv};
use crate::neural::{gae, normalize, td_gradient, Adam, HybridPolicy, NeuralError, Transition, ValueNet};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("config: {0}")]
    Config(String),
    #[error("controller {controller}: {source}")]
    TrustRegion { controller: usize, source: TrustRegionError },
    #[error("controller {controller}: accepted update has mean KL {kl:.4e} above delta {delta}")]
    KlViolation { controller: usize, kl: f64, delta: f64 },
    #[error("iteration {iteration}: {source}")]
    Iteration { iteration: usize, source: Box<TrainError> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    /// Per-agent constrained updates with consensus on reward critics.
    Cmacpo,
    /// As `Cmacpo` without the consensus step.
    Macpo,
    /// One joint policy over all agents with the aggregate quota.
    CentralizedCpo,
    /// Per-agent clipped PPO on an emission-penalized reward.
    PpoPenalty,
}

impl Algorithm {
    pub const ALL: [Algorithm; 4] = [Algorithm::Cmacpo, Algorithm::PpoPenalty, Algorithm::CentralizedCpo, Algorithm::Macpo];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Cmacpo => "cmacpo",
            Algorithm::Macpo => "macpo",
            Algorithm::CentralizedCpo => "centralized_cpo",
            Algorithm::PpoPenalty => "ppo_penalty",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown algorithm {s:?} (expected one of cmacpo, macpo, centralized_cpo, ppo_penalty)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    /// Discount of the cost critics and cost advantages.
    pub cost_gamma: f64,
    /// KL radius.
    pub delta: f64,
    /// Scale on the optimal-mode step.
    pub mu: f64,
    pub critic_lr: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub damping: f64,
    pub cg_iters: usize,
    pub cg_tol: f64,
    pub backoff: f64,
    pub line_search_steps: usize,
    pub episodes_per_iteration: usize,
    pub critic_epochs: usize,
    pub critic_minibatch: usize,
    pub huber_delta: f64,
    /// Multiplier on rewards seen by the reward critics.
    pub reward_scale: f64,
    /// Fraction by which the cost limits are tightened during training.
    pub cost_limit_margin: f64,
    /// Start every agent's critics from the same parameters.
    pub shared_critic_init: bool,
    pub ppo: PpoConfig,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            gamma: 0.95,
            gae_lambda: 0.95,
            cost_gamma: 1.0,
            delta: 0.2,
            mu: 0.1,
            critic_lr: 5e-4,
            hidden: vec![128, 32],
            init_log_std: -0.5,
            damping: 0.1,
            cg_iters: 10,
            cg_tol: 1e-8,
            backoff: 0.8,
            line_search_steps: 10,
            episodes_per_iteration: 5,
            critic_epochs: 5,
            critic_minibatch: 48,
            huber_delta: 1.0,
            reward_scale: 0.02,
            cost_limit_margin: 0.10,
            shared_critic_init: false,
            ppo: PpoConfig::default(),
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.gamma) || !unit(self.gae_lambda) || !unit(self.cost_gamma) {
            return bad("discounts and GAE lambda must lie in [0, 1]".into());
        }
        if !(self.delta > 0.0) || !(self.mu > 0.0) || !(self.critic_lr > 0.0) {
            return bad("delta, mu and critic_lr must be positive".into());
        }
        if !(self.backoff > 0.0 && self.backoff < 1.0) {
            return bad(format!("backoff must lie in (0, 1), got {}", self.backoff));
        }
        if self.damping < 0.0 || self.cg_iters == 0 || self.line_search_steps == 0 {
            return bad("damping must be non-negative; cg_iters and line_search_steps positive".into());
        }
        if self.episodes_per_iteration == 0 || self.critic_minibatch == 0 || self.hidden.contains(&0) {
            return bad("episode batch, critic minibatch and hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.cost_limit_margin) || !(self.reward_scale > 0.0) || !(self.huber_delta > 0.0) {
            return bad("cost_limit_margin in [0, 1); reward_scale and huber_delta positive".into());
        }
        self.ppo.validate().map_err(TrainError::Config)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    /// Episodes collected so far.
    pub episodes: usize,
    /// Mean episode reward, $.
    pub reward: f64,
    /// Mean episode emission over all agents, tCO₂.
    pub emission: f64,
    /// Mean aggregate violation rate, %.
    pub violation_rate: f64,
    /// Mean terminal cost per agent.
    pub agent_cost: Vec<f64>,
    /// Mean KL of each controller's accepted update (0 when rejected).
    pub kl: Vec<f64>,
    pub recoveries: usize,
    pub rejected: usize,
    /// Reward-critic disagreement after the iteration.
    pub disagreement: f64,
}

pub const METRICS_HEADER: &str = "iteration,episodes,reward,emission,violation_rate,agent_cost,kl_max,recoveries,rejected,disagreement";

impl IterationMetrics {
    pub fn csv_row(&self) -> String {
        let costs: Vec<String> = self.agent_cost.iter().map(|c| format!("{c:.6}")).collect();
        let kl_max = self.kl.iter().cloned().fold(0.0, f64::max);
        format!(
            "{},{},{:.6},{:.6},{:.6},{},{:.6e},{},{},{:.6e}",
            self.iteration,
            self.episodes,
            self.reward,
            self.emission,
            self.violation_rate,
            costs.join(";"),
            kl_max,
            self.recoveries,
            self.rejected,
            self.disagreement
        )
    }
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[IterationMetrics]) -> Result<(), std::io::Error> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{METRICS_HEADER}")?;
    for r in rows {
        writeln!(f, "{}", r.csv_row())?;
    }
    f.flush()
}

/// Policies, critics and optimizer state of one training run.
#[derive(Debug, Clone)]
pub struct Learner<T> {
    pub algorithm: Algorithm,
    pub controllers: Vec<Controller<T>>,
    pub reward_critics: Vec<ValueNet<T>>,
    pub cost_critics: Vec<ValueNet<T>>,
    reward_opt: Vec<Adam<T>>,
    cost_opt: Vec<Adam<T>>,
    actor_opt: Vec<Adam<T>>,
    /// Cost limit per controller before tightening.
    pub limits: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl<T: Scalar> Learner<T> {
    /// Controller `k` draws its policy from stream `100 + k` and its
    /// critics from streams `200 + k` and `300 + k` (stream 200 and 300
    /// for all when `shared_critic_init`).
    pub fn new(env: &FlexEnv, cfg: &TrainerConfig, algorithm: Algorithm, seed: u64) -> Self {
        let n = env.n_agents();
        let groups: Vec<Vec<usize>> = match algorithm {
            Algorithm::CentralizedCpo => vec![(0..n).collect()],
            _ => (0..n).map(|i| vec![i]).collect(),
        };
        let quotas = env.quotas();
        let obs_dim = env.obs_dim();
        let mut controllers = Vec::new();
        let mut reward_critics = Vec::new();
        let mut cost_critics = Vec::new();
        for (k, agents) in groups.into_iter().enumerate() {
            let m = agents.len();
            let policy = HybridPolicy::new(obs_dim, &cfg.hidden, m, m, cfg.init_log_std, &mut stream_rng(seed, 100 + k as u64));
            let ck = if cfg.shared_critic_init { 0 } else { k as u64 };
            reward_critics.push(ValueNet::new(obs_dim, &cfg.hidden, &mut stream_rng(seed, 200 + ck)));
            cost_critics.push(ValueNet::new(obs_dim, &cfg.hidden, &mut stream_rng(seed, 300 + ck)));
            controllers.push(Controller { policy, agents });
        }
        let lr = T::lit(cfg.critic_lr);
        let reward_opt = reward_critics.iter().map(|c| Adam::new(c.params.len(), lr)).collect();
        let cost_opt = cost_critics.iter().map(|c| Adam::new(c.params.len(), lr)).collect();
        let actor_opt = controllers.iter().map(|c| Adam::new(c.policy.params.len(), T::lit(cfg.ppo.lr))).collect();
        let limits = controllers.iter().map(|c| c.agents.iter().map(|&i| quotas[i]).sum()).collect();
        Learner { algorithm, controllers, reward_critics, cost_critics, reward_opt, cost_opt, actor_opt, limits }
    }

    pub fn reward_disagreement(&self) -> f64 {
        let phis: Vec<_> = self.reward_critics.iter().map(|c| c.params.clone()).collect();
        disagreement(&phis).to_f64_lossy()
    }
}

/// Advantages of one controller over a buffer, computed per episode.
pub fn advantages<T: Scalar>(
    buf: &RolloutBuffer<T>,
    rewards: &[f64],
    critic: &ValueNet<T>,
    gamma: f64,
    lambda: f64,
) -> Result<Vec<T>, TrainError> {
    let mut out = Vec::with_capacity(buf.len());
    for ep in &buf.episodes {
        let mut v: Vec<T> = Vec::with_capacity(ep.len() + 1);
        for k in ep.clone() {
            v.push(critic.value(&buf.steps[k].obs)?);
        }
        let last = &buf.steps[ep.end - 1];
        v.push(if last.done { T::zero() } else { critic.value(&last.next_obs)? });
        let r: Vec<T> = rewards[ep.clone()].iter().map(|&x| T::lit(x)).collect();
        out.extend(gae(&r, &v, T::lit(gamma), T::lit(lambda)));
    }
    Ok(out)
}

/// Minibatched TD(0) fitting with Adam.
fn fit_critic<T: Scalar>(
    critic: &mut ValueNet<T>,
    opt: &mut Adam<T>,
    buf: &RolloutBuffer<T>,
    targets: &[f64],
    gamma: f64,
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(), TrainError> {
    let mut idx: Vec<usize> = (0..buf.len()).collect();
    for _ in 0..cfg.critic_epochs {
        idx.shuffle(rng);
        for chunk in idx.chunks(cfg.critic_minibatch) {
            let batch: Vec<Transition<T>> = chunk
                .iter()
                .map(|&k| {
                    let s = &buf.steps[k];
                    Transition { obs: &s.obs, reward: T::lit(targets[k]), next_obs: (!s.done).then_some(s.next_obs.as_slice()) }
                })
                .collect();
            let (_, grad) = td_gradient(critic, &batch, T::lit(gamma), T::lit(cfg.huber_delta))?;
            opt.step(critic.params.as_mut_slice(), &grad);
            if !critic.params.is_finite() {
                return Err(NeuralError::NonFinite("critic parameters".into()).into());
            }
        }
    }
    Ok(())
}

/// Outcome of one controller's policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub accepted: bool,
    pub kl: f64,
    pub mode: StepMode,
    /// False for updates that do not enforce the KL radius (PPO).
    pub trust_region: bool,
}

/// One constrained trust-region update of `policy` on `batch`; `c` is the
/// constraint slack `J_C − d`.
pub fn cpo_update<T: Scalar>(
    policy: &mut HybridPolicy<T>,
    batch: &PolicyBatch<T>,
    c: f64,
    cfg: &TrainerConfig,
) -> Result<(UpdateReport, TrustRegionStep<T>), TrainError> {
    let (g, b) = surrogate_gradients(policy, batch)?;
    let damping = T::lit(cfg.damping);
    let solve = |rhs: &[T]| {
        conjugate_gradient(|v: &[T]| fisher_vector_product(policy, batch, v, damping), rhs, cfg.cg_iters, T::lit(cfg.cg_tol)).x
    };
    let (hg, hb) = (solve(&g), solve(&b));
    let step = solve_trust_region(policy.params.as_slice(), &g, &b, T::lit(c), &hg, &hb, T::lit(cfg.delta), T::lit(cfg.mu))
        .map_err(|source| TrainError::TrustRegion { controller: 0, source })?;
    let ls = line_search(policy, batch, &step.solution, T::lit(c), step.mode, T::lit(cfg.delta), T::lit(cfg.backoff), cfg.line_search_steps)?;
    let kl = ls.kl.to_f64_lossy();
    if ls.accepted {
        if kl > cfg.delta {
            return Err(TrainError::KlViolation { controller: 0, kl, delta: cfg.delta });
        }
        policy.params.set(&ls.params);
    }
    Ok((UpdateReport { accepted: ls.accepted, kl, mode: step.mode, trust_region: true }, step))
}

/// Per-step rewards seen by a learner: the environment reward, plus the
/// emission penalty for PPO.
fn learner_rewards<T: Scalar>(algorithm: Algorithm, buf: &RolloutBuffer<T>, quotas: &[f64], cfg: &TrainerConfig) -> Vec<f64> {
    match algorithm {
        Algorithm::PpoPenalty => baselines::penalized_rewards(buf, quotas, cfg.ppo.penalty_weight),
        _ => buf.steps.iter().map(|s| s.reward).collect(),
    }
}

/// One full iteration on an already collected buffer: policy updates,
/// critic fitting and (for CMACPO) consensus. The buffer is consumed.
pub fn update<T: Scalar>(
    learner: &mut Learner<T>,
    buf: RolloutBuffer<T>,
    quotas: &[f64],
    cfg: &TrainerConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<UpdateReport>, TrainError> {
    let rewards = learner_rewards(learner.algorithm, &buf, quotas, cfg);
    let scaled: Vec<f64> = rewards.iter().map(|r| r * cfg.reward_scale).collect();
    let mut reports = Vec::with_capacity(learner.controllers.len());
    for k in 0..learner.controllers.len() {
        let agents = learner.controllers[k].agents.clone();
        let costs = buf.group_costs(&agents);
        let mut adv = advantages(&buf, &scaled, &learner.reward_critics[k], cfg.gamma, cfg.gae_lambda)?;
        normalize(&mut adv);
        let is_ppo = learner.algorithm == Algorithm::PpoPenalty;
        let cadv = if is_ppo {
            vec![T::zero(); buf.len()]
        } else {
            advantages(&buf, &costs, &learner.cost_critics[k], cfg.cost_gamma, cfg.gae_lambda)?
        };
        let policy = &learner.controllers[k].policy;
        let items = buf
            .steps
            .iter()
            .enumerate()
            .map(|(t, s)| (s.obs.as_slice(), &s.actions[k], s.masks[k].as_slice(), adv[t], cadv[t]));
        let batch = PolicyBatch::new(policy, items, buf.n_episodes())?;
        let report = if is_ppo {
            let policy = &mut learner.controllers[k].policy;
            baselines::ppo_penalty_update(policy, &batch, &mut learner.actor_opt[k], &cfg.ppo)?
        } else {
            let limit = learner.limits[k] * (1.0 - cfg.cost_limit_margin);
            let c = buf.mean_episode_cost(&agents) - limit;
            let policy = &mut learner.controllers[k].policy;
            cpo_update(policy, &batch, c, cfg)
                .map_err(|e| match e {
                    TrainError::TrustRegion { source, .. } => TrainError::TrustRegion { controller: k, source },
                    TrainError::KlViolation { kl, delta, .. } => TrainError::KlViolation { controller: k, kl, delta },
                    other => other,
                })?
                .0
        };
        drop(batch);
        reports.push(report);
        fit_critic(&mut learner.reward_critics[k], &mut learner.reward_opt[k], &buf, &scaled, cfg.gamma, cfg, rng)?;
        if !is_ppo {
            fit_critic(&mut learner.cost_critics[k], &mut learner.cost_opt[k], &buf, &costs, cfg.cost_gamma, cfg, rng)?;
        }
    }
    Ok(reports)
}

/// Training entry point. `days` is the pool episodes are drawn from;
/// `episodes` the total budget.
pub fn train<T: Scalar>(
    env: &FlexEnv,
    days: &[DayProfile],
    cfg: &TrainerConfig,
    algorithm: Algorithm,
    graph: &CommunicationGraph,
    episodes: usize,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationMetrics),
) -> Result<(Learner<T>, Vec<IterationMetrics>), TrainError> {
    cfg.validate()?;
    if days.is_empty() {
        return Err(TrainError::Config("no training days".into()));
    }
    for d in days {
        env.check_day(d)?;
    }
    let mut learner = Learner::new(env, cfg, algorithm, seed);
    let consensus = algorithm == Algorithm::Cmacpo && learner.controllers.len() > 1;
    if consensus && graph.n != learner.controllers.len() {
        return Err(TrainError::Config(format!("graph has {} nodes for {} agents", graph.n, learner.controllers.len())));
    }
    graph.validate()?;
    let quotas = env.quotas();
    let mut day_rng = stream_rng(seed, 1);
    let mut critic_rng = stream_rng(seed, 2);
    let iterations = episodes.div_ceil(cfg.episodes_per_iteration);
    let mut rows = Vec::with_capacity(iterations);
    let mut done = 0;
    for it in 0..iterations {
        let n_ep = cfg.episodes_per_iteration.min(episodes - done);
        let picked: Vec<&DayProfile> = (0..n_ep).map(|_| &days[day_rng.gen_range(0..days.len())]).collect();
        let wrap = |e: TrainError| TrainError::Iteration { iteration: it, source: Box::new(e) };
        let rollout_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(it as u64);
        let buf = collect_rollouts(env, &picked, &learner.controllers, ActionMode::Sample, rollout_seed).map_err(wrap)?;
        done += n_ep;
        let n = buf.n_episodes() as f64;
        let reward = buf.metrics.iter().map(|m| m.reward).sum::<f64>() / n;
        let emission = buf.metrics.iter().map(|m| m.emission).sum::<f64>() / n;
        let violation_rate = buf.metrics.iter().map(|m| m.violation_rate).sum::<f64>() / n;
        let agent_cost = (0..env.n_agents()).map(|i| buf.metrics.iter().map(|m| m.agent_emission[i]).sum::<f64>() / n).collect();
        let reports = update(&mut learner, buf, &quotas, cfg, &mut critic_rng).map_err(wrap)?;
        if consensus {
            let phis: Vec<_> = learner.reward_critics.iter().map(|c| c.params.clone()).collect();
            for (c, p) in learner.reward_critics.iter_mut().zip(consensus_update(&phis, graph)) {
                c.params = p;
            }
        }
        let row = IterationMetrics {
            iteration: it,
            episodes: done,
            reward,
            emission,
            violation_rate,
            agent_cost,
            kl: reports.iter().map(|r| if r.accepted { r.kl } else { 0.0 }).collect(),
            recoveries: reports.iter().filter(|r| r.mode == StepMode::Recovery).count(),
            rejected: reports.iter().filter(|r| !r.accepted).count(),
            disagreement: learner.reward_disagreement(),
        };
        on_iteration(&row);
        rows.push(row);
    }
    Ok((learner, rows))
}

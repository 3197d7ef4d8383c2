//! Experiment orchestration behind the command-line tool: configuration,
//! profile generation, training, greedy evaluation and algorithm
//! comparison. Every reported number is recomputed from emitted traces.

mod config;

pub use config::{AgentConfig, Check, ExperimentConfig, GraphConfig, ProfileConfig, RenewableConfig, ValidationReport};

use crate::baselines::no_flexibility_actions;
use crate::carbon::{
    emission_breakdown, gen_intensities, iterative_intensity_oracle, nodal_intensity, CarbonFlowState, DEAD_INFLUX_MW,
};
use crate::dispatch::{check_soc_exactness, solve_dispatch, DispatchInput, DispatchSolution};
use crate::env::{
    episode_metrics, read_csv, synthesize, write_csv, write_trace, DayProfile, EpisodeMetrics, FlexEnv, ProfileError,
    StepRecord, SynthSpec, SYNTH_HEADER,
};
use crate::grid::GeneratorKind;
use crate::neural::{load_checkpoint, save_checkpoint, Checkpoint, HybridPolicy, NeuralError};
use crate::trainer::{
    collect_rollouts, run_episode, train, write_metrics_csv, ActionMode, Algorithm, CommunicationGraph, Controller,
    GraphError, IterationMetrics, Learner, TrainError,
};
use serde::Serialize;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Env(#[from] crate::env::EnvError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("{context}: {source}")]
    Context { context: String, source: Box<HarnessError> },
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.to_path_buf(), source }
    }

    fn context(self, context: impl Into<String>) -> Self {
        HarnessError::Context { context: context.into(), source: Box::new(self) }
    }
}

/// Seed offsets of the synthetic training and held-out day sets.
pub const TRAIN_PROFILE_OFFSET: u64 = 1000;
pub const EVAL_PROFILE_OFFSET: u64 = 2000;

/// A validated configuration with its environment built.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub cfg: ExperimentConfig,
    pub env: FlexEnv,
    pub graph: CommunicationGraph,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self, HarnessError> {
        let net = cfg.load_network()?;
        check_basic(&cfg)?;
        let env = FlexEnv::new(net, cfg.agent_specs(), cfg.env.clone())?;
        let graph = cfg.communication_graph()?;
        cfg.trainer.validate().map_err(HarnessError::Train)?;
        Ok(Experiment { cfg, env, graph })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        Self::new(ExperimentConfig::load(path)?)
    }

    pub fn synth_spec(&self) -> SynthSpec {
        let p = &self.cfg.profiles;
        SynthSpec {
            uc_base: self.cfg.agents.iter().map(|a| a.uc_base).collect(),
            res: self.cfg.renewables(&self.env.net),
            price: p.price.clone(),
            psi_grid: p.psi_grid.clone(),
            background: p.background.clone(),
        }
    }

    fn days(&self, file: &Option<PathBuf>, seed: u64, n: usize) -> Result<Vec<DayProfile>, HarnessError> {
        let days = match file {
            Some(f) => read_csv(self.cfg.resolve(f)).map_err(|e| HarnessError::from(e).context(f.display().to_string()))?,
            None => synthesize(&self.synth_spec(), seed, n),
        };
        for (d, day) in days.iter().enumerate() {
            self.env.check_day(day).map_err(|e| HarnessError::from(e).context(format!("day {d}")))?;
        }
        Ok(days)
    }

    pub fn train_days(&self, seed: u64) -> Result<Vec<DayProfile>, HarnessError> {
        let p = &self.cfg.profiles;
        self.days(&p.train_file, TRAIN_PROFILE_OFFSET + seed, p.train_days)
    }

    pub fn eval_days(&self, seed: u64) -> Result<Vec<DayProfile>, HarnessError> {
        let p = &self.cfg.profiles;
        self.days(&p.eval_file, EVAL_PROFILE_OFFSET + seed, p.eval_days)
    }

    /// Held-out days for `eval_episodes` episodes, cycling if fewer exist.
    fn eval_schedule(&self, seed: u64) -> Result<Vec<DayProfile>, HarnessError> {
        let days = self.eval_days(seed)?;
        if days.is_empty() {
            return Err(HarnessError::Config("no evaluation days".into()));
        }
        Ok((0..self.cfg.eval_episodes).map(|k| days[k % days.len()].clone()).collect())
    }

    pub fn seeds(&self, overridden: Option<u64>) -> Vec<u64> {
        overridden.map_or_else(|| self.cfg.seeds.clone(), |s| vec![s])
    }
}

fn check_basic(cfg: &ExperimentConfig) -> Result<(), HarnessError> {
    let bad = |m: String| Err(HarnessError::Config(m));
    if cfg.agents.is_empty() {
        return bad("at least one agent is required".into());
    }
    if cfg.seeds.is_empty() {
        return bad("seeds must be listed explicitly".into());
    }
    if cfg.episodes == 0 || cfg.eval_episodes == 0 {
        return bad("episodes and eval_episodes must be positive".into());
    }
    if !(cfg.total_quota > 0.0) {
        return bad(format!("total_quota must be positive, got {}", cfg.total_quota));
    }
    if let Some(i) = cfg.agents.iter().position(|a| !(a.uc_base > 0.0)) {
        return bad(format!("agent {i}: uc_base must be positive"));
    }
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), HarnessError> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

/// Writes `profiles.csv` with the generative form as its header comment.
pub fn synth_profiles(exp: &Experiment, seed: u64, days: usize, out: &Path) -> Result<PathBuf, HarnessError> {
    if days == 0 {
        return Err(HarnessError::Config("days must be at least 1".into()));
    }
    create_dir(out)?;
    let path = out.join("profiles.csv");
    write_csv(&path, &synthesize(&exp.synth_spec(), seed, days), Some(SYNTH_HEADER))?;
    Ok(path)
}

/// One `method, reward, violation_rate, emission` row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub method: String,
    /// Mean episode reward, $.
    pub reward: f64,
    /// Mean aggregate violation rate, %.
    pub violation_rate: f64,
    /// Mean total emission, tCO₂.
    pub emission: f64,
}

pub const ROW_HEADER: &str = "method,reward,violation_rate,emission";

impl EvalRow {
    pub fn csv_row(&self) -> String {
        format!("{},{:.6},{:.6},{:.6}", self.method, self.reward, self.violation_rate, self.emission)
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub row: EvalRow,
    pub episodes: Vec<EpisodeMetrics>,
    pub traces: Vec<StepRecord>,
}

impl Evaluation {
    pub fn within_quota(&self) -> usize {
        self.episodes.iter().filter(|m| m.within_quota()).count()
    }
}

/// Table row from step traces alone.
pub fn row_from_traces(method: &str, traces: &[StepRecord]) -> (EvalRow, Vec<EpisodeMetrics>) {
    let mut episodes = Vec::new();
    let mut start = 0;
    for k in 1..=traces.len() {
        if k == traces.len() || traces[k].episode != traces[start].episode {
            episodes.push(episode_metrics(&traces[start..k]));
            start = k;
        }
    }
    let n = episodes.len().max(1) as f64;
    let row = EvalRow {
        method: method.to_string(),
        reward: episodes.iter().map(|m| m.reward).sum::<f64>() / n,
        violation_rate: episodes.iter().map(|m| m.violation_rate).sum::<f64>() / n,
        emission: episodes.iter().map(|m| m.emission).sum::<f64>() / n,
    };
    (row, episodes)
}

/// Greedy rollout (mean action, most likely flag) over the held-out days.
pub fn evaluate_controllers(
    exp: &Experiment,
    controllers: &[Controller<f64>],
    seed: u64,
    method: &str,
) -> Result<Evaluation, HarnessError> {
    let days = exp.eval_schedule(seed)?;
    let refs: Vec<&DayProfile> = days.iter().collect();
    let buf = collect_rollouts(&exp.env, &refs, controllers, ActionMode::Greedy, seed)?;
    let (row, episodes) = row_from_traces(method, &buf.records);
    Ok(Evaluation { row, episodes, traces: buf.records })
}

/// No-flexibility reference: adjustable loads at maximum, each transferable
/// block started at the first step.
pub fn evaluate_no_flexibility(exp: &Experiment, seed: u64) -> Result<Evaluation, HarnessError> {
    let days = exp.eval_schedule(seed)?;
    let mut traces = Vec::new();
    for (k, d) in days.iter().enumerate() {
        let (records, _) = run_episode(&exp.env, d, k, |_, mask| Ok(no_flexibility_actions(mask)))?;
        traces.extend(records);
    }
    let (row, episodes) = row_from_traces("no_flexibility", &traces);
    Ok(Evaluation { row, episodes, traces })
}

/// `eval.csv` (one row), `episodes.csv`, `trace.jsonl` and `plan.csv`, the
/// hourly operation plan of the first episode.
pub fn write_evaluation(dir: &Path, ev: &Evaluation) -> Result<(), HarnessError> {
    create_dir(dir)?;
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |e| HarnessError::io(&p, e)
    };
    let p = dir.join("eval.csv");
    std::fs::write(&p, format!("{ROW_HEADER}\n{}\n", ev.row.csv_row())).map_err(io(&p))?;
    let p = dir.join("episodes.csv");
    let mut s = String::from("episode,reward,emission,quota,violation_rate,within_quota,feasible\n");
    for (k, m) in ev.episodes.iter().enumerate() {
        s += &format!(
            "{k},{:.6},{:.6},{:.6},{:.6},{},{}\n",
            m.reward,
            m.emission,
            m.quota,
            m.violation_rate,
            m.within_quota(),
            m.feasible
        );
    }
    std::fs::write(&p, s).map_err(io(&p))?;
    write_trace(dir.join("trace.jsonl"), &ev.traces)?;
    let p = dir.join("plan.csv");
    let mut s = String::from("t,agent,alpha,on,load_mw,dlmp,intensity,emission\n");
    let first = ev.traces.first().map(|r| r.episode);
    for r in ev.traces.iter().filter(|r| Some(r.episode) == first) {
        for i in 0..r.alpha.len() {
            s += &format!(
                "{},{i},{:.6},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.t, r.alpha[i], r.on[i] as u8, r.agent_load[i], r.dlmp[i], r.intensity[i], r.emission[i]
            );
        }
    }
    std::fs::write(&p, s).map_err(io(&p))?;
    Ok(())
}

/// Policies and critics of a learner, with the agent groups in the metadata.
pub fn learner_checkpoint(learner: &Learner<f64>, seed: u64) -> Checkpoint {
    let mut entries = Vec::new();
    for (k, c) in learner.controllers.iter().enumerate() {
        entries.push((format!("policy.{k}"), c.policy.params.clone()));
        entries.push((format!("reward_critic.{k}"), learner.reward_critics[k].params.clone()));
        entries.push((format!("cost_critic.{k}"), learner.cost_critics[k].params.clone()));
    }
    let groups: Vec<&[usize]> = learner.controllers.iter().map(|c| c.agents.as_slice()).collect();
    let meta = serde_json::json!({ "algorithm": learner.algorithm.name(), "seed": seed, "groups": groups });
    Checkpoint { entries, meta }
}

pub fn controllers_from_checkpoint(exp: &Experiment, ckpt: &Checkpoint) -> Result<Vec<Controller<f64>>, HarnessError> {
    let bad = |m: String| HarnessError::Neural(NeuralError::Checkpoint(m));
    let groups: Vec<Vec<usize>> = serde_json::from_value(ckpt.meta["groups"].clone())
        .map_err(|e| bad(format!("checkpoint groups: {e}")))?;
    let n = exp.env.n_agents();
    let mut covered: Vec<usize> = groups.concat();
    covered.sort_unstable();
    if covered != (0..n).collect::<Vec<_>>() {
        return Err(bad(format!("checkpoint groups {groups:?} do not cover {n} agents")));
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(k, agents)| {
            let params = ckpt.get(&format!("policy.{k}")).ok_or_else(|| bad(format!("missing policy.{k}")))?;
            let policy = HybridPolicy::from_params(params.clone(), agents.len(), agents.len())?;
            if policy.obs_dim() != exp.env.obs_dim() {
                return Err(bad(format!("policy.{k} expects {} inputs, env has {}", policy.obs_dim(), exp.env.obs_dim())));
            }
            Ok(Controller { policy, agents })
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub learner: Learner<f64>,
    pub metrics: Vec<IterationMetrics>,
}

/// Untrained learner with the same initialization `train` starts from.
pub fn initial_learner(exp: &Experiment, algorithm: Algorithm, seed: u64) -> Learner<f64> {
    Learner::new(&exp.env, &exp.cfg.trainer, algorithm, seed)
}

pub fn train_run(exp: &Experiment, algorithm: Algorithm, seed: u64, episodes: usize) -> Result<TrainOutcome, HarnessError> {
    let days = exp.train_days(seed)?;
    let (learner, metrics) = train::<f64>(&exp.env, &days, &exp.cfg.trainer, algorithm, &exp.graph, episodes, seed, |_| {})
        .map_err(|e| HarnessError::from(e).context(format!("{} seed {seed}", algorithm.name())))?;
    Ok(TrainOutcome { algorithm, seed, learner, metrics })
}

/// `metrics.csv` and `checkpoint.gfx`.
pub fn write_training(dir: &Path, run: &TrainOutcome) -> Result<(), HarnessError> {
    create_dir(dir)?;
    let p = dir.join("metrics.csv");
    write_metrics_csv(&p, &run.metrics).map_err(|e| HarnessError::io(&p, e))?;
    save_checkpoint(dir.join("checkpoint.gfx"), &learner_checkpoint(&run.learner, run.seed))?;
    Ok(())
}

pub fn evaluate_checkpoint(exp: &Experiment, path: &Path, seed: u64) -> Result<Evaluation, HarnessError> {
    let ckpt = load_checkpoint(path).map_err(|e| HarnessError::from(e).context(path.display().to_string()))?;
    let controllers = controllers_from_checkpoint(exp, &ckpt)?;
    let method = ckpt.meta["algorithm"].as_str().unwrap_or("checkpoint").to_string();
    evaluate_controllers(exp, &controllers, seed, &method)
}

/// Worker count: `GRIDFLEX_THREADS` if set, else the available cores.
pub fn worker_threads() -> usize {
    std::env::var("GRIDFLEX_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `jobs` on up to `threads` workers; results keep job order.
pub fn run_parallel<J: Sync, R: Send>(
    jobs: &[J],
    threads: usize,
    f: impl Fn(&J) -> R + Sync,
) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::Relaxed);
                if k >= jobs.len() {
                    break;
                }
                let r = f(&jobs[k]);
                out.lock().unwrap()[k] = Some(r);
            });
        }
    });
    out.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect()
}

#[derive(Debug, Clone)]
pub struct ComparisonRun {
    pub train: TrainOutcome,
    pub untrained: Evaluation,
    pub evaluation: Evaluation,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub seed: u64,
    /// One per algorithm, in [`Algorithm::ALL`] order.
    pub runs: Vec<ComparisonRun>,
    pub no_flexibility: Evaluation,
}

impl Comparison {
    pub fn rows(&self) -> Vec<EvalRow> {
        self.runs.iter().map(|r| r.evaluation.row.clone()).collect()
    }

    pub fn run(&self, algorithm: Algorithm) -> Option<&ComparisonRun> {
        self.runs.iter().find(|r| r.train.algorithm == algorithm)
    }
}

/// All four algorithms on the same seed and days, run concurrently.
pub fn compare(exp: &Experiment, seed: u64, episodes: usize, threads: usize) -> Result<Comparison, HarnessError> {
    let results = run_parallel(&Algorithm::ALL, threads, |&alg| -> Result<ComparisonRun, HarnessError> {
        let untrained = evaluate_controllers(exp, &initial_learner(exp, alg, seed).controllers, seed, alg.name())?;
        let train = train_run(exp, alg, seed, episodes)?;
        let evaluation = evaluate_controllers(exp, &train.learner.controllers, seed, alg.name())?;
        Ok(ComparisonRun { train, untrained, evaluation })
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let no_flexibility = evaluate_no_flexibility(exp, seed)?;
    Ok(Comparison { seed, runs, no_flexibility })
}

pub const CURVE_HEADER: &str = "algorithm,iteration,episodes,reward,emission,violation_rate";

/// `compare.csv`, `ablation.csv`, `curves.csv` and one subdirectory per
/// algorithm holding its training and evaluation outputs.
pub fn write_comparison(dir: &Path, cmp: &Comparison) -> Result<(), HarnessError> {
    create_dir(dir)?;
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| HarnessError::io(&p, e))
    };
    let table: Vec<String> = cmp.rows().iter().map(EvalRow::csv_row).collect();
    write("compare.csv", format!("{ROW_HEADER}\n{}\n", table.join("\n")))?;
    write("ablation.csv", format!("{ROW_HEADER}\n{}\n", cmp.no_flexibility.row.csv_row()))?;
    let mut curves = format!("{CURVE_HEADER}\n");
    for r in &cmp.runs {
        for m in &r.train.metrics {
            curves += &format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                r.train.algorithm.name(),
                m.iteration,
                m.episodes,
                m.reward,
                m.emission,
                m.violation_rate
            );
        }
    }
    write("curves.csv", curves)?;
    for r in &cmp.runs {
        let sub = dir.join(r.train.algorithm.name());
        write_training(&sub, &r.train)?;
        write_evaluation(&sub.join("eval"), &r.evaluation)?;
        write_evaluation(&sub.join("untrained"), &r.untrained)?;
    }
    write_evaluation(&dir.join("no_flexibility"), &cmp.no_flexibility)?;
    Ok(())
}

/// One hour of the reference operating point: every agent at its
/// uncontrollable plus full adjustable load, transferable blocks off.
#[derive(Debug, Clone)]
pub struct ReferenceHour {
    pub t: usize,
    pub load_p: Vec<f64>,
    pub solution: DispatchSolution,
    pub gen_intensity: Vec<f64>,
}

pub fn reference_dispatch(exp: &Experiment, day: &DayProfile) -> Result<Vec<ReferenceHour>, HarnessError> {
    let env = &exp.env;
    let grid_cap = env.net.generators_of_kind(GeneratorKind::Grid).map(|(_, g)| g.p_max * env.net.s_base).sum();
    (0..env.horizon())
        .map(|t| {
            let agent_load: Vec<f64> =
                env.agents.iter().enumerate().map(|(i, a)| day.uc_load[i][t] + a.p_adj_max[t]).collect();
            let (p, q) = env.nodal_loads(day, t, &agent_load);
            let input = DispatchInput {
                net: &env.net,
                nodal_load_p: p.clone(),
                nodal_load_q: q,
                res_cap: day.res_cap.iter().map(|s| s[t]).collect(),
                wholesale_price: day.price[t],
                grid_cap,
            };
            let solution = solve_dispatch(&input)
                .map_err(|e| HarnessError::Config(format!("dispatch at hour {t}: {e}")))?;
            Ok(ReferenceHour { t, load_p: p, solution, gen_intensity: gen_intensities(&env.net, day.psi_grid[t]) })
        })
        .collect()
}

/// `dispatch.csv`: per hour and bus, load, DLMP and voltage.
pub fn write_dispatch(dir: &Path, hours: &[ReferenceHour]) -> Result<PathBuf, HarnessError> {
    create_dir(dir)?;
    let p = dir.join("dispatch.csv");
    let mut s = String::from("t,bus,load_mw,dlmp,v_pu,status,objective\n");
    for h in hours {
        let sol = &h.solution;
        for (b, load) in h.load_p.iter().enumerate() {
            let status = if sol.is_optimal() { "optimal" } else { "infeasible" };
            s += &format!("{},{b},{load:.6},{:.6},{:.6},{status},{:.6}\n", h.t, sol.dlmp[b], sol.v_sq[b].sqrt(), sol.objective);
        }
    }
    std::fs::write(&p, s).map_err(|e| HarnessError::io(&p, e))?;
    Ok(p)
}

/// `carbon.csv`: per hour and bus, nodal intensity and attributed emission.
pub fn write_carbon(exp: &Experiment, dir: &Path, hours: &[ReferenceHour]) -> Result<PathBuf, HarnessError> {
    create_dir(dir)?;
    let p = dir.join("carbon.csv");
    let mut s = String::from("t,bus,intensity,load_emission\n");
    for h in hours.iter().filter(|h| h.solution.is_optimal()) {
        let psi = nodal_intensity(&exp.env.net, &h.solution, &h.gen_intensity)
            .map_err(|e| HarnessError::Config(format!("carbon flow at hour {}: {e}", h.t)))?;
        let br = emission_breakdown(&exp.env.net, &h.solution, &h.gen_intensity, &psi, exp.env.cfg.dt_h);
        for (b, x) in psi.iter().enumerate() {
            s += &format!("{},{b},{x:.9},{:.9}\n", h.t, br.load_emission[b]);
        }
    }
    std::fs::write(&p, s).map_err(|e| HarnessError::io(&p, e))?;
    Ok(p)
}

/// Every model check on a configuration; continues past failures.
pub fn validate(cfg: &ExperimentConfig) -> ValidationReport {
    let mut rep = ValidationReport::default();
    let net = match cfg.load_network() {
        Ok(n) => {
            rep.push("network", Ok(format!("{}: {} buses, {} lines, radial", n.name, n.n_buses(), n.n_lines())));
            n
        }
        Err(e) => {
            rep.push("network", Err(e.to_string()));
            return rep;
        }
    };
    let specs = cfg.agent_specs();
    for (i, a) in specs.iter().enumerate() {
        let r = a.validate(&net, cfg.env.horizon, i).map(|_| format!("bus {}, quota {:.4} t", a.bus, a.quota));
        rep.push(format!("agent {i}"), r.map_err(|e| e.to_string()));
    }
    rep.push("experiment", check_basic(cfg).map(|_| format!("seeds {:?}, {} episodes", cfg.seeds, cfg.episodes)).map_err(|e| e.to_string()));
    rep.push("trainer", cfg.trainer.validate().map(|_| "hyperparameters in range".to_string()).map_err(|e| e.to_string()));
    rep.push(
        "communication graph",
        cfg.communication_graph().map(|g| format!("{} edges, doubly stochastic, connected", g.edges.len())).map_err(|e| e.to_string()),
    );
    if !rep.all_passed() {
        return rep;
    }
    let exp = match Experiment::new(cfg.clone()) {
        Ok(e) => e,
        Err(e) => {
            rep.push("environment", Err(e.to_string()));
            return rep;
        }
    };
    let seed = cfg.seeds[0];
    let days = exp.train_days(seed).and_then(|t| Ok((t, exp.eval_days(seed)?)));
    let day = match days {
        Ok((t, e)) if !t.is_empty() && !e.is_empty() => {
            rep.push("profiles", Ok(format!("{} training and {} held-out days", t.len(), e.len())));
            e.into_iter().next().unwrap()
        }
        Ok(_) => {
            rep.push("profiles", Err("no training or held-out days".into()));
            return rep;
        }
        Err(e) => {
            rep.push("profiles", Err(e.to_string()));
            return rep;
        }
    };
    let hours = match reference_dispatch(&exp, &day) {
        Ok(h) => h,
        Err(e) => {
            rep.push("dispatch", Err(e.to_string()));
            return rep;
        }
    };
    let infeasible: Vec<usize> = hours.iter().filter(|h| !h.solution.is_optimal()).map(|h| h.t).collect();
    rep.push(
        "dispatch",
        if infeasible.is_empty() {
            Ok(format!("{} reference hours optimal", hours.len()))
        } else {
            Err(format!("infeasible at hours {infeasible:?}"))
        },
    );
    let mut worst_gap: f64 = 0.0;
    let mut inexact = Vec::new();
    let (mut cef_diff, mut imbalance, mut hull): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for h in hours.iter().filter(|h| h.solution.is_optimal()) {
        let r = check_soc_exactness(&exp.env.net, &h.solution, cfg.env.soc_tol);
        worst_gap = worst_gap.max(r.max_gap);
        inexact.extend(r.inexact.iter().map(|l| (h.t, *l)));
        let solved = CarbonFlowState::<f64>::from_dispatch(&exp.env.net, &h.solution, &h.gen_intensity)
            .and_then(|mut st| st.solve().map(<[f64]>::to_vec).map(|psi| (psi, st.dead_buses())));
        match solved {
            Ok((psi, dead)) => {
                let oracle = iterative_intensity_oracle(&exp.env.net, &h.solution, &h.gen_intensity);
                for (a, b) in psi.iter().zip(&oracle) {
                    cef_diff = cef_diff.max((a - b).abs());
                }
                let br = emission_breakdown(&exp.env.net, &h.solution, &h.gen_intensity, &psi, cfg.env.dt_h);
                imbalance = imbalance.max(br.imbalance().abs());
                // hull of the units actually producing; dead buses carry ψ = 0 by convention
                let producing = h.gen_intensity.iter().zip(&h.solution.p_gen).filter(|(_, &p)| p > DEAD_INFLUX_MW);
                let (lo, hi) = producing.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&x, _)| (lo.min(x), hi.max(x)));
                for (_, &x) in psi.iter().enumerate().filter(|(m, _)| !dead.contains(m)) {
                    hull = hull.max(lo - x).max(x - hi);
                }
            }
            Err(e) => {
                rep.push("carbon flow", Err(format!("hour {}: {e}", h.t)));
                return rep;
            }
        }
    }
    rep.push(
        "relaxation exactness",
        if inexact.is_empty() {
            Ok(format!("max gap {worst_gap:.2e}"))
        } else {
            Err(format!("inexact (hour, line): {inexact:?}, max gap {worst_gap:.2e}"))
        },
    );
    let tol_check = |v: f64, tol: f64, what: &str| {
        if v <= tol {
            Ok(format!("{what} {v:.2e}"))
        } else {
            Err(format!("{what} {v:.2e} above {tol:.0e}"))
        }
    };
    rep.push("carbon oracle agreement", tol_check(cef_diff, 1e-9, "max deviation"));
    rep.push("carbon conservation", tol_check(imbalance, 1e-8, "max imbalance"));
    rep.push("intensity bounds", tol_check(hull.max(0.0), 1e-8, "max excursion"));
    rep
}

/// Table rows as CSV on stdout.
pub fn print_rows(rows: &[EvalRow]) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{ROW_HEADER}");
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
}

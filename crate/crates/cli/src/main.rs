use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use gridflex::harness::{self, Experiment, ExperimentConfig};
use gridflex::trainer::Algorithm;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "gridflex", version, about = "Carbon-constrained flexible-load management on distribution feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment TOML.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check the configuration and every model invariant on it.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write synthetic day profiles.
    SynthProfiles {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 30)]
        days: usize,
    },
    /// Reference-day dispatch and DLMPs.
    Dispatch {
        #[command(flatten)]
        common: Common,
    },
    /// Reference-day nodal carbon intensities.
    Carbon {
        #[command(flatten)]
        common: Common,
    },
    /// Train one algorithm; writes metrics, checkpoint and evaluation.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
    },
    /// Greedy evaluation of a checkpoint, or of the untrained policies.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        algorithm: Option<Algorithm>,
    },
    /// All four algorithms plus the no-flexibility reference.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
}

fn load(common: &Common) -> Result<(Experiment, PathBuf, Vec<u64>)> {
    let exp = Experiment::load(&common.config).with_context(|| format!("loading {}", common.config.display()))?;
    let out = common.out.clone().unwrap_or_else(|| exp.cfg.resolve(&exp.cfg.out_dir));
    let seeds = exp.seeds(common.seed);
    Ok((exp, out, seeds))
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config).with_context(|| format!("loading {}", config.display()))?;
            let report = harness::validate(&cfg);
            print!("{report}");
            if let Some(f) = report.first_failure() {
                eprintln!("validation failed: {}: {}", f.name, f.detail);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::SynthProfiles { common, days } => {
            let (exp, out, seeds) = load(&common)?;
            for seed in seeds {
                let dir = out.join(format!("profiles_seed{seed}"));
                let path = harness::synth_profiles(&exp, seed, days, &dir)?;
                println!("{}", path.display());
            }
        }
        Command::Dispatch { common } => {
            let (exp, out, seeds) = load(&common)?;
            for seed in seeds {
                let day = exp.eval_days(seed)?.into_iter().next().context("no held-out days")?;
                let hours = harness::reference_dispatch(&exp, &day)?;
                let path = harness::write_dispatch(&out.join(format!("seed{seed}")), &hours)?;
                let cost: f64 = hours.iter().map(|h| h.solution.objective).sum();
                println!("{} (daily operating cost {cost:.2} $)", path.display());
            }
        }
        Command::Carbon { common } => {
            let (exp, out, seeds) = load(&common)?;
            for seed in seeds {
                let day = exp.eval_days(seed)?.into_iter().next().context("no held-out days")?;
                let hours = harness::reference_dispatch(&exp, &day)?;
                let path = harness::write_carbon(&exp, &out.join(format!("seed{seed}")), &hours)?;
                println!("{}", path.display());
            }
        }
        Command::Train { common, episodes, algorithm } => {
            let (exp, out, seeds) = load(&common)?;
            let alg = algorithm.unwrap_or(exp.cfg.algorithm);
            let episodes = episodes.unwrap_or(exp.cfg.episodes);
            let mut rows = Vec::new();
            for seed in seeds {
                let run = harness::train_run(&exp, alg, seed, episodes)?;
                let dir = out.join(alg.name()).join(format!("seed{seed}"));
                harness::write_training(&dir, &run)?;
                let ev = harness::evaluate_controllers(&exp, &run.learner.controllers, seed, alg.name())?;
                harness::write_evaluation(&dir.join("eval"), &ev)?;
                rows.push(ev.row);
            }
            harness::print_rows(&rows);
        }
        Command::Evaluate { common, checkpoint, algorithm } => {
            let (exp, out, seeds) = load(&common)?;
            let mut rows = Vec::new();
            for seed in seeds {
                let ev = match &checkpoint {
                    Some(p) => harness::evaluate_checkpoint(&exp, p, seed)?,
                    None => {
                        let alg = algorithm.unwrap_or(exp.cfg.algorithm);
                        let l = harness::initial_learner(&exp, alg, seed);
                        harness::evaluate_controllers(&exp, &l.controllers, seed, &format!("{}_untrained", alg.name()))?
                    }
                };
                harness::write_evaluation(&out.join(format!("evaluate_seed{seed}")), &ev)?;
                rows.push(ev.row);
            }
            harness::print_rows(&rows);
        }
        Command::Compare { common, episodes } => {
            let (exp, out, seeds) = load(&common)?;
            let episodes = episodes.unwrap_or(exp.cfg.episodes);
            let threads = harness::worker_threads();
            for seed in seeds {
                let cmp = harness::compare(&exp, seed, episodes, threads)?;
                harness::write_comparison(&out.join(format!("compare_seed{seed}")), &cmp)?;
                let mut rows = cmp.rows();
                rows.push(cmp.no_flexibility.row.clone());
                harness::print_rows(&rows);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}


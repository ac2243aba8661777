mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "spgptd", version, about = "Sparse GP temporal-difference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON configuration document; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Recursive-vs-batch equivalence and lemma suites.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        lemma_cases: Option<usize>,
        #[arg(long)]
        equivalence_cases: Option<usize>,
        #[arg(long)]
        max_transitions: Option<usize>,
        #[arg(long)]
        max_pseudo: Option<usize>,
        /// Overrides every suite tolerance.
        #[arg(long)]
        tolerance: Option<f64>,
    },
    /// Per-step timing of recursive updates against batch rebuilds.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        pseudo: Option<usize>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        spot_check_every: Option<usize>,
    },
    /// Exact and sparse posterior curves on the 1-D toy.
    Posterior {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        transitions: Option<usize>,
        #[arg(long)]
        pseudo: Option<usize>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        grid: Option<usize>,
        #[arg(long)]
        noise_var: Option<f64>,
        #[arg(long)]
        gamma: Option<f64>,
        /// `subsample` or `uniform-grid`.
        #[arg(long)]
        init: Option<String>,
    },
    /// Policy evaluation on a simulated MDP.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long)]
        noise_var: Option<f64>,
        #[arg(long)]
        n_states: Option<usize>,
        /// Switches the policy to epsilon-greedy with this epsilon.
        #[arg(long)]
        epsilon: Option<f64>,
        /// `recursive` or `batch`.
        #[arg(long)]
        estimator: Option<String>,
    },
}

/// How a command ended badly; each maps to an exit code.
#[derive(Debug)]
pub enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
    Suite(String),
}

impl Failure {
    fn kind(&self) -> &'static str {
        match self {
            Failure::Config(_) => "config",
            Failure::Runtime(_) => "runtime",
            Failure::Suite(_) => "suite",
        }
    }

    fn code(&self) -> u8 {
        match self {
            Failure::Config(_) => 2,
            Failure::Runtime(_) | Failure::Suite(_) => 1,
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(e) | Failure::Runtime(e) => format!("{e:#}"),
            Failure::Suite(m) => m.clone(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<spgptd::Error> for Failure {
    fn from(e: spgptd::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn parse_name<T: DeserializeOwned>(what: &str, s: &str) -> Result<T, Failure> {
    serde_json::from_value(serde_json::Value::String(s.to_owned()))
        .map_err(|_| Failure::Config(anyhow::anyhow!("unknown {what} `{s}`")))
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref()).map_err(Failure::Config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn dispatch(cli: Cli) -> (&'static str, Result<(), Failure>) {
    match cli.command {
        Command::Validate {
            common,
            lemma_cases,
            equivalence_cases,
            max_transitions,
            max_pseudo,
            tolerance,
        } => {
            let run = || {
                let mut cfg = load(&common)?;
                let v = &mut cfg.validate;
                set(&mut v.lemma_cases, lemma_cases);
                set(&mut v.equivalence_cases, equivalence_cases);
                set(&mut v.max_transitions, max_transitions);
                set(&mut v.max_pseudo, max_pseudo);
                if let Some(tol) = tolerance {
                    v.lemma_tolerance = tol;
                    v.equivalence_tolerance = tol;
                    v.degeneracy_tolerance = tol;
                    v.dual_tolerance = tol;
                    v.nonnegativity_tolerance = tol;
                }
                config::check_validate(&cfg.validate).map_err(Failure::Config)?;
                commands::validate(&cfg)
            };
            ("validate", run())
        }
        Command::Bench {
            common,
            steps,
            pseudo,
            repeats,
            spot_check_every,
        } => {
            let run = || {
                let mut cfg = load(&common)?;
                let b = &mut cfg.bench;
                set(&mut b.steps, steps);
                set(&mut b.pseudo, pseudo);
                set(&mut b.repeats, repeats);
                set(&mut b.spot_check_every, spot_check_every);
                config::check_bench(&cfg.bench).map_err(Failure::Config)?;
                commands::bench(&cfg)
            };
            ("bench", run())
        }
        Command::Posterior {
            common,
            transitions,
            pseudo,
            budget,
            grid,
            noise_var,
            gamma,
            init,
        } => {
            let run = || {
                let mut cfg = load(&common)?;
                let p = &mut cfg.posterior;
                set(&mut p.transitions, transitions);
                set(&mut p.pseudo, pseudo);
                set(&mut p.budget, budget);
                set(&mut p.grid, grid);
                set(&mut p.noise_var, noise_var);
                set(&mut p.mdp.gamma, gamma);
                if let Some(name) = &init {
                    p.init = parse_name("pseudo-input initialization", name)?;
                }
                config::check_posterior(&cfg.posterior).map_err(Failure::Config)?;
                commands::posterior(&cfg)
            };
            ("posterior", run())
        }
        Command::Run {
            common,
            episodes,
            gamma,
            noise_var,
            n_states,
            epsilon,
            estimator,
        } => {
            let run = || {
                let mut cfg = load(&common)?;
                let r = &mut cfg.run;
                set(&mut r.episodes, episodes);
                set(&mut r.mdp.gamma, gamma);
                set(&mut r.noise_var, noise_var);
                set(&mut r.mdp.n_states, n_states);
                if let Some(epsilon) = epsilon {
                    r.policy = spgptd::simenv::Policy::EpsilonGreedy { epsilon };
                }
                if let Some(name) = &estimator {
                    r.estimator = parse_name("estimator", name)?;
                }
                config::check_run(&cfg.run).map_err(Failure::Config)?;
                commands::run(&cfg)
            };
            ("run", run())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, result) = dispatch(cli);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            let record = serde_json::json!({
                "error": {
                    "command": command,
                    "kind": failure.kind(),
                    "message": failure.message(),
                    "exit_code": failure.code(),
                }
            });
            eprintln!("{record}");
            ExitCode::from(failure.code())
        }
    }
}

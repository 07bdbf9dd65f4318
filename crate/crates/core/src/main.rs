use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hamnav::config::{ConfigError, RunConfig};
use hamnav::env::PedPolicy;
use hamnav::eval::{self, EnergyAudit, EvalError, RenderError};
use hamnav::policy::{Frozen, HamiltonianPolicy, OrcaRobot, PolicyError, RobotPolicy, SocialForceRobot, StraightLine};
use hamnav::tensor::{load_checkpoint, CheckpointError};
use hamnav::train::{self, OutputPaths, TrainError};

/// Crowd navigation with a port-Hamiltonian diffusion policy.
#[derive(Debug, Parser)]
#[command(name = "hamnav", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one seeded episode and write its trajectory file.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyChoice,
        /// Trajectory file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the learned policy; writes checkpoints and a metrics log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Training episodes.
        #[arg(long)]
        episodes: Option<usize>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a policy over seeded runs.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyChoice,
        /// Number of evaluation runs.
        #[arg(long)]
        episodes: Option<usize>,
        /// Per-episode table; the summary always goes to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Draw a trajectory file as SVG.
    Render {
        trajectory: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// SVG file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-step energy table of the learned policy.
    Audit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Audited episodes.
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Energy table; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Number of pedestrians.
    #[arg(long)]
    humans: Option<usize>,
    #[arg(long, value_parser = parse_ped_policy)]
    ped_policy: Option<PedPolicy>,
}

#[derive(Debug, Args)]
struct PolicyChoice {
    #[arg(long, value_enum, default_value_t = PolicyKind::Ph)]
    policy: PolicyKind,
    /// Learned-policy checkpoint; an untrained policy from the config otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyKind {
    Ph,
    Orca,
    Sf,
    Straight,
    Frozen,
}

fn parse_ped_policy(s: &str) -> Result<PedPolicy, String> {
    s.parse()
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

fn read(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text).map_err(|source| CliError::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    match path {
        Some(p) => Ok(RunConfig::from_toml(&read(p)?)?),
        None => Ok(RunConfig::default()),
    }
}

impl Common {
    fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(n) = self.humans {
            cfg.scenario.humans = n;
        }
        if let Some(p) = self.ped_policy {
            cfg.scenario.ped_policy = p;
        }
        if let Some(s) = self.seed {
            cfg.scenario.seed = s;
            cfg.train.seed = s;
            cfg.eval.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn learned_policy(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<HamiltonianPolicy, CliError> {
    match checkpoint {
        Some(p) => Ok(HamiltonianPolicy::from_checkpoint(&load_checkpoint(p)?)?),
        None => Ok(HamiltonianPolicy::new(cfg.policy.clone())?),
    }
}

fn build_policy(cfg: &RunConfig, choice: &PolicyChoice) -> Result<Box<dyn RobotPolicy>, CliError> {
    if choice.checkpoint.is_some() && !matches!(choice.policy, PolicyKind::Ph) {
        return Err(CliError::Usage("--checkpoint only applies to --policy ph".into()));
    }
    let dt = cfg.scenario.time_step;
    Ok(match choice.policy {
        PolicyKind::Ph => Box::new(learned_policy(cfg, choice.checkpoint.as_deref())?),
        PolicyKind::Orca => Box::new(OrcaRobot {
            horizon: cfg.scenario.orca_horizon,
            time_step: dt,
        }),
        PolicyKind::Sf => Box::new(SocialForceRobot {
            config: cfg.scenario.social_force,
            time_step: dt,
        }),
        PolicyKind::Straight => Box::new(StraightLine { time_step: dt }),
        PolicyKind::Frozen => Box::new(Frozen),
    })
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, policy, out } => {
            let cfg = common.resolve()?;
            let p = build_policy(&cfg, &policy)?;
            let (log, record) = eval::simulate(p.as_ref(), &cfg.scenario, cfg.scenario.seed)?;
            write_or_print(out.as_deref(), &log.to_text())?;
            eprintln!(
                "{}: {} after {} steps ({:.2} s)",
                p.name(),
                eval::outcome_label(record.termination),
                record.steps,
                record.time
            );
        }
        Command::Train { common, episodes, out } => {
            let mut cfg = common.resolve()?;
            if let Some(e) = episodes {
                cfg.train.episodes = e;
            }
            let policy = HamiltonianPolicy::new(cfg.policy.clone())?;
            let paths = OutputPaths { dir: out };
            let outcome = train::train(&cfg.train, &cfg.scenario, policy, Some(&paths))?;
            if let Some(m) = outcome.metrics.last() {
                println!(
                    "trained {} episodes: last update success rate {:.1}%, mean return {:.3}",
                    m.episodes, m.success_rate, m.mean_return
                );
            }
            println!("checkpoint: {}", paths.policy().display());
            println!("metrics: {}", paths.metrics().display());
        }
        Command::Eval {
            common,
            policy,
            episodes,
            out,
        } => {
            let mut cfg = common.resolve()?;
            if let Some(n) = episodes {
                cfg.eval.n_runs = n;
            }
            let p = build_policy(&cfg, &policy)?;
            let report = eval::evaluate(p.as_ref(), &cfg.scenario, &cfg.eval)?;
            if let Some(path) = out.as_deref() {
                write_or_print(Some(path), &report.to_table())?;
            }
            print!("{}", report.summary());
        }
        Command::Render { trajectory, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let svg = eval::render_svg(&read(&trajectory)?, cfg.scenario.arena_half_width)?;
            write_or_print(out.as_deref(), &svg)?;
        }
        Command::Audit {
            common,
            checkpoint,
            episodes,
            out,
        } => {
            let cfg = common.resolve()?;
            let policy = learned_policy(&cfg, checkpoint.as_deref())?;
            let audit = EnergyAudit::run(&policy, &cfg.scenario, episodes, cfg.eval.seed)?;
            write_or_print(out.as_deref(), &audit.to_table())?;
            eprintln!(
                "audited {} episodes, {} passivity violations (tolerance {:e})",
                audit.episodes.len(),
                audit.violations(),
                eval::PASSIVITY_TOLERANCE
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

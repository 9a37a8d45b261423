use std::path::PathBuf;
use std::process::ExitCode;

use bdgxrl::bridge::Direction;
use bdgxrl_cli::pipeline::{self, paths};
use bdgxrl_cli::{CliError, CliResult, ExperimentConfig, Run};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bdgxrl", version, about = "Bridge-aligned off-dynamics RL pipeline")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// JSON experiment config; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    no_il: bool,
    #[arg(long, global = true)]
    no_rm: bool,
    #[arg(long, global = true)]
    no_alignment: bool,
    #[arg(long, global = true)]
    budget_steps: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a config file with every field at its default.
    Init {
        /// Overwrite an existing file.
        #[arg(long)]
        force: bool,
    },
    /// Collect the source dataset, train the target expert, and roll out demos.
    Collect,
    /// Fit the forward and backward bridge drifts.
    TrainDsb,
    /// Fit the transition-aware reward model.
    TrainReward,
    /// Online policy learning for the configured ablation flags.
    TrainPolicy {
        /// Online seed; defaults to the first entry of `seeds`.
        #[arg(long)]
        online_seed: Option<u64>,
    },
    /// Evaluate a policy checkpoint in the target and source environments.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        /// Report directory; defaults to `<out>/eval/<checkpoint stem>`.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Translate a dataset through a bridge checkpoint.
    Translate {
        /// Defaults to the run's bridge checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_enum, default_value_t = Dir::SourceToTarget)]
        direction: Dir,
        /// Dataset whose next-state marginals the output is compared to.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Every ablation variant over every configured seed.
    Ablate,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dir {
    #[value(name = "s2t")]
    SourceToTarget,
    #[value(name = "t2s")]
    TargetToSource,
}

fn resolve_config(g: &Global, for_init: bool) -> CliResult<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) if !for_init => {
            if !p.exists() {
                return Err(CliError::Config(format!("config file {} not found", p.display())));
            }
            ExperimentConfig::load(p)?
        }
        _ => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if let Some(b) = g.budget_steps {
        cfg.budget_steps = b;
    }
    cfg.ablation.no_il |= g.no_il;
    cfg.ablation.no_rm |= g.no_rm;
    cfg.ablation.no_alignment |= g.no_alignment;
    cfg.validate()?;
    Ok(cfg)
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("BDGXRL_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("BDGXRL_THREADS must be a positive integer, got `{v}`")))?;
    if n == 0 {
        return Err(CliError::Config("BDGXRL_THREADS must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(e.to_string()))
}

fn print_json<T: serde::Serialize>(value: &T) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match cli.command {
        Command::Init { force } => {
            let path = cli.global.config.clone().unwrap_or_else(|| PathBuf::from("bdgxrl.json"));
            if path.exists() && !force {
                return Err(CliError::Config(format!("{} exists; pass --force to overwrite", path.display())));
            }
            let cfg = resolve_config(&cli.global, true)?;
            cfg.save(&path)?;
            println!("wrote {}", path.display());
        }
        Command::Collect => Run::open(resolve_config(&cli.global, false)?)?.collect()?,
        Command::TrainDsb => Run::open(resolve_config(&cli.global, false)?)?.train_dsb()?,
        Command::TrainReward => Run::open(resolve_config(&cli.global, false)?)?.train_reward()?,
        Command::TrainPolicy { online_seed } => {
            let cfg = resolve_config(&cli.global, false)?;
            let seed = online_seed.unwrap_or(cfg.seeds[0]);
            let flags = cfg.ablation;
            let summary = Run::open(cfg)?.train_policy(flags, seed)?;
            print_json(&summary)?;
        }
        Command::Eval {
            checkpoint,
            episodes,
            report,
        } => {
            let cfg = resolve_config(&cli.global, false)?;
            let n = episodes.unwrap_or(cfg.eval_episodes);
            if n == 0 {
                return Err(CliError::Config("--episodes must be >= 1".into()));
            }
            let stem = checkpoint.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let out = report.unwrap_or_else(|| cfg.out_dir.join("eval").join(stem));
            print_json(&pipeline::evaluate(&cfg, &checkpoint, n, &out)?)?;
        }
        Command::Translate {
            checkpoint,
            dataset,
            output,
            direction,
            reference,
        } => {
            let cfg = resolve_config(&cli.global, false)?;
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join(paths::BRIDGE));
            let dir = match direction {
                Dir::SourceToTarget => Direction::Forward,
                Dir::TargetToSource => Direction::Backward,
            };
            let report = pipeline::translate(&ckpt, &dataset, dir, reference.as_deref(), &output, cfg.seed)?;
            print_json(&report)?;
        }
        Command::Ablate => {
            let report = Run::open(resolve_config(&cli.global, false)?)?.ablate()?;
            print_json(&report.summary)?;
            if !report.baselines.is_empty() {
                print_json(&report.baselines)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use safeswarm::harness::{self, RunConfig};
use safeswarm::Error;

#[derive(Parser)]
#[command(name = "safeswarm", version, about = "Safe multi-drone landing: train, evaluate, compare")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config override, `section.key=value`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a policy and write checkpoints, stats and curves.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        iterations: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint with the deterministic policy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, value_enum, default_value = "on")]
        filter: Toggle,
    },
    /// Print a side-by-side table of two eval reports (A, then B).
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Re-run one evaluation episode and write its trajectory.
    Replay {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode: usize,
        #[arg(long, value_enum, default_value = "on")]
        filter: Toggle,
    },
}

fn load(common: &Common) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = RunConfig::load(&common.config, &common.overrides)?;
    cfg.resolve_seed(common.seed)?;
    let out = common.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Train {
            common,
            iterations,
            checkpoint,
        } => {
            let (mut cfg, out) = load(&common)?;
            if let Some(n) = iterations {
                cfg.train.iterations = n;
            }
            harness::run_train(&cfg, &out, checkpoint.as_deref(), |s| {
                println!(
                    "iteration {} mean_episode_reward {:.3} value_loss {:.4} success_rate {:.1}%",
                    s.iteration, s.mean_episode_reward, s.value_loss, s.success_rate
                );
            })?;
            println!("wrote {}", out.display());
        }
        Command::Eval {
            common,
            checkpoint,
            episodes,
            filter,
        } => {
            let (cfg, out) = load(&common)?;
            let episodes = episodes.unwrap_or(cfg.eval_episodes);
            let report = harness::run_eval(&cfg, &checkpoint, &out, episodes, matches!(filter, Toggle::On))?;
            println!("{}", harness::compare_table(&report, &report).lines().take(3).collect::<Vec<_>>().join("\n"));
            println!("wrote {}", out.display());
        }
        Command::Compare { a, b, out } => {
            print!("{}", harness::run_compare(&a, &b, out.as_deref())?);
        }
        Command::Replay {
            common,
            checkpoint,
            episode,
            filter,
        } => {
            let (cfg, out) = load(&common)?;
            let path = harness::run_replay(&cfg, &checkpoint, episode, matches!(filter, Toggle::On), &out)?;
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        "config" => 3,
        "io" => 4,
        "checkpoint" => 5,
        _ => 6,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::from(exit_code(&e))
        }
    }
}

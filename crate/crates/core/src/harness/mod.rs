//! Configuration, scene generation, evaluation and the operations behind the CLI.

pub mod config;
pub mod metrics;
pub mod output;
pub mod scenario;

use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::mappo::{train, TrainStats, Trainer};

pub use config::{RunConfig, Scenario};
pub use metrics::{compare_table, compute_metrics, evaluate, MetricsReport, TrajectoryRow};
pub use scenario::{build_world, env_factory, make_env, ScenarioConfig};

use output::{write_file, RunManifest};

pub fn checkpoint_name(iteration: usize) -> String {
    format!("checkpoint_iter_{iteration:06}.ckpt")
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, outputs: Vec<String>) -> Result<()> {
    let manifest = RunManifest {
        command: command.into(),
        label: cfg.label.clone(),
        seed: cfg.seed(),
        config_hash: cfg.hash()?,
        crate_version: env!("CARGO_PKG_VERSION").into(),
        outputs,
    };
    write_file(&out.join("run_manifest.toml"), &manifest.to_toml()?)
}

/// Trains from scratch, or continues from `resume`, writing checkpoints, stats
/// and curves to `out`.
pub fn run_train<P>(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    mut progress: P,
) -> Result<Vec<TrainStats>>
where
    P: FnMut(&TrainStats),
{
    let tc = cfg.train_config();
    let factory = env_factory(cfg);
    let mut trainer = match resume {
        Some(path) => Trainer::from_checkpoint(tc, &Checkpoint::load(path)?)?,
        None => Trainer::for_env(tc, &factory)?,
    };
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_file(&out.join("config.toml"), &cfg.to_toml()?)?;
    let mut outputs = vec!["config.toml".to_string()];
    let every = cfg.train.checkpoint_every;
    let stats = train(&mut trainer, &factory, |t, s| {
        progress(s);
        if every > 0 && t.iteration % every == 0 {
            let name = checkpoint_name(t.iteration);
            t.to_checkpoint().save(&out.join(&name))?;
            outputs.push(name);
        }
        Ok(())
    })?;
    trainer.to_checkpoint().save(&out.join("final.ckpt"))?;
    write_file(&out.join("stats.csv"), &output::stats_csv(&stats))?;
    write_file(&out.join("reward_curve.csv"), &output::reward_curve(&stats))?;
    write_file(&out.join("value_loss_curve.csv"), &output::value_loss_curve(&stats))?;
    outputs.extend(
        ["final.ckpt", "stats.csv", "reward_curve.csv", "value_loss_curve.csv"].map(String::from),
    );
    write_manifest(out, "train", cfg, outputs)?;
    Ok(stats)
}

fn load_policy(cfg: &RunConfig, checkpoint: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(cfg.train_config(), &Checkpoint::load(checkpoint)?)
}

/// Deterministic-policy evaluation; writes `report.json` and one trajectory CSV
/// per episode under `out/trajectories`.
pub fn run_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: &Path,
    episodes: usize,
    use_filter: bool,
) -> Result<MetricsReport> {
    let trainer = load_policy(cfg, checkpoint)?;
    let factory = env_factory(cfg);
    let (outcomes, logs) = evaluate(&trainer.policy, &factory, cfg.seed(), episodes, use_filter, true)?;
    let label = if use_filter {
        cfg.label.clone()
    } else {
        format!("{} (filter off)", cfg.label)
    };
    let report = compute_metrics(&label, use_filter, outcomes);
    let mut outputs = vec!["report.json".to_string()];
    write_file(&out.join("report.json"), &output::to_json(&report)?)?;
    for (i, rows) in logs.iter().enumerate() {
        let name = format!("trajectories/episode_{i:04}.csv");
        write_file(&out.join(&name), &output::trajectory_csv(rows))?;
        outputs.push(name);
    }
    write_manifest(out, "eval", cfg, outputs)?;
    Ok(report)
}

/// Re-runs a single evaluation episode and writes its trajectory to `out`.
pub fn run_replay(cfg: &RunConfig, checkpoint: &Path, episode: usize, use_filter: bool, out: &Path) -> Result<PathBuf> {
    let trainer = load_policy(cfg, checkpoint)?;
    let mut env = make_env(cfg, metrics::eval_episode_seed(cfg.seed(), episode))?;
    let mut rows = Vec::new();
    metrics::run_episode(
        &mut env,
        use_filter,
        |e| trainer.act_deterministic(e),
        Some(&mut rows),
    )?;
    let path = out.join(format!("replay_episode_{episode:04}.csv"));
    write_file(&path, &output::trajectory_csv(&rows))?;
    Ok(path)
}

pub fn run_compare(a: &Path, b: &Path, out: Option<&Path>) -> Result<String> {
    let table = compare_table(&output::read_report(a)?, &output::read_report(b)?);
    if let Some(out) = out {
        write_file(&out.join("comparison.md"), &table)?;
    }
    Ok(table)
}

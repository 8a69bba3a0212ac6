//! Evaluation episodes, aggregate metrics and the comparison table.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::env::{EnvState, EpisodeOutcome};
use crate::error::Result;
use crate::mappo::{deterministic_actions, derive_seed};
use crate::nn::GaussianPolicy;
use crate::world::{DroneStatus, Vec3};

/// Seed stream tag for evaluation episodes.
pub const EVAL_TAG: u64 = 7;

/// One row of the trajectory log: a drone that was flying when the step began.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    /// Time at the end of the step, s.
    pub t: f64,
    pub drone_id: usize,
    pub pos: Vec3,
    pub vel: Vec3,
    pub nominal: Vec3,
    pub filtered: Vec3,
    pub r_enc: f64,
    pub r_pen: f64,
    pub r_edge: f64,
    pub r_vel: f64,
    pub r_total: f64,
    pub status: DroneStatus,
}

/// Runs one episode with `act` choosing commands, optionally logging every step.
pub fn run_episode<A>(
    env: &mut EnvState,
    use_filter: bool,
    mut act: A,
    mut log: Option<&mut Vec<TrajectoryRow>>,
) -> Result<EpisodeOutcome>
where
    A: FnMut(&EnvState) -> Result<Vec<Vec3>>,
{
    while !env.is_done() {
        let flying: Vec<bool> = env.drones.iter().map(|d| d.is_flying()).collect();
        let actions = act(env)?;
        let step = env.step(&actions, use_filter)?;
        if let Some(rows) = log.as_deref_mut() {
            for (i, was_flying) in flying.iter().enumerate() {
                if !was_flying {
                    continue;
                }
                let d = &env.drones[i];
                let info = &step.info[i];
                let r = &step.rewards[i];
                rows.push(TrajectoryRow {
                    t: env.time,
                    drone_id: env.world.drones[i].id,
                    pos: d.pos,
                    vel: d.vel,
                    nominal: info.nominal.unwrap_or(Vec3::ZERO),
                    filtered: info.applied.unwrap_or(Vec3::ZERO),
                    r_enc: r.encourage,
                    r_pen: r.penalty,
                    r_edge: r.edge,
                    r_vel: r.velocity,
                    r_total: r.total,
                    status: d.status,
                });
            }
        }
    }
    Ok(env.outcome())
}

/// Seed of evaluation episode `index`.
pub fn eval_episode_seed(base: u64, index: usize) -> u64 {
    derive_seed(base, &[EVAL_TAG, index as u64])
}

/// Deterministic-policy evaluation over `episodes` seeded episodes.
/// Trajectories are returned per episode when `keep_logs` is set.
pub fn evaluate<F>(
    policy: &GaussianPolicy,
    factory: &F,
    base_seed: u64,
    episodes: usize,
    use_filter: bool,
    keep_logs: bool,
) -> Result<(Vec<EpisodeOutcome>, Vec<Vec<TrajectoryRow>>)>
where
    F: Fn(u64) -> Result<EnvState>,
{
    let mut outcomes = Vec::with_capacity(episodes);
    let mut logs = Vec::new();
    for ep in 0..episodes {
        let mut env = factory(eval_episode_seed(base_seed, ep))?;
        let mut rows = Vec::new();
        let outcome = run_episode(
            &mut env,
            use_filter,
            |e| deterministic_actions(policy, e),
            keep_logs.then_some(&mut rows),
        )?;
        outcomes.push(outcome);
        if keep_logs {
            logs.push(rows);
        }
    }
    Ok((outcomes, logs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub label: String,
    pub filter: bool,
    pub episodes: usize,
    /// Drone landings over drone trials, in percent.
    pub success_rate_pct: f64,
    /// Mean touchdown error over successful landings; `None` when there were none.
    pub mean_precision_cm: Option<f64>,
    pub mean_time_s: Option<f64>,
    pub min_obstacle_clearance_m: Option<f64>,
    pub min_interagent_distance_m: Option<f64>,
    pub collision_count: usize,
    pub fallback_count: usize,
    pub outcomes: Vec<EpisodeOutcome>,
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn min(xs: impl Iterator<Item = f64>) -> Option<f64> {
    xs.fold(None, |m, x| Some(m.map_or(x, |m: f64| m.min(x))))
}

pub fn compute_metrics(label: &str, filter: bool, outcomes: Vec<EpisodeOutcome>) -> MetricsReport {
    let drones = || outcomes.iter().flat_map(|o| o.drones.iter());
    let trials = drones().count();
    let successes: Vec<_> = drones().filter(|d| d.success).collect();
    let precision: Vec<f64> = successes.iter().filter_map(|d| d.precision_m).map(|p| p * 100.0).collect();
    let time: Vec<f64> = successes.iter().filter_map(|d| d.land_time_s).collect();
    MetricsReport {
        label: label.to_string(),
        filter,
        episodes: outcomes.len(),
        success_rate_pct: if trials == 0 {
            0.0
        } else {
            100.0 * successes.len() as f64 / trials as f64
        },
        mean_precision_cm: mean(&precision),
        mean_time_s: mean(&time),
        min_obstacle_clearance_m: min(drones().filter_map(|d| d.min_obstacle_clearance_m)),
        min_interagent_distance_m: min(drones().filter_map(|d| d.min_interagent_distance_m)),
        collision_count: outcomes.iter().map(EpisodeOutcome::collision_count).sum(),
        fallback_count: outcomes.iter().map(|o| o.fallback_count).sum(),
        outcomes,
    }
}

/// Marker printed for metrics that have no value.
pub const ABSENT: &str = "n/a";

fn cell(v: Option<f64>, digits: usize) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x:.digits$}"))
}

fn delta(a: Option<f64>, b: Option<f64>, digits: usize) -> String {
    match (a, b) {
        (Some(a), Some(b)) => format!("{:+.digits$}", b - a),
        _ => ABSENT.to_string(),
    }
}

/// Markdown table in the order Algorithm | Success rate (%) | Precision (cm) |
/// Time (s) | clearances | collisions, followed by a `B - A` delta row.
pub fn compare_table(a: &MetricsReport, b: &MetricsReport) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "| Algorithm | Success rate (%) | Precision (cm) | Time (s) | Min obstacle clearance (m) | Min inter-agent distance (m) | Collisions |"
    );
    let _ = writeln!(out, "|---|---|---|---|---|---|---|");
    for r in [a, b] {
        let _ = writeln!(
            out,
            "| {} | {:.2} | {} | {} | {} | {} | {} |",
            r.label,
            r.success_rate_pct,
            cell(r.mean_precision_cm, 2),
            cell(r.mean_time_s, 2),
            cell(r.min_obstacle_clearance_m, 3),
            cell(r.min_interagent_distance_m, 3),
            r.collision_count
        );
    }
    let _ = writeln!(
        out,
        "| delta ({} - {}) | {:+.2} | {} | {} | {} | {} | {:+} |",
        b.label,
        a.label,
        b.success_rate_pct - a.success_rate_pct,
        delta(a.mean_precision_cm, b.mean_precision_cm, 2),
        delta(a.mean_time_s, b.mean_time_s, 2),
        delta(a.min_obstacle_clearance_m, b.min_obstacle_clearance_m, 3),
        delta(a.min_interagent_distance_m, b.min_interagent_distance_m, 3),
        b.collision_count as i64 - a.collision_count as i64
    );
    out
}

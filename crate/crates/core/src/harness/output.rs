//! File writers. Every writer is a pure function of its input, so fixed seeds
//! give byte-identical files.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::harness::metrics::{MetricsReport, TrajectoryRow};
use crate::mappo::TrainStats;

pub const TRAJECTORY_HEADER: &str =
    "t,drone_id,px,py,pz,vx,vy,vz,ax_nom,ay_nom,az_nom,ax_f,ay_f,az_f,r_enc,r_pen,r_edge,r_vel,r_total,status";

pub const STATS_HEADER: &str =
    "iteration,mean_episode_reward,value_loss,policy_loss,entropy,clip_fraction,success_rate,fallback_count,episodes,env_steps";

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::with_capacity(64 + rows.len() * 160);
    out.push_str(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{:.6},{}", r.t, r.drone_id);
        for v in [r.pos, r.vel, r.nominal, r.filtered] {
            let _ = write!(out, ",{:.6},{:.6},{:.6}", v.x, v.y, v.z);
        }
        let _ = writeln!(
            out,
            ",{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.r_enc,
            r.r_pen,
            r.r_edge,
            r.r_vel,
            r.r_total,
            r.status.as_str()
        );
    }
    out
}

pub fn stats_csv(stats: &[TrainStats]) -> String {
    let mut out = String::from(STATS_HEADER);
    out.push('\n');
    for s in stats {
        let _ = writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{},{},{}",
            s.iteration,
            s.mean_episode_reward,
            s.value_loss,
            s.policy_loss,
            s.entropy,
            s.clip_fraction,
            s.success_rate,
            s.fallback_count,
            s.episodes,
            s.env_steps
        );
    }
    out
}

/// Two-column `x,y` series with a header row.
pub fn series_csv(x_name: &str, y_name: &str, points: impl IntoIterator<Item = (f64, f64)>) -> String {
    let mut out = format!("{x_name},{y_name}\n");
    for (x, y) in points {
        let _ = writeln!(out, "{x},{y:e}");
    }
    out
}

pub fn reward_curve(stats: &[TrainStats]) -> String {
    series_csv(
        "iteration",
        "mean_episode_reward",
        stats.iter().map(|s| (s.iteration as f64, s.mean_episode_reward)),
    )
}

pub fn value_loss_curve(stats: &[TrainStats]) -> String {
    series_csv("iteration", "value_loss", stats.iter().map(|s| (s.iteration as f64, s.value_loss)))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::invalid(format!("json: {e}")))?;
    s.push('\n');
    Ok(s)
}

pub fn read_report(path: &Path) -> Result<MetricsReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.into(),
        message: e.to_string(),
    })
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Provenance record written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub label: String,
    pub seed: u64,
    pub config_hash: String,
    pub crate_version: String,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid(format!("manifest: {e}")))
    }
}

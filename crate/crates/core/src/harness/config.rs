//! Run configuration: one TOML file with a section per subsystem.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{EnvConfig, LandingThresholds, RewardConfig};
use crate::error::{Error, Result};
use crate::harness::scenario::ScenarioConfig;
use crate::mappo::TrainConfig;
use crate::safety::SafetyConfig;

/// Seed override consulted when neither the command line nor the config sets one.
pub const SEED_ENV_VAR: &str = "SAFESWARM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    StaticPad,
    MovingPad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    pub horizon: usize,
    /// Obstacle slots per observation; defaults to `obstacle_count`.
    pub obstacle_slots: Option<usize>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon: 600,
            obstacle_slots: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Name used in reports and comparison tables.
    pub label: String,
    pub scenario: Scenario,
    pub obstacle_count: usize,
    pub eval_episodes: usize,
    pub out_dir: PathBuf,
    pub world: ScenarioConfig,
    pub episode: EpisodeConfig,
    pub reward: RewardConfig,
    pub safety: SafetyConfig,
    pub landing: LandingThresholds,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            label: "SafeSwarm".into(),
            scenario: Scenario::StaticPad,
            obstacle_count: 3,
            eval_episodes: 30,
            out_dir: PathBuf::from("runs/default"),
            world: ScenarioConfig::default(),
            episode: EpisodeConfig::default(),
            reward: RewardConfig::default(),
            safety: SafetyConfig::default(),
            landing: LandingThresholds::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self> {
        let value: toml::Table = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        Self::from_table(value, path)
    }

    fn from_table(table: toml::Table, path: &Path) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` and applies `key.path=value` overrides (TOML value syntax)
    /// before deserializing.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        Self::from_table(table, path)
    }

    pub fn validate(&self) -> Result<()> {
        if self.obstacle_count > 10 {
            return Err(Error::config("obstacle_count must be in [0, 10]"));
        }
        self.world.validate()?;
        self.env_config().validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Resolves the seed: command line, then config, then `SAFESWARM_SEED`, then 0.
    pub fn resolve_seed(&mut self, cli: Option<u64>) -> Result<u64> {
        let seed = match cli.or(self.seed) {
            Some(s) => s,
            None => match std::env::var(SEED_ENV_VAR) {
                Ok(v) => v
                    .trim()
                    .parse()
                    .map_err(|_| Error::config(format!("{SEED_ENV_VAR}={v:?} is not a u64")))?,
                Err(_) => 0,
            },
        };
        self.seed = Some(seed);
        self.train.seed = seed;
        Ok(seed)
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn env_config(&self) -> EnvConfig {
        EnvConfig {
            reward: self.reward,
            safety: self.safety,
            landing: self.landing,
            horizon: self.episode.horizon,
            obstacle_slots: self.episode.obstacle_slots.unwrap_or(self.obstacle_count),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed(),
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot serialize config: {e}")))
    }

    /// SHA-256 of the resolved config in canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {spec:?} is not key=value")))?;
    let parsed: toml::Table = toml::from_str(&format!("v = {}", raw.trim()))
        .or_else(|_| toml::from_str(&format!("v = {:?}", raw.trim())))
        .map_err(|e| Error::config(format!("override {spec:?}: {e}")))?;
    let value = parsed["v"].clone();
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override {spec:?}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

//! Seeded scene generation: pads, obstacles and drone parameters for one episode.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::harness::config::{RunConfig, Scenario};
use crate::mappo::derive_seed;
use crate::world::{
    obstacle_clearance, step_pad, ArenaSpec, DroneParams, ObstacleSpec, PadMotion, PadSpec, Vec3, WorldConfig,
};

const PLACEMENT_ATTEMPTS: usize = 1000;
const SCENE_TAG: u64 = 11;
const START_TAG: u64 = 12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub drones: usize,
    pub dt: f64,
    pub half_extent_xy: f64,
    pub z_max: f64,
    pub gain_k: f64,
    /// Per-drone gains are drawn from `gain_k * [1 - spread, 1 + spread]`.
    pub gain_k_spread: f64,
    pub v_max: f64,
    pub body_radius: f64,
    pub pad_radius: f64,
    /// Height of the pad top surface.
    pub pad_z: f64,
    /// Pad centers are drawn from `[-pad_region, pad_region]^2`.
    pub pad_region: f64,
    pub pad_separation: f64,
    pub pad_speed: f64,
    pub obstacle_radius: (f64, f64),
    pub obstacle_height: f64,
    /// Minimum surface-to-surface gap between obstacles.
    pub obstacle_gap: f64,
    /// Minimum gap between an obstacle surface and any pad edge (along the pad path).
    pub obstacle_pad_gap: f64,
    pub spawn_z: (f64, f64),
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            drones: 3,
            dt: 0.02,
            half_extent_xy: 1.5,
            z_max: 2.0,
            gain_k: 4.0,
            gain_k_spread: 0.0,
            v_max: 1.0,
            body_radius: 0.06,
            pad_radius: 0.15,
            pad_z: 0.1,
            pad_region: 1.0,
            pad_separation: 0.5,
            pad_speed: 0.1,
            obstacle_radius: (0.08, 0.15),
            obstacle_height: 1.5,
            obstacle_gap: 0.3,
            obstacle_pad_gap: 0.15,
            spawn_z: (0.8, 1.2),
        }
    }
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.drones == 0 {
            return Err(Error::config("world.drones must be >= 1"));
        }
        if !(self.pad_region > 0.0 && self.pad_region + self.pad_radius <= self.half_extent_xy) {
            return Err(Error::config("world.pad_region + pad_radius must fit inside the arena"));
        }
        if !(self.obstacle_radius.0 > 0.0 && self.obstacle_radius.0 <= self.obstacle_radius.1) {
            return Err(Error::config("world.obstacle_radius must be an ordered positive range"));
        }
        if !(0.0..1.0).contains(&self.gain_k_spread) {
            return Err(Error::config("world.gain_k_spread must be in [0, 1)"));
        }
        if !(self.pad_z >= 0.0 && self.spawn_z.0 > self.pad_z && self.spawn_z.1 < self.z_max) {
            return Err(Error::config("world.spawn_z must lie above the pads and below z_max"));
        }
        if !(self.pad_speed >= 0.0 && self.obstacle_gap >= 0.0 && self.obstacle_pad_gap >= 0.0) {
            return Err(Error::config("world speeds and gaps must be >= 0"));
        }
        Ok(())
    }
}

fn sample_pads(rng: &mut ChaCha8Rng, sc: &ScenarioConfig, moving: bool) -> Result<Vec<PadSpec>> {
    let mut pads: Vec<PadSpec> = Vec::with_capacity(sc.drones);
    for _ in 0..sc.drones {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let c = Vec3::new(
                rng.random_range(-sc.pad_region..=sc.pad_region),
                rng.random_range(-sc.pad_region..=sc.pad_region),
                sc.pad_z,
            );
            if pads.iter().all(|p| (p.center - c).horizontal_norm() >= sc.pad_separation) {
                placed = Some(c);
                break;
            }
        }
        let center = placed.ok_or(Error::Placement(PLACEMENT_ATTEMPTS))?;
        let motion = if moving {
            let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            PadMotion::LinearBounce {
                vel_xy: (sc.pad_speed * heading.cos(), sc.pad_speed * heading.sin()),
            }
        } else {
            PadMotion::Static
        };
        pads.push(PadSpec {
            center,
            radius: sc.pad_radius,
            motion,
        });
    }
    Ok(pads)
}

/// Pad centers visited over `horizon` steps, subsampled.
fn pad_path(pad: &PadSpec, arena: &ArenaSpec, dt: f64, horizon: usize) -> Vec<Vec3> {
    let mut path = vec![pad.center];
    if matches!(pad.motion, PadMotion::Static) {
        return path;
    }
    let mut p = *pad;
    for step in 1..=horizon {
        p = step_pad(&p, arena, dt);
        if step % 5 == 0 || step == horizon {
            path.push(p.center);
        }
    }
    path
}

fn sample_obstacles(
    rng: &mut ChaCha8Rng,
    sc: &ScenarioConfig,
    count: usize,
    paths: &[Vec<Vec3>],
) -> Result<Vec<ObstacleSpec>> {
    let lim = sc.half_extent_xy - sc.obstacle_radius.1 - sc.obstacle_gap;
    let mut obstacles: Vec<ObstacleSpec> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut placed = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let o = ObstacleSpec {
                center_xy: (rng.random_range(-lim..=lim), rng.random_range(-lim..=lim)),
                radius: rng.random_range(sc.obstacle_radius.0..=sc.obstacle_radius.1),
                height: sc.obstacle_height,
            };
            let clear_pads = paths
                .iter()
                .flatten()
                .all(|c| obstacle_clearance(*c, &o) >= sc.pad_radius + sc.obstacle_pad_gap);
            let clear_obstacles = obstacles.iter().all(|q| {
                (q.center() - o.center()).horizontal_norm() - q.radius - o.radius >= sc.obstacle_gap
            });
            if clear_pads && clear_obstacles {
                placed = Some(o);
                break;
            }
        }
        obstacles.push(placed.ok_or(Error::Placement(PLACEMENT_ATTEMPTS))?);
    }
    Ok(obstacles)
}

/// Builds the scene for one episode seed. Start positions are left to
/// [`EnvState::reset`].
pub fn build_world(cfg: &RunConfig, scene_seed: u64) -> Result<WorldConfig> {
    let sc = &cfg.world;
    sc.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed);
    let arena = ArenaSpec {
        half_extent_xy: sc.half_extent_xy,
        z_max: sc.z_max,
    };
    let drones = (0..sc.drones)
        .map(|id| {
            let spread = if sc.gain_k_spread > 0.0 {
                rng.random_range(-sc.gain_k_spread..=sc.gain_k_spread)
            } else {
                0.0
            };
            DroneParams {
                id,
                gain_k: sc.gain_k * (1.0 + spread),
                v_max: sc.v_max,
                body_radius: sc.body_radius,
            }
        })
        .collect();
    let pads = sample_pads(&mut rng, sc, cfg.scenario == Scenario::MovingPad)?;
    let paths: Vec<Vec<Vec3>> = pads
        .iter()
        .map(|p| pad_path(p, &arena, sc.dt, cfg.episode.horizon))
        .collect();
    let obstacles = sample_obstacles(&mut rng, sc, cfg.obstacle_count, &paths)?;
    let world = WorldConfig {
        drones,
        obstacles,
        pads,
        arena,
        dt: sc.dt,
        pad_speed_max: sc.pad_speed.max(1e-9),
        starts: None,
        spawn_z: sc.spawn_z,
    };
    world.validate()?;
    Ok(world)
}

/// Scene plus reset for one episode seed.
pub fn make_env(cfg: &RunConfig, episode_seed: u64) -> Result<EnvState> {
    let world = build_world(cfg, derive_seed(episode_seed, &[SCENE_TAG]))?;
    let (env, _) = EnvState::reset(world, cfg.env_config(), derive_seed(episode_seed, &[START_TAG]))?;
    Ok(env)
}

/// Episode factory for the trainer.
pub fn env_factory(cfg: &RunConfig) -> impl Fn(u64) -> Result<EnvState> + '_ {
    move |seed| make_env(cfg, seed)
}

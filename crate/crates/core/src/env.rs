//! Multi-agent landing environment: observations, the shaped per-agent reward,
//! collision/landing detection and episode outcomes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::safety::{self, FilterReport, SafetyConfig};
use crate::world::{
    obstacle_clearance, step_drone_dynamics, step_pad, ArenaSpec, DroneState, DroneStatus,
    ObstacleSpec, PadSpec, Vec3, WorldConfig,
};

/// Placeholder for empty obstacle slots in an observation.
pub const SENTINEL: Vec3 = Vec3::new(100.0, 100.0, 100.0);

const PLACEMENT_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    /// Encouragement scale.
    pub lambda: f64,
    /// Stabilizer added to every squared distance.
    pub eps: f64,
    /// Velocity-penalty scale, non-positive.
    pub gamma_vel: f64,
    pub c_collision: f64,
    pub c_edge: f64,
    /// Height above the pad top under which off-pad flight is penalized.
    pub edge_margin: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            lambda: 10.0,
            eps: 0.1,
            gamma_vel: -0.5,
            c_collision: -50.0,
            c_edge: -10.0,
            edge_margin: 0.05,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::config("reward.lambda must be > 0"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("reward.eps must be > 0"));
        }
        if !(self.gamma_vel <= 0.0 && self.c_collision <= 0.0 && self.c_edge <= 0.0) {
            return Err(Error::config(
                "reward.gamma_vel, c_collision and c_edge must be <= 0",
            ));
        }
        if !(self.edge_margin >= 0.0 && self.edge_margin.is_finite()) {
            return Err(Error::config("reward.edge_margin must be >= 0"));
        }
        Ok(())
    }
}

/// Per-agent reward decomposition for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RewardTerms {
    pub encourage: f64,
    pub penalty: f64,
    pub edge: f64,
    pub velocity: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub v_normed: f64,
}

/// `lambda / (|rel_pad|^2 + eps)`
pub fn reward_encourage(rel_pad: Vec3, cfg: &RewardConfig) -> f64 {
    cfg.lambda / (rel_pad.norm_squared() + cfg.eps)
}

/// Largest `1 / (|p|^2 + eps)` over the obstacle offsets; 0 when there are none.
pub fn alpha_coefficient(rel_obstacles: &[Vec3], cfg: &RewardConfig) -> f64 {
    rel_obstacles
        .iter()
        .map(|p| 1.0 / (p.norm_squared() + cfg.eps))
        .fold(0.0, f64::max)
}

pub fn beta_coefficient(rel_pad: Vec3, cfg: &RewardConfig) -> f64 {
    1.0 / (rel_pad.norm_squared() + cfg.eps)
}

/// `gamma_vel * |v|^2 * (alpha + beta)`. Non-positive for a valid config.
pub fn reward_velocity(vel: Vec3, alpha: f64, beta: f64, cfg: &RewardConfig) -> f64 {
    cfg.gamma_vel * vel.norm_squared() * (alpha + beta)
}

/// Penalty for flying below the pad top (plus margin) while not over the pad disc.
pub fn reward_edge(drone_pos: Vec3, pad: &PadSpec, cfg: &RewardConfig) -> f64 {
    let low = drone_pos.z < pad.center.z + cfg.edge_margin;
    let off_pad = (drone_pos - pad.center).horizontal_norm() > pad.radius;
    if low && off_pad {
        cfg.c_edge
    } else {
        0.0
    }
}

pub fn reward_collision(in_collision: bool, cfg: &RewardConfig) -> f64 {
    if in_collision {
        cfg.c_collision
    } else {
        0.0
    }
}

/// Inputs to [`total_reward`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct RewardParts {
    pub encourage: f64,
    pub penalty: f64,
    pub edge: f64,
    pub velocity: f64,
    pub alpha: f64,
    pub beta: f64,
    pub v_normed: f64,
}

pub fn total_reward(parts: RewardParts) -> RewardTerms {
    RewardTerms {
        encourage: parts.encourage,
        penalty: parts.penalty,
        edge: parts.edge,
        velocity: parts.velocity,
        total: parts.encourage + parts.penalty + parts.edge + parts.velocity,
        alpha: parts.alpha,
        beta: parts.beta,
        v_normed: parts.v_normed,
    }
}

/// Full reward for one drone given its post-step state.
pub fn evaluate_reward(
    drone: &DroneState,
    pad: &PadSpec,
    obstacles: &[ObstacleSpec],
    in_collision: bool,
    cfg: &RewardConfig,
) -> RewardTerms {
    let rel_pad = pad.center - drone.pos;
    let rel_obstacles: Vec<Vec3> = obstacles
        .iter()
        .map(|o| (o.center() - drone.pos).horizontal())
        .collect();
    let alpha = alpha_coefficient(&rel_obstacles, cfg);
    let beta = beta_coefficient(rel_pad, cfg);
    total_reward(RewardParts {
        encourage: reward_encourage(rel_pad, cfg),
        penalty: reward_collision(in_collision, cfg),
        edge: reward_edge(drone.pos, pad, cfg),
        velocity: reward_velocity(drone.vel, alpha, beta, cfg),
        alpha,
        beta,
        v_normed: drone.vel.norm_squared(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LandingThresholds {
    /// Allowed vertical offset from the pad top.
    pub z_tol: f64,
    /// Maximum speed relative to the pad at touchdown.
    pub v_land: f64,
}

impl Default for LandingThresholds {
    fn default() -> Self {
        Self {
            z_tol: 0.02,
            v_land: 0.1,
        }
    }
}

/// Everything besides the scene that an episode needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub reward: RewardConfig,
    pub safety: SafetyConfig,
    pub landing: LandingThresholds,
    pub horizon: usize,
    /// Number of obstacle slots in each observation.
    pub obstacle_slots: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            reward: RewardConfig::default(),
            safety: SafetyConfig::default(),
            landing: LandingThresholds::default(),
            horizon: 600,
            obstacle_slots: 4,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.safety.validate()?;
        if self.horizon == 0 {
            return Err(Error::config("horizon must be >= 1"));
        }
        if !(self.landing.z_tol > 0.0 && self.landing.v_land > 0.0) {
            return Err(Error::config("landing thresholds must be > 0"));
        }
        Ok(())
    }
}

/// One agent's decentralized view of the scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentObservation {
    pub own_vel: Vec3,
    /// Pad center minus drone position.
    pub rel_pad: Vec3,
    /// Horizontal offsets to obstacle axes, nearest first, sentinel-padded.
    pub rel_obstacles: Vec<Vec3>,
    /// Offsets to the other drones, nearest first.
    pub rel_drones: Vec<Vec3>,
    /// `(gain_k, v_max)` when the swarm has mixed dynamics.
    pub dynamics: Option<(f64, f64)>,
}

impl AgentObservation {
    pub fn to_vec(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend(self.own_vel.to_array());
        out.extend(self.rel_pad.to_array());
        for v in self.rel_obstacles.iter().chain(&self.rel_drones) {
            out.extend(v.to_array());
        }
        if let Some((k, v)) = self.dynamics {
            out.extend([k, v]);
        }
        out
    }

    pub fn len(&self) -> usize {
        6 + 3 * (self.rel_obstacles.len() + self.rel_drones.len())
            + if self.dynamics.is_some() { 2 } else { 0 }
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInfo {
    pub status: DroneStatus,
    /// Command applied to the dynamics this step, when the drone was flying.
    pub applied: Option<Vec3>,
    pub nominal: Option<Vec3>,
    pub filter: Option<FilterReport>,
    /// True on the step this drone first collided.
    pub collided: bool,
    /// True on the step this drone touched down.
    pub landed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<AgentObservation>,
    pub rewards: Vec<RewardTerms>,
    pub done: bool,
    pub info: Vec<AgentInfo>,
}

/// Per-drone result of one episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroneOutcome {
    pub drone_id: usize,
    pub success: bool,
    pub crashed: bool,
    /// Horizontal landing error at touchdown, m.
    pub precision_m: Option<f64>,
    pub land_time_s: Option<f64>,
    /// Smallest gap between the drone body and any obstacle surface while flying.
    pub min_obstacle_clearance_m: Option<f64>,
    /// Smallest center distance to another flying drone.
    pub min_interagent_distance_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub seed: u64,
    pub steps: usize,
    pub fallback_count: usize,
    pub drones: Vec<DroneOutcome>,
}

impl EpisodeOutcome {
    pub fn collision_count(&self) -> usize {
        self.drones.iter().filter(|d| d.crashed).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Tracker {
    landed_terms: Option<RewardTerms>,
    land_time: Option<f64>,
    precision: Option<f64>,
    min_obstacle_gap: f64,
    min_interagent: f64,
}

impl Tracker {
    fn new() -> Self {
        Self {
            landed_terms: None,
            land_time: None,
            precision: None,
            min_obstacle_gap: f64::INFINITY,
            min_interagent: f64::INFINITY,
        }
    }
}

/// Mutable episode state. Single owner; independent episodes may run in parallel.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub world: WorldConfig,
    pub config: EnvConfig,
    pub drones: Vec<DroneState>,
    pub pads: Vec<PadSpec>,
    pub step_count: usize,
    pub time: f64,
    pub seed: u64,
    fallback_count: usize,
    trackers: Vec<Tracker>,
}

/// Order indices by distance, lowest index first on ties.
fn sorted_by_distance(offsets: &mut [(usize, Vec3)]) {
    offsets.sort_by(|a, b| {
        a.1.norm_squared()
            .total_cmp(&b.1.norm_squared())
            .then(a.0.cmp(&b.0))
    });
}

fn sample_start(
    rng: &mut ChaCha8Rng,
    world: &WorldConfig,
    placed: &[Vec3],
    index: usize,
) -> Result<Vec3> {
    let r = world.drones[index].body_radius;
    let margin = 0.2_f64.min(world.arena.half_extent_xy * 0.5);
    let lim = world.arena.half_extent_xy - margin;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let p = Vec3::new(
            rng.random_range(-lim..=lim),
            rng.random_range(-lim..=lim),
            rng.random_range(world.spawn_z.0..=world.spawn_z.1),
        );
        let clear_obstacles = world
            .obstacles
            .iter()
            .all(|o| obstacle_clearance(p, o) >= 2.0 * r);
        let clear_drones = placed.iter().all(|q| (p - *q).norm() >= 4.0 * r);
        if clear_obstacles && clear_drones {
            return Ok(p);
        }
    }
    Err(Error::Placement(PLACEMENT_ATTEMPTS))
}

impl EnvState {
    /// Starts an episode. Start positions come from the world config when given,
    /// otherwise they are rejection-sampled from `seed`.
    pub fn reset(
        world: WorldConfig,
        config: EnvConfig,
        seed: u64,
    ) -> Result<(EnvState, Vec<AgentObservation>)> {
        world.validate()?;
        config.validate()?;
        let starts = match &world.starts {
            Some(s) => s.clone(),
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut placed = Vec::with_capacity(world.drones.len());
                for i in 0..world.drones.len() {
                    let p = sample_start(&mut rng, &world, &placed, i)?;
                    placed.push(p);
                }
                placed
            }
        };
        let n = world.drones.len();
        let state = EnvState {
            drones: starts.into_iter().map(DroneState::at_rest).collect(),
            pads: world.pads.clone(),
            world,
            config,
            step_count: 0,
            time: 0.0,
            seed,
            fallback_count: 0,
            trackers: vec![Tracker::new(); n],
        };
        let mut state = state;
        state.update_monitors();
        let obs = state.observations();
        Ok((state, obs))
    }

    pub fn num_agents(&self) -> usize {
        self.drones.len()
    }

    pub fn arena(&self) -> &ArenaSpec {
        &self.world.arena
    }

    pub fn is_done(&self) -> bool {
        self.step_count >= self.config.horizon || self.drones.iter().all(|d| !d.is_flying())
    }

    pub fn observation(&self, agent: usize) -> AgentObservation {
        let me = &self.drones[agent];
        let mut obstacles: Vec<(usize, Vec3)> = self
            .world
            .obstacles
            .iter()
            .enumerate()
            .map(|(j, o)| (j, (o.center() - me.pos).horizontal()))
            .collect();
        sorted_by_distance(&mut obstacles);
        let mut rel_obstacles: Vec<Vec3> = obstacles
            .into_iter()
            .take(self.config.obstacle_slots)
            .map(|(_, v)| v)
            .collect();
        rel_obstacles.resize(self.config.obstacle_slots, SENTINEL);

        let mut peers: Vec<(usize, Vec3)> = self
            .drones
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != agent)
            .map(|(j, d)| (j, d.pos - me.pos))
            .collect();
        sorted_by_distance(&mut peers);

        let params = &self.world.drones[agent];
        AgentObservation {
            own_vel: me.vel,
            rel_pad: self.pads[agent].center - me.pos,
            rel_obstacles,
            rel_drones: peers.into_iter().map(|(_, v)| v).collect(),
            dynamics: self
                .world
                .heterogeneous_dynamics()
                .then_some((params.gain_k, params.v_max)),
        }
    }

    pub fn observations(&self) -> Vec<AgentObservation> {
        (0..self.num_agents()).map(|i| self.observation(i)).collect()
    }

    pub fn observation_len(&self) -> usize {
        self.observation(0).len()
    }

    /// Centralized state in fixed index order: per drone position, velocity and
    /// status flags; per pad center and planar velocity; per obstacle axis and radius.
    pub fn global_state(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.global_state_len());
        for d in &self.drones {
            out.extend(d.pos.to_array());
            out.extend(d.vel.to_array());
            out.push(f64::from(u8::from(d.status == DroneStatus::Landed)));
            out.push(f64::from(u8::from(d.status == DroneStatus::Crashed)));
        }
        for p in &self.pads {
            out.extend(p.center.to_array());
            let v = p.velocity();
            out.extend([v.x, v.y]);
        }
        for o in &self.world.obstacles {
            out.extend([o.center_xy.0, o.center_xy.1, o.radius]);
        }
        out
    }

    pub fn global_state_len(&self) -> usize {
        8 * self.drones.len() + 5 * self.pads.len() + 3 * self.world.obstacles.len()
    }

    fn update_monitors(&mut self) {
        let n = self.drones.len();
        for i in 0..n {
            if !self.drones[i].is_flying() {
                continue;
            }
            let p = self.drones[i].pos;
            let r = self.world.drones[i].body_radius;
            let tracker = &mut self.trackers[i];
            for o in &self.world.obstacles {
                tracker.min_obstacle_gap = tracker.min_obstacle_gap.min(obstacle_clearance(p, o) - r);
            }
            for j in 0..n {
                if j != i && self.drones[j].is_flying() {
                    let d = (p - self.drones[j].pos).norm();
                    tracker.min_interagent = tracker.min_interagent.min(d);
                }
            }
        }
    }

    /// Whether drone `i` (post-step) collides with an obstacle, another flying
    /// drone, or has left the arena.
    pub fn check_collision(&self, i: usize, flying: &[bool]) -> bool {
        let me = &self.drones[i];
        let r = self.world.drones[i].body_radius;
        if !self.world.arena.contains(me.pos) {
            return true;
        }
        if self
            .world
            .obstacles
            .iter()
            .any(|o| obstacle_clearance(me.pos, o) < r)
        {
            return true;
        }
        self.drones.iter().enumerate().any(|(j, d)| {
            j != i && flying[j] && (d.pos - me.pos).norm() < r + self.world.drones[j].body_radius
        })
    }

    /// Advances one step. `actions` holds one velocity command per drone; entries
    /// for drones that are no longer flying are ignored.
    pub fn step(&mut self, actions: &[Vec3], use_filter: bool) -> Result<StepResult> {
        let n = self.num_agents();
        if actions.len() != n {
            return Err(Error::Dimension {
                expected: n,
                got: actions.len(),
            });
        }
        if self.is_done() {
            return Err(Error::invalid("step called on a finished episode"));
        }
        let flying: Vec<bool> = self.drones.iter().map(|d| d.is_flying()).collect();
        for (i, a) in actions.iter().enumerate() {
            if flying[i] && !a.is_finite() {
                return Err(Error::NonFinite("action"));
            }
        }

        // Commands are decided against the frozen pre-step state.
        let mut info: Vec<AgentInfo> = Vec::with_capacity(n);
        let mut commands = vec![Vec3::ZERO; n];
        for i in 0..n {
            if !flying[i] {
                info.push(AgentInfo {
                    status: self.drones[i].status,
                    applied: None,
                    nominal: None,
                    filter: None,
                    collided: false,
                    landed: false,
                });
                continue;
            }
            let v_max = self.world.drones[i].v_max;
            let (cmd, report) = if use_filter {
                let (u, report) = safety::filter_action(i, self, actions[i], &self.config.safety)?;
                if report.fallback_used {
                    self.fallback_count += 1;
                }
                (u, Some(report))
            } else {
                (actions[i].clamp_abs(v_max), None)
            };
            commands[i] = cmd;
            info.push(AgentInfo {
                status: DroneStatus::Flying,
                applied: Some(cmd),
                nominal: Some(actions[i]),
                filter: report,
                collided: false,
                landed: false,
            });
        }

        let dt = self.world.dt;
        for i in 0..n {
            if flying[i] {
                self.drones[i] =
                    step_drone_dynamics(&self.drones[i], &self.world.drones[i], commands[i], dt)?;
            }
        }
        for pad in &mut self.pads {
            *pad = step_pad(pad, &self.world.arena, dt);
        }
        self.step_count += 1;
        self.time = self.step_count as f64 * dt;

        // Pad tops are solid.
        for i in 0..n {
            if !flying[i] {
                continue;
            }
            let d = &mut self.drones[i];
            for pad in &self.pads {
                if (d.pos - pad.center).horizontal_norm() <= pad.radius && d.pos.z < pad.center.z {
                    d.pos.z = pad.center.z;
                    d.vel.z = d.vel.z.max(0.0);
                }
            }
        }

        self.update_monitors();

        let collided: Vec<bool> = (0..n)
            .map(|i| flying[i] && self.check_collision(i, &flying))
            .collect();

        let mut rewards = Vec::with_capacity(n);
        for i in 0..n {
            if !flying[i] {
                // Landed drones hold their touchdown reward; crashed drones earn nothing.
                rewards.push(self.trackers[i].landed_terms.unwrap_or_default());
                continue;
            }
            let terms = evaluate_reward(
                &self.drones[i],
                &self.pads[i],
                &self.world.obstacles,
                collided[i],
                &self.config.reward,
            );
            if collided[i] {
                self.drones[i].status = DroneStatus::Crashed;
                info[i].collided = true;
            } else if let Some(precision) = check_landed(
                &self.drones[i],
                &self.pads[i],
                &self.config.landing,
            ) {
                self.drones[i].status = DroneStatus::Landed;
                info[i].landed = true;
                let tracker = &mut self.trackers[i];
                tracker.landed_terms = Some(terms);
                tracker.land_time = Some(self.time);
                tracker.precision = Some(precision);
            }
            info[i].status = self.drones[i].status;
            rewards.push(terms);
        }

        Ok(StepResult {
            observations: self.observations(),
            rewards,
            done: self.is_done(),
            info,
        })
    }

    pub fn fallback_count(&self) -> usize {
        self.fallback_count
    }

    /// Touchdown reward of a landed drone.
    pub fn landed_terms(&self, i: usize) -> Option<RewardTerms> {
        self.trackers[i].landed_terms
    }

    pub fn outcome(&self) -> EpisodeOutcome {
        let finite = |x: f64| x.is_finite().then_some(x);
        EpisodeOutcome {
            seed: self.seed,
            steps: self.step_count,
            fallback_count: self.fallback_count,
            drones: self
                .trackers
                .iter()
                .zip(&self.drones)
                .zip(&self.world.drones)
                .map(|((t, d), p)| DroneOutcome {
                    drone_id: p.id,
                    success: d.status == DroneStatus::Landed,
                    crashed: d.status == DroneStatus::Crashed,
                    precision_m: t.precision,
                    land_time_s: t.land_time,
                    min_obstacle_clearance_m: finite(t.min_obstacle_gap),
                    min_interagent_distance_m: finite(t.min_interagent),
                })
                .collect(),
        }
    }
}

/// Returns the horizontal landing error when the drone satisfies the touchdown
/// thresholds on its pad: within the disc, near the top surface, and slow relative
/// to the pad.
pub fn check_landed(drone: &DroneState, pad: &PadSpec, thresholds: &LandingThresholds) -> Option<f64> {
    let horizontal = (drone.pos - pad.center).horizontal_norm();
    let dz = (drone.pos.z - pad.center.z).abs();
    let speed = (drone.vel - pad.velocity()).norm();
    (horizontal <= pad.radius && dz <= thresholds.z_tol && speed <= thresholds.v_land)
        .then_some(horizontal)
}

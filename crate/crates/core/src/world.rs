//! Scene description, simplified drone and pad dynamics, and geometric queries.
//!
//! Drones are modeled as first-order velocity trackers integrated with
//! semi-implicit Euler. Obstacles are vertical cylinders of unlimited height
//! (boxes are represented by their bounding cylinder). Pads are flat discs
//! whose `center` is the top-surface center.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cartesian vector in meters (or meters/second when used as a velocity).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    /// Same vector with the vertical component zeroed.
    pub fn horizontal(self) -> Vec3 {
        Vec3::new(self.x, self.y, 0.0)
    }

    pub fn horizontal_norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_slice(s: &[f64]) -> Vec3 {
        Vec3::new(s[0], s[1], s[2])
    }

    /// Componentwise clamp into `[-bound, bound]`.
    pub fn clamp_abs(self, bound: f64) -> Vec3 {
        Vec3::new(
            self.x.clamp(-bound, bound),
            self.y.clamp(-bound, bound),
            self.z.clamp(-bound, bound),
        )
    }

    pub fn max_abs(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

/// Per-drone dynamics parameters. Drones in one swarm may differ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneParams {
    pub id: usize,
    /// Velocity-tracking gain, 1/s.
    pub gain_k: f64,
    /// Per-axis command bound, m/s.
    pub v_max: f64,
    pub body_radius: f64,
}

impl DroneParams {
    pub fn new(id: usize) -> Self {
        Self {
            id,
            gain_k: 4.0,
            v_max: 1.0,
            body_radius: 0.06,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain_k > 0.0 && self.gain_k.is_finite()) {
            return Err(Error::config(format!("drone {}: gain_k must be > 0", self.id)));
        }
        if !(self.v_max > 0.0 && self.v_max.is_finite()) {
            return Err(Error::config(format!("drone {}: v_max must be > 0", self.id)));
        }
        if !(self.body_radius > 0.0 && self.body_radius.is_finite()) {
            return Err(Error::config(format!(
                "drone {}: body_radius must be > 0",
                self.id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DroneStatus {
    Flying,
    Landed,
    Crashed,
}

impl DroneStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            DroneStatus::Flying => "Flying",
            DroneStatus::Landed => "Landed",
            DroneStatus::Crashed => "Crashed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DroneState {
    pub pos: Vec3,
    pub vel: Vec3,
    pub status: DroneStatus,
}

impl DroneState {
    pub fn at_rest(pos: Vec3) -> Self {
        Self {
            pos,
            vel: Vec3::ZERO,
            status: DroneStatus::Flying,
        }
    }

    pub fn is_flying(&self) -> bool {
        self.status == DroneStatus::Flying
    }
}

/// Vertical cylinder obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleSpec {
    pub center_xy: (f64, f64),
    pub radius: f64,
    pub height: f64,
}

impl ObstacleSpec {
    pub fn center(&self) -> Vec3 {
        Vec3::new(self.center_xy.0, self.center_xy.1, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.height > 0.0) {
            return Err(Error::config("obstacle radius and height must be > 0"));
        }
        if !(self.center_xy.0.is_finite() && self.center_xy.1.is_finite()) {
            return Err(Error::config("obstacle center must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum PadMotion {
    Static,
    LinearBounce { vel_xy: (f64, f64) },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PadSpec {
    /// Top-surface center.
    pub center: Vec3,
    pub radius: f64,
    pub motion: PadMotion,
}

impl PadSpec {
    pub fn velocity(&self) -> Vec3 {
        match self.motion {
            PadMotion::Static => Vec3::ZERO,
            PadMotion::LinearBounce { vel_xy } => Vec3::new(vel_xy.0, vel_xy.1, 0.0),
        }
    }

    pub fn validate(&self, pad_speed_max: f64) -> Result<()> {
        if !(self.radius > 0.0) || !self.center.is_finite() {
            return Err(Error::config("pad radius must be > 0 and center finite"));
        }
        if let PadMotion::LinearBounce { vel_xy } = self.motion {
            let speed = vel_xy.0.hypot(vel_xy.1);
            if !speed.is_finite() || speed > pad_speed_max + 1e-12 {
                return Err(Error::config(format!(
                    "pad speed {speed} exceeds pad_speed_max {pad_speed_max}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArenaSpec {
    pub half_extent_xy: f64,
    pub z_max: f64,
}

impl ArenaSpec {
    pub fn contains(&self, p: Vec3) -> bool {
        p.x.abs() <= self.half_extent_xy
            && p.y.abs() <= self.half_extent_xy
            && p.z >= 0.0
            && p.z <= self.z_max
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub drones: Vec<DroneParams>,
    pub obstacles: Vec<ObstacleSpec>,
    /// Drone `i` targets pad `i`.
    pub pads: Vec<PadSpec>,
    pub arena: ArenaSpec,
    pub dt: f64,
    pub pad_speed_max: f64,
    /// Fixed start positions; sampled on reset when absent.
    pub starts: Option<Vec<Vec3>>,
    /// Height band used when sampling start positions.
    pub spawn_z: (f64, f64),
}

impl WorldConfig {
    pub fn validate(&self) -> Result<()> {
        if self.drones.is_empty() {
            return Err(Error::config("at least one drone is required"));
        }
        if self.pads.len() != self.drones.len() {
            return Err(Error::config(format!(
                "{} pads for {} drones; one pad per drone is required",
                self.pads.len(),
                self.drones.len()
            )));
        }
        if !(self.dt > 0.0 && self.dt <= 0.1) {
            return Err(Error::config(format!("dt {} outside (0, 0.1]", self.dt)));
        }
        if !(self.arena.half_extent_xy > 0.0 && self.arena.z_max > 0.0) {
            return Err(Error::config("arena extents must be > 0"));
        }
        if !(self.spawn_z.0 <= self.spawn_z.1 && self.spawn_z.0 >= 0.0) {
            return Err(Error::config("spawn_z must be an ordered non-negative range"));
        }
        for d in &self.drones {
            d.validate()?;
        }
        for o in &self.obstacles {
            o.validate()?;
        }
        for p in &self.pads {
            p.validate(self.pad_speed_max)?;
        }
        for (i, a) in self.obstacles.iter().enumerate() {
            for b in &self.obstacles[i + 1..] {
                let gap = (a.center() - b.center()).horizontal_norm() - a.radius - b.radius;
                if gap < 0.0 {
                    return Err(Error::config("obstacles overlap"));
                }
            }
            for p in &self.pads {
                if obstacle_clearance(p.center, a) < p.radius {
                    return Err(Error::config("pad overlaps an obstacle"));
                }
            }
        }
        if let Some(starts) = &self.starts {
            if starts.len() != self.drones.len() {
                return Err(Error::config("one start position per drone is required"));
            }
            for (i, s) in starts.iter().enumerate() {
                let r = self.drones[i].body_radius;
                if !s.is_finite() || !self.arena.contains(*s) {
                    return Err(Error::config(format!("start {i} outside arena")));
                }
                if let Some(o) = self.obstacles.iter().find(|o| obstacle_clearance(*s, o) < r) {
                    return Err(Error::config(format!(
                        "start {i} overlaps obstacle at {:?}",
                        o.center_xy
                    )));
                }
                for (j, t) in starts.iter().enumerate().skip(i + 1) {
                    if (*s - *t).norm() < r + self.drones[j].body_radius {
                        return Err(Error::config(format!("starts {i} and {j} overlap")));
                    }
                }
            }
        }
        Ok(())
    }

    /// True when drones do not all share the same `(gain_k, v_max)`.
    pub fn heterogeneous_dynamics(&self) -> bool {
        let first = &self.drones[0];
        self.drones
            .iter()
            .any(|d| d.gain_k != first.gain_k || d.v_max != first.v_max)
    }
}

/// One semi-implicit Euler step of the velocity-tracking model:
/// `v+ = v + k (cmd - v) dt`, then `p+ = p + v+ dt`.
pub fn step_drone_dynamics(
    state: &DroneState,
    params: &DroneParams,
    cmd: Vec3,
    dt: f64,
) -> Result<DroneState> {
    if !(state.pos.is_finite() && state.vel.is_finite() && cmd.is_finite() && dt.is_finite()) {
        return Err(Error::NonFinite("drone dynamics input"));
    }
    if state.status != DroneStatus::Flying {
        return Err(Error::invalid("only Flying drones can be integrated"));
    }
    if cmd.max_abs() > params.v_max {
        return Err(Error::invalid(format!(
            "command {cmd:?} outside +/-{} m/s",
            params.v_max
        )));
    }
    let vel = state.vel + (cmd - state.vel) * (params.gain_k * dt);
    Ok(DroneState {
        pos: state.pos + vel * dt,
        vel,
        status: state.status,
    })
}

/// Advances a pad. Bouncing pads reflect off the arena walls at
/// `+/-half_extent_xy`: the position is mirrored and the velocity component negated.
pub fn step_pad(pad: &PadSpec, arena: &ArenaSpec, dt: f64) -> PadSpec {
    match pad.motion {
        PadMotion::Static => *pad,
        PadMotion::LinearBounce { vel_xy } => {
            let limit = arena.half_extent_xy;
            let (x, vx) = reflect(pad.center.x + vel_xy.0 * dt, vel_xy.0, limit);
            let (y, vy) = reflect(pad.center.y + vel_xy.1 * dt, vel_xy.1, limit);
            PadSpec {
                center: Vec3::new(x, y, pad.center.z),
                radius: pad.radius,
                motion: PadMotion::LinearBounce { vel_xy: (vx, vy) },
            }
        }
    }
}

fn reflect(mut x: f64, mut v: f64, limit: f64) -> (f64, f64) {
    // A single step never travels more than one arena width, so one mirror suffices
    // in practice; the loop covers pathological dt.
    for _ in 0..8 {
        if x > limit {
            x = 2.0 * limit - x;
            v = -v.abs();
        } else if x < -limit {
            x = -2.0 * limit - x;
            v = v.abs();
        } else {
            break;
        }
    }
    (x, v)
}

/// Horizontal distance from `p` to the obstacle surface; negative inside.
pub fn obstacle_clearance(p: Vec3, obs: &ObstacleSpec) -> f64 {
    (p.x - obs.center_xy.0).hypot(p.y - obs.center_xy.1) - obs.radius
}

/// Index and clearance of the nearest obstacle, lowest index on ties.
/// Returns `None` for an empty list (clearance `+inf`).
pub fn nearest_obstacle(p: Vec3, obstacles: &[ObstacleSpec]) -> (Option<usize>, f64) {
    let mut best = (None, f64::INFINITY);
    for (i, o) in obstacles.iter().enumerate() {
        let c = obstacle_clearance(p, o);
        if best.0.is_none() || c < best.1 {
            best = (Some(i), c);
        }
    }
    best
}

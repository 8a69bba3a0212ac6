//! Barrier-function safety filter over velocity commands.
//!
//! Each obstacle, nearby peer and arena wall contributes a linearized
//! discrete-time barrier condition `h(p + u dt) >= (1 - eta) h(p)`, written as a
//! half-space `a . u >= b`. The filtered command is the Euclidean projection of
//! the nominal command onto the intersection of those half-spaces and the
//! per-axis speed box, computed with Hildreth's dual coordinate ascent.

use serde::{Deserialize, Serialize};

use crate::env::EnvState;
use crate::error::{Error, Result};
use crate::world::{ArenaSpec, ObstacleSpec, Vec3};

/// Convergence tolerance on the primal change of one Hildreth sweep.
pub const QP_TOLERANCE: f64 = 1e-8;
pub const QP_MAX_SWEEPS: usize = 500;
/// A filtered command violating any constraint by more than this triggers the fallback.
pub const FEASIBILITY_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    /// Added to the physical contact distance to get the barrier radius.
    pub margin: f64,
    /// Barrier decay rate per step, in (0, 1].
    pub eta: f64,
    /// Share of the pairwise decay budget each drone takes.
    pub responsibility: f64,
    /// Obstacles and peers farther than this are ignored.
    pub cull_radius: f64,
    /// Distance kept from the arena walls, floor and ceiling.
    pub arena_margin: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            margin: 0.05,
            eta: 0.02,
            responsibility: 0.5,
            cull_radius: 2.0,
            arena_margin: 0.05,
        }
    }
}

impl SafetyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::config("safety.eta must be in (0, 1]"));
        }
        if !(self.responsibility > 0.0 && self.responsibility <= 1.0) {
            return Err(Error::config("safety.responsibility must be in (0, 1]"));
        }
        if !(self.margin > 0.0 && self.cull_radius > 0.0 && self.arena_margin > 0.0) {
            return Err(Error::config(
                "safety.margin, cull_radius and arena_margin must be > 0",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ArenaFace {
    XMax,
    XMin,
    YMax,
    YMin,
    ZMax,
    ZMin,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConstraintSource {
    Obstacle(usize),
    Agent(usize),
    Arena(ArenaFace),
}

/// Half-space `normal . u >= offset` on the velocity command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BarrierConstraint {
    pub normal: Vec3,
    pub offset: f64,
    pub source: ConstraintSource,
    /// Barrier value at the current position; negative means already unsafe.
    pub barrier: f64,
}

impl BarrierConstraint {
    pub fn slack(&self, u: Vec3) -> f64 {
        self.normal.dot(u) - self.offset
    }

    pub fn is_unsafe(&self) -> bool {
        self.barrier < 0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub nominal: Vec3,
    pub filtered: Vec3,
    pub active_constraints: Vec<ConstraintSource>,
    pub fallback_used: bool,
    pub qp_iterations: usize,
}

/// `|p - c|^2 - r_safe^2`
pub fn barrier_value(p: Vec3, center: Vec3, r_safe: f64) -> f64 {
    (p - center).norm_squared() - r_safe * r_safe
}

/// Planar barrier around a cylinder of radius `r_safe`. Returns `None` when the
/// drone sits on the axis, where the gradient vanishes.
pub fn obstacle_constraint(
    p: Vec3,
    index: usize,
    obstacle: &ObstacleSpec,
    r_safe: f64,
    eta: f64,
    dt: f64,
) -> Option<BarrierConstraint> {
    let offset = (p - obstacle.center()).horizontal();
    let h = barrier_value(p.horizontal(), obstacle.center(), r_safe);
    let normal = offset * (2.0 * dt);
    (normal.norm_squared() > 0.0).then_some(BarrierConstraint {
        normal,
        offset: -eta * h,
        source: ConstraintSource::Obstacle(index),
        barrier: h,
    })
}

/// Pairwise barrier where the peer is assumed to keep its current velocity and
/// this drone takes `responsibility` of the decay budget.
#[allow(clippy::too_many_arguments)]
pub fn interagent_constraint(
    p_i: Vec3,
    p_j: Vec3,
    v_j: Vec3,
    j: usize,
    r_safe: f64,
    eta: f64,
    responsibility: f64,
    dt: f64,
) -> Option<BarrierConstraint> {
    let d = p_i - p_j;
    let h = barrier_value(p_i, p_j, r_safe);
    let normal = d * (2.0 * dt);
    (normal.norm_squared() > 0.0).then_some(BarrierConstraint {
        normal,
        offset: -responsibility * eta * h + normal.dot(v_j),
        source: ConstraintSource::Agent(j),
        barrier: h,
    })
}

/// The six wall constraints keeping the drone `margin` inside the arena box.
pub fn arena_constraints(p: Vec3, arena: &ArenaSpec, margin: f64, eta: f64, dt: f64) -> [BarrierConstraint; 6] {
    let lim = arena.half_extent_xy - margin;
    let face = |h: f64, normal: Vec3, face: ArenaFace| BarrierConstraint {
        normal,
        offset: -eta * h,
        source: ConstraintSource::Arena(face),
        barrier: h,
    };
    [
        face(lim - p.x, Vec3::new(-dt, 0.0, 0.0), ArenaFace::XMax),
        face(p.x + lim, Vec3::new(dt, 0.0, 0.0), ArenaFace::XMin),
        face(lim - p.y, Vec3::new(0.0, -dt, 0.0), ArenaFace::YMax),
        face(p.y + lim, Vec3::new(0.0, dt, 0.0), ArenaFace::YMin),
        face(arena.z_max - margin - p.z, Vec3::new(0.0, 0.0, -dt), ArenaFace::ZMax),
        face(p.z - margin, Vec3::new(0.0, 0.0, dt), ArenaFace::ZMin),
    ]
}

/// Constraints for one flying drone: obstacles by index, flying peers by index,
/// then the arena faces. Obstacles and peers beyond the cull radius are skipped.
pub fn assemble_constraints(agent: usize, state: &EnvState, cfg: &SafetyConfig) -> Vec<BarrierConstraint> {
    let me = &state.drones[agent];
    let params = &state.world.drones[agent];
    let dt = state.world.dt;
    let mut out = Vec::new();
    for (j, o) in state.world.obstacles.iter().enumerate() {
        if crate::world::obstacle_clearance(me.pos, o) > cfg.cull_radius {
            continue;
        }
        let r_safe = o.radius + params.body_radius + cfg.margin;
        out.extend(obstacle_constraint(me.pos, j, o, r_safe, cfg.eta, dt));
    }
    for (j, peer) in state.drones.iter().enumerate() {
        if j == agent || !peer.is_flying() || (peer.pos - me.pos).norm() > cfg.cull_radius {
            continue;
        }
        let r_safe = params.body_radius + state.world.drones[j].body_radius + cfg.margin;
        out.extend(interagent_constraint(
            me.pos,
            peer.pos,
            peer.vel,
            j,
            r_safe,
            cfg.eta,
            cfg.responsibility,
            dt,
        ));
    }
    out.extend(arena_constraints(me.pos, state.arena(), cfg.arena_margin, cfg.eta, dt));
    out
}

/// Solves `min |u - u_nom|^2` subject to every `a . u >= b` and `|u_k| <= v_max`.
///
/// Hildreth sweeps identify the active set; the result is then polished by an
/// exact projection onto that set when it is small and well conditioned. If the
/// sweeps end infeasible the command falls back to zero.
pub fn solve_filter_qp(
    u_nom: Vec3,
    constraints: &[BarrierConstraint],
    v_max: f64,
) -> Result<(Vec3, FilterReport)> {
    if !u_nom.is_finite() || !v_max.is_finite() {
        return Err(Error::NonFinite("filter input"));
    }
    if v_max < 0.0 {
        return Err(Error::invalid("speed box is empty"));
    }
    if constraints
        .iter()
        .any(|c| !c.normal.is_finite() || !c.offset.is_finite())
    {
        return Err(Error::NonFinite("barrier constraint"));
    }

    // Box rows follow the barrier rows.
    let mut rows: Vec<(Vec3, f64)> = constraints.iter().map(|c| (c.normal, c.offset)).collect();
    for axis in [Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 1.0, 0.0), Vec3::new(0.0, 0.0, 1.0)] {
        rows.push((-axis, -v_max));
        rows.push((axis, -v_max));
    }
    let norms: Vec<f64> = rows.iter().map(|(a, _)| a.norm_squared()).collect();

    let mut lambda = vec![0.0; rows.len()];
    let mut u = u_nom;
    let mut sweeps = 0;
    while sweeps < QP_MAX_SWEEPS {
        sweeps += 1;
        let mut change: f64 = 0.0;
        for (k, (a, b)) in rows.iter().enumerate() {
            let next = (lambda[k] + (b - a.dot(u)) / norms[k]).max(0.0);
            let delta = next - lambda[k];
            if delta != 0.0 {
                u += *a * delta;
                lambda[k] = next;
                change = change.max(delta.abs() * norms[k].sqrt());
            }
        }
        if change < QP_TOLERANCE {
            break;
        }
    }

    if let Some(polished) = polish(u_nom, &rows, &lambda) {
        u = polished;
    }
    // Box rows can end a few ulps outside the bound; the dynamics reject those.
    u = u.clamp_abs(v_max);

    let feasible = rows
        .iter()
        .all(|(a, b)| a.dot(u) - b >= -FEASIBILITY_TOLERANCE);
    // An unconverged but feasible iterate is still a safe command.
    let fallback = !feasible;
    if fallback {
        u = Vec3::ZERO;
    }
    let active_constraints = constraints
        .iter()
        .zip(&lambda)
        .filter(|(_, &l)| l > 0.0)
        .map(|(c, _)| c.source)
        .collect();
    Ok((
        u,
        FilterReport {
            nominal: u_nom,
            filtered: u,
            active_constraints,
            fallback_used: fallback,
            qp_iterations: sweeps,
        },
    ))
}

/// Exact projection onto the equality set of the rows Hildreth left active.
/// Returns `None` unless the result is a KKT point of the full problem.
fn polish(u_nom: Vec3, rows: &[(Vec3, f64)], lambda: &[f64]) -> Option<Vec3> {
    let active: Vec<usize> = (0..rows.len()).filter(|&k| lambda[k] > 0.0).collect();
    if active.is_empty() || active.len() > 3 {
        return None;
    }
    let m = active.len();
    // Gram system G mu = b - A u_nom.
    let mut g = [[0.0; 4]; 3];
    for (r, &i) in active.iter().enumerate() {
        for (c, &j) in active.iter().enumerate() {
            g[r][c] = rows[i].0.dot(rows[j].0);
        }
        g[r][3] = rows[i].1 - rows[i].0.dot(u_nom);
    }
    let mu = solve_small(&mut g, m)?;
    if mu[..m].iter().any(|&x| x < 0.0) {
        return None;
    }
    let mut u = u_nom;
    for (r, &i) in active.iter().enumerate() {
        u += rows[i].0 * mu[r];
    }
    let scale = 1.0 + u_nom.norm();
    rows.iter()
        .all(|(a, b)| a.dot(u) - b >= -1e-12 * scale)
        .then_some(u)
}

/// Gaussian elimination with partial pivoting on an `m x (m+1)` augmented system.
fn solve_small(g: &mut [[f64; 4]; 3], m: usize) -> Option<[f64; 3]> {
    let scale = (0..m)
        .flat_map(|r| (0..m).map(move |c| (r, c)))
        .map(|(r, c)| g[r][c].abs())
        .fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    for col in 0..m {
        let pivot = (col..m).max_by(|&a, &b| g[a][col].abs().total_cmp(&g[b][col].abs()))?;
        if g[pivot][col].abs() <= 1e-12 * scale {
            return None;
        }
        g.swap(col, pivot);
        for r in col + 1..m {
            let f = g[r][col] / g[col][col];
            for c in col..m {
                g[r][c] -= f * g[col][c];
            }
            g[r][3] -= f * g[col][3];
        }
    }
    let mut x = [0.0; 3];
    for r in (0..m).rev() {
        let mut acc = g[r][3];
        for c in r + 1..m {
            acc -= g[r][c] * x[c];
        }
        x[r] = acc / g[r][r];
    }
    Some(x)
}

/// Clamps the nominal command into the drone's speed box, then projects it onto
/// the safe set for the current state.
pub fn filter_action(
    agent: usize,
    state: &EnvState,
    u_nom: Vec3,
    cfg: &SafetyConfig,
) -> Result<(Vec3, FilterReport)> {
    if !u_nom.is_finite() {
        return Err(Error::NonFinite("nominal command"));
    }
    let v_max = state.world.drones[agent].v_max;
    let constraints = assemble_constraints(agent, state, cfg);
    let (u, mut report) = solve_filter_qp(u_nom.clamp_abs(v_max), &constraints, v_max)?;
    report.nominal = u_nom;
    Ok((u, report))
}

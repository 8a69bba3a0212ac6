//! Independent oracles and criterion checks shared by the integration tests and
//! the acceptance report.

#![allow(dead_code)]

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use safeswarm::env::{evaluate_reward, RewardConfig, EnvState};
use safeswarm::harness::{make_env, RunConfig};
use safeswarm::mappo::{self, compute_gae, derive_seed};
use safeswarm::nn::{self, MlpParams};
use safeswarm::safety::{solve_filter_qp, BarrierConstraint, ConstraintSource};
use safeswarm::world::{obstacle_clearance, DroneState, DroneStatus, ObstacleSpec, PadMotion, PadSpec};
use safeswarm::Vec3;

pub struct Check {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
    pub elapsed: Duration,
}

impl Check {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.2}s): {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

fn timed(name: &'static str, budget: Duration, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (ok, detail) = f();
    let elapsed = start.elapsed();
    let in_budget = elapsed <= budget;
    Check {
        name,
        pass: ok && in_budget,
        detail: if in_budget {
            detail
        } else {
            format!("{detail}; over budget {:.0}s", budget.as_secs_f64())
        },
        elapsed,
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

// ---------------------------------------------------------------- reward

pub struct RewardOracle {
    pub encourage: f64,
    pub penalty: f64,
    pub edge: f64,
    pub velocity: f64,
    pub total: f64,
}

/// Straight-line transcription of the reward, written against raw coordinates.
#[allow(clippy::too_many_arguments)]
pub fn reward_oracle(
    p: [f64; 3],
    v: [f64; 3],
    pad: [f64; 3],
    pad_radius: f64,
    obstacles: &[(f64, f64)],
    collided: bool,
    c: &RewardConfig,
) -> RewardOracle {
    let dx = pad[0] - p[0];
    let dy = pad[1] - p[1];
    let dz = pad[2] - p[2];
    let pad_sq = dx * dx + dy * dy + dz * dz;
    let encourage = c.lambda / (pad_sq + c.eps);
    let beta = 1.0 / (pad_sq + c.eps);
    let mut alpha = 0.0_f64;
    for &(ox, oy) in obstacles {
        let a = 1.0 / ((ox - p[0]) * (ox - p[0]) + (oy - p[1]) * (oy - p[1]) + c.eps);
        if a > alpha {
            alpha = a;
        }
    }
    let v_sq = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let velocity = c.gamma_vel * v_sq * (alpha + beta);
    let horizontal = (dx * dx + dy * dy).sqrt();
    let edge = if p[2] < pad[2] + c.edge_margin && horizontal > pad_radius {
        c.c_edge
    } else {
        0.0
    };
    let penalty = if collided { c.c_collision } else { 0.0 };
    RewardOracle {
        encourage,
        penalty,
        edge,
        velocity,
        total: encourage + penalty + edge + velocity,
    }
}

pub fn check_reward_oracle(states: usize) -> Check {
    timed("reward oracle", Duration::from_secs(1), || {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        let cfg = RewardConfig::default();
        let mut worst = 0.0_f64;
        for _ in 0..states {
            let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
            let p = [u(-2.0, 2.0), u(-2.0, 2.0), u(0.0, 2.0)];
            let v = [u(-1.0, 1.0), u(-1.0, 1.0), u(-1.0, 1.0)];
            let pad = [u(-1.0, 1.0), u(-1.0, 1.0), u(0.0, 0.3)];
            let radius = u(0.05, 0.3);
            let n_obs = (u(0.0, 5.0)) as usize;
            let obstacles: Vec<(f64, f64)> = (0..n_obs).map(|_| (u(-2.0, 2.0), u(-2.0, 2.0))).collect();
            let collided = u(0.0, 1.0) < 0.2;
            let expected = reward_oracle(p, v, pad, radius, &obstacles, collided, &cfg);
            let drone = DroneState {
                pos: Vec3::new(p[0], p[1], p[2]),
                vel: Vec3::new(v[0], v[1], v[2]),
                status: DroneStatus::Flying,
            };
            let pad_spec = PadSpec {
                center: Vec3::new(pad[0], pad[1], pad[2]),
                radius,
                motion: PadMotion::Static,
            };
            let specs: Vec<ObstacleSpec> = obstacles
                .iter()
                .map(|&c| ObstacleSpec {
                    center_xy: c,
                    radius: 0.1,
                    height: 2.0,
                })
                .collect();
            let got = evaluate_reward(&drone, &pad_spec, &specs, collided, &cfg);
            for (a, b) in [
                (got.encourage, expected.encourage),
                (got.penalty, expected.penalty),
                (got.edge, expected.edge),
                (got.velocity, expected.velocity),
                (got.total, expected.total),
            ] {
                worst = worst.max(rel_err(a, b));
            }
        }
        (worst <= 1e-12, format!("{states} states, max rel err {worst:.2e} (tol 1e-12)"))
    })
}

// ---------------------------------------------------------------- gradients

const FD_H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;

/// Relative error with a floor so exact zeros compare against round-off.
fn grad_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn central(f: &mut dyn FnMut(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_H) - f(x - FD_H)) / (2.0 * FD_H)
}

/// Worst errors per operation over `instances` random draws.
pub fn gradient_errors(instances: usize) -> Vec<(&'static str, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut mlp_params = 0.0_f64;
    let mut mlp_input = 0.0_f64;
    let mut lp_mean = 0.0_f64;
    let mut lp_std = 0.0_f64;
    let mut entropy = 0.0_f64;
    let mut ppo = 0.0_f64;
    let mut vloss = 0.0_f64;
    for inst in 0..instances {
        // MLP: scalar f = g . forward(x)
        let depth = rng.random_range(1..=3);
        let mut dims = vec![rng.random_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.random_range(1..=8));
        }
        let mut net = MlpParams::init(&dims, inst as u64).unwrap();
        for p in &mut net.params {
            *p += rng.random_range(-0.3..0.3);
        }
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g: Vec<f64> = (0..*dims.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scalar = |net: &MlpParams, x: &[f64]| -> f64 {
            let (out, _) = net.forward(x).unwrap();
            out.iter().zip(&g).map(|(o, w)| o * w).sum()
        };
        let (_, cache) = net.forward(&x).unwrap();
        let (pgrad, xgrad) = net.backward(&cache, &g).unwrap();
        for k in 0..net.params.len() {
            let mut probe = net.clone();
            let numeric = central(
                &mut |v| {
                    probe.params[k] = v;
                    scalar(&probe, &x)
                },
                net.params[k],
            );
            mlp_params = mlp_params.max(grad_err(pgrad[k], numeric));
        }
        for k in 0..x.len() {
            let mut xp = x.clone();
            let numeric = central(
                &mut |v| {
                    xp[k] = v;
                    scalar(&net, &xp)
                },
                x[k],
            );
            mlp_input = mlp_input.max(grad_err(xgrad[k], numeric));
        }

        // Gaussian log-probability and entropy.
        let d = rng.random_range(1..=4);
        let mean: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let log_std: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..1.0)).collect();
        let action: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, dmean, dstd) = nn::gaussian_logprob_grad(&mean, &log_std, &action);
        for k in 0..d {
            let mut m = mean.clone();
            let numeric = central(
                &mut |v| {
                    m[k] = v;
                    nn::gaussian_logprob(&m, &log_std, &action)
                },
                mean[k],
            );
            lp_mean = lp_mean.max(grad_err(dmean[k], numeric));
            let mut s = log_std.clone();
            let numeric = central(
                &mut |v| {
                    s[k] = v;
                    nn::gaussian_logprob(&mean, &s, &action)
                },
                log_std[k],
            );
            lp_std = lp_std.max(grad_err(dstd[k], numeric));
            let mut s = log_std.clone();
            let numeric = central(
                &mut |v| {
                    s[k] = v;
                    nn::gaussian_entropy(&s)
                },
                log_std[k],
            );
            // d entropy / d log_std_k = 1
            entropy = entropy.max(grad_err(1.0, numeric));
        }

        // Clipped surrogate and clipped value loss, sampled away from their kinks.
        let eps = 0.2;
        let (lp_new, lp_old, adv) = loop {
            let lp_old: f64 = rng.random_range(-3.0..0.0);
            let lp_new = lp_old + rng.random_range(-0.5..0.5);
            let ratio: f64 = (lp_new - lp_old).exp();
            if (ratio - (1.0 - eps)).abs() > 1e-3 && (ratio - (1.0 + eps)).abs() > 1e-3 {
                break (lp_new, lp_old, rng.random_range(-2.0..2.0));
            }
        };
        let numeric = central(
            &mut |v| mappo::ppo_policy_objective(v, lp_old, adv, eps),
            lp_new,
        );
        ppo = ppo.max(grad_err(mappo::ppo_policy_objective_grad(lp_new, lp_old, adv, eps), numeric));

        let (v_new, ret, v_old) = loop {
            let v_old: f64 = rng.random_range(-1.0..1.0);
            let v_new: f64 = v_old + rng.random_range(-0.5..0.5);
            let ret: f64 = rng.random_range(-1.5..1.5);
            let clipped = v_old + (v_new - v_old).clamp(-eps, eps);
            let plain = (v_new - ret).powi(2);
            let clip_sq = (clipped - ret).powi(2);
            let away = ((v_new - v_old).abs() - eps).abs() > 1e-3 && (plain - clip_sq).abs() > 1e-3;
            if away {
                break (v_new, ret, v_old);
            }
        };
        let numeric = central(&mut |v| mappo::value_loss_sample(v, ret, v_old, eps), v_new);
        vloss = vloss.max(grad_err(mappo::value_loss_sample_grad(v_new, ret, v_old, eps), numeric));
    }
    vec![
        ("mlp params", mlp_params),
        ("mlp input", mlp_input),
        ("logprob mean", lp_mean),
        ("logprob log_std", lp_std),
        ("entropy", entropy),
        ("ppo surrogate", ppo),
        ("value loss", vloss),
    ]
}

pub fn check_gradients(instances: usize) -> Check {
    timed("gradient suite", Duration::from_secs(30), || {
        let errs = gradient_errors(instances);
        let worst = errs.iter().map(|e| e.1).fold(0.0, f64::max);
        let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
        (
            worst <= GRAD_TOL,
            format!("{instances} instances each, max rel err {worst:.2e} (tol 1e-4): {}", detail.join(", ")),
        )
    })
}

// ---------------------------------------------------------------- GAE

/// `A_t = sum_l (gamma lambda)^l delta_{t+l}`, truncated at the first done.
pub fn gae_brute_force(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Vec<f64> {
    let n = rewards.len();
    let next_v = |t: usize| if t + 1 < n { values[t + 1] } else { bootstrap };
    let delta: Vec<f64> = (0..n)
        .map(|t| rewards[t] + if dones[t] { 0.0 } else { gamma * next_v(t) } - values[t])
        .collect();
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut weight = 1.0;
            for l in 0..n - t {
                sum += weight * delta[t + l];
                if dones[t + l] {
                    break;
                }
                weight *= gamma * lambda;
            }
            sum
        })
        .collect()
}

pub fn check_gae(vectors: usize) -> Check {
    timed("GAE oracle", Duration::from_secs(5), || {
        let mut rng = ChaCha8Rng::seed_from_u64(303);
        let mut worst = 0.0_f64;
        for i in 0..vectors {
            let n = 1 + i % 10;
            let rewards: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-10.0..10.0)).collect();
            let mut dones: Vec<bool> = (0..n).map(|_| rng.random_bool(0.15)).collect();
            if rng.random_bool(0.5) {
                dones[n - 1] = true;
            }
            let bootstrap = rng.random_range(-10.0..10.0);
            let gamma = rng.random_range(0.8..0.999);
            let lambda = rng.random_range(0.0..1.0);
            let (adv, ret) = compute_gae(&rewards, &values, &dones, bootstrap, gamma, lambda).unwrap();
            let oracle = gae_brute_force(&rewards, &values, &dones, bootstrap, gamma, lambda);
            for t in 0..n {
                worst = worst.max((adv[t] - oracle[t]).abs());
                worst = worst.max((ret[t] - (oracle[t] + values[t])).abs());
            }
        }
        (worst <= 1e-10, format!("{vectors} vectors, lengths 1-10, max abs err {worst:.2e} (tol 1e-10)"))
    })
}

// ---------------------------------------------------------------- QP

fn clip3(u: [f64; 3], v_max: f64) -> [f64; 3] {
    u.map(|x| x.clamp(-v_max, v_max))
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Projection of `u_nom` onto `{a.u >= b} ∩ [-v_max, v_max]^3`.
///
/// The minimizer is `u(mu) = clip(u_nom + mu a)` for the smallest `mu >= 0` with
/// `a.u(mu) >= b`; `a.u(mu)` is non-decreasing and piecewise linear in `mu`,
/// so the root is found by walking the breakpoints. `None` when infeasible.
pub fn halfspace_box_projection(u_nom: [f64; 3], a: [f64; 3], b: f64, v_max: f64) -> Option<[f64; 3]> {
    let at = |mu: f64| clip3([u_nom[0] + mu * a[0], u_nom[1] + mu * a[1], u_nom[2] + mu * a[2]], v_max);
    if dot3(a, at(0.0)) >= b {
        return Some(at(0.0));
    }
    let mut breaks: Vec<f64> = (0..3)
        .filter(|&k| a[k] != 0.0)
        .flat_map(|k| [(v_max - u_nom[k]) / a[k], (-v_max - u_nom[k]) / a[k]])
        .filter(|&m| m > 0.0)
        .collect();
    breaks.sort_by(f64::total_cmp);
    let mut lo = 0.0;
    for &hi in &breaks {
        let (g_lo, g_hi) = (dot3(a, at(lo)), dot3(a, at(hi)));
        if g_hi >= b {
            let mu = if g_hi > g_lo { lo + (b - g_lo) / (g_hi - g_lo) * (hi - lo) } else { hi };
            return Some(at(mu));
        }
        lo = hi;
    }
    None
}

fn constraint(a: [f64; 3], b: f64) -> BarrierConstraint {
    BarrierConstraint {
        normal: Vec3::new(a[0], a[1], a[2]),
        offset: b,
        source: ConstraintSource::Obstacle(0),
        barrier: 1.0,
    }
}

pub fn check_qp(single: usize, multi: usize) -> Check {
    timed("QP filter correctness", Duration::from_secs(30), || {
        let mut rng = ChaCha8Rng::seed_from_u64(404);
        let mut worst = 0.0_f64;
        let mut infeasible_ok = true;
        let mut infeasible = 0;
        for _ in 0..single {
            let v_max = rng.random_range(0.2..2.0);
            let u_nom = [0; 3].map(|_| rng.random_range(-1.5 * v_max..1.5 * v_max));
            let scale = rng.random_range(1e-3..1.0);
            let a = [0; 3].map(|_| rng.random_range(-1.0..1.0) * scale);
            let b = rng.random_range(-1.5..1.5) * scale * v_max;
            let (u, report) = solve_filter_qp(Vec3::new(u_nom[0], u_nom[1], u_nom[2]), &[constraint(a, b)], v_max).unwrap();
            match halfspace_box_projection(u_nom, a, b, v_max) {
                Some(exp) => {
                    let err = (u.x - exp[0]).abs().max((u.y - exp[1]).abs()).max((u.z - exp[2]).abs());
                    worst = worst.max(err);
                }
                None => {
                    infeasible += 1;
                    infeasible_ok &= report.fallback_used;
                }
            }
        }
        let mut violation_ok = true;
        let mut fallbacks = 0;
        for _ in 0..multi {
            let v_max = rng.random_range(0.2..2.0);
            let u_nom = Vec3::new(
                rng.random_range(-1.5 * v_max..1.5 * v_max),
                rng.random_range(-1.5 * v_max..1.5 * v_max),
                rng.random_range(-1.5 * v_max..1.5 * v_max),
            );
            let m = rng.random_range(2..=12);
            let cs: Vec<BarrierConstraint> = (0..m)
                .map(|_| {
                    let a = [0; 3].map(|_| rng.random_range(-1.0..1.0));
                    constraint(a, rng.random_range(-1.0..0.6) * v_max)
                })
                .collect();
            let (u, report) = solve_filter_qp(u_nom, &cs, v_max).unwrap();
            if report.fallback_used {
                fallbacks += 1;
                continue;
            }
            let box_ok = u.max_abs() <= v_max + 1e-6;
            violation_ok &= box_ok && cs.iter().all(|c| c.slack(u) >= -1e-6);
        }
        (
            worst <= 1e-8 && infeasible_ok && violation_ok,
            format!(
                "{single} single-constraint: max err {worst:.2e} (tol 1e-8), {infeasible} infeasible all fell back: {infeasible_ok}; \
                 {multi} multi-constraint: feasible within 1e-6 or fallback: {violation_ok} ({fallbacks} fallbacks)"
            ),
        )
    })
}

// ---------------------------------------------------------------- safety invariance

pub struct InvarianceStats {
    pub min_penetration: f64,
    pub collisions_on: usize,
    pub collisions_off: usize,
    pub fallback_episodes: usize,
    pub fallback_steps: usize,
}

pub fn invariance_config() -> RunConfig {
    let mut cfg = RunConfig {
        obstacle_count: 3,
        ..RunConfig::default()
    };
    cfg.world.drones = 3;
    cfg
}

/// Uniform random command per drone, held for `hold` steps.
pub struct HeldRandomPolicy {
    rng: ChaCha8Rng,
    hold: usize,
    current: Vec<Vec3>,
    age: usize,
}

impl HeldRandomPolicy {
    pub fn new(seed: u64, hold: usize) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            hold,
            current: Vec::new(),
            age: 0,
        }
    }

    pub fn act(&mut self, env: &EnvState) -> Vec<Vec3> {
        if self.current.is_empty() || self.age % self.hold == 0 {
            self.current = env
                .world
                .drones
                .iter()
                .map(|d| {
                    let v = d.v_max;
                    Vec3::new(
                        self.rng.random_range(-v..=v),
                        self.rng.random_range(-v..=v),
                        self.rng.random_range(-v..=v),
                    )
                })
                .collect();
        }
        self.age += 1;
        self.current.clone()
    }
}

/// Smallest surface gap to obstacles and flying peers among drones that were
/// flying when the step began.
fn step_penetration(env: &EnvState, flying: &[bool]) -> f64 {
    let mut worst = f64::INFINITY;
    for (i, d) in env.drones.iter().enumerate() {
        if !flying[i] {
            continue;
        }
        let r = env.world.drones[i].body_radius;
        for o in &env.world.obstacles {
            worst = worst.min(obstacle_clearance(d.pos, o) - r);
        }
        for (j, e) in env.drones.iter().enumerate() {
            if j > i && flying[j] {
                worst = worst.min((d.pos - e.pos).norm() - r - env.world.drones[j].body_radius);
            }
        }
    }
    worst
}

pub fn run_invariance(episodes: usize) -> InvarianceStats {
    run_invariance_with(&invariance_config(), episodes)
}

pub fn run_invariance_with(cfg: &RunConfig, episodes: usize) -> InvarianceStats {
    let cfg = cfg.clone();
    let mut stats = InvarianceStats {
        min_penetration: f64::INFINITY,
        collisions_on: 0,
        collisions_off: 0,
        fallback_episodes: 0,
        fallback_steps: 0,
    };
    for ep in 0..episodes {
        let seed = derive_seed(9001, &[ep as u64]);
        for use_filter in [true, false] {
            let mut env = make_env(&cfg, seed).unwrap();
            let mut policy = HeldRandomPolicy::new(derive_seed(seed, &[1]), 25);
            while !env.is_done() {
                let flying: Vec<bool> = env.drones.iter().map(|d| d.is_flying()).collect();
                let actions = policy.act(&env);
                env.step(&actions, use_filter).unwrap();
                if use_filter {
                    stats.min_penetration = stats.min_penetration.min(step_penetration(&env, &flying));
                }
            }
            let outcome = env.outcome();
            if use_filter {
                stats.collisions_on += outcome.collision_count();
                stats.fallback_steps += outcome.fallback_count;
                stats.fallback_episodes += usize::from(outcome.fallback_count > 0);
            } else {
                stats.collisions_off += outcome.collision_count();
            }
        }
    }
    stats
}

pub fn check_invariance(episodes: usize) -> Check {
    timed("safety invariance", Duration::from_secs(300), || {
        let s = run_invariance(episodes);
        (
            s.min_penetration >= -1e-6 && s.collisions_off > s.collisions_on,
            format!(
                "{episodes} episodes x 3 drones x 3 obstacles: min surface gap {:.3e} m (floor -1e-6), \
                 collisions filter on {} vs off {}, fallback episodes {} ({} steps)",
                s.min_penetration, s.collisions_on, s.collisions_off, s.fallback_episodes, s.fallback_steps
            ),
        )
    })
}

//! Multi-agent PPO: one shared decentralized actor, a centralized critic,
//! per-agent GAE and clipped-surrogate updates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::env::{EnvState, EpisodeOutcome};
use crate::error::{Error, Result};
use crate::nn::{self, AdamState, GaussianPolicy, MlpParams};
use crate::world::{DroneStatus, Vec3};

pub const ACTION_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub lr: f64,
    /// Minimum environment steps collected per iteration (whole episodes).
    pub rollout_steps: usize,
    pub iterations: usize,
    pub seed: u64,
    pub use_filter: bool,
    pub normalize_advantages: bool,
    /// Global gradient-norm clip per network; 0 disables.
    pub max_grad_norm: f64,
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    /// Write a checkpoint every this many iterations; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            epochs: 10,
            minibatches: 4,
            entropy_coef: 0.01,
            value_coef: 0.5,
            lr: 3e-4,
            rollout_steps: 2048,
            iterations: 100,
            seed: 0,
            use_filter: true,
            normalize_advantages: true,
            max_grad_norm: 0.5,
            hidden: vec![64, 64],
            init_log_std: -1.0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.gamma) || !(0.0..1.0).contains(&self.gae_lambda) {
            return Err(Error::config("train.gamma and train.gae_lambda must be in [0, 1)"));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return Err(Error::config("train.clip_eps must be in (0, 1)"));
        }
        if self.epochs == 0 || self.minibatches == 0 || self.rollout_steps == 0 {
            return Err(Error::config(
                "train.epochs, minibatches and rollout_steps must be >= 1",
            ));
        }
        if !(self.lr > 0.0) || self.hidden.contains(&0) {
            return Err(Error::config("train.lr must be > 0 and hidden widths >= 1"));
        }
        if !(self.entropy_coef >= 0.0 && self.value_coef >= 0.0 && self.max_grad_norm >= 0.0) {
            return Err(Error::config("train coefficients must be >= 0"));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer over a running state; used to derive independent seed
/// streams for episodes and shuffles.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Maps a raw Gaussian action to a velocity command inside `[-v_max, v_max]`.
pub fn squash_action(raw: &[f64], v_max: f64) -> Vec3 {
    Vec3::new(raw[0].tanh(), raw[1].tanh(), raw[2].tanh()) * v_max
}

/// Per-agent critic input: the agent's own observation followed by the global state.
pub fn critic_input(state: &EnvState, agent: usize) -> Vec<f64> {
    let mut x = state.observation(agent).to_vec();
    x.extend(state.global_state());
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f64>,
    pub critic_input: Vec<f64>,
    /// Raw (pre-squash) Gaussian sample.
    pub action: Vec<f64>,
    pub logprob_old: f64,
    pub reward: f64,
    pub value_old: f64,
    pub done: bool,
}

/// One agent's contiguous stretch of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrajectory {
    pub episode: usize,
    pub agent: usize,
    pub transitions: Vec<Transition>,
    /// Critic estimate after the last transition when the agent was still flying.
    pub bootstrap_value: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RolloutBuffer {
    pub trajectories: Vec<AgentTrajectory>,
    /// Flattened in trajectory order after [`RolloutBuffer::finalize`].
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
    pub episode_rewards: Vec<f64>,
    pub outcomes: Vec<EpisodeOutcome>,
    pub env_steps: usize,
}

impl RolloutBuffer {
    pub fn len(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> impl Iterator<Item = &Transition> {
        self.trajectories.iter().flat_map(|t| &t.transitions)
    }

    pub fn is_finalized(&self) -> bool {
        self.advantages.len() == self.len() && !self.is_empty()
    }

    /// Computes per-trajectory GAE advantages and returns, then optionally
    /// normalizes advantages over the whole batch.
    pub fn finalize(&mut self, gamma: f64, gae_lambda: f64, normalize: bool) -> Result<()> {
        self.advantages.clear();
        self.returns.clear();
        for traj in &self.trajectories {
            let rewards: Vec<f64> = traj.transitions.iter().map(|t| t.reward).collect();
            let values: Vec<f64> = traj.transitions.iter().map(|t| t.value_old).collect();
            let dones: Vec<bool> = traj.transitions.iter().map(|t| t.done).collect();
            let (adv, ret) = compute_gae(&rewards, &values, &dones, traj.bootstrap_value, gamma, gae_lambda)?;
            self.advantages.extend(adv);
            self.returns.extend(ret);
        }
        if normalize {
            normalize_in_place(&mut self.advantages);
        }
        Ok(())
    }
}

/// Zero mean, unit (population) variance; constant batches are only centered.
pub fn normalize_in_place(xs: &mut [f64]) {
    if xs.is_empty() {
        return;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter_mut().for_each(|x| *x -= mean);
    let std = (xs.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
    if std > 1e-12 {
        xs.iter_mut().for_each(|x| *x /= std);
    }
}

/// Generalized advantage estimation over one trajectory.
///
/// `delta_t = r_t + gamma V_{t+1} (1 - done_t) - V_t`,
/// `A_t = delta_t + gamma lambda (1 - done_t) A_{t+1}`, with `V_T = bootstrap`.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap_value: f64,
    gamma: f64,
    gae_lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = rewards.len();
    if values.len() != n || dones.len() != n {
        return Err(Error::Dimension {
            expected: n,
            got: if values.len() != n { values.len() } else { dones.len() },
        });
    }
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap_value;
    let mut next_adv = 0.0;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * gae_lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Per-sample clipped surrogate `min(rho A, clip(rho, 1-eps, 1+eps) A)`.
pub fn ppo_policy_objective(logprob_new: f64, logprob_old: f64, advantage: f64, clip_eps: f64) -> f64 {
    let ratio = (logprob_new - logprob_old).exp();
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (ratio * advantage).min(clipped * advantage)
}

/// Derivative of [`ppo_policy_objective`] with respect to `logprob_new`.
pub fn ppo_policy_objective_grad(logprob_new: f64, logprob_old: f64, advantage: f64, clip_eps: f64) -> f64 {
    let ratio = (logprob_new - logprob_old).exp();
    let clipped = ratio.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    if ratio * advantage <= clipped * advantage {
        ratio * advantage
    } else {
        0.0
    }
}

/// Clipped value loss for one sample: `0.5 max((v - R)^2, (v_old + clip(v - v_old) - R)^2)`.
pub fn value_loss_sample(value_new: f64, ret: f64, value_old: f64, clip_eps: f64) -> f64 {
    let clipped = value_old + (value_new - value_old).clamp(-clip_eps, clip_eps);
    0.5 * (value_new - ret).powi(2).max((clipped - ret).powi(2))
}

pub fn value_loss_sample_grad(value_new: f64, ret: f64, value_old: f64, clip_eps: f64) -> f64 {
    let diff = value_new - value_old;
    let clipped = value_old + diff.clamp(-clip_eps, clip_eps);
    let plain = (value_new - ret).powi(2);
    let clip_sq = (clipped - ret).powi(2);
    if plain >= clip_sq {
        value_new - ret
    } else if diff.abs() < clip_eps {
        clipped - ret
    } else {
        0.0
    }
}

/// Mean of the per-sample clipped value losses.
pub fn value_loss(values_new: &[f64], returns: &[f64], values_old: &[f64], clip_eps: f64) -> Result<f64> {
    if values_new.len() != returns.len() || values_old.len() != returns.len() {
        return Err(Error::Dimension {
            expected: returns.len(),
            got: values_new.len(),
        });
    }
    if returns.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = values_new
        .iter()
        .zip(returns)
        .zip(values_old)
        .map(|((v, r), o)| value_loss_sample(*v, *r, *o, clip_eps))
        .sum();
    Ok(total / returns.len() as f64)
}

/// Running mean and variance of value targets; the critic learns normalized targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueNormalizer {
    pub mean: f64,
    pub var: f64,
    pub count: f64,
}

impl Default for ValueNormalizer {
    fn default() -> Self {
        Self {
            mean: 0.0,
            var: 1.0,
            count: 0.0,
        }
    }
}

impl ValueNormalizer {
    fn std(&self) -> f64 {
        (self.var + 1e-8).sqrt()
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std()
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std() + self.mean
    }

    /// Merges batch statistics (Chan et al. parallel update).
    pub fn update(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        if self.count == 0.0 {
            self.mean = mean;
            self.var = var;
            self.count = n;
            return;
        }
        let total = self.count + n;
        let delta = mean - self.mean;
        let m2 = self.var * self.count + var * n + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.var = m2 / total;
        self.count = total;
    }
}

/// Per-iteration training record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub iteration: usize,
    pub mean_episode_reward: f64,
    pub value_loss: f64,
    pub policy_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub success_rate: f64,
    pub fallback_count: usize,
    pub episodes: usize,
    pub env_steps: usize,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    pub config: TrainConfig,
    pub policy: GaussianPolicy,
    pub critic: MlpParams,
    pub policy_adam: AdamState,
    pub critic_adam: AdamState,
    pub value_norm: ValueNormalizer,
    /// Completed iterations.
    pub iteration: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig, obs_dim: usize, critic_dim: usize) -> Result<Self> {
        config.validate()?;
        let policy = GaussianPolicy::new(
            obs_dim,
            &config.hidden,
            ACTION_DIM,
            config.init_log_std,
            derive_seed(config.seed, &[1]),
        )?;
        let mut dims = vec![critic_dim];
        dims.extend_from_slice(&config.hidden);
        dims.push(1);
        let critic = MlpParams::init(&dims, derive_seed(config.seed, &[2]))?;
        Ok(Self {
            policy_adam: AdamState::new(policy.flat_len(), config.lr),
            critic_adam: AdamState::new(critic.len(), config.lr),
            policy,
            critic,
            value_norm: ValueNormalizer::default(),
            iteration: 0,
            config,
        })
    }

    /// Builds a trainer sized for the environment produced by `factory`.
    pub fn for_env<F>(config: TrainConfig, factory: &F) -> Result<Self>
    where
        F: Fn(u64) -> Result<EnvState>,
    {
        let probe = factory(derive_seed(config.seed, &[0]))?;
        let obs_dim = probe.observation_len();
        let critic_dim = obs_dim + probe.global_state_len();
        Self::new(config, obs_dim, critic_dim)
    }

    pub fn value(&self, critic_input: &[f64]) -> Result<f64> {
        let (out, _) = self.critic.forward(critic_input)?;
        Ok(self.value_norm.denormalize(out[0]))
    }

    /// Runs whole seeded episodes until at least `rollout_steps` environment
    /// steps are collected, sampling every agent's action from the shared policy.
    pub fn collect_rollouts<F>(&self, factory: &F) -> Result<RolloutBuffer>
    where
        F: Fn(u64) -> Result<EnvState>,
    {
        let cfg = &self.config;
        let mut buffer = RolloutBuffer::default();
        let mut episode = 0usize;
        while buffer.env_steps < cfg.rollout_steps {
            let seed = derive_seed(cfg.seed, &[3, self.iteration as u64, episode as u64]);
            let mut env = factory(seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[4]));
            let n = env.num_agents();
            let horizon = env.config.horizon;
            let mut open: Vec<Vec<Transition>> = vec![Vec::new(); n];
            let mut episode_reward = vec![0.0; n];
            let mut finished: Vec<AgentTrajectory> = Vec::new();

            while !env.is_done() {
                let mut actions = vec![Vec3::ZERO; n];
                let mut pending: Vec<Option<Transition>> = vec![None; n];
                for i in 0..n {
                    if !env.drones[i].is_flying() {
                        continue;
                    }
                    let obs = env.observation(i).to_vec();
                    let mean = self.policy.mean(&obs)?;
                    let raw = nn::gaussian_sample(&mean, &self.policy.log_std, &mut rng);
                    let logprob_old = nn::gaussian_logprob(&mean, &self.policy.log_std, &raw);
                    let ci = critic_input(&env, i);
                    let value_old = self.value(&ci)?;
                    actions[i] = squash_action(&raw, env.world.drones[i].v_max);
                    pending[i] = Some(Transition {
                        obs,
                        critic_input: ci,
                        action: raw,
                        logprob_old,
                        reward: 0.0,
                        value_old,
                        done: false,
                    });
                }
                let step = env.step(&actions, cfg.use_filter)?;
                buffer.env_steps += 1;
                for i in 0..n {
                    let Some(mut tr) = pending[i].take() else {
                        continue;
                    };
                    episode_reward[i] += step.rewards[i].total;
                    tr.reward = step.rewards[i].total;
                    let status = env.drones[i].status;
                    if status != DroneStatus::Flying {
                        tr.done = true;
                        if status == DroneStatus::Landed {
                            // The landed drone keeps its touchdown reward until the horizon.
                            let remaining = horizon - env.step_count;
                            tr.reward += tr.reward * discounted_tail(cfg.gamma, remaining);
                            episode_reward[i] += step.rewards[i].total * remaining as f64;
                        }
                    }
                    open[i].push(tr);
                    if status != DroneStatus::Flying {
                        finished.push(AgentTrajectory {
                            episode,
                            agent: i,
                            transitions: std::mem::take(&mut open[i]),
                            bootstrap_value: 0.0,
                        });
                    }
                }
            }
            // Agents still flying at the horizon are truncated, not terminated.
            for (i, transitions) in open.into_iter().enumerate() {
                if transitions.is_empty() {
                    continue;
                }
                finished.push(AgentTrajectory {
                    episode,
                    agent: i,
                    transitions,
                    bootstrap_value: self.value(&critic_input(&env, i))?,
                });
            }
            // Fixed order: by agent, independent of termination order.
            finished.sort_by_key(|t| t.agent);
            buffer.trajectories.extend(finished);
            buffer
                .episode_rewards
                .push(episode_reward.iter().sum::<f64>() / n as f64);
            buffer.outcomes.push(env.outcome());
            episode += 1;
        }
        buffer.finalize(cfg.gamma, cfg.gae_lambda, cfg.normalize_advantages)?;
        Ok(buffer)
    }

    /// Clipped-surrogate update over a finalized buffer.
    pub fn ppo_update(&mut self, buffer: &RolloutBuffer) -> Result<UpdateStats> {
        if !buffer.is_finalized() {
            return Err(Error::invalid("rollout buffer is not finalized"));
        }
        let cfg = self.config.clone();
        let samples: Vec<&Transition> = buffer.samples().collect();
        let n = samples.len();
        let returns: Vec<f64> = buffer.returns.iter().map(|r| self.value_norm.normalize(*r)).collect();
        let olds: Vec<f64> = samples
            .iter()
            .map(|s| self.value_norm.normalize(s.value_old))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[5, self.iteration as u64]));
        let mut order: Vec<usize> = (0..n).collect();
        let batch = n.div_ceil(cfg.minibatches).max(1);
        let n_mean = self.policy.mean_net.len();

        let mut stats = UpdateAccumulator::default();
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let b = chunk.len() as f64;
                let mut pgrad = vec![0.0; self.policy.flat_len()];
                let mut cgrad = vec![0.0; self.critic.len()];
                let mut policy_obj = 0.0;
                let mut vloss = 0.0;
                let mut clipped = 0usize;
                for &k in chunk {
                    let s = samples[k];
                    let adv = buffer.advantages[k];
                    let (mean, cache) = self.policy.mean_net.forward(&s.obs)?;
                    let (lp, d_mean, d_log_std) = nn::gaussian_logprob_grad(&mean, &self.policy.log_std, &s.action);
                    policy_obj += ppo_policy_objective(lp, s.logprob_old, adv, cfg.clip_eps);
                    let ratio = (lp - s.logprob_old).exp();
                    if (ratio - 1.0).abs() > cfg.clip_eps {
                        clipped += 1;
                    }
                    let d_lp = -ppo_policy_objective_grad(lp, s.logprob_old, adv, cfg.clip_eps) / b;
                    if d_lp != 0.0 {
                        let out_grad: Vec<f64> = d_mean.iter().map(|g| g * d_lp).collect();
                        self.policy
                            .mean_net
                            .backward_into(&cache, &out_grad, &mut pgrad[..n_mean])?;
                        for (g, d) in pgrad[n_mean..].iter_mut().zip(&d_log_std) {
                            *g += d_lp * d;
                        }
                    }

                    let (v, vcache) = self.critic.forward(&s.critic_input)?;
                    vloss += value_loss_sample(v[0], returns[k], olds[k], cfg.clip_eps);
                    let dv = cfg.value_coef * value_loss_sample_grad(v[0], returns[k], olds[k], cfg.clip_eps) / b;
                    if dv != 0.0 {
                        self.critic.backward_into(&vcache, &[dv], &mut cgrad)?;
                    }
                }
                let entropy = nn::gaussian_entropy(&self.policy.log_std);
                for g in &mut pgrad[n_mean..] {
                    *g -= cfg.entropy_coef;
                }
                let policy_loss = -policy_obj / b;
                let vloss = vloss / b;
                let total = policy_loss + cfg.value_coef * vloss - cfg.entropy_coef * entropy;
                if !total.is_finite() {
                    return Err(Error::Diverged(format!(
                        "iteration {}: policy_loss={policy_loss} value_loss={vloss} entropy={entropy}",
                        self.iteration
                    )));
                }
                clip_grad_norm(&mut pgrad, cfg.max_grad_norm);
                clip_grad_norm(&mut cgrad, cfg.max_grad_norm);
                nn::adam_step_policy(&mut self.policy, &pgrad, &mut self.policy_adam)?;
                nn::adam_step(&mut self.critic.params, &cgrad, &mut self.critic_adam)?;
                stats.add(policy_loss, vloss, entropy, clipped as f64 / b);
            }
        }
        Ok(stats.finish())
    }

    /// One collect + update cycle.
    pub fn train_iteration<F>(&mut self, factory: &F) -> Result<TrainStats>
    where
        F: Fn(u64) -> Result<EnvState>,
    {
        let buffer = self.collect_rollouts(factory)?;
        self.value_norm.update(&buffer.returns);
        let update = self.ppo_update(&buffer)?;
        let drone_trials: usize = buffer.outcomes.iter().map(|o| o.drones.len()).sum();
        let landed: usize = buffer
            .outcomes
            .iter()
            .map(|o| o.drones.iter().filter(|d| d.success).count())
            .sum();
        let stats = TrainStats {
            iteration: self.iteration,
            mean_episode_reward: buffer.episode_rewards.iter().sum::<f64>() / buffer.episode_rewards.len() as f64,
            value_loss: update.value_loss,
            policy_loss: update.policy_loss,
            entropy: update.entropy,
            clip_fraction: update.clip_fraction,
            success_rate: 100.0 * landed as f64 / drone_trials.max(1) as f64,
            fallback_count: buffer.outcomes.iter().map(|o| o.fallback_count).sum(),
            episodes: buffer.outcomes.len(),
            env_steps: buffer.env_steps,
        };
        self.iteration += 1;
        Ok(stats)
    }

    /// Deterministic action (squashed policy mean) for every flying drone.
    pub fn act_deterministic(&self, env: &EnvState) -> Result<Vec<Vec3>> {
        deterministic_actions(&self.policy, env)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let adam = |a: &AdamState| vec![a.lr, a.beta1, a.beta2, a.eps];
        Checkpoint {
            seed: self.config.seed,
            iteration: self.iteration as u64,
            mlps: vec![
                ("actor".into(), self.policy.mean_net.clone()),
                ("critic".into(), self.critic.clone()),
            ],
            vectors: vec![
                ("log_std".into(), self.policy.log_std.clone()),
                ("actor_adam_hyper".into(), adam(&self.policy_adam)),
                ("actor_adam_m".into(), self.policy_adam.m.clone()),
                ("actor_adam_v".into(), self.policy_adam.v.clone()),
                ("critic_adam_hyper".into(), adam(&self.critic_adam)),
                ("critic_adam_m".into(), self.critic_adam.m.clone()),
                ("critic_adam_v".into(), self.critic_adam.v.clone()),
                (
                    "value_norm".into(),
                    vec![self.value_norm.mean, self.value_norm.var, self.value_norm.count],
                ),
            ],
            scalars: vec![
                ("actor_adam_step".into(), self.policy_adam.step),
                ("critic_adam_step".into(), self.critic_adam.step),
            ],
        }
    }

    pub fn from_checkpoint(config: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let adam = |prefix: &str| -> Result<AdamState> {
            let hyper = ck.vector(&format!("{prefix}_adam_hyper"))?;
            if hyper.len() != 4 {
                return Err(Error::Checkpoint(format!("{prefix}_adam_hyper needs 4 values")));
            }
            Ok(AdamState {
                lr: hyper[0],
                beta1: hyper[1],
                beta2: hyper[2],
                eps: hyper[3],
                step: ck.scalar(&format!("{prefix}_adam_step"))?,
                m: ck.vector(&format!("{prefix}_adam_m"))?.to_vec(),
                v: ck.vector(&format!("{prefix}_adam_v"))?.to_vec(),
            })
        };
        let policy = GaussianPolicy {
            mean_net: ck.mlp("actor")?.clone(),
            log_std: ck.vector("log_std")?.to_vec(),
        };
        let critic = ck.mlp("critic")?.clone();
        let (policy_adam, critic_adam) = (adam("actor")?, adam("critic")?);
        if policy_adam.m.len() != policy.flat_len() || critic_adam.m.len() != critic.len() {
            return Err(Error::Checkpoint("optimizer state does not match network size".into()));
        }
        let vn = ck.vector("value_norm")?;
        if vn.len() != 3 {
            return Err(Error::Checkpoint("value_norm needs 3 values".into()));
        }
        Ok(Self {
            config,
            policy,
            critic,
            policy_adam,
            critic_adam,
            value_norm: ValueNormalizer {
                mean: vn[0],
                var: vn[1],
                count: vn[2],
            },
            iteration: ck.iteration as usize,
        })
    }
}

/// Policy-mean actions for every flying drone; zeros for the rest.
pub fn deterministic_actions(policy: &GaussianPolicy, env: &EnvState) -> Result<Vec<Vec3>> {
    (0..env.num_agents())
        .map(|i| {
            if !env.drones[i].is_flying() {
                return Ok(Vec3::ZERO);
            }
            let mean = policy.mean(&env.observation(i).to_vec())?;
            Ok(squash_action(&mean, env.world.drones[i].v_max))
        })
        .collect()
}

/// `sum_{k=1..=steps} gamma^k`
fn discounted_tail(gamma: f64, steps: usize) -> f64 {
    if steps == 0 {
        return 0.0;
    }
    gamma * (1.0 - gamma.powi(steps as i32)) / (1.0 - gamma)
}

fn clip_grad_norm(grad: &mut [f64], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= s);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
}

#[derive(Default)]
struct UpdateAccumulator {
    sum: UpdateStats,
    count: usize,
}

impl UpdateAccumulator {
    fn add(&mut self, policy_loss: f64, value_loss: f64, entropy: f64, clip_fraction: f64) {
        self.sum.policy_loss += policy_loss;
        self.sum.value_loss += value_loss;
        self.sum.entropy += entropy;
        self.sum.clip_fraction += clip_fraction;
        self.count += 1;
    }

    fn finish(self) -> UpdateStats {
        let c = self.count.max(1) as f64;
        UpdateStats {
            policy_loss: self.sum.policy_loss / c,
            value_loss: self.sum.value_loss / c,
            entropy: self.sum.entropy / c,
            clip_fraction: self.sum.clip_fraction / c,
        }
    }
}

/// Alternates rollout collection and updates until `config.iterations` are done,
/// calling `on_iteration` after each one (checkpointing, logging).
pub fn train<F, H>(trainer: &mut Trainer, factory: &F, mut on_iteration: H) -> Result<Vec<TrainStats>>
where
    F: Fn(u64) -> Result<EnvState>,
    H: FnMut(&Trainer, &TrainStats) -> Result<()>,
{
    let mut series = Vec::new();
    while trainer.iteration < trainer.config.iterations {
        let stats = trainer.train_iteration(factory)?;
        on_iteration(trainer, &stats)?;
        series.push(stats);
    }
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gae_single_terminal_step() {
        let (a, r) = compute_gae(&[1.0], &[0.0], &[true], 0.0, 0.99, 0.95).unwrap();
        assert_eq!((a[0], r[0]), (1.0, 1.0));
    }

    #[test]
    fn gae_hand_unrolled() {
        let (a, r) = compute_gae(&[0.0, 1.0], &[0.5, 0.2], &[false, true], 0.0, 0.99, 0.95).unwrap();
        assert!((a[1] - 0.8).abs() < 1e-15);
        // delta_0 = 0 + 0.99 * 0.2 - 0.5 = -0.302
        assert!((a[0] - (-0.302 + 0.9405 * 0.8)).abs() < 1e-15);
        assert!((a[0] - 0.4504).abs() < 1e-12);
        assert!((r[0] - (a[0] + 0.5)).abs() < 1e-15);
    }

    #[test]
    fn gae_lambda_zero_is_td_error() {
        let rewards = [0.3, -1.0, 2.0];
        let values = [0.1, 0.4, -0.2];
        let dones = [false, false, false];
        let (a, _) = compute_gae(&rewards, &values, &dones, 0.7, 0.9, 0.0).unwrap();
        let next = [0.4, -0.2, 0.7];
        for t in 0..3 {
            assert_eq!(a[t], rewards[t] + 0.9 * next[t] - values[t]);
        }
    }

    #[test]
    fn gae_rejects_mismatch() {
        assert!(compute_gae(&[1.0, 2.0], &[0.0], &[false, true], 0.0, 0.99, 0.95).is_err());
    }

    #[test]
    fn clipped_objective_examples() {
        assert_eq!(ppo_policy_objective(-0.3, -0.3, 2.5, 0.2), 2.5);
        let lp = 1.5f64.ln();
        assert!((ppo_policy_objective(lp, 0.0, 1.0, 0.2) - 1.2).abs() < 1e-12);
        let lp = 0.5f64.ln();
        assert!((ppo_policy_objective(lp, 0.0, -1.0, 0.2) + 0.8).abs() < 1e-12);
    }

    #[test]
    fn value_loss_examples() {
        // v_new == R, with v_old inside the clip range so both branches agree.
        assert_eq!(value_loss(&[1.0, 2.0], &[1.0, 2.0], &[0.9, 2.1], 0.2).unwrap(), 0.0);
        let plain = value_loss(&[1.0, 3.0], &[0.0, 1.0], &[1.0, 3.0], 0.2).unwrap();
        assert_eq!(plain, (1.0 + 4.0) / 2.0 / 2.0);
        assert_eq!(value_loss(&[1.0], &[0.0], &[0.0], 0.2).unwrap(), 0.5);
    }

    #[test]
    fn normalizer_matches_batch_statistics() {
        let mut vn = ValueNormalizer::default();
        let a = [1.0, 2.0, 3.0];
        let b = [10.0, -4.0];
        vn.update(&a);
        vn.update(&b);
        let all: Vec<f64> = a.iter().chain(&b).copied().collect();
        let mean = all.iter().sum::<f64>() / 5.0;
        let var = all.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
        assert!((vn.mean - mean).abs() < 1e-12);
        assert!((vn.var - var).abs() < 1e-12);
        assert!((vn.denormalize(vn.normalize(3.7)) - 3.7).abs() < 1e-12);
    }

    #[test]
    fn advantage_normalization() {
        let mut xs = vec![1.0, 5.0, -2.0, 0.5];
        normalize_in_place(&mut xs);
        let m = xs.iter().sum::<f64>() / 4.0;
        let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
        assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-12);
        let mut zeros = vec![0.0; 3];
        normalize_in_place(&mut zeros);
        assert_eq!(zeros, vec![0.0; 3]);
    }

    #[test]
    fn tail_sum() {
        assert_eq!(discounted_tail(0.9, 0), 0.0);
        let brute: f64 = (1..=5).map(|k| 0.9f64.powi(k)).sum();
        assert!((discounted_tail(0.9, 5) - brute).abs() < 1e-12);
    }

    #[test]
    fn seeds_differ_by_part() {
        assert_ne!(derive_seed(1, &[0, 1]), derive_seed(1, &[1, 0]));
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
    }
}

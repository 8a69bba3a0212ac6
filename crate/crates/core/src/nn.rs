//! Dense MLP with hand-written backward pass, a diagonal Gaussian policy head
//! and Adam.
//!
//! Parameters live in one flat `Vec<f64>`: for each layer the row-major
//! `out x in` weight matrix followed by the bias vector. Gradients share the
//! same layout so optimizers work on plain slices.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    /// Layer widths, input first.
    pub dims: Vec<usize>,
    pub params: Vec<f64>,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpCache {
    /// Input to every layer; the last entry is the network output.
    activations: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds the output")
    }
}

fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpParams {
    pub fn zeros(dims: &[usize]) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer dims {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
            params: vec![0.0; param_count(dims)],
        })
    }

    /// Uniform `+/- sqrt(6 / (fan_in + fan_out))` weights, zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        let mut net = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for layer in 0..net.num_layers() {
            let (n_in, n_out) = (net.dims[layer], net.dims[layer + 1]);
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let (w, _) = net.layer_range(layer);
            for x in &mut net.params[w] {
                *x = rng.random_range(-bound..=bound);
            }
        }
        Ok(net)
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("at least two dims")
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Ranges of (weights, biases) for `layer` inside the flat buffer.
    pub fn layer_range(&self, layer: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.dims[..layer + 1]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (n_in, n_out) = (self.dims[layer], self.dims[layer + 1]);
        let w_end = start + n_in * n_out;
        (start..w_end, w_end..w_end + n_out)
    }

    pub fn scale_layer(&mut self, layer: usize, factor: f64) {
        let (w, _) = self.layer_range(layer);
        self.params[w].iter_mut().for_each(|x| *x *= factor);
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        if input.len() != self.input_dim() {
            return Err(Error::Dimension {
                expected: self.input_dim(),
                got: input.len(),
            });
        }
        let mut activations = Vec::with_capacity(self.dims.len());
        activations.push(input.to_vec());
        for layer in 0..self.num_layers() {
            let (w, b) = self.layer_range(layer);
            let (weights, biases) = (&self.params[w], &self.params[b]);
            let x = activations.last().expect("non-empty");
            let n_in = self.dims[layer];
            let last = layer + 1 == self.num_layers();
            let y: Vec<f64> = biases
                .iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let row = &weights[o * n_in..(o + 1) * n_in];
                    let z = row.iter().zip(x).fold(bias, |acc, (w, x)| acc + w * x);
                    if last {
                        z
                    } else {
                        z.tanh()
                    }
                })
                .collect();
            activations.push(y);
        }
        let out = activations.last().expect("non-empty").clone();
        Ok((out, MlpCache { activations }))
    }

    /// Accumulates parameter gradients into `param_grad` and returns the gradient
    /// with respect to the input.
    pub fn backward_into(
        &self,
        cache: &MlpCache,
        output_grad: &[f64],
        param_grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if output_grad.len() != self.output_dim() {
            return Err(Error::Dimension {
                expected: self.output_dim(),
                got: output_grad.len(),
            });
        }
        if param_grad.len() != self.len() || cache.activations.len() != self.dims.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                got: param_grad.len(),
            });
        }
        let mut delta = output_grad.to_vec();
        for layer in (0..self.num_layers()).rev() {
            let out = &cache.activations[layer + 1];
            if layer + 1 != self.num_layers() {
                // tanh' = 1 - tanh^2
                for (d, y) in delta.iter_mut().zip(out) {
                    *d *= 1.0 - y * y;
                }
            }
            let x = &cache.activations[layer];
            let n_in = self.dims[layer];
            let (w, b) = self.layer_range(layer);
            {
                let (gw, gb) = (w.clone(), b.clone());
                for (o, &d) in delta.iter().enumerate() {
                    param_grad[gb.start + o] += d;
                    let row = &mut param_grad[gw.start + o * n_in..gw.start + (o + 1) * n_in];
                    for (g, xi) in row.iter_mut().zip(x) {
                        *g += d * xi;
                    }
                }
            }
            let weights = &self.params[w];
            let mut next = vec![0.0; n_in];
            for (o, &d) in delta.iter().enumerate() {
                let row = &weights[o * n_in..(o + 1) * n_in];
                for (n, wi) in next.iter_mut().zip(row) {
                    *n += d * wi;
                }
            }
            delta = next;
        }
        Ok(delta)
    }

    /// Parameter gradient and input gradient for one sample.
    pub fn backward(&self, cache: &MlpCache, output_grad: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut grad = vec![0.0; self.len()];
        let input_grad = self.backward_into(cache, output_grad, &mut grad)?;
        Ok((grad, input_grad))
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|x| x.is_finite())
    }
}

/// Sum over dimensions of the diagonal Gaussian log-density.
pub fn gaussian_logprob(mean: &[f64], log_std: &[f64], action: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(action)
        .map(|((m, s), a)| {
            let z = (a - m) / s.exp();
            -0.5 * z * z - s - HALF_LN_2PI
        })
        .sum()
}

/// Log-density with its gradients with respect to the mean and to `log_std`.
pub fn gaussian_logprob_grad(mean: &[f64], log_std: &[f64], action: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let mut d_mean = Vec::with_capacity(mean.len());
    let mut d_log_std = Vec::with_capacity(mean.len());
    for ((m, s), a) in mean.iter().zip(log_std).zip(action) {
        let sigma = s.exp();
        let z = (a - m) / sigma;
        d_mean.push(z / sigma);
        d_log_std.push(z * z - 1.0);
    }
    (gaussian_logprob(mean, log_std, action), d_mean, d_log_std)
}

/// Entropy of the diagonal Gaussian; its gradient in each `log_std` is 1.
pub fn gaussian_entropy(log_std: &[f64]) -> f64 {
    log_std.iter().map(|s| 0.5 + HALF_LN_2PI + s).sum()
}

pub fn gaussian_sample<R: Rng + ?Sized>(mean: &[f64], log_std: &[f64], rng: &mut R) -> Vec<f64> {
    mean.iter()
        .zip(log_std)
        .map(|(m, s)| {
            let z: f64 = rng.sample(StandardNormal);
            m + s.exp() * z
        })
        .collect()
}

/// Shared actor: observation -> action mean, plus state-independent `log_std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPolicy {
    pub mean_net: MlpParams,
    pub log_std: Vec<f64>,
}

impl GaussianPolicy {
    pub fn new(obs_dim: usize, hidden: &[usize], action_dim: usize, init_log_std: f64, seed: u64) -> Result<Self> {
        let mut dims = vec![obs_dim];
        dims.extend_from_slice(hidden);
        dims.push(action_dim);
        let mut mean_net = MlpParams::init(&dims, seed)?;
        // Small output layer so the initial policy is centered on zero.
        mean_net.scale_layer(mean_net.num_layers() - 1, 0.01);
        Ok(Self {
            mean_net,
            log_std: vec![init_log_std.clamp(LOG_STD_MIN, LOG_STD_MAX); action_dim],
        })
    }

    pub fn action_dim(&self) -> usize {
        self.log_std.len()
    }

    pub fn mean(&self, obs: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mean_net.forward(obs)?.0)
    }

    pub fn clamp_log_std(&mut self) {
        for s in &mut self.log_std {
            *s = s.clamp(LOG_STD_MIN, LOG_STD_MAX);
        }
    }

    /// Mean-net parameters followed by `log_std`.
    pub fn flat_len(&self) -> usize {
        self.mean_net.len() + self.log_std.len()
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension {
            expected: state.m.len(),
            got: grads.len(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

/// Adam over the policy's mean net and `log_std`, clamping `log_std` afterwards.
pub fn adam_step_policy(policy: &mut GaussianPolicy, grads: &[f64], state: &mut AdamState) -> Result<()> {
    let mut flat = policy.mean_net.params.clone();
    flat.extend_from_slice(&policy.log_std);
    adam_step(&mut flat, grads, state)?;
    let n = policy.mean_net.len();
    policy.mean_net.params.copy_from_slice(&flat[..n]);
    policy.log_std.copy_from_slice(&flat[n..]);
    policy.clamp_log_std();
    Ok(())
}

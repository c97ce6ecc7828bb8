//! Action selection: one-step greedy lookahead, random, and the learned policy.

pub mod net;
pub mod ppo;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{EnvSpec, EpisodeState, Observation};
use crate::error::{Error, Result};
pub use net::{InputShape, NetConfig, ParamSlot, PolicyNet};

/// Network input geometry for an environment: the full-size crop plus one
/// condition plane per controlled metric.
pub fn input_shape(spec: &EnvSpec) -> InputShape {
    InputShape {
        height: 2 * spec.domain.height - 1,
        width: 2 * spec.domain.width - 1,
        channels: spec.domain.alphabet().len() + spec.control.controlled().len(),
    }
}

pub fn net_for_env(config: NetConfig, spec: &EnvSpec) -> PolicyNet {
    PolicyNet::new(config, input_shape(spec), spec.action_count())
}

/// Action minimising the loss after one step. Ties go to the no-op, then to
/// the lowest action index.
pub fn greedy_act(state: &EpisodeState) -> Result<usize> {
    let mut best = 0;
    let mut best_loss = state.preview_loss(0)?;
    for a in 1..state.spec().action_count() {
        let l = state.preview_loss(a)?;
        if l < best_loss {
            best = a;
            best_loss = l;
        }
    }
    Ok(best)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    #[default]
    Sample,
    Argmax,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-5;

/// Network plus weights and optimiser moments.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub net: PolicyNet,
    pub weights: Vec<f64>,
    pub adam: AdamState,
}

impl PolicyParams {
    pub fn init(net: PolicyNet, seed: u64) -> Self {
        let weights = net.init_params(seed);
        let n = weights.len();
        Self {
            net,
            weights,
            adam: AdamState {
                m: vec![0.0; n],
                v: vec![0.0; n],
                t: 0,
            },
        }
    }

    /// One Adam step after clipping the global gradient norm. Weights are kept
    /// at single precision so they survive a checkpoint round-trip unchanged.
    pub fn apply_gradient(&mut self, grad: &[f64], lr: f64, max_norm: f64) {
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = if max_norm > 0.0 && norm > max_norm {
            max_norm / (norm + 1e-12)
        } else {
            1.0
        };
        let a = &mut self.adam;
        a.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(a.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(a.t as i32);
        for i in 0..grad.len() {
            let g = grad[i] * scale;
            a.m[i] = ADAM_BETA1 * a.m[i] + (1.0 - ADAM_BETA1) * g;
            a.v[i] = ADAM_BETA2 * a.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let mhat = a.m[i] / bc1;
            let vhat = a.v[i] / bc2;
            let w = self.weights[i] - lr * mhat / (vhat.sqrt() + ADAM_EPS);
            self.weights[i] = w as f32 as f64;
        }
    }

    /// Action probabilities and value estimate for one observation.
    pub fn evaluate(&self, obs: &Observation) -> Result<(Vec<f64>, f64)> {
        let x = self.net.encode(obs);
        let pass = self.net.forward(&self.weights, &x, 1);
        let logp = net::log_softmax(&pass.logits);
        let probs: Vec<f64> = logp.row(0).iter().map(|l| l.exp()).collect();
        let value = pass.values[0];
        if probs.iter().any(|p| !p.is_finite()) || !value.is_finite() {
            return Err(Error::Divergence(
                "policy produced non-finite output".into(),
            ));
        }
        Ok((probs, value))
    }
}

/// Draws an index from a probability vector.
pub fn sample_index<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>() * probs.iter().sum::<f64>();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ActOutput {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
}

/// Chooses an action from precomputed probabilities.
pub fn choose<R: Rng + ?Sized>(probs: &[f64], value: f64, mode: ActMode, rng: &mut R) -> ActOutput {
    let action = match mode {
        ActMode::Argmax => argmax(probs),
        ActMode::Sample => sample_index(probs, rng),
    };
    ActOutput {
        action,
        log_prob: probs[action].ln(),
        value,
    }
}

/// Single action from the policy; `seed` drives sampling.
pub fn act(
    params: &PolicyParams,
    obs: &Observation,
    mode: ActMode,
    seed: u64,
) -> Result<ActOutput> {
    let (probs, value) = params.evaluate(obs)?;
    Ok(choose(
        &probs,
        value,
        mode,
        &mut ChaCha8Rng::seed_from_u64(seed),
    ))
}

pub trait Agent: Send + Sync {
    fn act(&self, state: &EpisodeState, rng: &mut ChaCha8Rng) -> Result<usize>;
}

#[derive(Copy, Clone, Debug, Default)]
pub struct GreedyAgent;

impl Agent for GreedyAgent {
    fn act(&self, state: &EpisodeState, _rng: &mut ChaCha8Rng) -> Result<usize> {
        greedy_act(state)
    }
}

#[derive(Copy, Clone, Debug, Default)]
pub struct RandomAgent;

impl Agent for RandomAgent {
    fn act(&self, state: &EpisodeState, rng: &mut ChaCha8Rng) -> Result<usize> {
        Ok(rng.random_range(0..state.spec().action_count()))
    }
}

#[derive(Clone, Debug)]
pub struct PolicyAgent {
    pub params: PolicyParams,
    pub mode: ActMode,
}

impl Agent for PolicyAgent {
    fn act(&self, state: &EpisodeState, rng: &mut ChaCha8Rng) -> Result<usize> {
        let (probs, value) = self.params.evaluate(&state.observation())?;
        Ok(choose(&probs, value, self.mode, rng).action)
    }
}

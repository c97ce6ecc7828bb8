//! Clipped-surrogate policy optimisation: advantage estimation, the loss and
//! its analytic gradient at the network outputs, and the minibatch update loop.

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::net::{gather_rows, log_softmax, PolicyNet};
use super::PolicyParams;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip_eps: f64,
    pub ent_coef: f64,
    pub vf_coef: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub minibatches: usize,
    pub max_grad_norm: f64,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 0.95,
            clip_eps: 0.2,
            ent_coef: 0.01,
            vf_coef: 0.5,
            learning_rate: 2.5e-4,
            epochs: 4,
            minibatches: 4,
            max_grad_norm: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    /// Encoded observation.
    pub obs: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    /// The episode ended with this transition.
    pub done: bool,
}

/// Consecutive transitions of one worker. If the last one is not terminal,
/// `bootstrap_value` estimates the return from the state that follows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Trajectory {
    pub transitions: Vec<Transition>,
    pub bootstrap_value: f64,
}

/// Generalised advantage estimates and the matching value targets.
pub fn gae(traj: &Trajectory, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = traj.transitions.len();
    let mut adv = vec![0.0; n];
    let mut next_value = traj.bootstrap_value;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let tr = &traj.transitions[t];
        let live = if tr.done { 0.0 } else { 1.0 };
        let delta = tr.reward + gamma * next_value * live - tr.value;
        running = delta + gamma * lambda * live * running;
        adv[t] = running;
        next_value = tr.value;
    }
    let returns = adv
        .iter()
        .zip(&traj.transitions)
        .map(|(a, tr)| a + tr.value)
        .collect();
    (adv, returns)
}

/// Flattened training data.
#[derive(Clone, Debug, Default)]
pub struct Batch {
    pub obs: Vec<f64>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn from_trajectories(trajs: &[Trajectory], gamma: f64, lambda: f64) -> Self {
        let mut b = Batch::default();
        for traj in trajs {
            let (adv, ret) = gae(traj, gamma, lambda);
            for (tr, (a, r)) in traj.transitions.iter().zip(adv.into_iter().zip(ret)) {
                b.obs.extend_from_slice(&tr.obs);
                b.actions.push(tr.action);
                b.old_log_probs.push(tr.log_prob);
                b.advantages.push(a);
                b.returns.push(r);
            }
        }
        b
    }

    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len() as f64;
        if n == 0.0 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n;
        let var = self
            .advantages
            .iter()
            .map(|a| (a - mean).powi(2))
            .sum::<f64>()
            / n;
        let std = var.sqrt();
        for a in &mut self.advantages {
            *a = (*a - mean) / (std + 1e-8);
        }
    }

    pub fn subset(&self, idx: &[usize], row_len: usize) -> Batch {
        Batch {
            obs: gather_rows(&self.obs, row_len, idx),
            actions: idx.iter().map(|i| self.actions[*i]).collect(),
            old_log_probs: idx.iter().map(|i| self.old_log_probs[*i]).collect(),
            advantages: idx.iter().map(|i| self.advantages[*i]).collect(),
            returns: idx.iter().map(|i| self.returns[*i]).collect(),
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq)]
pub struct LossCoefs {
    pub clip_eps: f64,
    pub vf_coef: f64,
    pub ent_coef: f64,
}

impl From<&PpoConfig> for LossCoefs {
    fn from(c: &PpoConfig) -> Self {
        Self {
            clip_eps: c.clip_eps,
            vf_coef: c.vf_coef,
            ent_coef: c.ent_coef,
        }
    }
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

impl LossParts {
    pub fn total(&self, c: &LossCoefs) -> f64 {
        self.policy + c.vf_coef * self.value - c.ent_coef * self.entropy
    }
}

/// Loss terms and their gradient with respect to the logits and values.
///
/// `policy = -mean(min(r A, clip(r, 1-e, 1+e) A))`, `value = mean((V - R)^2) / 2`,
/// `entropy = mean(H(pi))`; the total is `policy + vf * value - ent * entropy`.
pub fn loss_at_outputs(
    logits: &Array2<f64>,
    values: &Array1<f64>,
    batch: &Batch,
    c: &LossCoefs,
) -> (LossParts, Array2<f64>, Array1<f64>) {
    let n = batch.len();
    let nf = n as f64;
    let logp = log_softmax(logits);
    let mut dlogits = Array2::zeros(logits.raw_dim());
    let mut dvalues = Array1::zeros(n);
    let mut parts = LossParts::default();
    for i in 0..n {
        let row = logp.row(i);
        let a = batch.actions[i];
        let adv = batch.advantages[i];
        let log_ratio = row[a] - batch.old_log_probs[i];
        let ratio = log_ratio.exp();
        let surr1 = ratio * adv;
        let surr2 = ratio.clamp(1.0 - c.clip_eps, 1.0 + c.clip_eps) * adv;
        parts.policy -= surr1.min(surr2) / nf;
        // d(-min)/dlogp; zero where the clipped branch is strictly smaller
        let g_logp = if surr1 <= surr2 { -surr1 } else { 0.0 };
        parts.approx_kl += ((ratio - 1.0) - log_ratio) / nf;
        if (ratio - 1.0).abs() > c.clip_eps {
            parts.clip_fraction += 1.0 / nf;
        }

        let entropy: f64 = -row.iter().map(|lp| lp.exp() * lp).sum::<f64>();
        parts.entropy += entropy / nf;

        for (j, lp) in row.iter().enumerate() {
            let p = lp.exp();
            let onehot = if j == a { 1.0 } else { 0.0 };
            // policy term through log pi(a)
            let mut d = g_logp * (onehot - p);
            // -ent * H, with dH/dz_j = -p_j (log p_j + H)
            d += c.ent_coef * p * (lp + entropy);
            dlogits[[i, j]] = d / nf;
        }

        let err = values[i] - batch.returns[i];
        parts.value += 0.5 * err * err / nf;
        dvalues[i] = c.vf_coef * err / nf;
    }
    (parts, dlogits, dvalues)
}

/// Loss and full parameter gradient on one minibatch.
pub fn loss_and_grad(
    net: &PolicyNet,
    params: &[f64],
    batch: &Batch,
    c: &LossCoefs,
) -> (LossParts, Vec<f64>) {
    let pass = net.forward(params, &batch.obs, batch.len());
    let (parts, dl, dv) = loss_at_outputs(&pass.logits, &pass.values, batch, c);
    let grad = net.backward(params, &pass, &dl, &dv);
    (parts, grad)
}

/// Loss only, for finite-difference checks.
pub fn loss_value(net: &PolicyNet, params: &[f64], batch: &Batch, c: &LossCoefs) -> LossParts {
    let pass = net.forward(params, &batch.obs, batch.len());
    loss_at_outputs(&pass.logits, &pass.values, batch, c).0
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    /// Measured on the whole batch after the last gradient step.
    pub approx_kl: f64,
    pub clip_fraction: f64,
    pub grad_steps: u64,
}

/// Several epochs of shuffled minibatch steps on `trajs`. On a non-finite loss
/// the parameters are rolled back and a divergence error is returned.
pub fn ppo_update<R: Rng + ?Sized>(
    params: &mut PolicyParams,
    trajs: &[Trajectory],
    cfg: &PpoConfig,
    rng: &mut R,
) -> Result<UpdateStats> {
    let mut batch = Batch::from_trajectories(trajs, cfg.gamma, cfg.gae_lambda);
    if batch.is_empty() {
        return Err(Error::Config(
            "ppo update needs at least one transition".into(),
        ));
    }
    batch.normalize_advantages();
    let coefs = LossCoefs::from(cfg);
    let row_len = params.net.input.len();
    let snapshot = params.clone();
    let n = batch.len();
    let per = n.div_ceil(cfg.minibatches.max(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut stats = UpdateStats::default();
    let mut count = 0.0;
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(per) {
            let mb = batch.subset(chunk, row_len);
            let (parts, grad) = loss_and_grad(&params.net, &params.weights, &mb, &coefs);
            let total = parts.total(&coefs);
            if !total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                *params = snapshot;
                return Err(Error::Divergence(format!("non-finite loss {total}")));
            }
            params.apply_gradient(&grad, cfg.learning_rate, cfg.max_grad_norm);
            stats.policy_loss += parts.policy;
            stats.value_loss += parts.value;
            stats.entropy += parts.entropy;
            stats.clip_fraction += parts.clip_fraction;
            stats.grad_steps += 1;
            count += 1.0;
        }
    }
    if count > 0.0 {
        stats.policy_loss /= count;
        stats.value_loss /= count;
        stats.entropy /= count;
        stats.clip_fraction /= count;
    }
    stats.approx_kl = loss_value(&params.net, &params.weights, &batch, &coefs).approx_kl;
    if !stats.approx_kl.is_finite() {
        *params = snapshot;
        return Err(Error::Divergence("non-finite policy after update".into()));
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tr(reward: f64, value: f64, done: bool) -> Transition {
        Transition {
            obs: vec![],
            action: 0,
            log_prob: 0.0,
            reward,
            value,
            done,
        }
    }

    #[test]
    fn gae_undiscounted_is_return_minus_value() {
        let traj = Trajectory {
            transitions: vec![
                tr(1.0, 0.5, false),
                tr(-2.0, 0.1, false),
                tr(3.0, 0.7, true),
            ],
            bootstrap_value: 99.0,
        };
        let (adv, ret) = gae(&traj, 1.0, 1.0);
        let rewards = [1.0, -2.0, 3.0];
        for t in 0..3 {
            let g: f64 = rewards[t..].iter().sum();
            assert!((adv[t] - (g - traj.transitions[t].value)).abs() < 1e-12);
            assert!((ret[t] - g).abs() < 1e-12);
        }
    }

    #[test]
    fn gae_zero_and_single_step() {
        let traj = Trajectory {
            transitions: vec![tr(0.0, 0.0, false); 5],
            bootstrap_value: 0.0,
        };
        assert!(gae(&traj, 0.99, 0.95).0.iter().all(|a| *a == 0.0));
        let traj = Trajectory {
            transitions: vec![tr(2.0, 0.5, true)],
            bootstrap_value: 7.0,
        };
        assert!((gae(&traj, 0.99, 0.95).0[0] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn gae_masks_episode_boundaries() {
        // second episode's values must not leak into the first
        let traj = Trajectory {
            transitions: vec![tr(1.0, 0.0, true), tr(0.0, 10.0, false)],
            bootstrap_value: 10.0,
        };
        let (adv, _) = gae(&traj, 0.9, 0.9);
        assert!((adv[0] - 1.0).abs() < 1e-12);
        assert!((adv[1] - (0.9 * 10.0 - 10.0)).abs() < 1e-12);
    }

    #[test]
    fn truncated_segment_bootstraps() {
        let traj = Trajectory {
            transitions: vec![tr(1.0, 0.0, false)],
            bootstrap_value: 2.0,
        };
        let (adv, _) = gae(&traj, 0.5, 1.0);
        assert!((adv[0] - 2.0).abs() < 1e-12);
    }
}

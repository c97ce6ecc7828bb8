mod common;

use common::{gradient_check_errors, random_batch, toy_net};
use condgen_core::agent::net::log_softmax;
use condgen_core::agent::ppo::{ppo_update, Batch, PpoConfig, Trajectory, Transition};
use condgen_core::agent::{InputShape, NetConfig, PolicyNet, PolicyParams};
use condgen_core::Error;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn gradient_check_each_term() {
    for (name, err) in gradient_check_errors() {
        assert!(err < 1e-4, "{name}: max relative error {err}");
    }
}

#[test]
fn unclipped_single_step_is_vanilla_policy_gradient() {
    let net = toy_net();
    let start = PolicyParams::init(net.clone(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let n = 12;
    let batch0 = random_batch(&net, &start.weights, n, 0.0, 4);
    let transitions: Vec<Transition> = (0..n)
        .map(|i| Transition {
            obs: batch0.obs[i * net.input.len()..(i + 1) * net.input.len()].to_vec(),
            action: batch0.actions[i],
            log_prob: batch0.old_log_probs[i],
            reward: rng.random_range(-1.0..1.0),
            value: rng.random_range(-0.5..0.5),
            done: i % 5 == 4,
        })
        .collect();
    let traj = Trajectory {
        transitions,
        bootstrap_value: 0.3,
    };
    let cfg = PpoConfig {
        clip_eps: f64::INFINITY,
        epochs: 1,
        minibatches: 1,
        ent_coef: 0.0,
        vf_coef: 0.0,
        ..PpoConfig::default()
    };
    let mut updated = start.clone();
    ppo_update(
        &mut updated,
        std::slice::from_ref(&traj),
        &cfg,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .unwrap();

    // oracle: gradient of -mean(A * log pi(a|s)) with normalised GAE advantages
    let mut b = Batch::from_trajectories(std::slice::from_ref(&traj), cfg.gamma, cfg.gae_lambda);
    b.normalize_advantages();
    let pass = net.forward(&start.weights, &b.obs, n);
    let logp = log_softmax(&pass.logits);
    let mut dlogits = Array2::zeros((n, net.actions));
    for i in 0..n {
        for j in 0..net.actions {
            let onehot = if j == b.actions[i] { 1.0 } else { 0.0 };
            dlogits[[i, j]] = -b.advantages[i] * (onehot - logp[[i, j]].exp()) / n as f64;
        }
    }
    let grad = net.backward(&start.weights, &pass, &dlogits, &ndarray::Array1::zeros(n));
    let mut oracle = start.clone();
    oracle.apply_gradient(&grad, cfg.learning_rate, cfg.max_grad_norm);
    let diff = oracle
        .weights
        .iter()
        .zip(&updated.weights)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // both sides round to f32; allow one ulp at the largest magnitude
    assert!(diff <= 1e-6, "max weight difference {diff}");
}

fn flat_trajectory(net: &PolicyNet, params: &PolicyParams, n: usize, seed: u64) -> Trajectory {
    let b = random_batch(net, &params.weights, n, 0.0, seed);
    let pass = net.forward(&params.weights, &b.obs, n);
    Trajectory {
        transitions: (0..n)
            .map(|i| Transition {
                obs: b.obs[i * net.input.len()..(i + 1) * net.input.len()].to_vec(),
                action: b.actions[i],
                log_prob: b.old_log_probs[i],
                reward: 0.0,
                value: pass.values[i],
                done: true,
            })
            .collect(),
        bootstrap_value: 0.0,
    }
}

#[test]
fn zero_advantage_and_exact_values_leave_params() {
    let net = toy_net();
    let start = PolicyParams::init(net.clone(), 6);
    // reward 0 and done everywhere: targets are 0, so make values 0 by zeroing the value head
    let mut start = start;
    let value_slots: Vec<_> = net
        .slots()
        .iter()
        .filter(|s| s.name.starts_with("value"))
        .cloned()
        .collect();
    for s in value_slots {
        for v in &mut start.weights[s.offset..s.offset + s.len()] {
            *v = 0.0;
        }
    }
    let traj = flat_trajectory(&net, &start, 20, 3);
    assert!(traj.transitions.iter().all(|t| t.value == 0.0));
    let cfg = PpoConfig {
        ent_coef: 0.0,
        ..PpoConfig::default()
    };
    let mut p = start.clone();
    ppo_update(&mut p, &[traj], &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let change = p
        .weights
        .iter()
        .zip(&start.weights)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(change < 1e-6, "parameter change {change}");
}

#[test]
fn approx_kl_small_after_default_update() {
    let net = PolicyNet::new(
        NetConfig::default(),
        InputShape {
            height: 15,
            width: 15,
            channels: 3,
        },
        3,
    );
    let mut p = PolicyParams::init(net.clone(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut traj = flat_trajectory(&net, &p, 256, 21);
    for t in &mut traj.transitions {
        t.reward = rng.random_range(-1.0..1.0);
        t.done = rng.random_bool(0.1);
    }
    let stats = ppo_update(&mut p, &[traj], &PpoConfig::default(), &mut rng).unwrap();
    assert!(
        stats.approx_kl >= 0.0 && stats.approx_kl < 0.05,
        "approx_kl {}",
        stats.approx_kl
    );
    assert_eq!(stats.grad_steps, 16);
}

#[test]
fn non_finite_loss_restores_params() {
    let net = toy_net();
    let start = PolicyParams::init(net.clone(), 2);
    let mut traj = flat_trajectory(&net, &start, 8, 5);
    traj.transitions[3].reward = f64::NAN;
    let mut p = start.clone();
    let res = ppo_update(
        &mut p,
        &[traj],
        &PpoConfig::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
    );
    assert!(matches!(res, Err(Error::Divergence(_))));
    assert_eq!(p, start);
}

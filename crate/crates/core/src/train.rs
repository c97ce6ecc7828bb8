//! Rollout and update loop.
//!
//! Workers advance in lockstep: one batched forward pass picks every worker's
//! action, the environments then step in parallel, and finished episodes are
//! reported to the teacher in worker order before new goals are drawn.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::net::log_softmax;
use crate::agent::ppo::{ppo_update, Trajectory, Transition, UpdateStats};
use crate::agent::{choose, net_for_env, ActMode, PolicyParams};
use crate::checkpoint::{Checkpoint, RngStates, TrainMeta};
use crate::config::RunConfig;
use crate::curriculum::{Teacher, TeacherStats};
use crate::env::{to_f64, EnvSpec, EpisodeState};
use crate::error::{Error, Result};
use crate::eval::episode_outcome;
use crate::par::{self, mix_seed, Execution};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.ndjson";

struct Worker {
    state: EpisodeState,
    obs: Vec<f64>,
    rng: ChaCha8Rng,
    ep_return: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub update: u64,
    pub frames: u64,
    pub episodes: u64,
    /// Episodes finished during this update's rollout.
    pub finished: u64,
    pub mean_return: Option<f64>,
    pub mean_progress: Option<f64>,
    pub stats: UpdateStats,
    pub teacher: TeacherStats,
}

pub struct Trainer {
    config: RunConfig,
    env: Arc<EnvSpec>,
    params: PolicyParams,
    teacher: Teacher,
    workers: Vec<Worker>,
    rng: ChaCha8Rng,
    meta: TrainMeta,
    exec: Execution,
}

impl Trainer {
    pub fn new(config: &RunConfig, exec: Execution) -> Result<Self> {
        config.validate()?;
        let env = config.env_spec()?;
        let net = net_for_env(config.training.net.clone(), &env);
        let params = PolicyParams::init(net, mix_seed(config.seed, 1));
        let teacher = Teacher::new(
            config.teacher.clone(),
            env.control.bounds(),
            mix_seed(config.seed, 2),
        );
        let rngs = RngStates {
            trainer: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3)),
            workers: (0..config.training.workers)
                .map(|i| ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 100 + i as u64)))
                .collect(),
        };
        Self::assemble(
            config,
            env,
            params,
            teacher,
            rngs,
            TrainMeta::default(),
            exec,
        )
    }

    /// Continues from a checkpoint whose config hash matches `config`.
    pub fn resume(config: &RunConfig, ckpt: Checkpoint, exec: Execution) -> Result<Self> {
        config.validate()?;
        let env = config.env_spec()?;
        let expected = net_for_env(config.training.net.clone(), &env);
        if ckpt.params.net != expected {
            return Err(Error::Checkpoint(
                "checkpoint network does not match the configuration".into(),
            ));
        }
        let teacher = match ckpt.teacher {
            Some(t) => t,
            None => Teacher::new(
                config.teacher.clone(),
                env.control.bounds(),
                mix_seed(config.seed, 2),
            ),
        };
        let mut rngs = ckpt.rngs.unwrap_or_else(|| RngStates {
            trainer: ChaCha8Rng::seed_from_u64(mix_seed(config.seed, 3 + ckpt.meta.updates)),
            workers: Vec::new(),
        });
        while rngs.workers.len() < config.training.workers {
            let i = rngs.workers.len() as u64;
            rngs.workers.push(ChaCha8Rng::seed_from_u64(mix_seed(
                config.seed ^ ckpt.meta.updates,
                100 + i,
            )));
        }
        rngs.workers.truncate(config.training.workers);
        Self::assemble(config, env, ckpt.params, teacher, rngs, ckpt.meta, exec)
    }

    fn assemble(
        config: &RunConfig,
        env: Arc<EnvSpec>,
        params: PolicyParams,
        mut teacher: Teacher,
        rngs: RngStates,
        meta: TrainMeta,
        exec: Execution,
    ) -> Result<Self> {
        let mut workers = Vec::with_capacity(rngs.workers.len());
        for mut rng in rngs.workers {
            let goal = teacher.sample();
            let (state, obs) = EpisodeState::reset(env.clone(), goal, rng.random())?;
            workers.push(Worker {
                obs: params.net.encode(&obs),
                state,
                rng,
                ep_return: 0.0,
            });
        }
        Ok(Self {
            config: config.clone(),
            env,
            params,
            teacher,
            workers,
            rng: rngs.trainer,
            meta,
            exec,
        })
    }

    pub fn params(&self) -> &PolicyParams {
        &self.params
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    pub fn meta(&self) -> &TrainMeta {
        &self.meta
    }

    pub fn env(&self) -> &Arc<EnvSpec> {
        &self.env
    }

    pub fn finished(&self) -> bool {
        self.meta.frames >= self.config.training.total_frames
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.canonical_hash(),
            params: self.params.clone(),
            teacher: Some(self.teacher.clone()),
            rngs: Some(RngStates {
                trainer: self.rng.clone(),
                workers: self.workers.iter().map(|w| w.rng.clone()).collect(),
            }),
            meta: self.meta.clone(),
        }
    }

    /// Collects one segment per worker and applies one clipped update.
    pub fn update(&mut self) -> Result<UpdateRecord> {
        let seg = self.config.training.segment_length;
        let n = self.workers.len();
        let row = self.params.net.input.len();
        let mut trajs: Vec<Trajectory> = vec![Trajectory::default(); n];
        let mut returns = Vec::new();
        let mut outcomes = Vec::new();

        for _ in 0..seg {
            let mut batch = Vec::with_capacity(n * row);
            for w in &self.workers {
                batch.extend_from_slice(&w.obs);
            }
            let pass = self.params.net.forward(&self.params.weights, &batch, n);
            let logp = log_softmax(&pass.logits);
            let mut picks = Vec::with_capacity(n);
            for (i, w) in self.workers.iter_mut().enumerate() {
                let probs: Vec<f64> = logp.row(i).iter().map(|l| l.exp()).collect();
                let value = pass.values[i];
                if probs.iter().any(|p| !p.is_finite()) || !value.is_finite() {
                    return Err(Error::Divergence(
                        "policy produced non-finite output".into(),
                    ));
                }
                picks.push(choose(&probs, value, ActMode::Sample, &mut w.rng));
            }

            let net = &self.params.net;
            let steps: Vec<Result<(f64, bool, Vec<f64>)>> = {
                let mut items: Vec<(&mut Worker, usize)> = self
                    .workers
                    .iter_mut()
                    .zip(picks.iter().map(|p| p.action))
                    .collect();
                par::map_mut(self.exec, &mut items, |(w, a)| {
                    let r = w.state.step(*a)?;
                    let reward = to_f64(r.reward);
                    w.ep_return += reward;
                    Ok((reward, r.done, net.encode(&r.observation)))
                })
            };

            for (i, res) in steps.into_iter().enumerate() {
                let (reward, done, next_obs) = res?;
                let w = &mut self.workers[i];
                let obs = std::mem::replace(&mut w.obs, next_obs);
                trajs[i].transitions.push(Transition {
                    obs,
                    action: picks[i].action,
                    log_prob: picks[i].log_prob,
                    reward,
                    value: picks[i].value,
                    done,
                });
                if done {
                    let s = &w.state;
                    let outcome = episode_outcome(
                        s.initial_metrics(),
                        s.metrics(),
                        s.goal(),
                        &self.env.control,
                    );
                    self.teacher.record(s.goal(), outcome);
                    returns.push(w.ep_return);
                    outcomes.push(outcome);
                    self.meta.episodes += 1;
                    let goal = self.teacher.sample();
                    let (state, obs) = EpisodeState::reset(self.env.clone(), goal, w.rng.random())?;
                    w.state = state;
                    w.obs = self.params.net.encode(&obs);
                    w.ep_return = 0.0;
                }
            }
            self.meta.frames += n as u64;
        }

        let mut batch = Vec::with_capacity(n * row);
        for w in &self.workers {
            batch.extend_from_slice(&w.obs);
        }
        let tail = self.params.net.forward(&self.params.weights, &batch, n);
        for (i, t) in trajs.iter_mut().enumerate() {
            t.bootstrap_value = tail.values[i];
        }

        let stats = ppo_update(
            &mut self.params,
            &trajs,
            &self.config.training.ppo,
            &mut self.rng,
        )?;
        self.meta.updates += 1;
        let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
        Ok(UpdateRecord {
            update: self.meta.updates,
            frames: self.meta.frames,
            episodes: self.meta.episodes,
            finished: outcomes.len() as u64,
            mean_return: mean(&returns),
            mean_progress: mean(&outcomes),
            stats,
            teacher: self.teacher.stats(),
        })
    }

    /// Trains until the frame budget is spent, appending one JSON line per
    /// update to `metrics.ndjson` and saving `checkpoint.ckpt` periodically and
    /// at the end. On divergence the last saved checkpoint is left untouched.
    pub fn run(&mut self, out_dir: &Path, mut on_update: impl FnMut(&UpdateRecord)) -> Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let ckpt_path = out_dir.join(CHECKPOINT_FILE);
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(out_dir.join(METRICS_FILE))?;
        while !self.finished() {
            let rec = self.update()?;
            writeln!(log, "{}", serde_json::to_string(&rec)?)?;
            log.flush()?;
            on_update(&rec);
            if rec.update % self.config.training.checkpoint_interval == 0 {
                self.checkpoint().save(&ckpt_path)?;
            }
        }
        self.checkpoint().save(&ckpt_path)?;
        Ok(())
    }
}

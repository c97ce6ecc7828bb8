//! Goal samplers: a uniform baseline and an absolute-learning-progress teacher
//! that fits a Gaussian mixture over (goal, ALP) and favours high-ALP regions.

pub mod gmm;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::GoalVector;
pub use gmm::{fit_gmm, Component, GmmModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    /// Goal normalised to `[0, 1]` per dimension.
    pub goal: Vec<f64>,
    pub outcome: f64,
    pub timestamp: u64,
    pub alp: f64,
}

pub fn normalize(goal: &GoalVector, bounds: &[(i64, i64)]) -> Vec<f64> {
    goal.values()
        .iter()
        .zip(bounds)
        .map(|(v, (lo, hi))| {
            if hi == lo {
                0.0
            } else {
                (v - lo) as f64 / (hi - lo) as f64
            }
        })
        .collect()
}

pub fn denormalize(x: &[f64], bounds: &[(i64, i64)]) -> GoalVector {
    GoalVector::new(
        x.iter()
            .zip(bounds)
            .map(|(v, (lo, hi))| {
                let raw = *lo as f64 + v * (hi - lo) as f64;
                (raw.round() as i64).clamp(*lo, *hi)
            })
            .collect(),
    )
}

/// Each coordinate uniform on its inclusive integer range.
pub fn sample_uniform<R: Rng + ?Sized>(bounds: &[(i64, i64)], rng: &mut R) -> GoalVector {
    GoalVector::new(
        bounds
            .iter()
            .map(|(lo, hi)| rng.random_range(*lo..=*hi))
            .collect(),
    )
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `|new.outcome - outcome of the closest earlier goal|`; ties go to the most recent record.
pub fn compute_alp(history: &[TaskRecord], new: &TaskRecord) -> f64 {
    let mut best: Option<(f64, &TaskRecord)> = None;
    for rec in history {
        let d = sq_dist(&rec.goal, &new.goal);
        let closer = match best {
            None => true,
            Some((bd, b)) => d < bd || (d == bd && rec.timestamp >= b.timestamp),
        };
        if closer {
            best = Some((d, rec));
        }
    }
    best.map_or(0.0, |(_, rec)| (new.outcome - rec.outcome).abs())
}

/// Picks a mixture component with probability proportional to its mean ALP
/// (clipped at zero), then draws a goal from that component's goal marginal.
/// Falls back to uniform sampling while exploring, before any fit, or when no
/// component shows positive progress.
pub fn sample_alp_gmm<R: Rng + ?Sized>(
    model: Option<&GmmModel>,
    bounds: &[(i64, i64)],
    explore_ratio: f64,
    rng: &mut R,
) -> GoalVector {
    let explore = rng.random::<f64>() < explore_ratio;
    let Some(model) = model.filter(|_| !explore) else {
        return sample_uniform(bounds, rng);
    };
    let goal_dims = bounds.len();
    let alps: Vec<f64> = model
        .components
        .iter()
        .map(|c| c.mean[goal_dims].max(0.0))
        .collect();
    let total: f64 = alps.iter().sum();
    if !(total > 0.0) {
        return sample_uniform(bounds, rng);
    }
    let mut pick = rng.random::<f64>() * total;
    let mut chosen = alps.len() - 1;
    for (j, a) in alps.iter().enumerate() {
        if pick < *a {
            chosen = j;
            break;
        }
        pick -= a;
    }
    let x = model.sample_marginal(chosen, goal_dims, rng);
    denormalize(&x, bounds)
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    Uniform,
    #[default]
    AlpGmm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub mode: TeacherMode,
    pub explore_ratio: f64,
    pub fit_window: usize,
    pub refit_interval: usize,
    pub k_min: usize,
    pub k_max: usize,
    pub warmup: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            mode: TeacherMode::AlpGmm,
            explore_ratio: 0.2,
            fit_window: 250,
            refit_interval: 50,
            k_min: 2,
            k_max: 5,
            warmup: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherStats {
    pub episodes: u64,
    pub components: usize,
    pub fits: u64,
    pub recent_alp: f64,
}

/// Single owner of the task history. Workers report outcomes and request goals
/// through `&mut self`, which serialises access.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Teacher {
    config: TeacherConfig,
    bounds: Vec<(i64, i64)>,
    history: Vec<TaskRecord>,
    model: Option<GmmModel>,
    since_fit: usize,
    fits: u64,
    seed: u64,
    rng: ChaCha8Rng,
}

impl Teacher {
    pub fn new(config: TeacherConfig, bounds: Vec<(i64, i64)>, seed: u64) -> Self {
        Self {
            config,
            bounds,
            history: Vec::new(),
            model: None,
            since_fit: 0,
            fits: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn history(&self) -> &[TaskRecord] {
        &self.history
    }

    pub fn model(&self) -> Option<&GmmModel> {
        self.model.as_ref()
    }

    pub fn sample(&mut self) -> GoalVector {
        match self.config.mode {
            TeacherMode::Uniform => sample_uniform(&self.bounds, &mut self.rng),
            TeacherMode::AlpGmm => {
                let warm = self.history.len() >= self.config.warmup;
                let model = self.model.as_ref().filter(|_| warm);
                sample_alp_gmm(
                    model,
                    &self.bounds,
                    self.config.explore_ratio,
                    &mut self.rng,
                )
            }
        }
    }

    /// Appends the finished episode and refits the mixture when due.
    pub fn record(&mut self, goal: &GoalVector, outcome: f64) {
        let mut rec = TaskRecord {
            goal: normalize(goal, &self.bounds),
            outcome,
            timestamp: self.history.len() as u64,
            alp: 0.0,
        };
        rec.alp = compute_alp(&self.history, &rec);
        self.history.push(rec);
        self.since_fit += 1;
        if self.config.mode == TeacherMode::AlpGmm
            && self.history.len() >= self.config.warmup
            && (self.model.is_none() || self.since_fit >= self.config.refit_interval)
        {
            self.refit();
        }
    }

    fn refit(&mut self) {
        let start = self.history.len().saturating_sub(self.config.fit_window);
        let data: Vec<Vec<f64>> = self.history[start..]
            .iter()
            .map(|r| {
                let mut v = r.goal.clone();
                v.push(r.alp);
                v
            })
            .collect();
        let seed = self.seed ^ (self.fits + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        self.model = Some(fit_gmm(&data, self.config.k_min..=self.config.k_max, seed));
        self.fits += 1;
        self.since_fit = 0;
    }

    pub fn stats(&self) -> TeacherStats {
        let recent = &self.history[self.history.len().saturating_sub(50)..];
        TeacherStats {
            episodes: self.history.len() as u64,
            components: self.model.as_ref().map_or(0, |m| m.components.len()),
            fits: self.fits,
            recent_alp: if recent.is_empty() {
                0.0
            } else {
                recent.iter().map(|r| r.alp).sum::<f64>() / recent.len() as f64
            },
        }
    }
}

//! Progress and diversity measurement, control sweeps over goal lattices.

use std::fmt::Write as _;
use std::sync::Arc;

use num_rational::Rational64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::env::{to_f64, ControlSpec, DoneReason, EnvSpec, EpisodeState, GoalVector};
use crate::error::{Error, Result};
use crate::grid::{format_level, TileGrid};
use crate::metrics::MetricVector;
use crate::par::{self, mix_seed as mix, Execution};

/// Percentage of the way from `initial` to `target` reached by `fin`.
/// Unclipped; when the target equals the start, holding it scores 100.
pub fn progress(initial: i64, fin: i64, target: i64) -> f64 {
    if target == initial {
        return if fin == initial { 100.0 } else { 0.0 };
    }
    100.0 * (fin - initial) as f64 / (target - initial) as f64
}

/// Unclipped progress of each controlled metric.
pub fn metric_progress(
    initial: &MetricVector,
    fin: &MetricVector,
    goal: &GoalVector,
    control: &ControlSpec,
) -> Vec<f64> {
    control
        .controlled()
        .iter()
        .zip(goal.values())
        .map(|(c, g)| progress(initial.get(c.index), fin.get(c.index), *g))
        .collect()
}

/// Single-episode outcome in `[0, 1]`: per-metric progress clipped, then averaged.
pub fn episode_outcome(
    initial: &MetricVector,
    fin: &MetricVector,
    goal: &GoalVector,
    control: &ControlSpec,
) -> f64 {
    let p = metric_progress(initial, fin, goal, control);
    if p.is_empty() {
        return 1.0;
    }
    p.iter().map(|x| x.clamp(0.0, 100.0)).sum::<f64>() / p.len() as f64 / 100.0
}

/// Mean pairwise fraction of differing cells.
pub fn hamming_diversity(levels: &[TileGrid]) -> Result<Rational64> {
    if levels.len() < 2 {
        return Err(Error::Diversity(format!(
            "need at least 2 levels, got {}",
            levels.len()
        )));
    }
    let (h, w) = (levels[0].height(), levels[0].width());
    if let Some(bad) = levels.iter().find(|g| g.height() != h || g.width() != w) {
        return Err(Error::Diversity(format!(
            "shape mismatch: {}x{} vs {}x{}",
            bad.height(),
            bad.width(),
            h,
            w
        )));
    }
    let mut differing: i64 = 0;
    let mut pairs: i64 = 0;
    for i in 0..levels.len() {
        for j in i + 1..levels.len() {
            differing += levels[i]
                .cells()
                .iter()
                .zip(levels[j].cells())
                .filter(|(a, b)| a != b)
                .count() as i64;
            pairs += 1;
        }
    }
    Ok(Rational64::new(differing, pairs * (h * w) as i64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeSummary {
    pub initial: MetricVector,
    pub fin: MetricVector,
    pub level: TileGrid,
    pub steps: u64,
    pub changes: u64,
    pub done_reason: DoneReason,
    pub initially_satisfied: bool,
}

/// Plays one episode to termination.
pub fn run_episode(
    spec: &Arc<EnvSpec>,
    agent: &dyn Agent,
    goal: &GoalVector,
    map_seed: u64,
    agent_seed: u64,
) -> Result<EpisodeSummary> {
    let (mut state, _) = EpisodeState::reset(spec.clone(), goal.clone(), map_seed)?;
    let initially_satisfied = spec.control.satisfied(state.metrics(), goal);
    let mut rng = ChaCha8Rng::seed_from_u64(agent_seed);
    while !state.done() {
        let a = agent.act(&state, &mut rng)?;
        state.step(a)?;
    }
    Ok(EpisodeSummary {
        initial: state.initial_metrics().clone(),
        fin: state.metrics().clone(),
        level: state.grid().clone(),
        steps: state.steps(),
        changes: state.changes(),
        done_reason: state.done_reason(),
        initially_satisfied,
    })
}

/// Up to `resolution` evenly spaced integers covering `[low, high]`.
pub fn axis_values(low: i64, high: i64, resolution: usize) -> Vec<i64> {
    let span = high - low;
    if resolution <= 1 || span == 0 {
        return vec![low];
    }
    let mut out: Vec<i64> = (0..resolution)
        .map(|i| low + ((i as i64 * span) as f64 / (resolution - 1) as f64).round() as i64)
        .collect();
    out.dedup();
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSettings {
    pub resolution: usize,
    pub episodes_per_cell: usize,
    pub step_cap: u64,
    pub samples_per_cell: usize,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            resolution: 8,
            episodes_per_cell: 20,
            step_cap: 1000,
            samples_per_cell: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub goal: Vec<i64>,
    /// Mean over metrics of the clipped per-metric mean progress.
    pub progress: f64,
    pub metric_progress: Vec<f64>,
    /// Absent when the cell has fewer than two episodes.
    pub diversity: Option<f64>,
    pub episodes: usize,
    pub all_initially_satisfied: bool,
    pub samples: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub domain: String,
    pub height: usize,
    pub width: usize,
    pub metrics: Vec<String>,
    pub axes: Vec<Vec<i64>>,
    pub cells: Vec<SweepCell>,
}

impl SweepReport {
    pub fn mean_progress(&self) -> f64 {
        if self.cells.is_empty() {
            return 0.0;
        }
        self.cells.iter().map(|c| c.progress).sum::<f64>() / self.cells.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for m in &self.metrics {
            let _ = write!(out, "{m},");
        }
        out.push_str("progress,diversity,episodes,all_initially_satisfied\n");
        for c in &self.cells {
            for g in &c.goal {
                let _ = write!(out, "{g},");
            }
            let div = c.diversity.map(|d| format!("{d:.6}")).unwrap_or_default();
            let _ = writeln!(
                out,
                "{:.6},{div},{},{}",
                c.progress, c.episodes, c.all_initially_satisfied
            );
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Cartesian product of the axes, first axis slowest.
pub fn lattice(axes: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    out
}

/// Default axes: evenly spaced targets across each controlled metric's bounds.
pub fn default_axes(control: &ControlSpec, resolution: usize) -> Vec<Vec<i64>> {
    control
        .controlled()
        .iter()
        .map(|c| axis_values(c.low, c.high, resolution))
        .collect()
}

/// Runs `episodes_per_cell` episodes for every goal on the lattice spanned by
/// `axes`. Episode `e` starts from the same initial map in every cell, so
/// cells are paired; agents get an independent stream per (cell, episode).
pub fn sweep(
    spec: &Arc<EnvSpec>,
    agent: &dyn Agent,
    axes: &[Vec<i64>],
    settings: &SweepSettings,
    exec: Execution,
) -> Result<SweepReport> {
    if axes.len() != spec.control.controlled().len() {
        return Err(Error::Config(format!(
            "{} axes for {} controlled metrics",
            axes.len(),
            spec.control.controlled().len()
        )));
    }
    let mut capped = (**spec).clone();
    capped.settings.step_cap = Some(settings.step_cap.min(spec.step_limit()));
    let capped = Arc::new(capped);
    let goals = lattice(axes);
    for g in &goals {
        spec.control.validate_goal(&GoalVector::new(g.clone()))?;
    }
    let cells = par::map(exec, &goals, |g| run_cell(&capped, agent, g, settings));
    let cells = cells.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SweepReport {
        domain: spec.domain.domain.name().to_string(),
        height: spec.domain.height,
        width: spec.domain.width,
        metrics: spec
            .control
            .controlled()
            .iter()
            .map(|c| c.name.clone())
            .collect(),
        axes: axes.to_vec(),
        cells,
    })
}

fn run_cell(
    spec: &Arc<EnvSpec>,
    agent: &dyn Agent,
    goal: &[i64],
    settings: &SweepSettings,
) -> Result<SweepCell> {
    let goal_v = GoalVector::new(goal.to_vec());
    let cell_key = goal
        .iter()
        .fold(settings.seed, |acc, g| mix(acc, *g as u64));
    let episodes = (0..settings.episodes_per_cell)
        .map(|e| {
            let map_seed = mix(settings.seed, e as u64);
            run_episode(spec, agent, &goal_v, map_seed, mix(cell_key, e as u64))
        })
        .collect::<Result<Vec<_>>>()?;
    let dims = goal.len();
    let mut sums = vec![0.0; dims];
    for ep in &episodes {
        for (k, p) in metric_progress(&ep.initial, &ep.fin, &goal_v, &spec.control)
            .iter()
            .enumerate()
        {
            sums[k] += p / episodes.len().max(1) as f64;
        }
    }
    let all_sat = !episodes.is_empty() && episodes.iter().all(|e| e.initially_satisfied);
    let per_metric: Vec<f64> = if all_sat {
        vec![100.0; dims]
    } else {
        sums.iter().map(|p| p.clamp(0.0, 100.0)).collect()
    };
    let progress = if dims == 0 {
        100.0
    } else {
        per_metric.iter().sum::<f64>() / dims as f64
    };
    let levels: Vec<TileGrid> = episodes.iter().map(|e| e.level.clone()).collect();
    let diversity = hamming_diversity(&levels).ok().map(to_f64);
    let samples = levels
        .iter()
        .take(settings.samples_per_cell)
        .map(|l| format_level(spec.domain.domain, l))
        .collect();
    Ok(SweepCell {
        goal: goal.to_vec(),
        progress,
        metric_progress: per_metric,
        diversity,
        episodes: episodes.len(),
        all_initially_satisfied: all_sat,
        samples,
    })
}

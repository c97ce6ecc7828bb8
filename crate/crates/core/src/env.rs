//! The controllable editing environment.
//!
//! An episode starts from a random map and a goal vector. At every step the
//! agent decides what to place on the current cell of a visit sequence; the
//! reward is the decrease of the weighted L1 distance between the level's
//! metrics and their targets. Losses are exact rationals so that rewards
//! telescope without rounding.

use std::fmt;
use std::sync::Arc;

use num_rational::Rational64;
use num_traits::Zero;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{crop_view, random_map, DomainSpec, OneHotView, TileGrid, TileType};
use crate::metrics::{metric_vector, MetricVector, DEFAULT_SOKOBAN_BUDGET, UNDEFINED};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ControlledMetric {
    pub name: String,
    pub index: usize,
    pub low: i64,
    pub high: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FixedGoal {
    pub name: String,
    pub index: usize,
    pub value: i64,
}

/// Which metrics are steered, which are pinned, and how each term is weighted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ControlSpec {
    controlled: Vec<ControlledMetric>,
    fixed: Vec<FixedGoal>,
    /// Per domain metric; unused metrics keep weight 1.
    weights: Vec<Rational64>,
    /// Loss contribution of an undefined metric: the span of its domain range.
    penalty: Vec<i64>,
    tolerance: Vec<i64>,
}

pub struct ControlSpecBuilder<'a> {
    domain: &'a DomainSpec,
    controlled: Vec<(String, i64, i64)>,
    fixed: Vec<(String, i64)>,
    weights: Vec<(String, Rational64)>,
    tolerance: Vec<(String, i64)>,
}

impl<'a> ControlSpecBuilder<'a> {
    pub fn control(mut self, name: &str, low: i64, high: i64) -> Self {
        self.controlled.push((name.to_string(), low, high));
        self
    }

    /// Controls a metric over its full domain range.
    pub fn control_full(self, name: &str) -> Self {
        let (lo, hi) = self.domain.bounds_of(name).unwrap_or((0, -1));
        self.control(name, lo, hi)
    }

    pub fn fix(mut self, name: &str, value: i64) -> Self {
        self.fixed.push((name.to_string(), value));
        self
    }

    pub fn weight(mut self, name: &str, weight: Rational64) -> Self {
        self.weights.push((name.to_string(), weight));
        self
    }

    pub fn tolerance(mut self, name: &str, tol: i64) -> Self {
        self.tolerance.push((name.to_string(), tol));
        self
    }

    pub fn build(self) -> Result<ControlSpec> {
        let d = self.domain;
        let n = d.metric_names().len();
        let lookup = |name: &str| {
            d.metric_index(name).ok_or_else(|| {
                Error::Config(format!(
                    "metric `{name}` does not exist in the {} domain",
                    d.domain
                ))
            })
        };
        let mut used = vec![false; n];
        let mut controlled = Vec::new();
        for (name, low, high) in self.controlled {
            let index = lookup(&name)?;
            if std::mem::replace(&mut used[index], true) {
                return Err(Error::Config(format!("metric `{name}` listed twice")));
            }
            let (dlo, dhi) = d.metric_bounds[index];
            if low > high || low < dlo || high > dhi {
                return Err(Error::Config(format!(
                    "bounds ({low}, {high}) for `{name}` must lie within ({dlo}, {dhi})"
                )));
            }
            controlled.push(ControlledMetric {
                name,
                index,
                low,
                high,
            });
        }
        let mut fixed = Vec::new();
        for (name, value) in self.fixed {
            let index = lookup(&name)?;
            if std::mem::replace(&mut used[index], true) {
                return Err(Error::Config(format!(
                    "metric `{name}` cannot be both controlled and fixed"
                )));
            }
            fixed.push(FixedGoal { name, index, value });
        }
        let mut weights = vec![Rational64::from_integer(1); n];
        for (name, w) in self.weights {
            if w < Rational64::zero() {
                return Err(Error::Config(format!("weight for `{name}` is negative")));
            }
            weights[lookup(&name)?] = w;
        }
        let mut tolerance = vec![0; n];
        for (name, t) in self.tolerance {
            if t < 0 {
                return Err(Error::Config(format!("tolerance for `{name}` is negative")));
            }
            tolerance[lookup(&name)?] = t;
        }
        let penalty = d.metric_bounds.iter().map(|(lo, hi)| hi - lo).collect();
        Ok(ControlSpec {
            controlled,
            fixed,
            weights,
            penalty,
            tolerance,
        })
    }
}

impl ControlSpec {
    pub fn builder(domain: &DomainSpec) -> ControlSpecBuilder<'_> {
        ControlSpecBuilder {
            domain,
            controlled: Vec::new(),
            fixed: Vec::new(),
            weights: Vec::new(),
            tolerance: Vec::new(),
        }
    }

    pub fn controlled(&self) -> &[ControlledMetric] {
        &self.controlled
    }

    pub fn fixed(&self) -> &[FixedGoal] {
        &self.fixed
    }

    pub fn weight(&self, metric_index: usize) -> Rational64 {
        self.weights[metric_index]
    }

    pub fn bounds(&self) -> Vec<(i64, i64)> {
        self.controlled.iter().map(|c| (c.low, c.high)).collect()
    }

    pub fn controlled_index(&self, name: &str) -> Option<usize> {
        self.controlled.iter().position(|c| c.name == name)
    }

    pub fn validate_goal(&self, goal: &GoalVector) -> Result<()> {
        if goal.len() != self.controlled.len() {
            return Err(Error::InvalidGoal(format!(
                "expected {} values, got {}",
                self.controlled.len(),
                goal.len()
            )));
        }
        for (c, v) in self.controlled.iter().zip(goal.values()) {
            if *v < c.low || *v > c.high {
                return Err(Error::InvalidGoal(format!(
                    "{} = {v} outside ({}, {})",
                    c.name, c.low, c.high
                )));
            }
        }
        Ok(())
    }

    fn distance(&self, index: usize, target: i64, value: i64) -> i64 {
        if value == UNDEFINED {
            self.penalty[index]
        } else {
            (target - value).abs()
        }
    }

    /// `(metric index, target)` for every term of the loss.
    fn terms<'a>(&'a self, goal: &'a GoalVector) -> impl Iterator<Item = (usize, i64)> + 'a {
        self.controlled
            .iter()
            .zip(goal.values())
            .map(|(c, g)| (c.index, *g))
            .chain(self.fixed.iter().map(|f| (f.index, f.value)))
    }

    /// Every term within its tolerance (exact match by default).
    pub fn satisfied(&self, s: &MetricVector, goal: &GoalVector) -> bool {
        self.terms(goal).all(|(i, target)| {
            let v = s.get(i);
            v != UNDEFINED && (target - v).abs() <= self.tolerance[i]
        })
    }
}

/// Targets for the controlled metrics, in control order.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GoalVector(Vec<i64>);

impl GoalVector {
    pub fn new(values: Vec<i64>) -> Self {
        Self(values)
    }

    pub fn values(&self) -> &[i64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weighted L1 distance of `s` from the goal and fixed targets.
pub fn compute_loss(s: &MetricVector, goal: &GoalVector, spec: &ControlSpec) -> Rational64 {
    spec.terms(goal)
        .map(|(i, target)| {
            spec.weights[i] * Rational64::from_integer(spec.distance(i, target, s.get(i)))
        })
        .fold(Rational64::zero(), |acc, t| acc + t)
}

/// `sign(g - s)` per controlled metric.
pub fn condition(s: &MetricVector, goal: &GoalVector, spec: &ControlSpec) -> Vec<i8> {
    spec.controlled
        .iter()
        .zip(goal.values())
        .map(|(c, g)| (g - s.get(c.index)).signum() as i8)
        .collect()
}

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VisitOrder {
    /// Fresh seeded permutation of all cells each pass.
    #[default]
    Random,
    Raster,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSettings {
    pub change_ratio: f64,
    pub visit_order: VisitOrder,
    pub sokoban_budget: usize,
    /// Optional cap below the `(W*H)^2` step limit, used for inference runs.
    pub step_cap: Option<u64>,
}

impl Default for EnvSettings {
    fn default() -> Self {
        Self {
            change_ratio: 1.0,
            visit_order: VisitOrder::Random,
            sokoban_budget: DEFAULT_SOKOBAN_BUDGET,
            step_cap: None,
        }
    }
}

/// Everything that is fixed across episodes.
#[derive(Clone, Debug)]
pub struct EnvSpec {
    pub domain: DomainSpec,
    pub control: ControlSpec,
    pub settings: EnvSettings,
}

impl EnvSpec {
    pub fn new(
        domain: DomainSpec,
        control: ControlSpec,
        settings: EnvSettings,
    ) -> Result<Arc<Self>> {
        if !(settings.change_ratio > 0.0 && settings.change_ratio.is_finite()) {
            return Err(Error::Config(format!(
                "change_ratio must be positive, got {}",
                settings.change_ratio
            )));
        }
        if settings.sokoban_budget == 0 {
            return Err(Error::Config("sokoban_budget must be positive".into()));
        }
        Ok(Arc::new(Self {
            domain,
            control,
            settings,
        }))
    }

    pub fn change_limit(&self) -> u64 {
        (self.settings.change_ratio * self.domain.cell_count() as f64).ceil() as u64
    }

    pub fn step_limit(&self) -> u64 {
        let full = (self.domain.cell_count() as u64).pow(2);
        self.settings.step_cap.map_or(full, |cap| cap.min(full))
    }

    /// Number of discrete actions: no-op plus one per tile.
    pub fn action_count(&self) -> usize {
        self.domain.alphabet().len() + 1
    }

    pub fn metrics(&self, grid: &TileGrid) -> MetricVector {
        metric_vector(&self.domain, grid, self.settings.sokoban_budget)
    }

    /// Tile written by `action`, or `None` for the no-op.
    pub fn action_tile(&self, action: usize) -> Option<TileType> {
        action.checked_sub(1).map(|k| self.domain.alphabet()[k])
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoneReason {
    Running,
    TargetReached,
    ChangeLimit,
    StepLimit,
}

impl fmt::Display for DoneReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DoneReason::Running => "running",
            DoneReason::TargetReached => "target_reached",
            DoneReason::ChangeLimit => "change_limit",
            DoneReason::StepLimit => "step_limit",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub map_view: OneHotView,
    /// One spatially constant plane per controlled metric.
    pub condition: Vec<i8>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepInfo {
    pub metrics: MetricVector,
    pub loss: Rational64,
    pub changes: u64,
    pub steps: u64,
    pub done_reason: DoneReason,
}

#[derive(Clone, Debug)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: Rational64,
    pub done: bool,
    pub info: StepInfo,
}

#[derive(Clone, Debug)]
pub struct EpisodeState {
    spec: Arc<EnvSpec>,
    grid: TileGrid,
    goal: GoalVector,
    metrics: MetricVector,
    initial_metrics: MetricVector,
    visit_order: Vec<usize>,
    cursor: usize,
    steps: u64,
    changes: u64,
    prev_loss: Rational64,
    done_reason: DoneReason,
    rng: ChaCha8Rng,
}

impl EpisodeState {
    /// Starts an episode on `random_map(domain, seed)`. Termination is only
    /// checked after steps, so a map that already meets the goal still plays out.
    pub fn reset(spec: Arc<EnvSpec>, goal: GoalVector, seed: u64) -> Result<(Self, Observation)> {
        spec.control.validate_goal(&goal)?;
        let grid = random_map(&spec.domain, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let metrics = spec.metrics(&grid);
        let prev_loss = compute_loss(&metrics, &goal, &spec.control);
        let mut state = Self {
            visit_order: (0..grid.len()).collect(),
            spec,
            grid,
            goal,
            initial_metrics: metrics.clone(),
            metrics,
            cursor: 0,
            steps: 0,
            changes: 0,
            prev_loss,
            done_reason: DoneReason::Running,
            rng,
        };
        state.shuffle_visits();
        let obs = state.observation();
        Ok((state, obs))
    }

    fn shuffle_visits(&mut self) {
        if self.spec.settings.visit_order == VisitOrder::Random {
            self.visit_order.shuffle(&mut self.rng);
        }
    }

    pub fn spec(&self) -> &Arc<EnvSpec> {
        &self.spec
    }

    pub fn grid(&self) -> &TileGrid {
        &self.grid
    }

    pub fn goal(&self) -> &GoalVector {
        &self.goal
    }

    pub fn metrics(&self) -> &MetricVector {
        &self.metrics
    }

    pub fn initial_metrics(&self) -> &MetricVector {
        &self.initial_metrics
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn changes(&self) -> u64 {
        self.changes
    }

    pub fn loss(&self) -> Rational64 {
        self.prev_loss
    }

    pub fn done(&self) -> bool {
        self.done_reason != DoneReason::Running
    }

    pub fn done_reason(&self) -> DoneReason {
        self.done_reason
    }

    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
    }

    /// Cell the next action applies to, as `(row, col)`.
    pub fn current_cell(&self) -> (usize, usize) {
        self.grid.coords(self.visit_order[self.cursor])
    }

    pub fn condition(&self) -> Vec<i8> {
        condition(&self.metrics, &self.goal, &self.spec.control)
    }

    pub fn observation(&self) -> Observation {
        Observation {
            map_view: crop_view(&self.spec.domain, &self.grid, self.current_cell()),
            condition: self.condition(),
        }
    }

    fn check_action(&self, action: usize) -> Result<()> {
        let max = self.spec.action_count() - 1;
        if action > max {
            return Err(Error::InvalidAction { action, max });
        }
        Ok(())
    }

    /// Loss the episode would have after `action`, without applying it.
    pub fn preview_loss(&self, action: usize) -> Result<Rational64> {
        self.check_action(action)?;
        let Some(tile) = self.spec.action_tile(action) else {
            return Ok(self.prev_loss);
        };
        let idx = self.visit_order[self.cursor];
        if self.grid.at(idx) == tile {
            return Ok(self.prev_loss);
        }
        let mut grid = self.grid.clone();
        let (r, c) = grid.coords(idx);
        grid.set(r, c, tile)?;
        Ok(compute_loss(
            &self.spec.metrics(&grid),
            &self.goal,
            &self.spec.control,
        ))
    }

    pub fn step(&mut self, action: usize) -> Result<StepResult> {
        if self.done() {
            return Err(Error::EpisodeTerminated);
        }
        self.check_action(action)?;
        if let Some(tile) = self.spec.action_tile(action) {
            let (r, c) = self.current_cell();
            if self.grid.set(r, c, tile)? {
                self.changes += 1;
                self.metrics = self.spec.metrics(&self.grid);
            }
        }
        let loss = compute_loss(&self.metrics, &self.goal, &self.spec.control);
        let reward = self.prev_loss - loss;
        self.prev_loss = loss;
        self.steps += 1;
        self.cursor += 1;
        if self.cursor == self.visit_order.len() {
            self.cursor = 0;
            self.shuffle_visits();
        }

        self.done_reason = if self.spec.control.satisfied(&self.metrics, &self.goal) {
            DoneReason::TargetReached
        } else if self.changes >= self.spec.change_limit() {
            DoneReason::ChangeLimit
        } else if self.steps >= self.spec.step_limit() {
            DoneReason::StepLimit
        } else {
            DoneReason::Running
        };

        Ok(StepResult {
            observation: self.observation(),
            reward,
            done: self.done(),
            info: StepInfo {
                metrics: self.metrics.clone(),
                loss,
                changes: self.changes,
                steps: self.steps,
                done_reason: self.done_reason,
            },
        })
    }

    /// Swaps the goal mid-episode. The loss baseline moves with it, so the
    /// switch itself is worth no reward.
    pub fn set_goal(&mut self, goal: GoalVector) -> Result<()> {
        if self.done() {
            return Err(Error::EpisodeTerminated);
        }
        self.spec.control.validate_goal(&goal)?;
        self.goal = goal;
        self.prev_loss = compute_loss(&self.metrics, &self.goal, &self.spec.control);
        Ok(())
    }
}

/// Converts an exact loss or reward to a float for learning code.
pub fn to_f64(r: Rational64) -> f64 {
    *r.numer() as f64 / *r.denom() as f64
}

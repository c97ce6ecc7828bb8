//! Steering sessions: a live episode whose goal a client edits while an agent
//! keeps working on the level. Transport-agnostic; the service feeds client
//! text frames in and ships the returned frames out.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::Agent;
use crate::env::{EnvSpec, EpisodeState, GoalVector};
use crate::error::Result;
use crate::grid::TileGrid;

pub const MAX_FRAME_BYTES: usize = 64 * 1024;
pub const DEFAULT_STEP_INTERVAL_MS: u64 = 50;
pub const MIN_STEP_INTERVAL_MS: u64 = 1;
pub const MAX_STEP_INTERVAL_MS: u64 = 60_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMsg {
    SetTargets { targets: BTreeMap<String, i64> },
    Pause,
    Resume,
    Reset { seed: Option<u64> },
    SetSpeed { ms: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMsg {
    Hello {
        domain: String,
        bounds: BTreeMap<String, [i64; 2]>,
        alphabet: Vec<String>,
    },
    State {
        grid: Vec<Vec<usize>>,
        metrics: BTreeMap<String, i64>,
        goal: BTreeMap<String, i64>,
        condition: BTreeMap<String, i8>,
        steps: u64,
        changes: u64,
        done_reason: String,
    },
    Error {
        code: String,
        detail: String,
    },
}

impl ServerMsg {
    pub fn error(code: &str, detail: impl Into<String>) -> Self {
        ServerMsg::Error {
            code: code.into(),
            detail: detail.into(),
        }
    }

    pub fn to_json(&self) -> String {
        let s = serde_json::to_string(self).expect("frames always serialise");
        debug_assert!(s.len() <= MAX_FRAME_BYTES);
        s
    }
}

/// Tile ids, row-major, indexing the domain alphabet.
pub fn grid_ids(spec: &EnvSpec, grid: &TileGrid) -> Vec<Vec<usize>> {
    (0..grid.height())
        .map(|r| {
            (0..grid.width())
                .map(|c| {
                    spec.domain
                        .tile_index(grid.at(grid.index(r, c)))
                        .unwrap_or(0)
                })
                .collect()
        })
        .collect()
}

pub struct SteerSession {
    pub id: u64,
    spec: Arc<EnvSpec>,
    agent: Arc<dyn Agent>,
    state: EpisodeState,
    rng: ChaCha8Rng,
    interval_ms: u64,
    paused: bool,
}

impl SteerSession {
    /// Starts on a random map with every controlled target at the middle of its range.
    pub fn new(
        id: u64,
        spec: Arc<EnvSpec>,
        agent: Arc<dyn Agent>,
        interval_ms: u64,
        seed: u64,
    ) -> Result<Self> {
        let goal = GoalVector::new(
            spec.control
                .bounds()
                .iter()
                .map(|(lo, hi)| lo + (hi - lo) / 2)
                .collect(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (state, _) = EpisodeState::reset(spec.clone(), goal, rng.random())?;
        Ok(Self {
            id,
            spec,
            agent,
            state,
            rng,
            interval_ms: interval_ms.clamp(MIN_STEP_INTERVAL_MS, MAX_STEP_INTERVAL_MS),
            paused: false,
        })
    }

    pub fn interval_ms(&self) -> u64 {
        self.interval_ms
    }

    pub fn paused(&self) -> bool {
        self.paused
    }

    pub fn state(&self) -> &EpisodeState {
        &self.state
    }

    pub fn hello(&self) -> ServerMsg {
        ServerMsg::Hello {
            domain: self.spec.domain.domain.name().into(),
            bounds: self
                .spec
                .control
                .controlled()
                .iter()
                .map(|c| (c.name.clone(), [c.low, c.high]))
                .collect(),
            alphabet: self
                .spec
                .domain
                .alphabet()
                .iter()
                .map(|t| t.name().to_string())
                .collect(),
        }
    }

    pub fn state_frame(&self) -> ServerMsg {
        let s = &self.state;
        let controlled = self.spec.control.controlled();
        ServerMsg::State {
            grid: grid_ids(&self.spec, s.grid()),
            metrics: s.metrics().named(&self.spec.domain),
            goal: controlled
                .iter()
                .zip(s.goal().values())
                .map(|(c, g)| (c.name.clone(), *g))
                .collect(),
            condition: controlled
                .iter()
                .zip(s.condition())
                .map(|(c, d)| (c.name.clone(), d))
                .collect(),
            steps: s.steps(),
            changes: s.changes(),
            done_reason: s.done_reason().to_string(),
        }
    }

    /// Applies one client text frame and returns the frames to send back.
    /// Bad input yields an error frame and leaves the session unchanged.
    pub fn handle_text(&mut self, text: &str) -> Vec<ServerMsg> {
        if text.len() > MAX_FRAME_BYTES {
            return vec![ServerMsg::error(
                "frame_too_large",
                format!("{} bytes", text.len()),
            )];
        }
        match serde_json::from_str::<ClientMsg>(text) {
            Ok(msg) => self.handle(msg),
            Err(e) => vec![ServerMsg::error("malformed", e.to_string())],
        }
    }

    pub fn handle(&mut self, msg: ClientMsg) -> Vec<ServerMsg> {
        match msg {
            ClientMsg::SetTargets { targets } => {
                let controlled = self.spec.control.controlled();
                let mut goal = self.state.goal().values().to_vec();
                for (name, v) in &targets {
                    let Some(k) = controlled.iter().position(|c| &c.name == name) else {
                        return vec![ServerMsg::error(
                            "unknown_metric",
                            format!("`{name}` is not a controlled metric"),
                        )];
                    };
                    let c = &controlled[k];
                    if *v < c.low || *v > c.high {
                        return vec![ServerMsg::error(
                            "target_out_of_bounds",
                            format!("{name}={v} outside [{}, {}]", c.low, c.high),
                        )];
                    }
                    goal[k] = *v;
                }
                let goal = GoalVector::new(goal);
                // a finished episode would be replaced on the next tick anyway
                let res = if self.state.done() {
                    let seed = self.rng.random();
                    EpisodeState::reset(self.spec.clone(), goal, seed).map(|(s, _)| self.state = s)
                } else {
                    self.state.set_goal(goal)
                };
                match res {
                    Ok(()) => vec![self.state_frame()],
                    Err(e) => vec![ServerMsg::error("internal", e.to_string())],
                }
            }
            ClientMsg::Pause => {
                self.paused = true;
                Vec::new()
            }
            ClientMsg::Resume => {
                self.paused = false;
                Vec::new()
            }
            ClientMsg::Reset { seed } => {
                let seed = seed.unwrap_or_else(|| self.rng.random());
                match self.restart(seed) {
                    Ok(()) => vec![self.state_frame()],
                    Err(e) => vec![ServerMsg::error("internal", e.to_string())],
                }
            }
            ClientMsg::SetSpeed { ms } => {
                if !(MIN_STEP_INTERVAL_MS..=MAX_STEP_INTERVAL_MS).contains(&ms) {
                    return vec![ServerMsg::error(
                        "invalid_speed",
                        format!("ms must lie in [{MIN_STEP_INTERVAL_MS}, {MAX_STEP_INTERVAL_MS}]"),
                    )];
                }
                self.interval_ms = ms;
                Vec::new()
            }
        }
    }

    fn restart(&mut self, seed: u64) -> Result<()> {
        let (state, _) = EpisodeState::reset(self.spec.clone(), self.state.goal().clone(), seed)?;
        self.state = state;
        Ok(())
    }

    /// Advances one step, or starts a fresh map once the episode has ended.
    /// Returns nothing while paused.
    pub fn tick(&mut self) -> Result<Option<ServerMsg>> {
        if self.paused {
            return Ok(None);
        }
        if self.state.done() {
            let seed = self.rng.random();
            self.restart(seed)?;
        } else {
            let a = self.agent.act(&self.state, &mut self.rng)?;
            self.state.step(a)?;
        }
        Ok(Some(self.state_frame()))
    }
}

//! Run configuration: a TOML document with one table per concern.
//!
//! ```toml
//! seed = 7
//!
//! [domain]
//! name = "binary"          # binary | zelda | sokoban
//! height = 8               # optional, domain default otherwise
//! width = 8
//!
//! [control]
//! controlled = [{ name = "regions", low = 1, high = 8 }]
//! fixed = [{ name = "path_length", value = 20, weight = "1/2" }]
//!
//! [env]
//! change_ratio = 1.0
//! visit_order = "random"   # random | raster
//!
//! [teacher]
//! mode = "alp_gmm"         # uniform | alp_gmm
//!
//! [training]
//! total_frames = 200000
//!
//! [eval]
//! episodes_per_cell = 20
//!
//! [service]
//! bind = "127.0.0.1:8080"
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use num_rational::Rational64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::ppo::PpoConfig;
use crate::agent::{ActMode, NetConfig};
use crate::curriculum::TeacherConfig;
use crate::env::{ControlSpec, EnvSettings, EnvSpec, VisitOrder};
use crate::error::{Error, Result};
use crate::eval::{axis_values, SweepSettings};
use crate::grid::{Domain, DomainSpec};
use crate::metrics::DEFAULT_SOKOBAN_BUDGET;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub name: Domain,
    pub height: Option<usize>,
    pub width: Option<usize>,
}

/// Either an integer or a `"p/q"` string.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Weight {
    Int(i64),
    Ratio(String),
}

impl Weight {
    pub fn to_rational(&self) -> Result<Rational64> {
        match self {
            Weight::Int(v) => Ok(Rational64::from_integer(*v)),
            Weight::Ratio(s) => {
                let bad = || Error::Config(format!("weight `{s}` is not an integer or p/q"));
                let (p, q) = match s.split_once('/') {
                    Some((p, q)) => (p.trim(), q.trim()),
                    None => (s.trim(), "1"),
                };
                let p: i64 = p.parse().map_err(|_| bad())?;
                let q: i64 = q.parse().map_err(|_| bad())?;
                if q == 0 {
                    return Err(bad());
                }
                Ok(Rational64::new(p, q))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlledEntry {
    pub name: String,
    pub low: Option<i64>,
    pub high: Option<i64>,
    pub weight: Option<Weight>,
    pub tolerance: Option<i64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedEntry {
    pub name: String,
    pub value: i64,
    pub weight: Option<Weight>,
    pub tolerance: Option<i64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub controlled: Vec<ControlledEntry>,
    pub fixed: Vec<FixedEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub change_ratio: f64,
    pub visit_order: VisitOrder,
    pub sokoban_budget: usize,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            change_ratio: 1.0,
            visit_order: VisitOrder::Random,
            sokoban_budget: DEFAULT_SOKOBAN_BUDGET,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub total_frames: u64,
    pub workers: usize,
    pub segment_length: usize,
    /// Checkpoint every this many updates; the final state is always saved.
    pub checkpoint_interval: u64,
    pub ppo: PpoConfig,
    pub net: NetConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            total_frames: 200_000,
            workers: 8,
            segment_length: 128,
            checkpoint_interval: 50,
            ppo: PpoConfig::default(),
            net: NetConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub resolution: usize,
    pub episodes_per_cell: usize,
    pub step_cap: u64,
    pub samples_per_cell: usize,
    /// How a loaded policy picks actions.
    pub act_mode: ActMode,
    /// Explicit target lists per controlled metric, overriding `resolution`.
    pub targets: BTreeMap<String, Vec<i64>>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let s = SweepSettings::default();
        Self {
            resolution: s.resolution,
            episodes_per_cell: s.episodes_per_cell,
            step_cap: s.step_cap,
            samples_per_cell: s.samples_per_cell,
            act_mode: ActMode::Sample,
            targets: BTreeMap::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub bind: String,
    pub step_interval_ms: u64,
    /// Directory of static UI assets served at `/`.
    pub static_dir: Option<String>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".into(),
            step_interval_ms: 50,
            static_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub domain: DomainConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub teacher: TeacherConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub service: ServiceConfig,
}

/// The part of the configuration that determines what a checkpoint means.
#[derive(Serialize)]
struct HashedView<'a> {
    domain: &'a DomainConfig,
    control: &'a ControlConfig,
    env: &'a EnvConfig,
    teacher: &'a TeacherConfig,
    training: &'a TrainingConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn domain_spec(&self) -> Result<DomainSpec> {
        let (dh, dw) = self.domain.name.default_size();
        DomainSpec::with_size(
            self.domain.name,
            self.domain.height.unwrap_or(dh),
            self.domain.width.unwrap_or(dw),
        )
    }

    pub fn control_spec(&self, domain: &DomainSpec) -> Result<ControlSpec> {
        if self.control.controlled.is_empty() {
            return Err(Error::Config(
                "control.controlled must name at least one metric".into(),
            ));
        }
        let mut b = ControlSpec::builder(domain);
        for c in &self.control.controlled {
            let (lo, hi) = domain.bounds_of(&c.name).ok_or_else(|| {
                Error::Config(format!("unknown {} metric `{}`", domain.domain, c.name))
            })?;
            b = b.control(&c.name, c.low.unwrap_or(lo), c.high.unwrap_or(hi));
            if let Some(w) = &c.weight {
                b = b.weight(&c.name, w.to_rational()?);
            }
            if let Some(t) = c.tolerance {
                b = b.tolerance(&c.name, t);
            }
        }
        for f in &self.control.fixed {
            b = b.fix(&f.name, f.value);
            if let Some(w) = &f.weight {
                b = b.weight(&f.name, w.to_rational()?);
            }
            if let Some(t) = f.tolerance {
                b = b.tolerance(&f.name, t);
            }
        }
        b.build()
    }

    pub fn env_spec(&self) -> Result<Arc<EnvSpec>> {
        let domain = self.domain_spec()?;
        let control = self.control_spec(&domain)?;
        EnvSpec::new(
            domain,
            control,
            EnvSettings {
                change_ratio: self.env.change_ratio,
                visit_order: self.env.visit_order,
                sokoban_budget: self.env.sokoban_budget,
                step_cap: None,
            },
        )
    }

    pub fn sweep_settings(&self) -> SweepSettings {
        SweepSettings {
            resolution: self.eval.resolution,
            episodes_per_cell: self.eval.episodes_per_cell,
            step_cap: self.eval.step_cap,
            samples_per_cell: self.eval.samples_per_cell,
            seed: self.seed,
        }
    }

    /// Sweep axes in controlled-metric order.
    pub fn sweep_axes(&self, env: &EnvSpec) -> Vec<Vec<i64>> {
        env.control
            .controlled()
            .iter()
            .map(|c| {
                self.eval
                    .targets
                    .get(&c.name)
                    .cloned()
                    .unwrap_or_else(|| axis_values(c.low, c.high, self.eval.resolution))
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let env = self.env_spec()?;
        let t = &self.teacher;
        if !(0.0..=1.0).contains(&t.explore_ratio) {
            return Err(Error::Config(
                "teacher.explore_ratio must lie in [0, 1]".into(),
            ));
        }
        if t.k_min == 0 || t.k_min > t.k_max {
            return Err(Error::Config("teacher needs 1 <= k_min <= k_max".into()));
        }
        if t.fit_window == 0 || t.refit_interval == 0 {
            return Err(Error::Config(
                "teacher.fit_window and refit_interval must be positive".into(),
            ));
        }
        let tr = &self.training;
        if tr.workers == 0 || tr.segment_length == 0 || tr.checkpoint_interval == 0 {
            return Err(Error::Config(
                "training.workers, segment_length and checkpoint_interval must be positive".into(),
            ));
        }
        let p = &tr.ppo;
        if !(0.0..=1.0).contains(&p.gamma) || !(0.0..=1.0).contains(&p.gae_lambda) {
            return Err(Error::Config(
                "gamma and gae_lambda must lie in [0, 1]".into(),
            ));
        }
        if !(p.clip_eps > 0.0) || !(p.learning_rate > 0.0) || p.epochs == 0 || p.minibatches == 0 {
            return Err(Error::Config(
                "ppo needs positive clip_eps, learning_rate, epochs and minibatches".into(),
            ));
        }
        let n = &tr.net;
        if n.conv_channels.is_empty() || n.kernel == 0 || n.stride == 0 || n.hidden == 0 {
            return Err(Error::Config(
                "net needs at least one conv layer and positive sizes".into(),
            ));
        }
        if self.eval.resolution == 0 || self.eval.step_cap == 0 {
            return Err(Error::Config(
                "eval.resolution and step_cap must be positive".into(),
            ));
        }
        for (name, targets) in &self.eval.targets {
            let c = env
                .control
                .controlled()
                .iter()
                .find(|c| &c.name == name)
                .ok_or_else(|| {
                    Error::Config(format!("eval.targets names uncontrolled metric `{name}`"))
                })?;
            if targets.is_empty() || targets.iter().any(|v| *v < c.low || *v > c.high) {
                return Err(Error::InvalidGoal(format!(
                    "eval targets for `{name}` must be non-empty and within [{}, {}]",
                    c.low, c.high
                )));
            }
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of every block except `seed`, `eval`
    /// and `service`, which do not affect what a trained policy means.
    pub fn canonical_hash(&self) -> [u8; 32] {
        let view = HashedView {
            domain: &self.domain,
            control: &self.control,
            env: &self.env,
            teacher: &self.teacher,
            training: &self.training,
        };
        let json = serde_json::to_vec(&view).expect("config is always serialisable");
        Sha256::digest(&json).into()
    }

    pub fn canonical_hash_hex(&self) -> String {
        hex::encode(self.canonical_hash())
    }
}

//! `condgen` command-line front end.

mod serve;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use condgen_core::agent::{Agent, GreedyAgent, PolicyAgent};
use condgen_core::checkpoint::Checkpoint;
use condgen_core::config::RunConfig;
use condgen_core::env::GoalVector;
use condgen_core::eval::{run_episode, sweep, SweepReport};
use condgen_core::grid::{format_level, parse_level, Domain, DomainSpec};
use condgen_core::metrics::metric_vector;
use condgen_core::par::{mix_seed, Execution};
use condgen_core::session::grid_ids;
use condgen_core::train::{Trainer, CHECKPOINT_FILE};
use condgen_core::Error;
use log::info;

#[derive(Parser, Debug)]
#[command(
    name = "condgen",
    version,
    about = "Goal-conditioned tile-map level generation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Policy checkpoint to load (or resume from, for `train`).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Use the one-step greedy agent instead of a policy.
    #[arg(long, global = true)]
    greedy: bool,
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Load checkpoints even when their config hash differs.
    #[arg(long, global = true)]
    force: bool,
    /// Run data-parallel work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a policy; writes checkpoint.ckpt and metrics.ndjson to --out.
    Train,
    /// Sweep the goal lattice; writes sweep.csv and sweep.json to --out.
    Evaluate,
    /// Generate levels for explicit goals.
    Generate {
        /// Goal as `metric=value[,metric=value...]`; repeatable.
        #[arg(long = "goal", required = true)]
        goals: Vec<String>,
        /// Levels per goal.
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Print the metrics of level text files, one JSON object per line.
    Analyze {
        /// Domain of the files; taken from --config when omitted.
        #[arg(long)]
        domain: Option<Domain>,
        files: Vec<PathBuf>,
    },
    /// Run the steering service.
    Serve {
        /// Listen address, overriding the configuration.
        #[arg(long)]
        bind: Option<String>,
        /// Directory of static UI assets.
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

impl Common {
    fn exec(&self) -> Execution {
        if self.sequential {
            Execution::Sequential
        } else {
            Execution::Parallel
        }
    }

    fn config(&self) -> anyhow::Result<RunConfig> {
        let path = self
            .config
            .as_ref()
            .ok_or_else(|| Error::Config("--config is required".into()))?;
        let mut cfg =
            RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    fn load_checkpoint(&self, cfg: &RunConfig) -> anyhow::Result<Option<Checkpoint>> {
        let Some(path) = &self.checkpoint else {
            return Ok(None);
        };
        let ckpt = Checkpoint::load(path, Some(&cfg.canonical_hash()), self.force)
            .with_context(|| format!("loading {}", path.display()))?;
        Ok(Some(ckpt))
    }

    fn agent(&self, cfg: &RunConfig) -> anyhow::Result<Arc<dyn Agent>> {
        if self.greedy {
            return Ok(Arc::new(GreedyAgent));
        }
        match self.load_checkpoint(cfg)? {
            Some(ckpt) => {
                let env = cfg.env_spec()?;
                let expected = condgen_core::agent::net_for_env(cfg.training.net.clone(), &env);
                if ckpt.params.net != expected {
                    return Err(Error::Checkpoint(
                        "checkpoint network does not fit this configuration".into(),
                    )
                    .into());
                }
                Ok(Arc::new(PolicyAgent {
                    params: ckpt.params,
                    mode: cfg.eval.act_mode,
                }))
            }
            None => Err(Error::Config("pass --checkpoint PATH or --greedy".into()).into()),
        }
    }
}

fn cmd_train(c: &Common) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let mut trainer = match c.load_checkpoint(&cfg)? {
        Some(ckpt) => {
            info!("resuming at frame {}", ckpt.meta.frames);
            Trainer::resume(&cfg, ckpt, c.exec())?
        }
        None => Trainer::new(&cfg, c.exec())?,
    };
    let out = c.out_dir();
    trainer.run(&out, |rec| {
        info!(
            "update {} frames {} progress {} return {} kl {:.4}",
            rec.update,
            rec.frames,
            rec.mean_progress.map_or("-".into(), |p| format!("{p:.3}")),
            rec.mean_return.map_or("-".into(), |r| format!("{r:.3}")),
            rec.stats.approx_kl
        )
    })?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn print_summary(report: &SweepReport) {
    let header: Vec<&str> = report.metrics.iter().map(String::as_str).collect();
    println!("{}\tprogress\tdiversity", header.join("\t"));
    for cell in &report.cells {
        let goal: Vec<String> = cell.goal.iter().map(i64::to_string).collect();
        let div = cell.diversity.map_or("-".into(), |d| format!("{d:.3}"));
        println!("{}\t{:.1}\t{div}", goal.join("\t"), cell.progress);
    }
    println!("mean progress {:.2}", report.mean_progress());
}

fn cmd_evaluate(c: &Common) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let agent = c.agent(&cfg)?;
    let env = cfg.env_spec()?;
    let report = sweep(
        &env,
        agent.as_ref(),
        &cfg.sweep_axes(&env),
        &cfg.sweep_settings(),
        c.exec(),
    )?;
    let out = c.out_dir();
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("sweep.csv"), report.to_csv())?;
    std::fs::write(out.join("sweep.json"), report.to_json()?)?;
    print_summary(&report);
    Ok(())
}

fn parse_goal(
    text: &str,
    cfg: &RunConfig,
    env: &condgen_core::env::EnvSpec,
) -> anyhow::Result<GoalVector> {
    let mut given = BTreeMap::new();
    for part in text.split(',').filter(|p| !p.trim().is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::InvalidGoal(format!("`{part}` is not metric=value")))?;
        let v: i64 = v
            .trim()
            .parse()
            .map_err(|_| Error::InvalidGoal(format!("`{v}` is not an integer")))?;
        given.insert(k.trim().to_string(), v);
    }
    let mut values = Vec::new();
    for m in env.control.controlled() {
        values.push(given.remove(&m.name).ok_or_else(|| {
            Error::InvalidGoal(format!(
                "goal `{text}` lacks controlled metric `{}`",
                m.name
            ))
        })?);
    }
    if let Some(extra) = given.keys().next() {
        return Err(Error::InvalidGoal(format!(
            "`{extra}` is not a controlled {} metric",
            cfg.domain.name
        ))
        .into());
    }
    let goal = GoalVector::new(values);
    env.control.validate_goal(&goal)?;
    Ok(goal)
}

fn cmd_generate(c: &Common, goals: &[String], count: usize) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let env = cfg.env_spec()?;
    let parsed = goals
        .iter()
        .map(|g| parse_goal(g, &cfg, &env))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let agent = c.agent(&cfg)?;
    if count == 0 {
        return Ok(());
    }
    let out = c.out_dir();
    std::fs::create_dir_all(&out)?;
    let mut spec = (*env).clone();
    spec.settings.step_cap = Some(cfg.eval.step_cap);
    let spec = Arc::new(spec);
    let domain = env.domain.domain;
    for (gi, goal) in parsed.iter().enumerate() {
        for i in 0..count {
            let key = mix_seed(mix_seed(cfg.seed, gi as u64), i as u64);
            let ep = run_episode(&spec, agent.as_ref(), goal, key, mix_seed(key, 1))?;
            let stem = format!("level_{gi:03}_{i:03}");
            std::fs::write(
                out.join(format!("{stem}.txt")),
                format_level(domain, &ep.level),
            )?;
            let goal_map: BTreeMap<&str, i64> = env
                .control
                .controlled()
                .iter()
                .zip(goal.values())
                .map(|(m, v)| (m.name.as_str(), *v))
                .collect();
            let sidecar = serde_json::json!({
                "goal": goal_map,
                "metrics": ep.fin.named(&env.domain),
                "satisfied": env.control.satisfied(&ep.fin, goal),
                "done_reason": ep.done_reason.to_string(),
                "steps": ep.steps,
                "changes": ep.changes,
                "grid": grid_ids(&env, &ep.level),
            });
            std::fs::write(
                out.join(format!("{stem}.json")),
                serde_json::to_string_pretty(&sidecar)?,
            )?;
        }
    }
    println!("wrote {} levels to {}", parsed.len() * count, out.display());
    Ok(())
}

fn cmd_analyze(c: &Common, domain: Option<Domain>, files: &[PathBuf]) -> anyhow::Result<()> {
    let cfg = c.config.as_ref().map(|_| c.config()).transpose()?;
    let domain = match (domain, &cfg) {
        (Some(d), _) => d,
        (None, Some(cfg)) => cfg.domain.name,
        (None, None) => return Err(Error::Config("pass --domain or --config".into()).into()),
    };
    let budget = cfg
        .as_ref()
        .map_or(condgen_core::metrics::DEFAULT_SOKOBAN_BUDGET, |c| {
            c.env.sokoban_budget
        });
    for path in files {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let grid = parse_level(domain, &text).with_context(|| path.display().to_string())?;
        let spec = DomainSpec::with_size(domain, grid.height(), grid.width())?;
        let m = metric_vector(&spec, &grid, budget);
        let line = serde_json::json!({
            "file": path.display().to_string(),
            "domain": domain.name(),
            "height": grid.height(),
            "width": grid.width(),
            "metrics": m.named(&spec),
        });
        println!("{line}");
    }
    Ok(())
}

fn cmd_serve(c: &Common, bind: Option<String>, static_dir: Option<PathBuf>) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let agent = c.agent(&cfg)?;
    let env = cfg.env_spec()?;
    let bind = bind.unwrap_or_else(|| cfg.service.bind.clone());
    let static_dir = static_dir.or_else(|| cfg.service.static_dir.as_ref().map(PathBuf::from));
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve::run(serve::ServeOptions {
        env,
        agent,
        bind,
        static_dir,
        step_interval_ms: cfg.service.step_interval_ms,
        seed: cfg.seed,
    }))
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Divergence(_)) => 3,
        Some(e) if e.is_validation() => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONDGEN_LOG", "info")).init();
    let cli = Cli::parse();
    let c = &cli.common;
    let result = match &cli.command {
        Command::Train => cmd_train(c),
        Command::Evaluate => cmd_evaluate(c),
        Command::Generate { goals, count } => cmd_generate(c, goals, *count),
        Command::Analyze { domain, files } => cmd_analyze(c, *domain, files),
        Command::Serve { bind, static_dir } => cmd_serve(c, bind.clone(), static_dir.clone()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Evaluation orchestration: config loading, seeded multi-episode runs,
//! throughput statistics, experiment presets and trace export.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ConveyorEnv, EnvConfig, EnvError};
use crate::heuristics::HeuristicParams;
use crate::marl::{
    collect_episode, ActionSelection, Assist, CollectOptions, EpisodeBuffer, EpisodeResult, Heuristic, HeuristicSpec,
    InterleaveMode, InterleavePolicy, MarlError, ParityMode, PolicySet, TrainConfig,
};
use crate::neural::hex_digest;
use crate::sim::{AgentClass, DemandModel};
use crate::topology::{build_default_preset, load_topology, LayoutDocument, Topology, TopologyError};

mod presets;
mod report;

pub use presets::{hybrid_train_configs, run_experiment_preset, PresetFailure, PRESETS};
pub use report::{
    percent_improvement, summarize, ExperimentReport, Improvement, ReportFormat, StrategyResult, ThroughputSummary,
    CSV_HEADER, REPORT_SCHEMA_VERSION,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("cannot parse config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Marl(#[from] MarlError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("statistics error: {0}")]
    Stats(String),
    #[error("malformed report: {0}")]
    Report(String),
    #[error("{0}")]
    Runtime(String),
}

impl HarnessError {
    /// 2 for configuration problems, 3 for everything that fails at run time.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Toml(_) | HarnessError::Topology(_) => 2,
            HarnessError::Env(EnvError::Config(_)) => 2,
            HarnessError::Marl(MarlError::Config(_)) => 2,
            _ => 3,
        }
    }
}

// ---------------------------------------------------------------------------
// Config document
// ---------------------------------------------------------------------------

/// Exactly one of `preset`, `file` or `layout`; empty means the default preset.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologySection {
    pub preset: Option<String>,
    pub file: Option<PathBuf>,
    pub layout: Option<LayoutDocument>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Random,
    Low,
    Medium,
    High,
    MarlCheckpoint,
    /// A bundle whose junction agents are trained as well.
    HybridMarlCheckpoint,
}

impl Strategy {
    pub fn as_str(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::Low => "low",
            Strategy::Medium => "medium",
            Strategy::High => "high",
            Strategy::MarlCheckpoint => "marl_checkpoint",
            Strategy::HybridMarlCheckpoint => "hybrid_marl_checkpoint",
        }
    }
    pub fn is_marl(&self) -> bool {
        matches!(self, Strategy::MarlCheckpoint | Strategy::HybridMarlCheckpoint)
    }
    fn rule_spec(&self) -> Option<HeuristicSpec> {
        Some(match self {
            Strategy::Random => HeuristicSpec::Random,
            Strategy::Low => HeuristicSpec::Low,
            Strategy::Medium => HeuristicSpec::Medium,
            Strategy::High => HeuristicSpec::High,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub strategy: Strategy,
    pub assist: Assist,
    pub episodes: usize,
    pub base_seed: u64,
    pub episode_steps: Option<u64>,
    /// Bundle directory for the MARL strategies.
    pub checkpoint: Option<PathBuf>,
    /// Heuristic interleaved in assisted runs; defaults to the bundle's own binding.
    pub heuristic: Option<HeuristicSpec>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            strategy: Strategy::High,
            assist: Assist::NonAssisted,
            episodes: 150,
            base_seed: 0,
            episode_steps: None,
            checkpoint: None,
            heuristic: None,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.episodes == 0 {
            return Err(HarnessError::Config("eval.episodes must be at least 1".into()));
        }
        if self.episode_steps == Some(0) {
            return Err(HarnessError::Config("eval.episode_steps must be positive".into()));
        }
        if self.strategy.is_marl() && self.checkpoint.is_none() {
            return Err(HarnessError::Config(format!("strategy {} needs eval.checkpoint", self.strategy.as_str())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub env: EnvConfig,
    pub topology: TopologySection,
    /// Demand rates and source weights; defaults derive from the topology.
    pub demand: Option<DemandModel>,
    pub heuristics: Option<HeuristicParams>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl HarnessConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        Ok(toml::from_str(text)?)
    }

    /// Relative paths inside the document resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(f) = cfg.topology.file.as_mut() {
            fix(f);
        }
        if let Some(c) = cfg.eval.checkpoint.as_mut() {
            fix(c);
        }
        if let HeuristicSpec::Frozen(p) = &mut cfg.train.heuristic {
            fix(p);
        }
        if let Some(HeuristicSpec::Frozen(p)) = cfg.eval.heuristic.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    /// Short runs: 3,600-step episodes, 60 training episodes, 30 evaluation episodes.
    pub fn desk_scale() -> Self {
        let mut cfg = HarnessConfig::default();
        cfg.env.episode_steps = 3_600;
        cfg.train.episodes = 60;
        cfg.eval.episodes = 30;
        cfg
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hex_digest(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.env.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        let t = &self.topology;
        if [t.preset.is_some(), t.file.is_some(), t.layout.is_some()].iter().filter(|x| **x).count() > 1 {
            return Err(HarnessError::Config("topology: give only one of preset, file, layout".into()));
        }
        if let Some(p) = &t.preset {
            if p != "default" {
                return Err(HarnessError::Config(format!("unknown topology preset {p}")));
            }
        }
        Ok(())
    }

    /// Validates and builds everything needed to run.
    pub fn setup(&self) -> Result<Setup, HarnessError> {
        self.validate()?;
        let topology = if let Some(doc) = &self.topology.layout {
            load_topology(doc)?
        } else if let Some(file) = &self.topology.file {
            let text = std::fs::read_to_string(file)
                .map_err(|e| HarnessError::Config(format!("cannot read layout {}: {e}", file.display())))?;
            crate::topology::load_topology_toml(&text)?
        } else {
            build_default_preset()
        };
        let topology = Arc::new(topology);
        let demand = self.demand.clone().unwrap_or_else(|| DemandModel::default_for(&topology));
        demand.validate(&topology).map_err(|e| HarnessError::Config(e.to_string()))?;
        let params = self.heuristics.clone().unwrap_or_else(|| HeuristicParams::default_for(&topology));
        params.validate().map_err(HarnessError::Config)?;
        if params.cost_matrix.len() != topology.loops().len()
            || params.cost_matrix.iter().any(|r| r.len() != topology.loops().len())
        {
            return Err(HarnessError::Config("heuristics.cost_matrix must be loops x loops".into()));
        }
        Ok(Setup { topology, demand, params, config: self.clone() })
    }
}

/// A validated config with its topology, demand model and heuristic constants.
#[derive(Debug, Clone)]
pub struct Setup {
    pub topology: Arc<Topology>,
    pub demand: DemandModel,
    pub params: HeuristicParams,
    pub config: HarnessConfig,
}

impl Setup {
    pub fn env(&self, episode_steps: Option<u64>) -> Result<ConveyorEnv, HarnessError> {
        let mut cfg = self.config.env.clone();
        if let Some(s) = episode_steps {
            cfg.episode_steps = s;
        }
        Ok(ConveyorEnv::new(Arc::clone(&self.topology), self.demand.clone(), cfg)?)
    }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// A strategy ready to run episodes.
pub enum Runner {
    Heuristic(Heuristic),
    Marl { policies: Box<PolicySet>, heuristic: Heuristic, assist: Assist, parity: ParityMode },
}

impl Runner {
    pub fn build(setup: &Setup, env: &ConveyorEnv, eval: &EvalConfig) -> Result<Self, HarnessError> {
        eval.validate()?;
        if let Some(spec) = eval.strategy.rule_spec() {
            return Ok(Runner::Heuristic(Heuristic::resolve(&spec, &setup.params, env)?));
        }
        let dir = eval.checkpoint.as_ref().expect("validated");
        let (policies, manifest) = PolicySet::load_bundle(
            dir,
            env.agents(),
            env.state_dim(),
            env.config().caps.fingerprint(),
            &setup.config.train.optimizer,
        )?;
        let junction_trained = env
            .agents()
            .iter()
            .filter(|a| a.class == AgentClass::Junction)
            .all(|a| policies.actor(a.index).is_some());
        if eval.strategy == Strategy::HybridMarlCheckpoint && !junction_trained {
            return Err(HarnessError::Config("hybrid_marl_checkpoint needs junction actors in the bundle".into()));
        }
        let spec = match &eval.heuristic {
            Some(s) => s.clone(),
            None => binding_spec(&manifest.heuristic_binding)?,
        };
        let heuristic = Heuristic::resolve(&spec, &setup.params, env)?;
        let parity = setup.config.train.parity;
        Ok(Runner::Marl { policies: Box::new(policies), heuristic, assist: eval.assist, parity })
    }

    /// One episode with greedy actor actions.
    pub fn episode(&self, env: &mut ConveyorEnv, seed: u64, trace: bool) -> Result<EpisodeBuffer, HarnessError> {
        let (policies, heuristic, mode, parity) = match self {
            Runner::Heuristic(h) => (None, h, InterleaveMode::HeuristicOnly, ParityMode::GlobalStep),
            Runner::Marl { policies, heuristic, assist, parity } => {
                let mode = match assist {
                    Assist::Assisted => InterleaveMode::AlternateByStep,
                    Assist::NonAssisted => InterleaveMode::ActorOnly,
                };
                (Some(policies.as_ref()), heuristic, mode, *parity)
            }
        };
        let opts = CollectOptions { interleave: InterleavePolicy { mode, parity }, selection: ActionSelection::Greedy, trace };
        Ok(collect_episode(env, policies, heuristic, opts, seed, seed)?)
    }
}

fn binding_spec(b: &crate::marl::HeuristicBinding) -> Result<HeuristicSpec, HarnessError> {
    Ok(match b.kind.as_str() {
        "random" => HeuristicSpec::Random,
        "low" => HeuristicSpec::Low,
        "medium" => HeuristicSpec::Medium,
        "high" => HeuristicSpec::High,
        "frozen" => HeuristicSpec::Frozen(PathBuf::from(
            b.bundle.clone().ok_or_else(|| HarnessError::Config("frozen binding without bundle path".into()))?,
        )),
        other => return Err(HarnessError::Config(format!("unknown heuristic binding {other}"))),
    })
}

/// Episodes on seeds `base_seed, base_seed + 1, ...`.
pub fn run_eval(setup: &Setup, eval: &EvalConfig) -> Result<Vec<EpisodeResult>, HarnessError> {
    let mut env = setup.env(eval.episode_steps)?;
    let runner = Runner::build(setup, &env, eval)?;
    (0..eval.episodes as u64)
        .map(|i| {
            let seed = eval.base_seed + i;
            let b = runner.episode(&mut env, seed, false)?;
            Ok(EpisodeResult { seed, throughput: b.throughput, episode_return: b.episode_return })
        })
        .collect()
}

/// One line of an action trace: a decision as taken, or a constraint override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub step: u64,
    /// `None` for overrides of pallets following a route rather than a fresh decision.
    pub agent_id: Option<usize>,
    pub agent_name: Option<String>,
    /// "decision" or "override".
    pub event: String,
    pub requested_action: usize,
    /// Action index, or "reroute" / "hold".
    pub applied_action: String,
    pub override_cause: Option<String>,
    /// Actor or heuristic, for decisions.
    pub source: Option<crate::marl::Source>,
    pub reward_delta: f64,
}

/// Decisions and overrides of one episode, in step order (decisions first
/// within a step).
pub fn trace_records(env: &ConveyorEnv, buf: &EpisodeBuffer) -> Vec<TraceRecord> {
    let reward = |step: u64| buf.rewards.get(step as usize).copied().unwrap_or(0.0);
    let name = |a: usize| env.agents().get(a).map(|s| s.name.clone());
    let mut out: Vec<(u64, u8, TraceRecord)> = buf
        .decisions
        .iter()
        .map(|d| {
            let rec = TraceRecord {
                step: d.step,
                agent_id: Some(d.agent),
                agent_name: name(d.agent),
                event: "decision".into(),
                requested_action: d.action,
                applied_action: d.action.to_string(),
                override_cause: None,
                source: Some(d.source),
                reward_delta: reward(d.step),
            };
            (d.step, 0, rec)
        })
        .collect();
    if let Some(sim) = env.sim() {
        for o in sim.overrides() {
            let applied = match o.applied {
                crate::sim::AppliedAction::Action(a) => a.to_string(),
                crate::sim::AppliedAction::Reroute => "reroute".into(),
                crate::sim::AppliedAction::Hold => "hold".into(),
            };
            let rec = TraceRecord {
                step: o.step,
                agent_id: o.agent,
                agent_name: o.agent.and_then(name),
                event: "override".into(),
                requested_action: o.requested,
                applied_action: applied,
                override_cause: Some(o.cause.as_str().into()),
                source: None,
                reward_delta: reward(o.step),
            };
            out.push((o.step, 1, rec));
        }
    }
    out.sort_by_key(|(step, kind, _)| (*step, *kind));
    out.into_iter().map(|(_, _, r)| r).collect()
}

/// Writes the trace of one episode as JSON lines; returns the episode's throughput.
pub fn export_trace<W: Write>(setup: &Setup, eval: &EvalConfig, seed: u64, mut out: W) -> Result<u64, HarnessError> {
    let mut env = setup.env(eval.episode_steps)?;
    let runner = Runner::build(setup, &env, eval)?;
    let buf = runner.episode(&mut env, seed, true)?;
    for rec in trace_records(&env, &buf) {
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(buf.throughput)
}

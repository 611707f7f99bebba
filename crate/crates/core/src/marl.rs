//! Event-based Monte-Carlo multi-agent PPO: decentralized actors, joint or
//! per-class critics, heuristic interleaving and best-checkpoint training.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{ConveyorEnv, EnvConfig, EnvError, Observation};
use crate::heuristics::{
    heuristic_high, heuristic_low, heuristic_medium, junction_least_pallets, random_baseline, DispatchContext,
    HeuristicError, HeuristicParams, JunctionContext,
};
use crate::neural::{
    argmax, entropy, hex_digest, log_softmax, sample, softmax, AdamW, AdamWConfig, Checkpoint, CheckpointError,
    Gradients, Mlp, NetRole, NeuralError,
};
use crate::sim::{AgentClass, AgentSpec, SimState};

#[derive(Debug, Error)]
pub enum MarlError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Heuristic(#[from] HeuristicError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("checkpoint does not fit agent {agent}: {reason}")]
    Mismatch { agent: String, reason: String },
    #[error("no checkpoint for agent {0}")]
    MissingCheckpoint(String),
    #[error("episode has not finished; returns need the full reward stream")]
    IncompleteEpisode,
}

// ---------------------------------------------------------------------------
// Transitions and buffers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Actor,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub agent: usize,
    pub state: Observation,
    pub action: usize,
    pub source: Source,
    /// Log-probability of `action` under the actor that was live at collection.
    pub old_log_prob: f64,
    pub step: u64,
    /// Discounted return from `step`; filled by [`compute_returns`].
    pub ret: f64,
}

/// One decision as it was taken, for traces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub step: u64,
    pub agent: usize,
    pub action: usize,
    pub source: Source,
}

#[derive(Debug, Clone, Default)]
pub struct EpisodeBuffer {
    /// Per-agent transitions in time order.
    pub transitions: Vec<Vec<Transition>>,
    /// Shared reward of every simulation step.
    pub rewards: Vec<f64>,
    /// Number of steps each agent had a pending event.
    pub indicator_counts: Vec<usize>,
    pub decisions: Vec<Decision>,
    pub episode_return: f64,
    pub throughput: u64,
    pub overrides: usize,
    pub complete: bool,
    pub seed: u64,
}

impl EpisodeBuffer {
    pub fn stored(&self) -> usize {
        self.transitions.iter().map(Vec::len).sum()
    }
}

/// `G[t] = r[t] + gamma * G[t+1]`, evaluated backwards over the stream.
pub fn discounted_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = rewards[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

pub fn compute_returns(buffer: &mut EpisodeBuffer, gamma: f64) -> Result<(), MarlError> {
    if !buffer.complete {
        return Err(MarlError::IncompleteEpisode);
    }
    let g = discounted_returns(&buffer.rewards, gamma);
    for tr in buffer.transitions.iter_mut().flatten() {
        tr.ret = g[tr.step as usize];
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Interleaving
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterleaveMode {
    AlternateByStep,
    ActorOnly,
    HeuristicOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParityMode {
    /// Parity of the simulation step.
    GlobalStep,
    /// Parity of the agent's own event counter.
    PerAgent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterleavePolicy {
    pub mode: InterleaveMode,
    pub parity: ParityMode,
}

impl InterleavePolicy {
    pub fn alternate() -> Self {
        InterleavePolicy { mode: InterleaveMode::AlternateByStep, parity: ParityMode::GlobalStep }
    }
    pub fn actor_only() -> Self {
        InterleavePolicy { mode: InterleaveMode::ActorOnly, parity: ParityMode::GlobalStep }
    }
    pub fn heuristic_only() -> Self {
        InterleavePolicy { mode: InterleaveMode::HeuristicOnly, parity: ParityMode::GlobalStep }
    }

    /// `event_index` is how many earlier events this agent had in the episode.
    pub fn source(&self, step: u64, event_index: usize) -> Source {
        match self.mode {
            InterleaveMode::ActorOnly => Source::Actor,
            InterleaveMode::HeuristicOnly => Source::Heuristic,
            InterleaveMode::AlternateByStep => {
                let even = match self.parity {
                    ParityMode::GlobalStep => step % 2 == 0,
                    ParityMode::PerAgent => event_index % 2 == 0,
                };
                if even { Source::Actor } else { Source::Heuristic }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Heuristic bindings
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Random,
    Low,
    Medium,
    High,
}

impl RuleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            RuleKind::Random => "random",
            RuleKind::Low => "low",
            RuleKind::Medium => "medium",
            RuleKind::High => "high",
        }
    }
}

/// Serializable heuristic binding: a rule, or a bundle of frozen actors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeuristicSpec {
    Random,
    Low,
    Medium,
    High,
    Frozen(PathBuf),
}

impl HeuristicSpec {
    pub fn rule(kind: RuleKind) -> Self {
        match kind {
            RuleKind::Random => HeuristicSpec::Random,
            RuleKind::Low => HeuristicSpec::Low,
            RuleKind::Medium => HeuristicSpec::Medium,
            RuleKind::High => HeuristicSpec::High,
        }
    }
}

/// Greedy actors with parameters that are never touched again. Junction
/// agents that were never trained fall back to the least-pallets rule.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenPolicy {
    actors: Vec<Option<Mlp>>,
    /// SHA-256 of each source checkpoint, in agent order, skipping rule-driven agents.
    pub hashes: Vec<String>,
}

impl FrozenPolicy {
    /// One checkpoint per agent, in agent order.
    pub fn from_checkpoints(
        checkpoints: &[Checkpoint],
        agents: &[AgentSpec],
        state_dim: usize,
        caps_fingerprint: u64,
    ) -> Result<Self, MarlError> {
        let slots: Vec<Option<Checkpoint>> = checkpoints.iter().cloned().map(Some).collect();
        Self::from_slots(slots, agents, state_dim, caps_fingerprint)
    }

    fn from_slots(
        slots: Vec<Option<Checkpoint>>,
        agents: &[AgentSpec],
        state_dim: usize,
        caps_fingerprint: u64,
    ) -> Result<Self, MarlError> {
        let mut actors = Vec::with_capacity(agents.len());
        let mut hashes = Vec::new();
        for spec in agents {
            match slots.get(spec.index).cloned().flatten() {
                Some(ck) => {
                    check_actor_fits(&ck, spec, state_dim, caps_fingerprint)?;
                    hashes.push(ck.content_hash());
                    actors.push(Some(ck.net));
                }
                None if spec.class == AgentClass::Junction && slots.len() > spec.index => actors.push(None),
                None => return Err(MarlError::MissingCheckpoint(spec.name.clone())),
            }
        }
        Ok(FrozenPolicy { actors, hashes })
    }

    /// Every agent listed as trained in the manifest must have a checkpoint.
    pub fn from_bundle(dir: &Path, agents: &[AgentSpec], state_dim: usize, caps_fingerprint: u64) -> Result<Self, MarlError> {
        let manifest = BundleManifest::read(dir)?;
        let mut slots = Vec::with_capacity(agents.len());
        for spec in agents {
            let entry = manifest.files.iter().find(|f| f.agent == Some(spec.index));
            let trained = manifest.trained_agents.contains(&spec.index);
            match entry {
                Some(e) => slots.push(Some(e.load_verified(dir)?)),
                None if spec.class == AgentClass::Junction && !trained => slots.push(None),
                None => return Err(MarlError::MissingCheckpoint(spec.name.clone())),
            }
        }
        Self::from_slots(slots, agents, state_dim, caps_fingerprint)
    }

    /// `None` when the agent is left to the junction rule.
    pub fn act(&self, agent: usize, obs: &[f64]) -> Result<Option<usize>, MarlError> {
        match self.actors.get(agent) {
            None => Err(MarlError::MissingCheckpoint(format!("#{agent}"))),
            Some(None) => Ok(None),
            Some(Some(net)) => Ok(Some(argmax(&net.forward(obs)?))),
        }
    }

    pub fn actor(&self, agent: usize) -> Option<&Mlp> {
        self.actors.get(agent).and_then(Option::as_ref)
    }
}

fn check_actor_fits(ck: &Checkpoint, spec: &AgentSpec, state_dim: usize, caps: u64) -> Result<(), MarlError> {
    let mismatch = |reason: String| MarlError::Mismatch { agent: spec.name.clone(), reason };
    let want_role = actor_role(spec.class);
    if ck.role != want_role {
        return Err(mismatch(format!("role {:?}, expected {:?}", ck.role, want_role)));
    }
    if ck.net.output_dim() != spec.action_dim {
        return Err(mismatch(format!("action_dim {} vs {}", ck.net.output_dim(), spec.action_dim)));
    }
    if ck.net.input_dim() != state_dim {
        return Err(mismatch(format!("state_dim {} vs {}", ck.net.input_dim(), state_dim)));
    }
    if ck.caps_fingerprint != caps {
        return Err(mismatch("normalization caps differ".into()));
    }
    Ok(())
}

fn actor_role(class: AgentClass) -> NetRole {
    match class {
        AgentClass::Receiving => NetRole::ReceivingActor,
        AgentClass::Junction => NetRole::JunctionActor,
    }
}

/// Runtime heuristic. Rules use the least-pallets rule at junctions.
#[derive(Debug, Clone)]
pub enum Heuristic {
    Rule(RuleKind, HeuristicParams),
    Frozen(FrozenPolicy),
}

impl Heuristic {
    pub fn resolve(spec: &HeuristicSpec, params: &HeuristicParams, env: &ConveyorEnv) -> Result<Self, MarlError> {
        Ok(match spec {
            HeuristicSpec::Random => Heuristic::Rule(RuleKind::Random, params.clone()),
            HeuristicSpec::Low => Heuristic::Rule(RuleKind::Low, params.clone()),
            HeuristicSpec::Medium => Heuristic::Rule(RuleKind::Medium, params.clone()),
            HeuristicSpec::High => Heuristic::Rule(RuleKind::High, params.clone()),
            HeuristicSpec::Frozen(dir) => Heuristic::Frozen(FrozenPolicy::from_bundle(
                dir,
                env.agents(),
                env.state_dim(),
                env.config().caps.fingerprint(),
            )?),
        })
    }

    pub fn act<R: Rng + ?Sized>(&self, sim: &SimState, spec: &AgentSpec, obs: &[f64], rng: &mut R) -> Result<usize, MarlError> {
        let junction_rule = || -> Result<usize, MarlError> {
            let j = sim.topology().junction_index(spec.node).ok_or(HeuristicError::UnknownJunction(spec.node.0))?;
            Ok(junction_least_pallets(&JunctionContext::from_sim(sim, j)?))
        };
        match self {
            Heuristic::Frozen(f) => match f.act(spec.index, obs)? {
                Some(a) => Ok(a),
                None => junction_rule(),
            },
            Heuristic::Rule(kind, params) => match spec.class {
                AgentClass::Junction => junction_rule(),
                AgentClass::Receiving => {
                    let ctx = DispatchContext::from_sim(sim, spec.node)?;
                    Ok(match kind {
                        RuleKind::Random => random_baseline(&ctx, rng)?,
                        RuleKind::Low => heuristic_low(&ctx, rng)?,
                        RuleKind::Medium => heuristic_medium(&ctx, params)?,
                        RuleKind::High => heuristic_high(&ctx, params)?,
                    })
                }
            },
        }
    }
}

// ---------------------------------------------------------------------------
// Policy set
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriticArch {
    Joint,
    Separate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Learner {
    pub net: Mlp,
    pub opt: AdamW,
}

impl Learner {
    pub fn new(net: Mlp, cfg: AdamWConfig) -> Self {
        let opt = AdamW::new(cfg, &net);
        Learner { net, opt }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySet {
    pub agents: Vec<AgentSpec>,
    /// `None` for agents left to the heuristic at every event.
    pub actors: Vec<Option<Learner>>,
    /// Joint: one critic. Separate: receiving then junction.
    pub critics: Vec<Learner>,
    pub arch: CriticArch,
    pub state_dim: usize,
    pub caps_fingerprint: u64,
}

impl PolicySet {
    pub fn new(
        agents: &[AgentSpec],
        state_dim: usize,
        hidden: &[usize],
        arch: CriticArch,
        train_junctions: bool,
        seed: u64,
        opt: &AdamWConfig,
        caps_fingerprint: u64,
    ) -> Result<Self, MarlError> {
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        let sizes = |out: usize| {
            let mut s = vec![state_dim];
            s.extend_from_slice(hidden);
            s.push(out);
            s
        };
        let mut actors = Vec::with_capacity(agents.len());
        for spec in agents {
            let s = seeds.random::<u64>();
            let trained = spec.class == AgentClass::Receiving || train_junctions;
            actors.push(if trained { Some(Learner::new(Mlp::new(&sizes(spec.action_dim), s)?, opt.clone())) } else { None });
        }
        let n_critics = match arch {
            CriticArch::Joint => 1,
            CriticArch::Separate => 2,
        };
        let critics = (0..n_critics)
            .map(|_| Mlp::new(&sizes(1), seeds.random::<u64>()).map(|n| Learner::new(n, opt.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PolicySet { agents: agents.to_vec(), actors, critics, arch, state_dim, caps_fingerprint })
    }

    pub fn actor(&self, agent: usize) -> Option<&Mlp> {
        self.actors.get(agent).and_then(|a| a.as_ref()).map(|l| &l.net)
    }

    pub fn critic_index(&self, class: AgentClass) -> usize {
        match (self.arch, class) {
            (CriticArch::Joint, _) => 0,
            (CriticArch::Separate, AgentClass::Receiving) => 0,
            (CriticArch::Separate, AgentClass::Junction) => 1,
        }
    }

    pub fn critic_for(&self, agent: usize) -> &Mlp {
        &self.critics[self.critic_index(self.agents[agent].class)].net
    }

    pub fn critic_roles(&self) -> Vec<NetRole> {
        match self.arch {
            CriticArch::Joint => vec![NetRole::JointCritic],
            CriticArch::Separate => vec![NetRole::ReceivingCritic, NetRole::JunctionCritic],
        }
    }

    pub fn value(&self, agent: usize, state: &[f64]) -> Result<f64, MarlError> {
        Ok(self.critic_for(agent).forward(state)?[0])
    }

    /// Writes one checkpoint per network and the manifest.
    pub fn save_bundle(&self, dir: &Path, mut manifest: BundleManifest) -> Result<BundleManifest, MarlError> {
        std::fs::create_dir_all(dir)?;
        manifest.files.clear();
        manifest.trained_agents = (0..self.agents.len()).filter(|&a| self.actor(a).is_some()).collect();
        manifest.caps_fingerprint = self.caps_fingerprint;
        manifest.critic_architecture = self.arch;
        for (spec, actor) in self.agents.iter().zip(&self.actors) {
            let Some(l) = actor else { continue };
            let ck = Checkpoint { role: actor_role(spec.class), caps_fingerprint: self.caps_fingerprint, net: l.net.clone() };
            let file = format!("actor_{:02}_{}.cvnn", spec.index, spec.name);
            manifest.files.push(write_checkpoint(dir, &file, &ck, Some(spec.index))?);
        }
        for (role, c) in self.critic_roles().into_iter().zip(&self.critics) {
            let ck = Checkpoint { role, caps_fingerprint: self.caps_fingerprint, net: c.net.clone() };
            let file = format!("{}.cvnn", role_name(role));
            manifest.files.push(write_checkpoint(dir, &file, &ck, None)?);
        }
        manifest.write(dir)?;
        Ok(manifest)
    }

    /// Rebuilds a policy set from a bundle; optimizer state starts fresh.
    pub fn load_bundle(
        dir: &Path,
        agents: &[AgentSpec],
        state_dim: usize,
        caps_fingerprint: u64,
        opt: &AdamWConfig,
    ) -> Result<(Self, BundleManifest), MarlError> {
        let manifest = BundleManifest::read(dir)?;
        let mut actors = Vec::with_capacity(agents.len());
        for spec in agents {
            match manifest.files.iter().find(|f| f.agent == Some(spec.index)) {
                Some(entry) => {
                    let ck = entry.load_verified(dir)?;
                    check_actor_fits(&ck, spec, state_dim, caps_fingerprint)?;
                    actors.push(Some(Learner::new(ck.net, opt.clone())));
                }
                None if spec.class == AgentClass::Junction && !manifest.trained_agents.contains(&spec.index) => {
                    actors.push(None)
                }
                None => return Err(MarlError::MissingCheckpoint(spec.name.clone())),
            }
        }
        let roles = match manifest.critic_architecture {
            CriticArch::Joint => vec![NetRole::JointCritic],
            CriticArch::Separate => vec![NetRole::ReceivingCritic, NetRole::JunctionCritic],
        };
        let mut critics = Vec::new();
        for role in roles {
            let entry = manifest
                .files
                .iter()
                .find(|f| f.role == role)
                .ok_or_else(|| MarlError::MissingCheckpoint(role_name(role).to_string()))?;
            critics.push(Learner::new(entry.load_verified(dir)?.net, opt.clone()));
        }
        let set = PolicySet {
            agents: agents.to_vec(),
            actors,
            critics,
            arch: manifest.critic_architecture,
            state_dim,
            caps_fingerprint,
        };
        Ok((set, manifest))
    }
}

fn role_name(role: NetRole) -> &'static str {
    match role {
        NetRole::ReceivingActor => "receiving_actor",
        NetRole::JunctionActor => "junction_actor",
        NetRole::JointCritic => "critic_joint",
        NetRole::ReceivingCritic => "critic_receiving",
        NetRole::JunctionCritic => "critic_junction",
    }
}

fn write_checkpoint(dir: &Path, file: &str, ck: &Checkpoint, agent: Option<usize>) -> Result<BundleFile, MarlError> {
    let bytes = ck.to_bytes();
    std::fs::write(dir.join(file), &bytes)?;
    Ok(BundleFile { role: ck.role, agent, file: file.to_string(), sha256: hex_digest(&bytes) })
}

// ---------------------------------------------------------------------------
// Bundle manifest
// ---------------------------------------------------------------------------

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleFile {
    pub role: NetRole,
    pub agent: Option<usize>,
    pub file: String,
    pub sha256: String,
}

impl BundleFile {
    pub fn load_verified(&self, dir: &Path) -> Result<Checkpoint, MarlError> {
        let bytes = std::fs::read(dir.join(&self.file))?;
        if hex_digest(&bytes) != self.sha256 {
            return Err(MarlError::Mismatch { agent: self.file.clone(), reason: "file hash differs from manifest".into() });
        }
        Ok(Checkpoint::from_bytes(&bytes)?)
    }
}

/// Where the interleaved heuristic came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeuristicBinding {
    pub kind: String,
    pub bundle: Option<String>,
    /// Hashes of the frozen checkpoints, by agent.
    pub checkpoint_hashes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub format_version: u32,
    pub critic_architecture: CriticArch,
    pub train_seed: u64,
    pub env_seed_base: u64,
    pub eval_seed_base: u64,
    pub config_hash: String,
    pub caps_fingerprint: u64,
    pub heuristic_binding: HeuristicBinding,
    pub best_episode: Option<usize>,
    pub best_eval_return: Option<f64>,
    /// Agents whose actors were trained; the rest follow the heuristic.
    #[serde(default)]
    pub trained_agents: Vec<usize>,
    pub files: Vec<BundleFile>,
}

impl BundleManifest {
    pub fn read(dir: &Path) -> Result<Self, MarlError> {
        let text = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, dir: &Path) -> Result<(), MarlError> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST_FILE), text)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Collection
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActionSelection {
    Sample,
    Greedy,
}

#[derive(Debug, Clone, Copy)]
pub struct CollectOptions {
    pub interleave: InterleavePolicy,
    pub selection: ActionSelection,
    /// Keep a per-decision trace in the buffer.
    pub trace: bool,
}

/// Runs one episode from `env.reset(seed)`. Actor sampling and stochastic
/// rules draw from separate streams of a generator keyed by `rng_seed`.
pub fn collect_episode(
    env: &mut ConveyorEnv,
    policies: Option<&PolicySet>,
    heuristic: &Heuristic,
    opts: CollectOptions,
    seed: u64,
    rng_seed: u64,
) -> Result<EpisodeBuffer, MarlError> {
    let mut act_rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut heur_rng = ChaCha8Rng::seed_from_u64(rng_seed);
    heur_rng.set_stream(1);

    let n = env.agents().len();
    let specs = env.agents().to_vec();
    let mut buf = EpisodeBuffer {
        transitions: vec![Vec::new(); n],
        indicator_counts: vec![0; n],
        seed,
        ..Default::default()
    };
    let mut res = env.reset(seed)?;
    let mut step: u64 = 0;
    let mut actions: Vec<Option<usize>> = vec![None; n];
    while !res.done {
        let sim = env.sim().ok_or(EnvError::NotReset)?;
        for (a, slot) in actions.iter_mut().enumerate() {
            *slot = None;
            if !res.indicator(a) {
                continue;
            }
            let event_index = buf.indicator_counts[a];
            buf.indicator_counts[a] += 1;
            let obs = &res.observations[a];
            let actor = policies.and_then(|p| p.actor(a));
            let source = if actor.is_some() { opts.interleave.source(step, event_index) } else { Source::Heuristic };
            let logits = actor.map(|net| net.forward(obs)).transpose()?;
            let action = match (source, &logits) {
                (Source::Actor, Some(l)) => match opts.selection {
                    ActionSelection::Sample => sample(&softmax(l), &mut act_rng),
                    ActionSelection::Greedy => argmax(l),
                },
                _ => heuristic.act(sim, &specs[a], obs, &mut heur_rng)?,
            };
            if let Some(l) = &logits {
                buf.transitions[a].push(Transition {
                    agent: a,
                    state: obs.clone(),
                    action,
                    source,
                    old_log_prob: log_softmax(l)[action],
                    step,
                    ret: 0.0,
                });
            }
            if opts.trace {
                buf.decisions.push(Decision { step, agent: a, action, source });
            }
            *slot = Some(action);
        }
        res = env.step(&actions)?;
        buf.rewards.push(res.reward);
        buf.episode_return += res.reward;
        step += 1;
    }
    let sim = env.sim().ok_or(EnvError::NotReset)?;
    buf.throughput = sim.counters().total();
    buf.overrides = sim.overrides().len();
    buf.complete = true;
    Ok(buf)
}

// ---------------------------------------------------------------------------
// Losses and updates
// ---------------------------------------------------------------------------

/// Per-sample clipped surrogate `min(r A, clip(r, 1-eps, 1+eps) A)`.
pub fn clipped_objective(ratio: f64, advantage: f64, eps: f64) -> f64 {
    (ratio * advantage).min(ratio.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy)]
pub struct ActorSample<'a> {
    pub state: &'a [f64],
    pub action: usize,
    pub old_log_prob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActorLoss {
    /// Negated mean surrogate (minus the entropy bonus).
    pub loss: f64,
    pub grads: Gradients,
    /// Share of samples whose ratio left [1-eps, 1+eps].
    pub clip_fraction: f64,
}

/// Loss `-(mean L^CLIP + c * mean H)` and its exact gradient.
pub fn actor_loss_and_grad(net: &Mlp, batch: &[ActorSample], eps: f64, entropy_coef: f64) -> Result<ActorLoss, MarlError> {
    let mut grads = Gradients::zeros_like(net);
    if batch.is_empty() {
        return Ok(ActorLoss { loss: 0.0, grads, clip_fraction: 0.0 });
    }
    let n = batch.len() as f64;
    let mut total = 0.0;
    let mut clipped = 0usize;
    for s in batch {
        let cache = net.forward_cached(s.state)?;
        let logits = cache.output();
        let lsm = log_softmax(logits);
        let probs: Vec<f64> = lsm.iter().map(|l| l.exp()).collect();
        let ratio = (lsm[s.action] - s.old_log_prob).exp();
        let obj = clipped_objective(ratio, s.advantage, eps);
        if (ratio - 1.0).abs() > eps {
            clipped += 1;
        }
        // The unclipped branch carries the gradient unless clip binds.
        let unclipped_active = ratio * s.advantage <= ratio.clamp(1.0 - eps, 1.0 + eps) * s.advantage;
        let dobj_dlogp = if unclipped_active { ratio * s.advantage } else { 0.0 };
        let mut upstream: Vec<f64> = probs.iter().map(|p| dobj_dlogp * -p).collect();
        upstream[s.action] += dobj_dlogp;
        let mut sample_obj = obj;
        if entropy_coef != 0.0 {
            let h = entropy(&probs);
            sample_obj += entropy_coef * h;
            for (j, u) in upstream.iter_mut().enumerate() {
                *u += entropy_coef * -probs[j] * (lsm[j] + h);
            }
        }
        total += sample_obj;
        // Descend on the negated objective averaged over the batch.
        upstream.iter_mut().for_each(|u| *u = -*u / n);
        net.backward_into(&cache, &upstream, &mut grads)?;
    }
    Ok(ActorLoss { loss: -total / n, grads, clip_fraction: clipped as f64 / n })
}

/// `mean((V(s) - R)^2)` and its gradient.
pub fn critic_loss_and_grad(net: &Mlp, states: &[&[f64]], returns: &[f64]) -> Result<(f64, Gradients), MarlError> {
    if states.len() != returns.len() {
        return Err(NeuralError::Shape { expected: states.len(), got: returns.len() }.into());
    }
    let mut grads = Gradients::zeros_like(net);
    if states.is_empty() {
        return Ok((0.0, grads));
    }
    let n = states.len() as f64;
    let mut loss = 0.0;
    for (s, r) in states.iter().zip(returns) {
        let cache = net.forward_cached(s)?;
        let err = cache.output()[0] - r;
        loss += err * err;
        net.backward_into(&cache, &[2.0 * err / n], &mut grads)?;
    }
    Ok((loss / n, grads))
}

/// Raw `R - V(s)` per transition, using the class-matched critic.
pub fn compute_advantages(policies: &PolicySet, transitions: &[&Transition]) -> Result<Vec<f64>, MarlError> {
    transitions.iter().map(|t| Ok(t.ret - policies.value(t.agent, &t.state)?)).collect()
}

/// Zero mean, unit variance; a constant batch only gets centered.
pub fn normalize_advantages(adv: &[f64]) -> Vec<f64> {
    if adv.is_empty() {
        return Vec::new();
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd < 1e-12 {
        adv.iter().map(|a| a - mean).collect()
    } else {
        adv.iter().map(|a| (a - mean) / sd).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PpoConfig {
    pub gamma: f64,
    pub clip_eps: f64,
    pub epochs: usize,
    pub entropy_coef: f64,
    /// Let heuristic-sourced transitions into the actor loss (they always
    /// train the critic).
    pub heuristic_in_actor_loss: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig { gamma: 0.99, clip_eps: 0.2, epochs: 4, entropy_coef: 0.0, heuristic_in_actor_loss: true }
    }
}

impl PpoConfig {
    pub fn validate(&self) -> Result<(), MarlError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(MarlError::Config(format!("gamma must lie in (0,1), got {}", self.gamma)));
        }
        if !(self.clip_eps > 0.0) {
            return Err(MarlError::Config("clip_eps must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(MarlError::Config("epochs must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ActorUpdateStats {
    /// Loss before the first step.
    pub loss: f64,
    pub clip_fraction: f64,
    pub samples: usize,
}

/// K full-batch AdamW steps on the clipped surrogate. An empty batch is a no-op.
pub fn ppo_actor_update(learner: &mut Learner, batch: &[ActorSample], cfg: &PpoConfig) -> Result<ActorUpdateStats, MarlError> {
    if batch.is_empty() {
        return Ok(ActorUpdateStats::default());
    }
    let mut stats = ActorUpdateStats { samples: batch.len(), ..Default::default() };
    let mut clip_sum = 0.0;
    for epoch in 0..cfg.epochs {
        let out = actor_loss_and_grad(&learner.net, batch, cfg.clip_eps, cfg.entropy_coef)?;
        if epoch == 0 {
            stats.loss = out.loss;
        }
        clip_sum += out.clip_fraction;
        learner.opt.step(&mut learner.net, &out.grads)?;
    }
    stats.clip_fraction = clip_sum / cfg.epochs as f64;
    Ok(stats)
}

/// K full-batch AdamW steps on the squared error. Returns the loss before updating.
pub fn critic_update(learner: &mut Learner, states: &[&[f64]], returns: &[f64], epochs: usize) -> Result<f64, MarlError> {
    if states.is_empty() {
        return Ok(0.0);
    }
    let mut first = 0.0;
    for epoch in 0..epochs {
        let (loss, g) = critic_loss_and_grad(&learner.net, states, returns)?;
        if epoch == 0 {
            first = loss;
        }
        learner.opt.step(&mut learner.net, &g)?;
    }
    Ok(first)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct UpdateStats {
    pub actor: Vec<Option<ActorUpdateStats>>,
    pub critic_loss: f64,
    pub clip_fraction: f64,
}

/// Advantages from the pre-update critic, then actor updates, then critic updates.
pub fn update_policies(policies: &mut PolicySet, buffer: &EpisodeBuffer, cfg: &PpoConfig) -> Result<UpdateStats, MarlError> {
    let n = policies.agents.len();
    let mut stats = UpdateStats { actor: vec![None; n], ..Default::default() };

    let mut advantages: Vec<Vec<f64>> = Vec::with_capacity(n);
    for a in 0..n {
        let trs: Vec<&Transition> = buffer.transitions[a].iter().collect();
        advantages.push(if policies.actor(a).is_some() { compute_advantages(policies, &trs)? } else { Vec::new() });
    }

    let mut clip_weighted = 0.0;
    let mut clip_samples = 0usize;
    for a in 0..n {
        if policies.actors[a].is_none() {
            continue;
        }
        let keep: Vec<usize> = buffer.transitions[a]
            .iter()
            .enumerate()
            .filter(|(_, t)| cfg.heuristic_in_actor_loss || t.source == Source::Actor)
            .map(|(i, _)| i)
            .collect();
        let raw: Vec<f64> = keep.iter().map(|&i| advantages[a][i]).collect();
        let norm = normalize_advantages(&raw);
        let batch: Vec<ActorSample> = keep
            .iter()
            .zip(&norm)
            .map(|(&i, &adv)| {
                let t = &buffer.transitions[a][i];
                ActorSample { state: &t.state, action: t.action, old_log_prob: t.old_log_prob, advantage: adv }
            })
            .collect();
        let learner = policies.actors[a].as_mut().expect("checked");
        let s = ppo_actor_update(learner, &batch, cfg)?;
        clip_weighted += s.clip_fraction * s.samples as f64;
        clip_samples += s.samples;
        stats.actor[a] = Some(s);
    }
    stats.clip_fraction = if clip_samples > 0 { clip_weighted / clip_samples as f64 } else { 0.0 };

    let mut critic_loss = 0.0;
    let mut critic_samples = 0usize;
    for c in 0..policies.critics.len() {
        let mut states: Vec<&[f64]> = Vec::new();
        let mut returns = Vec::new();
        for t in buffer.transitions.iter().flatten() {
            if policies.critic_index(policies.agents[t.agent].class) == c {
                states.push(&t.state);
                returns.push(t.ret);
            }
        }
        let loss = critic_update(&mut policies.critics[c], &states, &returns, cfg.epochs)?;
        critic_loss += loss * states.len() as f64;
        critic_samples += states.len();
    }
    stats.critic_loss = if critic_samples > 0 { critic_loss / critic_samples as f64 } else { 0.0 };
    Ok(stats)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Assist {
    Assisted,
    NonAssisted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub seed: u64,
    pub throughput: u64,
    pub episode_return: f64,
}

/// Greedy actors; assisted runs interleave the heuristic as in training.
pub fn evaluate_policies(
    env: &mut ConveyorEnv,
    policies: &PolicySet,
    heuristic: &Heuristic,
    assist: Assist,
    parity: ParityMode,
    seeds: impl IntoIterator<Item = u64>,
) -> Result<Vec<EpisodeResult>, MarlError> {
    let mode = match assist {
        Assist::Assisted => InterleaveMode::AlternateByStep,
        Assist::NonAssisted => InterleaveMode::ActorOnly,
    };
    let opts = CollectOptions {
        interleave: InterleavePolicy { mode, parity },
        selection: ActionSelection::Greedy,
        trace: false,
    };
    seeds
        .into_iter()
        .map(|seed| {
            let b = collect_episode(env, Some(policies), heuristic, opts, seed, seed)?;
            Ok(EpisodeResult { seed, throughput: b.throughput, episode_return: b.episode_return })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub episodes: usize,
    /// Network initialization and action sampling.
    pub seed: u64,
    /// Training episode `i` resets the env with `env_seed_base + i`.
    pub env_seed_base: u64,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_seed_base: u64,
    pub interleave: InterleaveMode,
    pub parity: ParityMode,
    pub critic: CriticArch,
    pub heuristic: HeuristicSpec,
    pub train_junctions: bool,
    pub hidden: Vec<usize>,
    pub ppo: PpoConfig,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            episodes: 300,
            seed: 0,
            env_seed_base: 1_000_000,
            eval_every: 10,
            eval_episodes: 5,
            eval_seed_base: 2_000_000,
            interleave: InterleaveMode::AlternateByStep,
            parity: ParityMode::GlobalStep,
            critic: CriticArch::Joint,
            heuristic: HeuristicSpec::High,
            train_junctions: false,
            hidden: vec![64, 64],
            ppo: PpoConfig::default(),
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MarlError> {
        self.ppo.validate()?;
        if self.episodes == 0 {
            return Err(MarlError::Config("episodes must be at least 1".into()));
        }
        if self.eval_every == 0 || self.eval_episodes == 0 {
            return Err(MarlError::Config("eval_every and eval_episodes must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(MarlError::Config("hidden layer sizes must be positive".into()));
        }
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.eps > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.weight_decay >= 0.0) {
            return Err(MarlError::Config("invalid optimizer settings".into()));
        }
        Ok(())
    }
}

/// Hex SHA-256 over the JSON of the env and training configs.
pub fn config_hash(env: &EnvConfig, train: &TrainConfig) -> String {
    let doc = serde_json::json!({ "env": env, "train": train });
    hex_digest(doc.to_string().as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub episode: usize,
    pub train_return: f64,
    pub train_throughput: u64,
    pub eval_return_mean: Option<f64>,
    pub actor_loss: Vec<Option<f64>>,
    pub critic_loss: f64,
    pub clip_fraction: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub agent_names: Vec<String>,
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["episode".to_string(), "train_return".into(), "train_throughput".into(), "eval_return_mean".into()];
        h.extend(self.agent_names.iter().map(|n| format!("actor_loss_{n}")));
        h.extend(["critic_loss".to_string(), "clip_fraction".into(), "wall_time_s".into()]);
        h
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<(), MarlError> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![
                r.episode.to_string(),
                r.train_return.to_string(),
                r.train_throughput.to_string(),
                r.eval_return_mean.map(|v| v.to_string()).unwrap_or_default(),
            ];
            rec.extend(r.actor_loss.iter().map(|l| l.map(|v| v.to_string()).unwrap_or_default()));
            rec.extend([r.critic_loss.to_string(), r.clip_fraction.to_string(), r.wall_time_s.to_string()]);
            out.write_record(rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: PolicySet,
    pub best_episode: usize,
    pub best_eval_return: f64,
    pub log: TrainLog,
    pub config_hash: String,
    pub heuristic_binding: HeuristicBinding,
}

impl TrainOutcome {
    pub fn manifest(&self, cfg: &TrainConfig) -> BundleManifest {
        BundleManifest {
            format_version: 1,
            critic_architecture: self.best.arch,
            train_seed: cfg.seed,
            env_seed_base: cfg.env_seed_base,
            eval_seed_base: cfg.eval_seed_base,
            config_hash: self.config_hash.clone(),
            caps_fingerprint: self.best.caps_fingerprint,
            heuristic_binding: self.heuristic_binding.clone(),
            best_episode: Some(self.best_episode),
            best_eval_return: Some(self.best_eval_return),
            trained_agents: Vec::new(),
            files: Vec::new(),
        }
    }

    pub fn save_bundle(&self, dir: &Path, cfg: &TrainConfig) -> Result<BundleManifest, MarlError> {
        self.best.save_bundle(dir, self.manifest(cfg))
    }
}

pub fn describe_binding(spec: &HeuristicSpec, heuristic: &Heuristic) -> HeuristicBinding {
    match (spec, heuristic) {
        (HeuristicSpec::Frozen(dir), Heuristic::Frozen(f)) => HeuristicBinding {
            kind: "frozen".into(),
            bundle: Some(dir.display().to_string()),
            checkpoint_hashes: f.hashes.clone(),
        },
        (_, Heuristic::Rule(kind, _)) => {
            HeuristicBinding { kind: kind.as_str().into(), bundle: None, checkpoint_hashes: Vec::new() }
        }
        (_, Heuristic::Frozen(f)) => {
            HeuristicBinding { kind: "frozen".into(), bundle: None, checkpoint_hashes: f.hashes.clone() }
        }
    }
}

/// Runs the collect / update / evaluate loop and keeps the best-evaluating
/// policy set. `on_row` sees every log row as soon as it is produced.
pub fn train_with<F: FnMut(&LogRow)>(
    env: &mut ConveyorEnv,
    params: &HeuristicParams,
    cfg: &TrainConfig,
    mut on_row: F,
) -> Result<TrainOutcome, MarlError> {
    cfg.validate()?;
    let heuristic = Heuristic::resolve(&cfg.heuristic, params, env)?;
    let caps = env.config().caps.fingerprint();
    let mut policies = PolicySet::new(
        env.agents(),
        env.state_dim(),
        &cfg.hidden,
        cfg.critic,
        cfg.train_junctions,
        cfg.seed,
        &cfg.optimizer,
        caps,
    )?;
    let opts = CollectOptions {
        interleave: InterleavePolicy { mode: cfg.interleave, parity: cfg.parity },
        selection: ActionSelection::Sample,
        trace: false,
    };
    let mut log = TrainLog { agent_names: env.agents().iter().map(|a| a.name.clone()).collect(), rows: Vec::new() };
    let mut best: Option<(PolicySet, usize, f64)> = None;
    let start = Instant::now();
    let mut rng_seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng_seeds.set_stream(7);

    for ep in 0..cfg.episodes {
        let rng_seed = rng_seeds.random::<u64>();
        let mut buf = collect_episode(env, Some(&policies), &heuristic, opts, cfg.env_seed_base + ep as u64, rng_seed)?;
        compute_returns(&mut buf, cfg.ppo.gamma)?;
        let stats = update_policies(&mut policies, &buf, &cfg.ppo)?;

        let eval = if (ep + 1) % cfg.eval_every == 0 || ep + 1 == cfg.episodes {
            let seeds = (0..cfg.eval_episodes as u64).map(|i| cfg.eval_seed_base + i);
            let res = evaluate_policies(env, &policies, &heuristic, Assist::NonAssisted, cfg.parity, seeds)?;
            let mean = res.iter().map(|r| r.episode_return).sum::<f64>() / res.len() as f64;
            if best.as_ref().is_none_or(|(_, _, b)| mean > *b) {
                best = Some((policies.clone(), ep, mean));
            }
            Some(mean)
        } else {
            None
        };

        let row = LogRow {
            episode: ep,
            train_return: buf.episode_return,
            train_throughput: buf.throughput,
            eval_return_mean: eval,
            actor_loss: stats.actor.iter().map(|s| s.map(|s| s.loss)).collect(),
            critic_loss: stats.critic_loss,
            clip_fraction: stats.clip_fraction,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        on_row(&row);
        log.rows.push(row);
    }
    let (best, best_episode, best_eval_return) = best.expect("the final episode always evaluates");
    Ok(TrainOutcome {
        best,
        best_episode,
        best_eval_return,
        log,
        config_hash: config_hash(env.config(), cfg),
        heuristic_binding: describe_binding(&cfg.heuristic, &heuristic),
    })
}

pub fn train(env: &mut ConveyorEnv, params: &HeuristicParams, cfg: &TrainConfig) -> Result<TrainOutcome, MarlError> {
    train_with(env, params, cfg, |_| {})
}

/// Second-iteration config: same settings, heuristic bound to the frozen
/// first-iteration actors. The bundle is checked against the env up front.
pub fn make_second_iteration_config(first: &TrainConfig, bundle: &Path, env: &ConveyorEnv) -> Result<TrainConfig, MarlError> {
    FrozenPolicy::from_bundle(bundle, env.agents(), env.state_dim(), env.config().caps.fingerprint())?;
    Ok(TrainConfig { heuristic: HeuristicSpec::Frozen(bundle.to_path_buf()), ..first.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::DemandModel;
    use crate::topology::build_default_preset;
    use std::sync::Arc;

    fn env(steps: u64) -> ConveyorEnv {
        let t = Arc::new(build_default_preset());
        let d = DemandModel::default_for(&t);
        ConveyorEnv::new(t, d, EnvConfig { episode_steps: steps, ..EnvConfig::default() }).unwrap()
    }

    fn policies(e: &ConveyorEnv, arch: CriticArch) -> PolicySet {
        PolicySet::new(e.agents(), e.state_dim(), &[16, 16], arch, true, 5, &AdamWConfig::default(), e.config().caps.fingerprint())
            .unwrap()
    }

    fn high(e: &ConveyorEnv) -> Heuristic {
        Heuristic::Rule(RuleKind::High, HeuristicParams::default_for(e.topology()))
    }

    #[test]
    fn returns_hand_case() {
        assert_eq!(discounted_returns(&[1.0, 0.0, 2.0], 0.5), vec![1.5, 1.0, 2.0]);
        assert_eq!(discounted_returns(&[3.0, 4.0], 0.0), vec![3.0, 4.0]);
        assert_eq!(discounted_returns(&[0.0; 4], 0.9), vec![0.0; 4]);
    }

    #[test]
    fn returns_need_complete_episode() {
        let mut b = EpisodeBuffer::default();
        assert!(matches!(compute_returns(&mut b, 0.9), Err(MarlError::IncompleteEpisode)));
    }

    #[test]
    fn clip_hand_cases() {
        assert!((clipped_objective(1.5, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(clipped_objective(1.0, -0.7, 0.2), -0.7);
        assert!((clipped_objective(0.5, -1.0, 0.2) + 0.8).abs() < 1e-15);
    }

    #[test]
    fn parity_rules() {
        let p = InterleavePolicy::alternate();
        assert_eq!(p.source(4, 1), Source::Actor);
        assert_eq!(p.source(5, 0), Source::Heuristic);
        let q = InterleavePolicy { parity: ParityMode::PerAgent, ..p };
        assert_eq!(q.source(5, 0), Source::Actor);
        assert_eq!(q.source(4, 1), Source::Heuristic);
        assert_eq!(InterleavePolicy::actor_only().source(3, 3), Source::Actor);
        assert_eq!(InterleavePolicy::heuristic_only().source(2, 0), Source::Heuristic);
    }

    #[test]
    fn collect_masks_events_and_tags_sources() {
        let mut e = env(800);
        let p = policies(&e, CriticArch::Joint);
        let opts = CollectOptions { interleave: InterleavePolicy::alternate(), selection: ActionSelection::Sample, trace: true };
        let h = high(&e);
        let b = collect_episode(&mut e, Some(&p), &h, opts, 3, 9).unwrap();
        assert_eq!(b.rewards.len(), 800);
        for a in 0..8 {
            assert_eq!(b.transitions[a].len(), b.indicator_counts[a]);
            for t in &b.transitions[a] {
                let want = if t.step % 2 == 0 { Source::Actor } else { Source::Heuristic };
                assert_eq!(t.source, want);
            }
        }
        assert_eq!(b.decisions.len(), b.stored());
        assert!(b.stored() > 0);
    }

    #[test]
    fn actor_only_collect_has_only_actor_sources() {
        let mut e = env(500);
        let p = policies(&e, CriticArch::Separate);
        let opts = CollectOptions { interleave: InterleavePolicy::actor_only(), selection: ActionSelection::Sample, trace: false };
        let h = high(&e);
        let b = collect_episode(&mut e, Some(&p), &h, opts, 1, 1).unwrap();
        assert!(b.transitions.iter().flatten().all(|t| t.source == Source::Actor));
    }

    #[test]
    fn critic_scalar_case() {
        let net = Mlp::from_params(&[1, 1], vec![0.0, 0.0]).unwrap();
        let (loss, g) = critic_loss_and_grad(&net, &[&[1.0]], &[2.0]).unwrap();
        assert_eq!(loss, 4.0);
        assert_eq!(g.0, vec![-4.0, -4.0]);
        let (loss, g) = critic_loss_and_grad(&net, &[&[1.0]], &[0.0]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(g.0.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn empty_actor_batch_is_noop() {
        let e = env(10);
        let mut p = policies(&e, CriticArch::Joint);
        let before = p.actors[0].clone();
        let s = ppo_actor_update(p.actors[0].as_mut().unwrap(), &[], &PpoConfig::default()).unwrap();
        assert_eq!(s.samples, 0);
        assert_eq!(p.actors[0], before);
    }

    #[test]
    fn normalized_advantages_are_standardized() {
        let n = normalize_advantages(&[1.0, 2.0, 3.0, 6.0]);
        let mean: f64 = n.iter().sum::<f64>() / 4.0;
        let var: f64 = n.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
        assert_eq!(normalize_advantages(&[2.0, 2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn critic_index_by_arch() {
        let e = env(10);
        let j = policies(&e, CriticArch::Joint);
        let s = policies(&e, CriticArch::Separate);
        assert_eq!(j.critics.len(), 1);
        assert_eq!(s.critics.len(), 2);
        assert_eq!(s.critic_index(AgentClass::Junction), 1);
        assert_eq!(j.critic_index(AgentClass::Junction), 0);
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        assert!(c.validate().is_ok());
        c.ppo.gamma = 1.0;
        assert!(c.validate().is_err());
        let c = TrainConfig { episodes: 0, ..TrainConfig::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn heuristic_spec_toml_shape() {
        #[derive(Serialize, Deserialize)]
        struct W {
            h: HeuristicSpec,
        }
        let w: W = toml::from_str("h = \"medium\"").unwrap();
        assert_eq!(w.h, HeuristicSpec::Medium);
        let w: W = toml::from_str("h = { frozen = \"runs/a\" }").unwrap();
        assert_eq!(w.h, HeuristicSpec::Frozen(PathBuf::from("runs/a")));
    }
}

//! Multi-agent environment over the simulator: reset/step lifecycle,
//! normalized global observations with a per-agent identifier, event
//! indicators and the shared team reward.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::{AgentClass, AgentSpec, DemandModel, EventSet, SimError, SimState};
use crate::topology::Topology;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum JunctionStateDim {
    /// One count per junction: pallets on its connecting section.
    #[serde(rename = "4")]
    PerJunction,
    /// Two counts per junction: connecting section and own-loop downstream segment.
    #[serde(rename = "8")]
    PerDirection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationCaps {
    /// Divisor for pallets heading to a storage.
    pub heading_cap: f64,
    /// Divisor for junction counts.
    pub junction_cap: f64,
    /// Half-width D of the out-minus-in encoding (diff + D) / 2D.
    pub diff_span: f64,
}

impl Default for NormalizationCaps {
    fn default() -> Self {
        NormalizationCaps { heading_cap: 500.0, junction_cap: 10.0, diff_span: 16.0 }
    }
}

impl NormalizationCaps {
    /// Stable 64-bit fingerprint stored in checkpoints.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [self.heading_cap, self.junction_cap, self.diff_span] {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub seed: u64,
    pub episode_steps: u64,
    pub reward_scale: f64,
    pub total_pallets: usize,
    pub caps: NormalizationCaps,
    pub junction_state_dim: JunctionStateDim,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            seed: 0,
            episode_steps: crate::sim::DEFAULT_EPISODE_STEPS,
            reward_scale: crate::sim::DEFAULT_REWARD_SCALE,
            total_pallets: crate::sim::DEFAULT_TOTAL_PALLETS,
            caps: NormalizationCaps::default(),
            junction_state_dim: JunctionStateDim::PerJunction,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        let c = &self.caps;
        if !(c.heading_cap > 0.0 && c.junction_cap > 0.0 && c.diff_span > 0.0) {
            return Err(EnvError::Config("normalization caps must be positive".into()));
        }
        if self.episode_steps == 0 {
            return Err(EnvError::Config("episode_steps must be positive".into()));
        }
        if !(self.reward_scale.is_finite()) {
            return Err(EnvError::Config("reward_scale must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("invalid environment config: {0}")]
    Config(String),
    #[error("missing action for flagged agent {0}")]
    MissingAction(usize),
    #[error("extra action for agent {0}, which has no pending event")]
    ExtraAction(usize),
    #[error("action {action} out of range for agent {agent} (valid 0..{dim})")]
    ActionOutOfRange { agent: usize, action: usize, dim: usize },
    #[error("unknown agent {0}")]
    UnknownAgent(usize),
    #[error("environment must be reset before stepping")]
    NotReset,
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Observation = Vec<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub observations: Vec<Observation>,
    pub events: EventSet,
    pub reward: f64,
    pub done: bool,
}

impl StepResult {
    pub fn indicator(&self, agent: usize) -> bool {
        self.events.indicator(agent)
    }
}

pub struct ConveyorEnv {
    topology: Arc<Topology>,
    demand: DemandModel,
    config: EnvConfig,
    agents: Vec<AgentSpec>,
    sim: Option<SimState>,
    record_completions: bool,
}

impl ConveyorEnv {
    pub fn new(topology: Arc<Topology>, demand: DemandModel, config: EnvConfig) -> Result<Self, EnvError> {
        config.validate()?;
        demand.validate(&topology)?;
        let agents = crate::sim::agent_specs(&topology);
        Ok(ConveyorEnv { topology, demand, config, agents, sim: None, record_completions: false })
    }

    /// Keeps the simulator's completion log on every reset.
    pub fn with_completion_log(mut self) -> Self {
        self.record_completions = true;
        self
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }
    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }
    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }
    pub fn sim(&self) -> Option<&SimState> {
        self.sim.as_ref()
    }
    pub fn state_dim(&self) -> usize {
        let n_st = self.topology.storages().len();
        let n_j = self.topology.junctions().len();
        let jdim = match self.config.junction_state_dim {
            JunctionStateDim::PerJunction => n_j,
            JunctionStateDim::PerDirection => 2 * n_j,
        };
        1 + n_st + jdim + n_st
    }

    pub fn reset(&mut self, seed: u64) -> Result<StepResult, EnvError> {
        let mut sim = SimState::init(Arc::clone(&self.topology), self.demand.clone(), self.config.total_pallets, seed)?
            .with_episode_steps(self.config.episode_steps)
            .with_reward_scale(self.config.reward_scale);
        if self.record_completions {
            sim = sim.record_completions();
        }
        self.sim = Some(sim);
        Ok(self.result(0.0))
    }

    /// `actions[a]` must be `Some` exactly for the agents flagged in the previous result.
    pub fn step(&mut self, actions: &[Option<usize>]) -> Result<StepResult, EnvError> {
        let sim = self.sim.as_mut().ok_or(EnvError::NotReset)?;
        if actions.len() != self.agents.len() {
            return Err(EnvError::Config(format!(
                "action vector has {} entries for {} agents",
                actions.len(),
                self.agents.len()
            )));
        }
        for (a, act) in actions.iter().enumerate() {
            match (sim.events().indicator(a), act) {
                (true, None) => return Err(EnvError::MissingAction(a)),
                (false, Some(_)) => return Err(EnvError::ExtraAction(a)),
                (true, Some(x)) if *x >= self.agents[a].action_dim => {
                    return Err(EnvError::ActionOutOfRange { agent: a, action: *x, dim: self.agents[a].action_dim })
                }
                _ => {}
            }
        }
        let (_, reward) = sim.step(actions)?;
        Ok(self.result(reward))
    }

    fn result(&self, reward: f64) -> StepResult {
        let sim = self.sim.as_ref().expect("reset");
        let global = self.global_features(sim);
        let observations = (0..self.agents.len()).map(|a| self.with_identifier(&global, a)).collect();
        StepResult { observations, events: sim.events().clone(), reward, done: sim.is_done() }
    }

    pub fn observe(&self, agent: usize) -> Result<Observation, EnvError> {
        if agent >= self.agents.len() {
            return Err(EnvError::UnknownAgent(agent));
        }
        let sim = self.sim.as_ref().ok_or(EnvError::NotReset)?;
        Ok(self.with_identifier(&self.global_features(sim), agent))
    }

    pub fn process_identifier(&self, agent: usize) -> f64 {
        let n = self.agents.len();
        if n <= 1 { 0.0 } else { agent as f64 / (n - 1) as f64 }
    }

    fn with_identifier(&self, global: &[f64], agent: usize) -> Observation {
        let mut obs = Vec::with_capacity(global.len() + 1);
        obs.push(self.process_identifier(agent));
        obs.extend_from_slice(global);
        obs
    }

    /// Observation without the identifier slot.
    fn global_features(&self, sim: &SimState) -> Vec<f64> {
        let caps = &self.config.caps;
        let f = sim.feature_counts();
        let clip = |x: f64| x.clamp(0.0, 1.0);
        let mut out = Vec::with_capacity(self.state_dim() - 1);
        out.extend(f.heading_to_storage.iter().map(|&c| clip(c as f64 / caps.heading_cap)));
        match self.config.junction_state_dim {
            JunctionStateDim::PerJunction => {
                out.extend(f.junction_section_counts.iter().map(|&c| clip(c as f64 / caps.junction_cap)));
            }
            JunctionStateDim::PerDirection => {
                for (sec, own) in f.junction_section_counts.iter().zip(&f.junction_loop_counts) {
                    out.push(clip(*own as f64 / caps.junction_cap));
                    out.push(clip(*sec as f64 / caps.junction_cap));
                }
            }
        }
        let d = caps.diff_span;
        out.extend(f.out_minus_in.iter().map(|&x| clip((x as f64 + d) / (2.0 * d))));
        out
    }

    pub fn agents_of_class(&self, class: AgentClass) -> impl Iterator<Item = &AgentSpec> {
        self.agents.iter().filter(move |a| a.class == class)
    }
}

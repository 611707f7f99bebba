//! Step-level conveyor simulation.
//!
//! The belt is cellular: a segment with `steps` traversal steps has that many
//! cells, each holding at most one pallet, and a pallet advances one cell per
//! step when the cell ahead is free. A pallet that cannot leave the last cell
//! blocks everything behind it. Node buffers sit off the belt.
//!
//! Step order is fixed: apply pending decisions, move the belt (segments in
//! index order, front to back), run node processing and releases (nodes in
//! index order), draw demand, then collect events.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::topology::{NodeId, NodeKind, SegmentId, Topology};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PalletId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    CirculatingEmpty,
    Queued,
    Processing,
    InTransitLoadedReceiving,
    InTransitLoadedShipping,
    InTransitEmptyDirected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Cargo {
    Empty,
    /// Goods from an incoming point heading to storage.
    Receiving,
    /// Goods from a storage heading to an outgoing point.
    Shipping,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Location {
    Belt { segment: SegmentId, offset: u32 },
    Node(NodeId),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pallet {
    pub id: PalletId,
    pub phase: Phase,
    pub cargo: Cargo,
    pub location: Location,
    pub destination: Option<NodeId>,
    /// Storage index a shipping pallet was loaded at.
    pub source_storage: Option<usize>,
    /// Outgoing point a demand claim is reserved for (set while loading at storage).
    pub claim: Option<NodeId>,
    /// Receiving agent that chose the destination.
    pub dispatched_by: Option<usize>,
    hold_logged: bool,
    moved_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadState {
    Idle,
    Processing { until: u64 },
    /// Processing finished; waiting for an agent's decision.
    AwaitingDecision,
    /// Ready to leave; `action` is the applied agent decision if any.
    Releasing { action: Option<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeState {
    pub queue: VecDeque<PalletId>,
    pub head: HeadState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ThroughputCounters {
    pub receiving: u64,
    pub shipping: u64,
    pub per_step_delta: u64,
}

impl ThroughputCounters {
    pub fn total(&self) -> u64 {
        self.receiving + self.shipping
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverrideCause {
    BufferFullReroute,
    JunctionSectionFullRedirect,
    JunctionSectionFullHold,
}

impl OverrideCause {
    pub fn as_str(&self) -> &'static str {
        match self {
            OverrideCause::BufferFullReroute => "buffer_full_reroute",
            OverrideCause::JunctionSectionFullRedirect => "junction_section_full_redirect",
            OverrideCause::JunctionSectionFullHold => "junction_section_full_hold",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AppliedAction {
    /// A different action index than requested (junction direction).
    Action(usize),
    /// Pallet continued around its loop past a full buffer.
    Reroute,
    /// Pallet held in place.
    Hold,
}

/// A dispatch decision or route the constraints did not let through as requested.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOverride {
    pub step: u64,
    pub node: NodeId,
    pub pallet: PalletId,
    /// Agent whose decision was overridden; `None` for route-following pallets.
    pub agent: Option<usize>,
    /// Storage index for receiving decisions, direction for junction decisions.
    pub requested: usize,
    pub applied: AppliedAction,
    /// Segment the pallet actually entered; `None` when held.
    pub applied_segment: Option<SegmentId>,
    pub cause: OverrideCause,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompletionKind {
    IncomingLoad,
    StorageUnload,
    StorageLoad,
    OutgoingUnload,
    JunctionReady,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Completion {
    pub step: u64,
    pub node: NodeId,
    pub pallet: PalletId,
    pub kind: CompletionKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentClass {
    Receiving,
    Junction,
}

/// Static description of one decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub index: usize,
    pub name: String,
    pub class: AgentClass,
    pub node: NodeId,
    pub action_dim: usize,
}

/// Receiving agents (incoming points, in order) followed by junction agents.
pub fn agent_specs(topology: &Topology) -> Vec<AgentSpec> {
    let mut specs = Vec::new();
    for &node in topology.incomings() {
        specs.push(AgentSpec {
            index: specs.len(),
            name: topology.node(node).name.clone(),
            class: AgentClass::Receiving,
            node,
            action_dim: topology.storages().len(),
        });
    }
    for link in topology.junctions() {
        specs.push(AgentSpec {
            index: specs.len(),
            name: link.name.clone(),
            class: AgentClass::Junction,
            node: link.junction,
            action_dim: 2,
        });
    }
    specs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingDecision {
    pub node: NodeId,
    pub pallet: PalletId,
}

/// Per-agent event indicators for the current step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EventSet {
    pub pending: Vec<Option<PendingDecision>>,
}

impl EventSet {
    pub fn indicator(&self, agent: usize) -> bool {
        self.pending.get(agent).is_some_and(|p| p.is_some())
    }
    pub fn any(&self) -> bool {
        self.pending.iter().any(|p| p.is_some())
    }
    pub fn flagged(&self) -> impl Iterator<Item = usize> + '_ {
        self.pending.iter().enumerate().filter(|(_, p)| p.is_some()).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemandModel {
    /// Requests per hour at each outgoing point.
    pub rates_per_hour: Vec<f64>,
    /// Per outgoing point, a probability simplex over storage indices.
    pub source_weights: Vec<Vec<f64>>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("total_pallets must be at least 1")]
    NoPallets,
    #[error("{pallets} pallets exceed the {cells} loop cells available")]
    TooManyPallets { pallets: usize, cells: usize },
    #[error("invalid demand model: {0}")]
    InvalidDemand(String),
    #[error("dispatch vector has {got} entries, expected {expected}")]
    DispatchLength { got: usize, expected: usize },
    #[error("agent {agent} has a pending decision but no action was supplied")]
    MissingAction { agent: usize },
    #[error("agent {agent} received an action without a pending decision")]
    UnexpectedAction { agent: usize },
    #[error("action {action} out of range for agent {agent} (dimension {dim})")]
    ActionOutOfRange { agent: usize, action: usize, dim: usize },
    #[error("episode already finished at step {0}")]
    EpisodeFinished(u64),
}

impl DemandModel {
    /// Non-uniform default: rates fall off across outgoing points and even-indexed
    /// storages are sourced three times as often as odd ones.
    pub fn default_for(topology: &Topology) -> Self {
        const RATES: [f64; 6] = [540.0, 480.0, 420.0, 360.0, 300.0, 240.0];
        let n_out = topology.outgoings().len();
        let n_st = topology.storages().len();
        let rates = (0..n_out).map(|i| RATES[i % RATES.len()]).collect();
        let raw: Vec<f64> = (0..n_st).map(|k| if k % 2 == 0 { 3.0 } else { 1.0 }).collect();
        let sum: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / sum).collect();
        DemandModel { rates_per_hour: rates, source_weights: vec![weights; n_out] }
    }

    pub fn zero(topology: &Topology) -> Self {
        let mut d = Self::default_for(topology);
        d.rates_per_hour.iter_mut().for_each(|r| *r = 0.0);
        d
    }

    pub fn validate(&self, topology: &Topology) -> Result<(), SimError> {
        let n_out = topology.outgoings().len();
        let n_st = topology.storages().len();
        if self.rates_per_hour.len() != n_out || self.source_weights.len() != n_out {
            return Err(SimError::InvalidDemand(format!(
                "expected {n_out} outgoing rate/weight entries"
            )));
        }
        if self.rates_per_hour.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(SimError::InvalidDemand("rates must be finite and non-negative".into()));
        }
        for w in &self.source_weights {
            if w.len() != n_st || w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(SimError::InvalidDemand("weights must cover every storage".into()));
            }
            if (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(SimError::InvalidDemand("weights must sum to 1".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct DemandSampler {
    arrivals: Vec<Option<Poisson<f64>>>,
    sources: Vec<Option<WeightedIndex<f64>>>,
}

impl DemandSampler {
    fn new(model: &DemandModel, resolution_s: f64) -> Result<Self, SimError> {
        let mut arrivals = Vec::new();
        let mut sources = Vec::new();
        for (rate, weights) in model.rates_per_hour.iter().zip(&model.source_weights) {
            let lambda = rate * resolution_s / 3600.0;
            if lambda > 0.0 {
                arrivals.push(Some(
                    Poisson::new(lambda).map_err(|e| SimError::InvalidDemand(e.to_string()))?,
                ));
                sources.push(Some(
                    WeightedIndex::new(weights).map_err(|e| SimError::InvalidDemand(e.to_string()))?,
                ));
            } else {
                arrivals.push(None);
                sources.push(None);
            }
        }
        Ok(DemandSampler { arrivals, sources })
    }
}

/// Pallet counts consumed by observations and heuristics.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureCounts {
    /// In(s): receiving pallets assigned to each storage and not yet unloaded.
    pub heading_to_storage: Vec<i64>,
    /// Pallets on each junction's downstream connecting section.
    pub junction_section_counts: Vec<i64>,
    /// Pallets on each junction's own-loop downstream segment.
    pub junction_loop_counts: Vec<i64>,
    /// Out(s) - In(s), with Out(s) the in-flight shipping pallets loaded at s.
    pub out_minus_in: Vec<i64>,
    /// Out(s) alone.
    pub outbound_from_storage: Vec<i64>,
}

#[derive(Debug, Clone)]
pub struct SimState {
    topology: Arc<Topology>,
    demand: DemandModel,
    sampler: DemandSampler,
    pub clock: u64,
    pub episode_steps: u64,
    pub reward_scale: f64,
    pallets: Vec<Pallet>,
    /// Pallets on each segment, front (largest offset) first.
    belts: Vec<VecDeque<PalletId>>,
    nodes: Vec<NodeState>,
    /// Unclaimed shipping requests per storage, as outgoing node ids in arrival order.
    demand_queue: Vec<VecDeque<NodeId>>,
    counters: ThroughputCounters,
    heading: Vec<i64>,
    outbound: Vec<i64>,
    rng: ChaCha8Rng,
    agents: Vec<AgentSpec>,
    agent_of_node: Vec<Option<usize>>,
    events: EventSet,
    override_log: Vec<ActionOverride>,
    completion_log: Option<Vec<Completion>>,
}

/// Comparable copy of the mutable world, for determinism checks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimSnapshot {
    pub clock: u64,
    pub pallets: Vec<Pallet>,
    pub belts: Vec<Vec<PalletId>>,
    pub nodes: Vec<NodeState>,
    pub demand_queue: Vec<Vec<NodeId>>,
    pub counters: ThroughputCounters,
    pub overrides: Vec<ActionOverride>,
}

pub const DEFAULT_TOTAL_PALLETS: usize = 500;
pub const DEFAULT_EPISODE_STEPS: u64 = 36_000;
pub const DEFAULT_REWARD_SCALE: f64 = 0.01;

impl SimState {
    /// Places `total_pallets` empty pallets on distinct, uniformly drawn loop cells.
    pub fn init(
        topology: Arc<Topology>,
        demand: DemandModel,
        total_pallets: usize,
        seed: u64,
    ) -> Result<Self, SimError> {
        if total_pallets == 0 {
            return Err(SimError::NoPallets);
        }
        demand.validate(&topology)?;
        let sampler = DemandSampler::new(&demand, topology.resolution_s())?;
        let loop_cells: Vec<(SegmentId, u32)> = topology
            .segments()
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_section)
            .flat_map(|(i, s)| (0..s.steps).map(move |o| (SegmentId(i), o)))
            .collect();
        if total_pallets > loop_cells.len() {
            return Err(SimError::TooManyPallets { pallets: total_pallets, cells: loop_cells.len() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen: Vec<usize> = sample(&mut rng, loop_cells.len(), total_pallets).into_vec();
        chosen.sort_unstable();
        let mut belts: Vec<VecDeque<PalletId>> = vec![VecDeque::new(); topology.segments().len()];
        let mut pallets = Vec::with_capacity(total_pallets);
        // Ascending cell order: push_front keeps each belt front (largest offset) first.
        for (i, &cell) in chosen.iter().enumerate() {
            let (segment, offset) = loop_cells[cell];
            let id = PalletId(i);
            pallets.push(Pallet {
                id,
                phase: Phase::CirculatingEmpty,
                cargo: Cargo::Empty,
                location: Location::Belt { segment, offset },
                destination: None,
                source_storage: None,
                claim: None,
                dispatched_by: None,
                hold_logged: false,
                moved_at: u64::MAX,
            });
            belts[segment.0].push_front(id);
        }
        let agents = agent_specs(&topology);
        let mut agent_of_node = vec![None; topology.nodes().len()];
        for a in &agents {
            agent_of_node[a.node.0] = Some(a.index);
        }
        let n_st = topology.storages().len();
        Ok(SimState {
            sampler,
            demand,
            clock: 0,
            episode_steps: DEFAULT_EPISODE_STEPS,
            reward_scale: DEFAULT_REWARD_SCALE,
            pallets,
            belts,
            nodes: vec![NodeState { queue: VecDeque::new(), head: HeadState::Idle }; topology.nodes().len()],
            demand_queue: vec![VecDeque::new(); n_st],
            counters: ThroughputCounters::default(),
            heading: vec![0; n_st],
            outbound: vec![0; n_st],
            rng,
            events: EventSet { pending: vec![None; agents.len()] },
            agents,
            agent_of_node,
            override_log: Vec::new(),
            completion_log: None,
            topology,
        })
    }

    pub fn with_episode_steps(mut self, steps: u64) -> Self {
        self.episode_steps = steps;
        self
    }

    pub fn with_reward_scale(mut self, scale: f64) -> Self {
        self.reward_scale = scale;
        self
    }

    /// Keep a log of every processing completion.
    pub fn record_completions(mut self) -> Self {
        self.completion_log = Some(Vec::new());
        self
    }

    pub fn topology(&self) -> &Arc<Topology> {
        &self.topology
    }
    pub fn demand(&self) -> &DemandModel {
        &self.demand
    }
    pub fn agents(&self) -> &[AgentSpec] {
        &self.agents
    }
    pub fn pallets(&self) -> &[Pallet] {
        &self.pallets
    }
    pub fn node_state(&self, node: NodeId) -> &NodeState {
        &self.nodes[node.0]
    }
    pub fn belt(&self, segment: SegmentId) -> &VecDeque<PalletId> {
        &self.belts[segment.0]
    }
    pub fn counters(&self) -> ThroughputCounters {
        self.counters
    }
    pub fn events(&self) -> &EventSet {
        &self.events
    }
    pub fn overrides(&self) -> &[ActionOverride] {
        &self.override_log
    }
    pub fn completions(&self) -> Option<&[Completion]> {
        self.completion_log.as_deref()
    }
    pub fn pending_demand(&self, storage: usize) -> usize {
        self.demand_queue[storage].len()
    }
    pub fn is_done(&self) -> bool {
        self.clock >= self.episode_steps
    }

    pub fn snapshot(&self) -> SimSnapshot {
        SimSnapshot {
            clock: self.clock,
            pallets: self.pallets.clone(),
            belts: self.belts.iter().map(|b| b.iter().copied().collect()).collect(),
            nodes: self.nodes.clone(),
            demand_queue: self.demand_queue.iter().map(|q| q.iter().copied().collect()).collect(),
            counters: self.counters,
            overrides: self.override_log.clone(),
        }
    }

    pub fn feature_counts(&self) -> FeatureCounts {
        let topo = &self.topology;
        FeatureCounts {
            heading_to_storage: self.heading.clone(),
            junction_section_counts: topo
                .junctions()
                .iter()
                .map(|j| self.belts[j.dir1.0].len() as i64)
                .collect(),
            junction_loop_counts: topo
                .junctions()
                .iter()
                .map(|j| self.belts[j.dir0.0].len() as i64)
                .collect(),
            out_minus_in: self.outbound.iter().zip(&self.heading).map(|(o, i)| o - i).collect(),
            outbound_from_storage: self.outbound.clone(),
        }
    }

    /// Pallets physically on each loop: its loop segments plus its nodes' buffers.
    pub fn loop_pallet_counts(&self) -> Vec<usize> {
        let topo = &self.topology;
        let mut counts = vec![0usize; topo.loops().len()];
        for (i, seg) in topo.segments().iter().enumerate() {
            if !seg.is_section {
                counts[topo.node(seg.from).loop_id.0] += self.belts[i].len();
            }
        }
        for (i, node) in topo.nodes().iter().enumerate() {
            counts[node.loop_id.0] += self.nodes[i].queue.len();
        }
        counts
    }

    fn log_completion(&mut self, node: NodeId, pallet: PalletId, kind: CompletionKind) {
        if let Some(log) = self.completion_log.as_mut() {
            log.push(Completion { step: self.clock, node, pallet, kind });
        }
    }

    /// Advances one step. `dispatch[a]` must be `Some` exactly for the agents
    /// flagged in the current [`EventSet`]. Returns the new events and the
    /// scaled throughput increment.
    pub fn step(&mut self, dispatch: &[Option<usize>]) -> Result<(EventSet, f64), SimError> {
        if self.is_done() {
            return Err(SimError::EpisodeFinished(self.clock));
        }
        self.validate_dispatch(dispatch)?;
        self.apply_dispatch(dispatch);
        let before = self.counters.total();
        self.move_belts();
        self.process_nodes();
        self.draw_demand();
        self.clock += 1;
        self.collect_events();
        let delta = self.counters.total() - before;
        self.counters.per_step_delta = delta;
        Ok((self.events.clone(), delta as f64 * self.reward_scale))
    }

    fn validate_dispatch(&self, dispatch: &[Option<usize>]) -> Result<(), SimError> {
        if dispatch.len() != self.agents.len() {
            return Err(SimError::DispatchLength { got: dispatch.len(), expected: self.agents.len() });
        }
        for (a, action) in dispatch.iter().enumerate() {
            match (self.events.indicator(a), action) {
                (true, None) => return Err(SimError::MissingAction { agent: a }),
                (false, Some(_)) => return Err(SimError::UnexpectedAction { agent: a }),
                (true, Some(x)) if *x >= self.agents[a].action_dim => {
                    return Err(SimError::ActionOutOfRange {
                        agent: a,
                        action: *x,
                        dim: self.agents[a].action_dim,
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn apply_dispatch(&mut self, dispatch: &[Option<usize>]) {
        for a in 0..dispatch.len() {
            let (Some(action), Some(pending)) = (dispatch[a], self.events.pending[a]) else {
                continue;
            };
            let node = pending.node;
            match self.agents[a].class {
                AgentClass::Receiving => {
                    let storage = self.topology.storages()[action];
                    let p = &mut self.pallets[pending.pallet.0];
                    p.destination = Some(storage);
                    p.dispatched_by = Some(a);
                    self.heading[action] += 1;
                }
                AgentClass::Junction => {}
            }
            self.nodes[node.0].head = HeadState::Releasing { action: Some(action) };
        }
        self.events.pending.iter_mut().for_each(|p| *p = None);
    }

    fn cell0_free(&self, seg: SegmentId) -> bool {
        match self.belts[seg.0].back() {
            None => true,
            Some(p) => match self.pallets[p.0].location {
                Location::Belt { offset, .. } => offset > 0,
                Location::Node(_) => unreachable!("belt pallet located at node"),
            },
        }
    }

    fn section_has_room(&self, seg: SegmentId) -> bool {
        self.belts[seg.0].len() < self.topology.connecting_section_capacity()
    }

    fn place_on_belt(&mut self, pallet: PalletId, seg: SegmentId) {
        let p = &mut self.pallets[pallet.0];
        p.location = Location::Belt { segment: seg, offset: 0 };
        p.moved_at = self.clock;
        p.hold_logged = false;
        self.belts[seg.0].push_back(pallet);
    }

    fn move_belts(&mut self) {
        for s in 0..self.belts.len() {
            let seg_id = SegmentId(s);
            let len = self.topology.segment(seg_id).steps;
            // Front pallet: may leave the segment.
            if let Some(&front) = self.belts[s].front() {
                let p = &self.pallets[front.0];
                if p.moved_at != self.clock {
                    if let Location::Belt { offset, .. } = p.location {
                        if offset + 1 >= len {
                            self.try_exit(front, seg_id);
                        }
                    }
                }
            }
            // Remaining pallets advance when the cell ahead is free.
            let mut ahead: Option<u32> = None;
            for i in 0..self.belts[s].len() {
                let pid = self.belts[s][i];
                let p = &mut self.pallets[pid.0];
                let Location::Belt { segment, offset } = p.location else { unreachable!() };
                if p.moved_at != self.clock && offset + 1 < len && ahead.is_none_or(|a| offset + 1 < a) {
                    p.location = Location::Belt { segment, offset: offset + 1 };
                    p.moved_at = self.clock;
                }
                let Location::Belt { offset, .. } = p.location else { unreachable!() };
                ahead = Some(offset);
            }
        }
    }

    /// The front pallet of `seg` is at the end cell and arrives at the segment's node.
    fn try_exit(&mut self, pid: PalletId, seg: SegmentId) {
        let topo = Arc::clone(&self.topology);
        let node = topo.segment(seg).to;
        let node_info = topo.node(node);
        let from_section = topo.segment(seg).is_section;
        let cargo = self.pallets[pid.0].cargo;
        let room = self.nodes[node.0].queue.len() < node_info.buffer_capacity;

        if cargo != Cargo::Empty {
            let dest = self.pallets[pid.0].destination.expect("loaded pallet has a destination");
            if dest == node {
                if room {
                    self.admit(pid, seg, node);
                } else {
                    let next = topo.loop_successor(node);
                    if self.cell0_free(next) {
                        let p = &self.pallets[pid.0];
                        let requested = match p.cargo {
                            Cargo::Receiving => topo.storage_index(node).unwrap_or(0),
                            _ => topo.outgoings().iter().position(|&o| o == node).unwrap_or(0),
                        };
                        self.override_log.push(ActionOverride {
                            step: self.clock,
                            node,
                            pallet: pid,
                            agent: p.dispatched_by.filter(|_| p.cargo == Cargo::Receiving),
                            requested,
                            applied: AppliedAction::Reroute,
                            applied_segment: Some(next),
                            cause: OverrideCause::BufferFullReroute,
                        });
                        self.pop_front_and_place(pid, seg, next);
                    }
                }
                return;
            }
            let next = topo.next_hop(node, dest).expect("destination reachable");
            self.forward_through(pid, seg, node, next, None);
            return;
        }

        // Empty pallet.
        if from_section {
            self.pallets[pid.0].phase = Phase::CirculatingEmpty;
            let next = topo.loop_successor(node);
            if self.cell0_free(next) {
                self.pop_front_and_place(pid, seg, next);
            }
            return;
        }
        let capture = room
            && match node_info.kind {
                NodeKind::Incoming | NodeKind::Junction => true,
                NodeKind::Storage => {
                    let k = topo.storage_index(node).unwrap();
                    !self.demand_queue[k].is_empty()
                }
                NodeKind::Outgoing => false,
            };
        if capture {
            if node_info.kind == NodeKind::Storage {
                let k = topo.storage_index(node).unwrap();
                let out = self.demand_queue[k].pop_front().unwrap();
                self.pallets[pid.0].claim = Some(out);
            }
            self.admit(pid, seg, node);
            return;
        }
        let next = topo.loop_successor(node);
        if self.cell0_free(next) {
            self.pop_front_and_place(pid, seg, next);
        }
    }

    /// Moves a pallet from `node` onto `next`, enforcing the connecting-section
    /// limit. `agent` carries the junction decision being executed, if any.
    /// Returns whether the pallet left. `from_belt` pallets are popped from `seg`.
    fn forward_through(
        &mut self,
        pid: PalletId,
        seg: SegmentId,
        node: NodeId,
        next: SegmentId,
        agent: Option<usize>,
    ) -> bool {
        let target = self.resolve_section(pid, node, next, agent);
        match target {
            Some(t) if self.cell0_free(t) => {
                self.log_redirect_if(pid, node, next, t, agent);
                self.pop_front_and_place(pid, seg, t);
                true
            }
            _ => false,
        }
    }

    /// Chooses the segment actually usable for a pallet wanting `next` at `node`.
    /// `None` means hold.
    fn resolve_section(
        &mut self,
        pid: PalletId,
        node: NodeId,
        next: SegmentId,
        agent: Option<usize>,
    ) -> Option<SegmentId> {
        let topo = Arc::clone(&self.topology);
        if !topo.segment(next).is_section || self.section_has_room(next) {
            return Some(next);
        }
        let alt = topo.loop_successor(node);
        if self.cell0_free(alt) {
            return Some(alt);
        }
        if !self.pallets[pid.0].hold_logged {
            self.pallets[pid.0].hold_logged = true;
            self.override_log.push(ActionOverride {
                step: self.clock,
                node,
                pallet: pid,
                agent,
                requested: 1,
                applied: AppliedAction::Hold,
                applied_segment: None,
                cause: OverrideCause::JunctionSectionFullHold,
            });
        }
        None
    }

    fn log_redirect_if(
        &mut self,
        pid: PalletId,
        node: NodeId,
        wanted: SegmentId,
        used: SegmentId,
        agent: Option<usize>,
    ) {
        if wanted != used {
            self.override_log.push(ActionOverride {
                step: self.clock,
                node,
                pallet: pid,
                agent,
                requested: 1,
                applied: AppliedAction::Action(0),
                applied_segment: Some(used),
                cause: OverrideCause::JunctionSectionFullRedirect,
            });
        }
    }

    fn pop_front_and_place(&mut self, pid: PalletId, seg: SegmentId, next: SegmentId) {
        if let Location::Belt { .. } = self.pallets[pid.0].location {
            let popped = self.belts[seg.0].pop_front();
            debug_assert_eq!(popped, Some(pid));
        }
        if self.topology.segment(next).is_section && self.pallets[pid.0].cargo == Cargo::Empty {
            self.pallets[pid.0].phase = Phase::InTransitEmptyDirected;
        }
        self.place_on_belt(pid, next);
    }

    fn admit(&mut self, pid: PalletId, seg: SegmentId, node: NodeId) {
        let popped = self.belts[seg.0].pop_front();
        debug_assert_eq!(popped, Some(pid));
        let p = &mut self.pallets[pid.0];
        p.location = Location::Node(node);
        p.phase = Phase::Queued;
        p.moved_at = self.clock;
        p.hold_logged = false;
        self.nodes[node.0].queue.push_back(pid);
    }

    fn process_nodes(&mut self) {
        for n in 0..self.nodes.len() {
            let node = NodeId(n);
            // A node may release its head and start the next pallet in one step.
            if let HeadState::Releasing { action } = self.nodes[n].head {
                if self.try_release(node, action) {
                    self.nodes[n].head = HeadState::Idle;
                }
            }
            if self.nodes[n].head == HeadState::Idle {
                if let Some(&head) = self.nodes[n].queue.front() {
                    let steps = self.topology.node(node).processing_steps as u64;
                    self.pallets[head.0].phase = Phase::Processing;
                    self.nodes[n].head = HeadState::Processing { until: self.clock + steps };
                }
            }
            if let HeadState::Processing { until } = self.nodes[n].head {
                if self.clock + 1 >= until {
                    self.complete(node);
                    // Processing-free nodes hand the pallet straight on.
                    if let HeadState::Releasing { action } = self.nodes[n].head {
                        if self.topology.node(node).processing_steps == 0 && self.try_release(node, action) {
                            self.nodes[n].head = HeadState::Idle;
                        }
                    }
                }
            }
        }
    }

    /// Processing of the head pallet finished at the end of this step.
    fn complete(&mut self, node: NodeId) {
        let topo = Arc::clone(&self.topology);
        let head = *self.nodes[node.0].queue.front().expect("processing node has a head");
        let kind = topo.node(node).kind;
        match kind {
            NodeKind::Incoming => {
                self.pallets[head.0].cargo = Cargo::Receiving;
                self.nodes[node.0].head = HeadState::AwaitingDecision;
                self.log_completion(node, head, CompletionKind::IncomingLoad);
            }
            NodeKind::Junction => {
                self.nodes[node.0].head = HeadState::AwaitingDecision;
                self.log_completion(node, head, CompletionKind::JunctionReady);
            }
            NodeKind::Storage => {
                let k = topo.storage_index(node).unwrap();
                match self.pallets[head.0].cargo {
                    Cargo::Receiving => {
                        self.counters.receiving += 1;
                        self.heading[k] -= 1;
                        let p = &mut self.pallets[head.0];
                        p.cargo = Cargo::Empty;
                        p.destination = None;
                        p.dispatched_by = None;
                        self.log_completion(node, head, CompletionKind::StorageUnload);
                        if let Some(out) = self.demand_queue[k].pop_front() {
                            self.pallets[head.0].claim = Some(out);
                            let steps = topo.node(node).processing_steps as u64;
                            self.nodes[node.0].head = HeadState::Processing { until: self.clock + 1 + steps };
                        } else {
                            self.nodes[node.0].head = HeadState::Releasing { action: None };
                        }
                    }
                    Cargo::Empty => {
                        let p = &mut self.pallets[head.0];
                        let out = p.claim.take().expect("captured empty pallet holds a claim");
                        p.cargo = Cargo::Shipping;
                        p.destination = Some(out);
                        p.source_storage = Some(k);
                        self.outbound[k] += 1;
                        self.nodes[node.0].head = HeadState::Releasing { action: None };
                        self.log_completion(node, head, CompletionKind::StorageLoad);
                    }
                    Cargo::Shipping => unreachable!("shipping pallet queued at storage"),
                }
            }
            NodeKind::Outgoing => {
                self.counters.shipping += 1;
                let p = &mut self.pallets[head.0];
                if let Some(k) = p.source_storage.take() {
                    self.outbound[k] -= 1;
                }
                p.cargo = Cargo::Empty;
                p.destination = None;
                self.nodes[node.0].head = HeadState::Releasing { action: None };
                self.log_completion(node, head, CompletionKind::OutgoingUnload);
            }
        }
    }

    fn try_release(&mut self, node: NodeId, action: Option<usize>) -> bool {
        let topo = Arc::clone(&self.topology);
        let head = *self.nodes[node.0].queue.front().expect("releasing node has a head");
        let p = &self.pallets[head.0];
        let (next, agent) = match (topo.node(node).kind, p.destination) {
            (NodeKind::Junction, _) => {
                let j = topo.junction_index(node).unwrap();
                let link = &topo.junctions()[j];
                let seg = if action == Some(1) { link.dir1 } else { link.dir0 };
                (seg, self.agent_of_node[node.0])
            }
            (_, Some(dest)) if dest != node => (topo.next_hop(node, dest).unwrap(), None),
            _ => (topo.loop_successor(node), None),
        };
        let Some(target) = self.resolve_section(head, node, next, agent) else {
            return false;
        };
        if !self.cell0_free(target) {
            return false;
        }
        self.log_redirect_if(head, node, next, target, agent);
        self.nodes[node.0].queue.pop_front();
        let p = &mut self.pallets[head.0];
        p.phase = match p.cargo {
            Cargo::Empty => Phase::CirculatingEmpty,
            Cargo::Receiving => Phase::InTransitLoadedReceiving,
            Cargo::Shipping => Phase::InTransitLoadedShipping,
        };
        if topo.segment(target).is_section && p.cargo == Cargo::Empty {
            p.phase = Phase::InTransitEmptyDirected;
        }
        self.place_on_belt(head, target);
        true
    }

    fn draw_demand(&mut self) {
        let topo = Arc::clone(&self.topology);
        for (o, &out) in topo.outgoings().iter().enumerate() {
            let (Some(arrivals), Some(sources)) = (&self.sampler.arrivals[o], &self.sampler.sources[o]) else {
                continue;
            };
            let n = arrivals.sample(&mut self.rng) as u64;
            for _ in 0..n {
                let k = sources.sample(&mut self.rng);
                self.demand_queue[k].push_back(out);
            }
        }
    }

    fn collect_events(&mut self) {
        for a in 0..self.agents.len() {
            let node = self.agents[a].node;
            if self.nodes[node.0].head == HeadState::AwaitingDecision {
                let pallet = *self.nodes[node.0].queue.front().unwrap();
                self.events.pending[a] = Some(PendingDecision { node, pallet });
            }
        }
    }

    // -- test and fixture support --------------------------------------------

    /// Recounts In(s) and Out(s) from pallet records, independently of the
    /// incremental counters.
    pub fn recount_features(&self) -> (Vec<i64>, Vec<i64>) {
        let n = self.topology.storages().len();
        let mut heading = vec![0; n];
        let mut outbound = vec![0; n];
        for p in &self.pallets {
            match p.cargo {
                Cargo::Receiving => {
                    if let Some(k) = p.destination.and_then(|d| self.topology.storage_index(d)) {
                        heading[k] += 1;
                    }
                }
                Cargo::Shipping => {
                    if let Some(k) = p.source_storage {
                        outbound[k] += 1;
                    }
                }
                Cargo::Empty => {}
            }
        }
        (heading, outbound)
    }

    /// Checks pallet conservation and buffer bounds. Returns a description of
    /// the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        let on_belts: usize = self.belts.iter().map(|b| b.len()).sum();
        let in_nodes: usize = self.nodes.iter().map(|n| n.queue.len()).sum();
        if on_belts + in_nodes != self.pallets.len() {
            return Err(format!(
                "pallet conservation: {} on belts + {} in buffers != {}",
                on_belts,
                in_nodes,
                self.pallets.len()
            ));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            let cap = self.topology.nodes()[i].buffer_capacity;
            if n.queue.len() > cap {
                return Err(format!("node {} buffer {} > {}", self.topology.nodes()[i].name, n.queue.len(), cap));
            }
        }
        for (s, belt) in self.belts.iter().enumerate() {
            let mut prev: Option<u32> = None;
            for pid in belt {
                let Location::Belt { segment, offset } = self.pallets[pid.0].location else {
                    return Err(format!("pallet {} on belt {} located at a node", pid.0, s));
                };
                if segment.0 != s || offset >= self.topology.segments()[s].steps {
                    return Err(format!("pallet {} has inconsistent belt position", pid.0));
                }
                if prev.is_some_and(|p| offset >= p) {
                    return Err(format!("belt {} cells out of order or shared", s));
                }
                prev = Some(offset);
            }
        }
        for p in &self.pallets {
            let awaiting = matches!(p.location, Location::Node(n)
                if self.nodes[n.0].head == HeadState::AwaitingDecision
                    && self.nodes[n.0].queue.front() == Some(&p.id));
            if p.cargo != Cargo::Empty && p.destination.is_none() && !awaiting {
                return Err(format!("loaded pallet {} has no destination", p.id.0));
            }
        }
        Ok(())
    }

    /// Test fixture helper: inserts a pending demand request at a storage.
    pub fn push_demand(&mut self, storage: usize, outgoing: NodeId) {
        self.demand_queue[storage].push_back(outgoing);
    }
}

/// Runs an episode to its end with a callback choosing actions for flagged
/// agents. Returns the total throughput and the override log.
pub fn run_episode_with_policy<F>(
    mut state: SimState,
    mut policy: F,
) -> Result<(u64, Vec<ActionOverride>), SimError>
where
    F: FnMut(&SimState, usize) -> usize,
{
    let n = state.agents().len();
    let mut dispatch = vec![None; n];
    while !state.is_done() {
        for (a, slot) in dispatch.iter_mut().enumerate() {
            *slot = if state.events().indicator(a) { Some(policy(&state, a)) } else { None };
        }
        state.step(&dispatch)?;
    }
    Ok((state.counters().total(), state.override_log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::build_default_preset;
    use rand::Rng;

    fn preset() -> Arc<Topology> {
        Arc::new(build_default_preset())
    }

    #[test]
    fn init_places_all_pallets_empty() {
        let t = preset();
        let s = SimState::init(t.clone(), DemandModel::default_for(&t), 500, 7).unwrap();
        assert_eq!(s.pallets().len(), 500);
        assert!(s.pallets().iter().all(|p| p.phase == Phase::CirculatingEmpty));
        assert_eq!(s.counters(), ThroughputCounters::default());
        assert_eq!(s.clock, 0);
        s.check_invariants().unwrap();
    }

    #[test]
    fn init_is_deterministic() {
        let t = preset();
        let a = SimState::init(t.clone(), DemandModel::default_for(&t), 500, 7).unwrap();
        let b = SimState::init(t.clone(), DemandModel::default_for(&t), 500, 7).unwrap();
        assert_eq!(a.snapshot(), b.snapshot());
        let c = SimState::init(t.clone(), DemandModel::default_for(&t), 500, 8).unwrap();
        assert_ne!(a.snapshot(), c.snapshot());
    }

    #[test]
    fn init_rejects_bad_pallet_counts() {
        let t = preset();
        let d = DemandModel::default_for(&t);
        assert_eq!(SimState::init(t.clone(), d.clone(), 0, 1).unwrap_err(), SimError::NoPallets);
        assert!(matches!(
            SimState::init(t.clone(), d, 1_000_000, 1).unwrap_err(),
            SimError::TooManyPallets { .. }
        ));
    }

    #[test]
    fn fresh_feature_counts_are_zero() {
        let t = preset();
        let s = SimState::init(t.clone(), DemandModel::default_for(&t), 500, 3).unwrap();
        let f = s.feature_counts();
        assert!(f.heading_to_storage.iter().all(|&x| x == 0));
        assert!(f.junction_section_counts.iter().all(|&x| x == 0));
        assert!(f.out_minus_in.iter().all(|&x| x == 0));
    }

    #[test]
    fn dispatch_validation_errors() {
        let t = preset();
        let mut s = SimState::init(t.clone(), DemandModel::default_for(&t), 500, 3).unwrap();
        let n = s.agents().len();
        assert!(matches!(s.step(&vec![None; n + 1]), Err(SimError::DispatchLength { .. })));
        let mut extra = vec![None; n];
        extra[0] = Some(0);
        assert_eq!(s.step(&extra), Err(SimError::UnexpectedAction { agent: 0 }));
        // Run until a receiving event appears.
        loop {
            let (ev, _) = s.step(&vec![None; n]).unwrap();
            if ev.any() {
                break;
            }
        }
        let a = s.events().flagged().next().unwrap();
        assert_eq!(s.step(&vec![None; n]), Err(SimError::MissingAction { agent: a }));
        let mut bad = vec![None; n];
        bad[a] = Some(s.agents()[a].action_dim);
        assert!(matches!(s.step(&bad), Err(SimError::ActionOutOfRange { .. })));
    }

    #[test]
    fn random_rollout_keeps_invariants_and_counters() {
        let t = preset();
        let mut s = SimState::init(t.clone(), DemandModel::default_for(&t), 500, 11)
            .unwrap()
            .with_episode_steps(6000);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = s.agents().len();
        while !s.is_done() {
            let dispatch: Vec<Option<usize>> = (0..n)
                .map(|a| s.events().indicator(a).then(|| rng.random_range(0..s.agents()[a].action_dim)))
                .collect();
            s.step(&dispatch).unwrap();
            s.check_invariants().unwrap();
            let (h, o) = s.recount_features();
            let f = s.feature_counts();
            assert_eq!(f.heading_to_storage, h);
            assert_eq!(f.outbound_from_storage, o);
        }
        assert!(s.counters().receiving > 0);
        assert!(s.counters().shipping > 0);
    }
}

//! Expert dispatching rules for receiving and junction decisions.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sim::SimState;
use crate::topology::{LoopId, NodeId, NodeKind, Topology};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HeuristicError {
    #[error("no storage points to choose from")]
    EmptySet,
    #[error("no candidate loops")]
    NoCandidateLoops,
    #[error("node {0} is not an incoming point")]
    NotIncoming(usize),
    #[error("unknown junction index {0}")]
    UnknownJunction(usize),
}

/// Tunable constants of the Medium and High rules and the loop routing costs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeuristicParams {
    /// Medium: keep storages with at most this many inbound pallets.
    pub c1_medium: f64,
    /// High: same-loop assignment threshold.
    pub c1_high: f64,
    /// High: other-loop assignment threshold.
    pub c2_high: f64,
    /// High: inbound-pallet filter.
    pub c3_high: f64,
    /// `cost_matrix[i][j]`: cost of sending from loop i to loop j.
    pub cost_matrix: Vec<Vec<f64>>,
}

impl HeuristicParams {
    /// Defaults with costs 0 / 0.25 / 0.5 for same, adjacent and far loops.
    pub fn default_for(topology: &Topology) -> Self {
        let l = topology.loops().len();
        let cost_matrix = (0..l)
            .map(|i| {
                (0..l)
                    .map(|j| match topology.loop_distance(LoopId(i), LoopId(j)) {
                        Some(0) => 0.0,
                        Some(1) => 0.25,
                        _ => 0.5,
                    })
                    .collect()
            })
            .collect();
        HeuristicParams { c1_medium: 4.0, c1_high: 25.0, c2_high: 25.0, c3_high: 4.0, cost_matrix }
    }

    pub fn validate(&self) -> Result<(), String> {
        let scalars = [self.c1_medium, self.c1_high, self.c2_high, self.c3_high];
        if scalars.iter().any(|c| !(c.is_finite() && *c >= 0.0)) {
            return Err("heuristic thresholds must be finite and non-negative".into());
        }
        let l = self.cost_matrix.len();
        if self.cost_matrix.iter().any(|row| row.len() != l || row.iter().any(|c| !(c.is_finite() && *c >= 0.0))) {
            return Err("cost_matrix must be square with non-negative entries".into());
        }
        Ok(())
    }
}

/// Everything a receiving rule may look at for one decision.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchContext {
    pub incoming_loop: LoopId,
    pub same: BTreeSet<usize>,
    pub other: BTreeSet<usize>,
    pub all: BTreeSet<usize>,
    /// Loop of each storage index.
    pub storage_loop: Vec<LoopId>,
    /// In(s) per storage.
    pub inbound: Vec<i64>,
    /// Out(s) per storage.
    pub outbound: Vec<i64>,
    /// Sum of In(s) over the storages of each loop.
    pub loop_assigned: Vec<i64>,
}

impl DispatchContext {
    pub fn from_sim(sim: &SimState, incoming: NodeId) -> Result<Self, HeuristicError> {
        let topo = sim.topology();
        if topo.node(incoming).kind != NodeKind::Incoming {
            return Err(HeuristicError::NotIncoming(incoming.0));
        }
        let f = sim.feature_counts();
        Ok(Self::from_counts(topo, incoming, f.heading_to_storage, f.outbound_from_storage))
    }

    pub fn from_counts(topo: &Topology, incoming: NodeId, inbound: Vec<i64>, outbound: Vec<i64>) -> Self {
        let incoming_loop = topo.node(incoming).loop_id;
        let storage_loop: Vec<LoopId> = topo.storages().iter().map(|s| topo.node(*s).loop_id).collect();
        Self::new(incoming_loop, storage_loop, topo.loops().len(), inbound, outbound)
    }

    /// Builds a context from raw per-storage data.
    pub fn new(
        incoming_loop: LoopId,
        storage_loop: Vec<LoopId>,
        n_loops: usize,
        inbound: Vec<i64>,
        outbound: Vec<i64>,
    ) -> Self {
        let all: BTreeSet<usize> = (0..storage_loop.len()).collect();
        let same: BTreeSet<usize> = all.iter().copied().filter(|&k| storage_loop[k] == incoming_loop).collect();
        let other = all.difference(&same).copied().collect();
        let mut loop_assigned = vec![0; n_loops];
        for (k, l) in storage_loop.iter().enumerate() {
            loop_assigned[l.0] += inbound[k];
        }
        DispatchContext { incoming_loop, same, other, all, storage_loop, inbound, outbound, loop_assigned }
    }

    pub fn x_same(&self) -> i64 {
        self.same.iter().map(|&k| self.inbound[k]).sum()
    }

    pub fn x_other(&self) -> i64 {
        self.other.iter().map(|&k| self.inbound[k]).sum()
    }
}

fn pick_uniform<R: Rng + ?Sized>(set: &BTreeSet<usize>, rng: &mut R) -> Result<usize, HeuristicError> {
    if set.is_empty() {
        return Err(HeuristicError::EmptySet);
    }
    let i = rng.random_range(0..set.len());
    Ok(*set.iter().nth(i).unwrap())
}

/// Low: a uniformly random storage on the incoming point's own loop.
pub fn heuristic_low<R: Rng + ?Sized>(ctx: &DispatchContext, rng: &mut R) -> Result<usize, HeuristicError> {
    pick_uniform(&ctx.same, rng)
}

/// Random baseline: a uniformly random storage anywhere.
pub fn random_baseline<R: Rng + ?Sized>(ctx: &DispatchContext, rng: &mut R) -> Result<usize, HeuristicError> {
    pick_uniform(&ctx.all, rng)
}

/// Normalized loop load plus the routing cost constant. The load term is 0
/// when every loop carries the same assignment.
pub fn loop_cost(x_loop: f64, x_min: f64, x_max: f64, c: f64) -> f64 {
    let load = if x_max > x_min { (x_loop - x_min) / (x_max - x_min) } else { 0.0 };
    load + c
}

/// Loop with the lowest [`loop_cost`] among `candidates`; ties go to the smallest loop id.
pub fn min_cost(
    ctx: &DispatchContext,
    params: &HeuristicParams,
    candidates: &BTreeSet<LoopId>,
) -> Result<LoopId, HeuristicError> {
    let x_min = *ctx.loop_assigned.iter().min().ok_or(HeuristicError::NoCandidateLoops)? as f64;
    let x_max = *ctx.loop_assigned.iter().max().unwrap() as f64;
    let mut best: Option<(f64, LoopId)> = None;
    for &l in candidates {
        let c = params.cost_matrix[ctx.incoming_loop.0][l.0];
        let cost = loop_cost(ctx.loop_assigned[l.0] as f64, x_min, x_max, c);
        if best.is_none_or(|(b, _)| cost < b) {
            best = Some((cost, l));
        }
    }
    best.map(|(_, l)| l).ok_or(HeuristicError::NoCandidateLoops)
}

fn argmin_by<F: Fn(usize) -> i64>(set: &BTreeSet<usize>, key: F) -> usize {
    // BTreeSet iterates ascending, so the first minimum is the smallest id.
    let mut best: Option<(i64, usize)> = None;
    for &k in set {
        let v = key(k);
        if best.is_none_or(|(b, _)| v < b) {
            best = Some((v, k));
        }
    }
    best.expect("nonempty set").1
}

fn filter_inbound(ctx: &DispatchContext, set: &BTreeSet<usize>, limit: f64) -> BTreeSet<usize> {
    let kept: BTreeSet<usize> = set.iter().copied().filter(|&k| ctx.inbound[k] as f64 <= limit).collect();
    // An empty filter result falls back to the unfiltered set.
    if kept.is_empty() { set.clone() } else { kept }
}

/// Medium: filter by inbound count, restrict to the cheapest loop, then pick
/// the storage with the fewest inbound pallets.
pub fn heuristic_medium(ctx: &DispatchContext, params: &HeuristicParams) -> Result<usize, HeuristicError> {
    if ctx.all.is_empty() {
        return Err(HeuristicError::EmptySet);
    }
    let filtered = filter_inbound(ctx, &ctx.all, params.c1_medium);
    let loops: BTreeSet<LoopId> = filtered.iter().map(|&k| ctx.storage_loop[k]).collect();
    let chosen = min_cost(ctx, params, &loops)?;
    let set: BTreeSet<usize> = filtered.into_iter().filter(|&k| ctx.storage_loop[k] == chosen).collect();
    if set.len() == 1 {
        return Ok(*set.first().unwrap());
    }
    Ok(argmin_by(&set, |k| ctx.inbound[k]))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HighBranch {
    /// Both loads below threshold.
    AllBelow,
    SameOnly,
    OtherOnly,
    /// Every remaining case, including threshold ties.
    AllElse,
}

/// The High rule's four-way threshold table.
pub fn high_branch(x_same: f64, x_other: f64, c1: f64, c2: f64) -> HighBranch {
    if x_same < c1 && x_other < c2 {
        HighBranch::AllBelow
    } else if x_same < c1 && x_other > c2 {
        HighBranch::SameOnly
    } else if x_same > c1 && x_other < c2 {
        HighBranch::OtherOnly
    } else {
        HighBranch::AllElse
    }
}

/// High: choose a storage set from the loop loads, filter by inbound count,
/// prefer the own loop, then take the minimum out-minus-in difference.
pub fn heuristic_high(ctx: &DispatchContext, params: &HeuristicParams) -> Result<usize, HeuristicError> {
    if ctx.all.is_empty() {
        return Err(HeuristicError::EmptySet);
    }
    let branch = high_branch(ctx.x_same() as f64, ctx.x_other() as f64, params.c1_high, params.c2_high);
    let base = match branch {
        HighBranch::SameOnly if !ctx.same.is_empty() => ctx.same.clone(),
        HighBranch::OtherOnly if !ctx.other.is_empty() => ctx.other.clone(),
        _ => ctx.all.clone(),
    };
    let mut set = filter_inbound(ctx, &base, params.c3_high);
    let without_other: BTreeSet<usize> = set.difference(&ctx.other).copied().collect();
    if !without_other.is_empty() {
        set = without_other;
    }
    if set.len() == 1 {
        return Ok(*set.first().unwrap());
    }
    Ok(argmin_by(&set, |k| ctx.outbound[k] - ctx.inbound[k]))
}

/// Pallet totals on the two loops a junction feeds: own loop (direction 0)
/// and the neighbouring loop (direction 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JunctionContext {
    pub downstream_pallets: [usize; 2],
}

impl JunctionContext {
    pub fn from_sim(sim: &SimState, junction: usize) -> Result<Self, HeuristicError> {
        let topo = sim.topology();
        let link = topo.junctions().get(junction).ok_or(HeuristicError::UnknownJunction(junction))?;
        let counts = sim.loop_pallet_counts();
        let own = topo.node(link.junction).loop_id;
        let neighbour = topo.node(topo.segment(link.dir1).to).loop_id;
        Ok(JunctionContext { downstream_pallets: [counts[own.0], counts[neighbour.0]] })
    }
}

/// Send the empty pallet toward the loop holding fewer pallets; ties stay on direction 0.
pub fn junction_least_pallets(ctx: &JunctionContext) -> usize {
    if ctx.downstream_pallets[1] < ctx.downstream_pallets[0] { 1 } else { 0 }
}

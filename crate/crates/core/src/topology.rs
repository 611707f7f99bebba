//! Conveyor layout: loops of timed segments joined by junction sections.
//!
//! Nodes and segments are addressed by dense indices ([`NodeId`], [`SegmentId`])
//! in declaration order; the string ids from the layout document are kept for
//! reporting. All routing tables are computed once at construction and the
//! topology is immutable afterwards.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap, HashSet};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SegmentId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LoopId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Incoming,
    Storage,
    Outgoing,
    Junction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
    pub loop_id: LoopId,
    pub buffer_capacity: usize,
    pub processing_time_s: f64,
    pub processing_steps: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub name: String,
    pub from: NodeId,
    pub to: NodeId,
    pub steps: u32,
    /// True when the segment joins two different loops.
    pub is_section: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JunctionLink {
    pub name: String,
    pub junction: NodeId,
    /// Direction 0: stay on the junction's own loop.
    pub dir0: SegmentId,
    /// Direction 1: the connecting section into the neighbouring loop.
    pub dir1: SegmentId,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TopologyError {
    #[error("layout schema error: {0}")]
    Schema(String),
    #[error("layout invariant violated: {0}")]
    Invariant(String),
    #[error("no path from node {from} to node {to}")]
    NoPath { from: String, to: String },
    #[error("unknown node index {0}")]
    UnknownNode(usize),
    #[error("node {0} is not an incoming point")]
    NotIncoming(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    loops: Vec<String>,
    nodes: Vec<Node>,
    segments: Vec<Segment>,
    junctions: Vec<JunctionLink>,
    connecting_section_capacity: usize,
    resolution_s: f64,
    // derived
    storages: Vec<NodeId>,
    incomings: Vec<NodeId>,
    outgoings: Vec<NodeId>,
    loop_successor: Vec<SegmentId>,
    junction_of_node: Vec<Option<usize>>,
    storage_index: Vec<Option<usize>>,
    dist: Vec<Vec<Option<u64>>>,
    next_hop: Vec<Vec<Option<SegmentId>>>,
}

pub const DEFAULT_RESOLUTION_S: f64 = 0.1;

impl Topology {
    /// Builds and validates a topology from raw parts.
    pub fn new(
        loops: Vec<String>,
        nodes: Vec<Node>,
        segments: Vec<Segment>,
        junctions: Vec<JunctionLink>,
        connecting_section_capacity: usize,
        resolution_s: f64,
    ) -> Result<Self, TopologyError> {
        if connecting_section_capacity == 0 {
            return Err(TopologyError::Invariant(
                "connecting_section_capacity must be at least 1".into(),
            ));
        }
        let n = nodes.len();
        for (i, node) in nodes.iter().enumerate() {
            if node.loop_id.0 >= loops.len() {
                return Err(TopologyError::Invariant(format!(
                    "node {} lies on no declared loop",
                    node.name
                )));
            }
            if node.kind != NodeKind::Junction && node.buffer_capacity == 0 {
                return Err(TopologyError::Invariant(format!(
                    "node {} has zero buffer capacity",
                    nodes[i].name
                )));
            }
        }
        for seg in &segments {
            if seg.from.0 >= n || seg.to.0 >= n {
                return Err(TopologyError::Schema(format!(
                    "segment {} references an unknown node",
                    seg.name
                )));
            }
            if seg.steps == 0 {
                return Err(TopologyError::Invariant(format!(
                    "segment {} has zero traversal steps",
                    seg.name
                )));
            }
            let crosses = nodes[seg.from.0].loop_id != nodes[seg.to.0].loop_id;
            if crosses != seg.is_section {
                return Err(TopologyError::Invariant(format!(
                    "segment {} section flag disagrees with its endpoints",
                    seg.name
                )));
            }
        }

        // Each node has exactly one outgoing and one incoming loop segment.
        let mut loop_successor = vec![None; n];
        let mut loop_in_degree = vec![0usize; n];
        for (i, seg) in segments.iter().enumerate() {
            if seg.is_section {
                continue;
            }
            if loop_successor[seg.from.0].is_some() {
                return Err(TopologyError::Invariant(format!(
                    "node {} has more than one loop successor",
                    nodes[seg.from.0].name
                )));
            }
            loop_successor[seg.from.0] = Some(SegmentId(i));
            loop_in_degree[seg.to.0] += 1;
        }
        let mut succ = Vec::with_capacity(n);
        for (i, s) in loop_successor.iter().enumerate() {
            match s {
                Some(s) if loop_in_degree[i] == 1 => succ.push(*s),
                _ => {
                    return Err(TopologyError::Invariant(format!(
                        "node {} is not on a directed loop cycle",
                        nodes[i].name
                    )))
                }
            }
        }
        // Each loop is a single cycle through all of its nodes.
        for (l, name) in loops.iter().enumerate() {
            let members: Vec<usize> = (0..n).filter(|&i| nodes[i].loop_id.0 == l).collect();
            let Some(&start) = members.first() else {
                return Err(TopologyError::Invariant(format!("loop {name} has no nodes")));
            };
            let mut seen = HashSet::new();
            let mut cur = start;
            loop {
                if !seen.insert(cur) {
                    break;
                }
                cur = segments[succ[cur].0].to.0;
            }
            if cur != start || seen.len() != members.len() {
                return Err(TopologyError::Invariant(format!(
                    "loop {name} does not form a single directed cycle"
                )));
            }
        }

        // Junction links: exactly two downstream segments.
        let mut junction_of_node = vec![None; n];
        for (j, link) in junctions.iter().enumerate() {
            let jn = link.junction;
            if jn.0 >= n || nodes[jn.0].kind != NodeKind::Junction {
                return Err(TopologyError::Invariant(format!(
                    "junction link {} does not name a junction node",
                    link.name
                )));
            }
            if junction_of_node[jn.0].is_some() {
                return Err(TopologyError::Invariant(format!(
                    "junction node {} is linked twice",
                    nodes[jn.0].name
                )));
            }
            let d0 = segments.get(link.dir0.0);
            let d1 = segments.get(link.dir1.0);
            let ok = matches!((d0, d1), (Some(a), Some(b))
                if a.from == jn && b.from == jn && !a.is_section && b.is_section);
            if !ok {
                return Err(TopologyError::Invariant(format!(
                    "junction {} must link its loop segment (dir0) and one connecting section (dir1)",
                    link.name
                )));
            }
            junction_of_node[jn.0] = Some(j);
        }
        for (i, node) in nodes.iter().enumerate() {
            let out_degree = segments.iter().filter(|s| s.from.0 == i).count();
            let expected = if node.kind == NodeKind::Junction { 2 } else { 1 };
            if out_degree != expected {
                return Err(TopologyError::Invariant(format!(
                    "node {} has {} downstream segments, expected {}",
                    node.name, out_degree, expected
                )));
            }
            if node.kind == NodeKind::Junction && junction_of_node[i].is_none() {
                return Err(TopologyError::Invariant(format!(
                    "junction node {} has no junction link",
                    node.name
                )));
            }
        }

        let of_kind = |k: NodeKind| -> Vec<NodeId> {
            (0..n).filter(|&i| nodes[i].kind == k).map(NodeId).collect()
        };
        let storages = of_kind(NodeKind::Storage);
        let incomings = of_kind(NodeKind::Incoming);
        let outgoings = of_kind(NodeKind::Outgoing);
        let mut storage_index = vec![None; n];
        for (k, s) in storages.iter().enumerate() {
            storage_index[s.0] = Some(k);
        }

        let mut topo = Topology {
            loops,
            nodes,
            segments,
            junctions,
            connecting_section_capacity,
            resolution_s,
            storages,
            incomings,
            outgoings,
            loop_successor: succ,
            junction_of_node,
            storage_index,
            dist: Vec::new(),
            next_hop: Vec::new(),
        };
        topo.build_routing();

        for &i in &topo.incomings {
            for &s in &topo.storages {
                if topo.dist[i.0][s.0].is_none() {
                    return Err(TopologyError::Invariant(format!(
                        "storage {} is unreachable from incoming {}",
                        topo.nodes[s.0].name, topo.nodes[i.0].name
                    )));
                }
            }
        }
        Ok(topo)
    }

    fn build_routing(&mut self) {
        let n = self.nodes.len();
        // Reverse adjacency: for each node, segments ending there.
        let mut incoming_segs: Vec<Vec<SegmentId>> = vec![Vec::new(); n];
        for (i, s) in self.segments.iter().enumerate() {
            incoming_segs[s.to.0].push(SegmentId(i));
        }
        // dist[a][b]: shortest traversal steps a -> b (Dijkstra on reversed graph per target).
        let mut dist = vec![vec![None; n]; n];
        for target in 0..n {
            let mut best: Vec<Option<u64>> = vec![None; n];
            let mut heap = BinaryHeap::new();
            best[target] = Some(0);
            heap.push(Reverse((0u64, target)));
            while let Some(Reverse((d, v))) = heap.pop() {
                if best[v].is_some_and(|b| d > b) {
                    continue;
                }
                for &sid in &incoming_segs[v] {
                    let seg = &self.segments[sid.0];
                    let nd = d + seg.steps as u64;
                    let u = seg.from.0;
                    if best[u].is_none_or(|b| nd < b) {
                        best[u] = Some(nd);
                        heap.push(Reverse((nd, u)));
                    }
                }
            }
            for a in 0..n {
                dist[a][target] = best[a];
            }
        }
        let mut next_hop = vec![vec![None; n]; n];
        for a in 0..n {
            for b in 0..n {
                if a == b || dist[a][b].is_none() {
                    continue;
                }
                let mut choice: Option<(u64, SegmentId)> = None;
                for (i, seg) in self.segments.iter().enumerate() {
                    if seg.from.0 != a {
                        continue;
                    }
                    let Some(rest) = dist[seg.to.0][b] else { continue };
                    let cost = seg.steps as u64 + rest;
                    if choice.is_none_or(|(c, _)| cost < c) {
                        choice = Some((cost, SegmentId(i)));
                    }
                }
                next_hop[a][b] = choice.map(|(_, s)| s);
            }
        }
        self.dist = dist;
        self.next_hop = next_hop;
    }

    pub fn loops(&self) -> &[String] {
        &self.loops
    }
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }
    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }
    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }
    pub fn segment(&self, id: SegmentId) -> &Segment {
        &self.segments[id.0]
    }
    pub fn junctions(&self) -> &[JunctionLink] {
        &self.junctions
    }
    pub fn connecting_section_capacity(&self) -> usize {
        self.connecting_section_capacity
    }
    pub fn resolution_s(&self) -> f64 {
        self.resolution_s
    }
    /// Storage nodes in declaration order; the position is the storage action index.
    pub fn storages(&self) -> &[NodeId] {
        &self.storages
    }
    pub fn incomings(&self) -> &[NodeId] {
        &self.incomings
    }
    pub fn outgoings(&self) -> &[NodeId] {
        &self.outgoings
    }
    pub fn storage_index(&self, node: NodeId) -> Option<usize> {
        self.storage_index.get(node.0).copied().flatten()
    }
    pub fn junction_index(&self, node: NodeId) -> Option<usize> {
        self.junction_of_node.get(node.0).copied().flatten()
    }
    /// The segment continuing along the node's own loop.
    pub fn loop_successor(&self, node: NodeId) -> SegmentId {
        self.loop_successor[node.0]
    }
    pub fn node_by_name(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }
    /// Total belt cells, one pallet per cell.
    pub fn total_cells(&self) -> usize {
        self.segments.iter().map(|s| s.steps as usize).sum()
    }

    /// First segment of the shortest route, or `None` if `from == to` or unreachable.
    pub fn next_hop(&self, from: NodeId, to: NodeId) -> Option<SegmentId> {
        self.next_hop[from.0][to.0]
    }

    pub fn route_cost(&self, from: NodeId, to: NodeId) -> Option<u64> {
        self.dist.get(from.0)?.get(to.0).copied().flatten()
    }

    /// Minimal-time route as an ordered segment list; ties break to the
    /// smallest segment index at every hop.
    pub fn shortest_route(&self, from: NodeId, to: NodeId) -> Result<Vec<SegmentId>, TopologyError> {
        let n = self.nodes.len();
        if from.0 >= n {
            return Err(TopologyError::UnknownNode(from.0));
        }
        if to.0 >= n {
            return Err(TopologyError::UnknownNode(to.0));
        }
        if self.dist[from.0][to.0].is_none() {
            return Err(TopologyError::NoPath {
                from: self.nodes[from.0].name.clone(),
                to: self.nodes[to.0].name.clone(),
            });
        }
        let mut route = Vec::new();
        let mut cur = from;
        while cur != to {
            let seg = self.next_hop[cur.0][to.0].expect("reachable nodes have a next hop");
            route.push(seg);
            cur = self.segments[seg.0].to;
        }
        Ok(route)
    }

    pub fn loop_membership(&self, node: NodeId) -> Result<LoopId, TopologyError> {
        self.nodes
            .get(node.0)
            .map(|n| n.loop_id)
            .ok_or(TopologyError::UnknownNode(node.0))
    }

    /// Storage action indices on the same loop as the given incoming point.
    pub fn same_loop_storages(&self, incoming: NodeId) -> Result<BTreeSet<usize>, TopologyError> {
        let node = self.nodes.get(incoming.0).ok_or(TopologyError::UnknownNode(incoming.0))?;
        if node.kind != NodeKind::Incoming {
            return Err(TopologyError::NotIncoming(node.name.clone()));
        }
        Ok(self.storages_on_loop(node.loop_id))
    }

    pub fn storages_on_loop(&self, loop_id: LoopId) -> BTreeSet<usize> {
        self.storages
            .iter()
            .enumerate()
            .filter(|(_, s)| self.nodes[s.0].loop_id == loop_id)
            .map(|(k, _)| k)
            .collect()
    }

    /// Number of loop hops between two loops through connecting sections.
    pub fn loop_distance(&self, a: LoopId, b: LoopId) -> Option<usize> {
        let l = self.loops.len();
        let mut adj = vec![BTreeSet::new(); l];
        for s in self.segments.iter().filter(|s| s.is_section) {
            adj[self.nodes[s.from.0].loop_id.0].insert(self.nodes[s.to.0].loop_id.0);
        }
        let mut depth = vec![None; l];
        depth[a.0] = Some(0);
        let mut frontier = vec![a.0];
        while let Some(v) = frontier.first().copied() {
            frontier.remove(0);
            for &w in &adj[v] {
                if depth[w].is_none() {
                    depth[w] = Some(depth[v].unwrap() + 1);
                    frontier.push(w);
                }
            }
        }
        depth[b.0]
    }
}

// ---------------------------------------------------------------------------
// Default preset
// ---------------------------------------------------------------------------

pub const LOOP_CIRCUMFERENCE_STEPS: u32 = 1200;
pub const SECTION_STEPS: u32 = 100;
pub const DEFAULT_SECTION_CAPACITY: usize = 10;

/// Three loops chained loop0 <-> loop1 <-> loop2. Node order around each loop:
///
/// ```text
/// loop0: in0 st0 st1 st2 out0 jn0 st3 in1 st4 st5 st6 out1
/// loop1: in2 st7 st8 jn1 st9 st10 out2 st11 jn2 st12 st13 out3
/// loop2: in3 st14 st15 st16 out4 jn3 st17 st18 st19 out5
/// ```
///
/// Sections: jn0 <-> jn1 and jn2 <-> jn3, one directed segment each way.
pub fn build_default_preset() -> Topology {
    let layout: [&[&str]; 3] = [
        &["in0", "st0", "st1", "st2", "out0", "jn0", "st3", "in1", "st4", "st5", "st6", "out1"],
        &["in2", "st7", "st8", "jn1", "st9", "st10", "out2", "st11", "jn2", "st12", "st13", "out3"],
        &["in3", "st14", "st15", "st16", "out4", "jn3", "st17", "st18", "st19", "out5"],
    ];
    let mut specs: Vec<(String, NodeKind, usize)> = Vec::new();
    for (l, names) in layout.iter().enumerate() {
        for name in names.iter() {
            let kind = match &name[..2] {
                "in" => NodeKind::Incoming,
                "st" => NodeKind::Storage,
                "ou" => NodeKind::Outgoing,
                _ => NodeKind::Junction,
            };
            specs.push((name.to_string(), kind, l));
        }
    }
    // Storages must be declared in index order so that action k means stk.
    specs.sort_by_key(|(name, kind, _)| {
        let num: usize = name.trim_start_matches(|c: char| c.is_ascii_alphabetic()).parse().unwrap();
        (*kind as u8, num)
    });
    let index: HashMap<String, usize> =
        specs.iter().enumerate().map(|(i, (n, _, _))| (n.clone(), i)).collect();
    let nodes: Vec<Node> = specs
        .iter()
        .map(|(name, kind, l)| {
            let (buffer, proc_s) = default_node_params(*kind);
            Node {
                name: name.clone(),
                kind: *kind,
                loop_id: LoopId(*l),
                buffer_capacity: buffer,
                processing_time_s: proc_s,
                processing_steps: seconds_to_steps(proc_s, DEFAULT_RESOLUTION_S),
            }
        })
        .collect();

    let mut segments = Vec::new();
    for names in layout.iter() {
        let steps = LOOP_CIRCUMFERENCE_STEPS / names.len() as u32;
        for (i, from) in names.iter().enumerate() {
            let to = names[(i + 1) % names.len()];
            segments.push(Segment {
                name: format!("seg{:02}", segments.len()),
                from: NodeId(index[*from]),
                to: NodeId(index[to]),
                steps,
                is_section: false,
            });
        }
    }
    let section_pairs = [("jn0", "jn1"), ("jn1", "jn0"), ("jn2", "jn3"), ("jn3", "jn2")];
    let mut section_of = HashMap::new();
    for (k, (a, b)) in section_pairs.iter().enumerate() {
        section_of.insert(*a, segments.len());
        segments.push(Segment {
            name: format!("sec{k}"),
            from: NodeId(index[*a]),
            to: NodeId(index[*b]),
            steps: SECTION_STEPS,
            is_section: true,
        });
    }
    let junctions = ["jn0", "jn1", "jn2", "jn3"]
        .iter()
        .map(|j| {
            let node = NodeId(index[*j]);
            let dir0 = segments
                .iter()
                .position(|s| s.from == node && !s.is_section)
                .unwrap();
            JunctionLink {
                name: j.to_string(),
                junction: node,
                dir0: SegmentId(dir0),
                dir1: SegmentId(section_of[j]),
            }
        })
        .collect();
    Topology::new(
        vec!["loop0".into(), "loop1".into(), "loop2".into()],
        nodes,
        segments,
        junctions,
        DEFAULT_SECTION_CAPACITY,
        DEFAULT_RESOLUTION_S,
    )
    .expect("default preset is valid")
}

/// (buffer capacity, processing seconds) per node kind.
fn default_node_params(kind: NodeKind) -> (usize, f64) {
    match kind {
        NodeKind::Incoming => (4, 5.0),
        NodeKind::Storage => (8, 10.0),
        NodeKind::Outgoing => (10, 6.0),
        NodeKind::Junction => (DEFAULT_SECTION_CAPACITY, 0.5),
    }
}

pub fn seconds_to_steps(seconds: f64, resolution_s: f64) -> u32 {
    (seconds / resolution_s).round().max(0.0) as u32
}

// ---------------------------------------------------------------------------
// Layout document
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayoutDocument {
    pub loops: LoopsSection,
    pub nodes: Vec<NodeEntry>,
    pub segments: Vec<SegmentEntry>,
    #[serde(default)]
    pub junctions: Vec<JunctionEntry>,
    pub limits: LimitsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoopsSection {
    pub ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: String,
    pub kind: NodeKind,
    #[serde(rename = "loop")]
    pub loop_id: String,
    pub buffer: usize,
    pub proc_time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentEntry {
    pub id: String,
    pub from: String,
    pub to: String,
    pub steps: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JunctionEntry {
    pub id: String,
    pub dir0_segment: String,
    pub dir1_segment: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LimitsSection {
    pub connecting_section_capacity: usize,
    #[serde(default = "default_resolution")]
    pub resolution_s: f64,
}

fn default_resolution() -> f64 {
    DEFAULT_RESOLUTION_S
}

impl Topology {
    pub fn to_document(&self) -> LayoutDocument {
        LayoutDocument {
            loops: LoopsSection { ids: self.loops.clone() },
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeEntry {
                    id: n.name.clone(),
                    kind: n.kind,
                    loop_id: self.loops[n.loop_id.0].clone(),
                    buffer: n.buffer_capacity,
                    proc_time_s: n.processing_time_s,
                })
                .collect(),
            segments: self
                .segments
                .iter()
                .map(|s| SegmentEntry {
                    id: s.name.clone(),
                    from: self.nodes[s.from.0].name.clone(),
                    to: self.nodes[s.to.0].name.clone(),
                    steps: s.steps,
                })
                .collect(),
            junctions: self
                .junctions
                .iter()
                .map(|j| JunctionEntry {
                    id: j.name.clone(),
                    dir0_segment: self.segments[j.dir0.0].name.clone(),
                    dir1_segment: self.segments[j.dir1.0].name.clone(),
                })
                .collect(),
            limits: LimitsSection {
                connecting_section_capacity: self.connecting_section_capacity,
                resolution_s: self.resolution_s,
            },
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(&self.to_document()).expect("layout document serializes")
    }
}

pub fn load_topology(doc: &LayoutDocument) -> Result<Topology, TopologyError> {
    fn unique<'a>(what: &str, ids: impl Iterator<Item = &'a String>) -> Result<(), TopologyError> {
        let mut seen = HashSet::new();
        for id in ids {
            if !seen.insert(id) {
                return Err(TopologyError::Schema(format!("duplicated {what} id {id}")));
            }
        }
        Ok(())
    }
    unique("loop", doc.loops.ids.iter())?;
    unique("node", doc.nodes.iter().map(|n| &n.id))?;
    unique("segment", doc.segments.iter().map(|s| &s.id))?;
    unique("junction", doc.junctions.iter().map(|j| &j.id))?;
    let resolution = doc.limits.resolution_s;
    if !(resolution > 0.0 && resolution.is_finite()) {
        return Err(TopologyError::Schema("resolution_s must be positive".into()));
    }

    let loop_index: BTreeMap<&str, usize> =
        doc.loops.ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut nodes = Vec::with_capacity(doc.nodes.len());
    for n in &doc.nodes {
        let Some(&l) = loop_index.get(n.loop_id.as_str()) else {
            return Err(TopologyError::Invariant(format!(
                "node {} lies on no declared loop ({})",
                n.id, n.loop_id
            )));
        };
        if !(n.proc_time_s >= 0.0 && n.proc_time_s.is_finite()) {
            return Err(TopologyError::Schema(format!("node {} has invalid proc_time_s", n.id)));
        }
        nodes.push(Node {
            name: n.id.clone(),
            kind: n.kind,
            loop_id: LoopId(l),
            buffer_capacity: n.buffer,
            processing_time_s: n.proc_time_s,
            processing_steps: seconds_to_steps(n.proc_time_s, resolution),
        });
    }
    let node_index: BTreeMap<&str, usize> =
        doc.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
    let lookup_node = |id: &str, seg: &str| -> Result<NodeId, TopologyError> {
        node_index
            .get(id)
            .map(|&i| NodeId(i))
            .ok_or_else(|| TopologyError::Schema(format!("segment {seg} references unknown node {id}")))
    };
    let mut segments = Vec::with_capacity(doc.segments.len());
    for s in &doc.segments {
        let from = lookup_node(&s.from, &s.id)?;
        let to = lookup_node(&s.to, &s.id)?;
        segments.push(Segment {
            name: s.id.clone(),
            from,
            to,
            steps: s.steps,
            is_section: nodes[from.0].loop_id != nodes[to.0].loop_id,
        });
    }
    let seg_index: BTreeMap<&str, usize> =
        doc.segments.iter().enumerate().map(|(i, s)| (s.id.as_str(), i)).collect();
    let mut junctions = Vec::with_capacity(doc.junctions.len());
    for j in &doc.junctions {
        let find = |id: &str| {
            seg_index.get(id).map(|&i| SegmentId(i)).ok_or_else(|| {
                TopologyError::Schema(format!("junction {} references unknown segment {id}", j.id))
            })
        };
        let node = node_index
            .get(j.id.as_str())
            .map(|&i| NodeId(i))
            .ok_or_else(|| TopologyError::Schema(format!("junction {} is not a declared node", j.id)))?;
        junctions.push(JunctionLink {
            name: j.id.clone(),
            junction: node,
            dir0: find(&j.dir0_segment)?,
            dir1: find(&j.dir1_segment)?,
        });
    }
    Topology::new(
        doc.loops.ids.clone(),
        nodes,
        segments,
        junctions,
        doc.limits.connecting_section_capacity,
        resolution,
    )
}

pub fn load_topology_toml(text: &str) -> Result<Topology, TopologyError> {
    let doc: LayoutDocument =
        toml::from_str(text).map_err(|e| TopologyError::Schema(e.to_string()))?;
    load_topology(&doc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn three_cycle() -> Topology {
        let nodes = ["a", "b", "c"]
            .iter()
            .map(|n| Node {
                name: n.to_string(),
                kind: if *n == "a" { NodeKind::Incoming } else { NodeKind::Storage },
                loop_id: LoopId(0),
                buffer_capacity: 1,
                processing_time_s: 0.0,
                processing_steps: 0,
            })
            .collect();
        let seg = |name: &str, f, t| Segment {
            name: name.into(),
            from: NodeId(f),
            to: NodeId(t),
            steps: 1,
            is_section: false,
        };
        Topology::new(
            vec!["l".into()],
            nodes,
            vec![seg("ab", 0, 1), seg("bc", 1, 2), seg("ca", 2, 0)],
            vec![],
            1,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn preset_counts() {
        let t = build_default_preset();
        assert_eq!(t.loops().len(), 3);
        assert_eq!(t.nodes().len(), 34);
        assert_eq!(t.incomings().len(), 4);
        assert_eq!(t.storages().len(), 20);
        assert_eq!(t.outgoings().len(), 6);
        assert_eq!(t.junctions().len(), 4);
        for &i in t.incomings() {
            assert_eq!(t.node(i).buffer_capacity, 4);
            assert_eq!(t.node(i).processing_steps, 50);
        }
        for &s in t.storages() {
            assert_eq!(t.node(s).buffer_capacity, 8);
            assert_eq!(t.node(s).processing_steps, 100);
        }
        for &o in t.outgoings() {
            assert_eq!(t.node(o).buffer_capacity, 10);
            assert_eq!(t.node(o).processing_steps, 60);
        }
        for j in t.junctions() {
            assert_eq!(t.node(j.junction).processing_steps, 5);
        }
        let per_loop = |k: NodeKind| -> Vec<usize> {
            (0..3)
                .map(|l| t.nodes().iter().filter(|n| n.kind == k && n.loop_id == LoopId(l)).count())
                .collect()
        };
        assert_eq!(per_loop(NodeKind::Incoming), vec![2, 1, 1]);
        assert_eq!(per_loop(NodeKind::Storage), vec![7, 7, 6]);
        assert_eq!(per_loop(NodeKind::Outgoing), vec![2, 2, 2]);
    }

    #[test]
    fn storage_action_index_matches_name() {
        let t = build_default_preset();
        for (k, s) in t.storages().iter().enumerate() {
            assert_eq!(t.node(*s).name, format!("st{k}"));
        }
    }

    #[test]
    fn preset_is_bit_identical_across_builds() {
        assert_eq!(build_default_preset(), build_default_preset());
        assert_eq!(build_default_preset().to_toml(), build_default_preset().to_toml());
    }

    #[test]
    fn route_on_three_cycle() {
        let t = three_cycle();
        assert!(t.shortest_route(NodeId(0), NodeId(0)).unwrap().is_empty());
        let r = t.shortest_route(NodeId(0), NodeId(2)).unwrap();
        assert_eq!(r, vec![SegmentId(0), SegmentId(1)]);
        assert_eq!(t.route_cost(NodeId(0), NodeId(2)), Some(2));
    }

    #[test]
    fn same_loop_partition() {
        let t = build_default_preset();
        let in0 = t.node_by_name("in0").unwrap();
        let same = t.same_loop_storages(in0).unwrap();
        assert_eq!(same, (0..7).collect());
        let all: BTreeSet<usize> = (0..20).collect();
        let other: BTreeSet<usize> = all.difference(&same).copied().collect();
        assert!(same.is_disjoint(&other));
        assert_eq!(same.union(&other).copied().collect::<BTreeSet<_>>(), all);
        let jn = t.node_by_name("jn0").unwrap();
        assert!(matches!(t.same_loop_storages(jn), Err(TopologyError::NotIncoming(_))));
        assert!(matches!(t.loop_membership(NodeId(99)), Err(TopologyError::UnknownNode(99))));
    }

    #[test]
    fn loop_distances() {
        let t = build_default_preset();
        assert_eq!(t.loop_distance(LoopId(0), LoopId(0)), Some(0));
        assert_eq!(t.loop_distance(LoopId(0), LoopId(1)), Some(1));
        assert_eq!(t.loop_distance(LoopId(0), LoopId(2)), Some(2));
        assert_eq!(t.loop_distance(LoopId(2), LoopId(0)), Some(2));
    }

    #[test]
    fn round_trip_through_toml() {
        let t = build_default_preset();
        let text = t.to_toml();
        let back = load_topology_toml(&text).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn storage_on_no_loop_is_invariant_violation() {
        let mut doc = build_default_preset().to_document();
        let st = doc.nodes.iter_mut().find(|n| n.id == "st3").unwrap();
        st.loop_id = "nowhere".into();
        let err = load_topology(&doc).unwrap_err();
        assert!(matches!(err, TopologyError::Invariant(ref m) if m.contains("st3")), "{err}");
    }

    #[test]
    fn duplicated_segment_id_is_schema_error() {
        let mut doc = build_default_preset().to_document();
        let dup = doc.segments[0].id.clone();
        doc.segments[1].id = dup;
        assert!(matches!(load_topology(&doc), Err(TopologyError::Schema(_))));
    }

    #[test]
    fn unreachable_storage_is_reported() {
        // Two loops without any section: loop1 storage unreachable from loop0 incoming.
        let mut doc = build_default_preset().to_document();
        doc.junctions.clear();
        doc.segments.retain(|s| !s.id.starts_with("sec"));
        for n in doc.nodes.iter_mut().filter(|n| n.kind == NodeKind::Junction) {
            n.kind = NodeKind::Outgoing;
        }
        let err = load_topology(&doc).unwrap_err();
        assert!(matches!(err, TopologyError::Invariant(ref m) if m.contains("unreachable")), "{err}");
    }

    #[test]
    fn broken_cycle_is_rejected() {
        let mut doc = build_default_preset().to_document();
        doc.segments[3].to = doc.segments[3].from.clone();
        assert!(load_topology(&doc).is_err());
    }
}

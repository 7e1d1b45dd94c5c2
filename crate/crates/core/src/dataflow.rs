//! Cycle-level simulation of a streaming pipeline with bounded FIFOs.
//!
//! A node fires when every input FIFO holds at least `consume` tokens: it
//! pops them, works for `latency` cycles and then emits a burst of `produce`
//! tokens on each output. Burst tokens go out back-to-back as FIFO space
//! allows; the node cannot fire again until its whole burst has left, and
//! every cycle spent with tokens still pending counts as a stall.
//!
//! Each simulated cycle runs three phases in a fixed order: emit (pending
//! tokens are pushed), fire (ready nodes pop their inputs), and count down
//! (busy nodes advance). FIFO occupancy peaks right after the emit phase,
//! which is where it is recorded.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_CYCLE_CAP: u64 = 10_000_000;
/// Depth used for the sizing probe; large enough never to block.
pub const PROBE_DEPTH: u64 = u64::MAX >> 2;

#[derive(Debug, Error, PartialEq)]
pub enum DataflowError {
    #[error("malformed graph: {0}")]
    Malformed(String),
    #[error("node {node}: {message}")]
    Folding { node: String, message: String },
    #[error("sizing probe did not complete ({0:?}); the graph cannot drain")]
    ProbeFailed(Outcome),
    #[error("no node carries folding parameters")]
    NoFoldedNodes,
}

/// SIMD/PE folding of a matrix operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Folding {
    pub simd: u64,
    pub pe: u64,
    pub in_ch: u64,
    pub out_ch: u64,
    pub k: u64,
    #[serde(default = "one")]
    pub outputs_per_frame: u64,
}

fn one() -> u64 {
    1
}

impl Folding {
    pub fn validate(&self) -> Result<(), String> {
        if self.simd == 0 || self.pe == 0 || self.k == 0 || self.in_ch == 0 || self.out_ch == 0 {
            return Err("folding parameters must be positive".into());
        }
        if !self.in_ch.is_multiple_of(self.simd) {
            return Err(format!("in_ch {} not divisible by simd {}", self.in_ch, self.simd));
        }
        if !self.out_ch.is_multiple_of(self.pe) {
            return Err(format!("out_ch {} not divisible by pe {}", self.out_ch, self.pe));
        }
        Ok(())
    }

    /// `(in_ch / simd) * (out_ch / pe) * k^2`.
    pub fn cycles_per_output(&self) -> u64 {
        (self.in_ch / self.simd) * (self.out_ch / self.pe) * self.k * self.k
    }

    pub fn cycles_per_frame(&self) -> u64 {
        self.cycles_per_output() * self.outputs_per_frame
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamNode {
    pub id: String,
    #[serde(default = "one")]
    pub consume: u64,
    #[serde(default = "one")]
    pub produce: u64,
    /// Cycles per firing; defaults to the folding's cycles per output, or 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub folding: Option<Folding>,
}

impl StreamNode {
    pub fn new(id: &str, consume: u64, produce: u64, latency: u64) -> Self {
        Self {
            id: id.to_string(),
            consume,
            produce,
            latency: Some(latency),
            folding: None,
        }
    }

    pub fn effective_latency(&self) -> u64 {
        self.latency
            .or(self.folding.map(|f| f.cycles_per_output()))
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FifoEdge {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub id: Option<String>,
    pub from: String,
    pub to: String,
    pub depth: u64,
}

impl FifoEdge {
    pub fn new(from: &str, to: &str, depth: u64) -> Self {
        Self {
            id: None,
            from: from.to_string(),
            to: to.to_string(),
            depth,
        }
    }

    /// Explicit id, or `from->to`.
    pub fn key(&self) -> String {
        self.id
            .clone()
            .unwrap_or_else(|| format!("{}->{}", self.from, self.to))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamGraph {
    pub nodes: Vec<StreamNode>,
    pub edges: Vec<FifoEdge>,
}

impl StreamGraph {
    pub fn from_json(text: &str) -> Result<Self, DataflowError> {
        let g: StreamGraph =
            serde_json::from_str(text).map_err(|e| DataflowError::Malformed(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn set_depth(&mut self, edge: &str, depth: u64) {
        for e in &mut self.edges {
            if e.key() == edge {
                e.depth = depth;
            }
        }
    }

    pub fn with_depths(&self, depths: &BTreeMap<String, u64>) -> Self {
        let mut g = self.clone();
        for e in &mut g.edges {
            if let Some(&d) = depths.get(&e.key()) {
                e.depth = d;
            }
        }
        g
    }

    pub fn validate(&self) -> Result<(), DataflowError> {
        let bad = |m: String| Err(DataflowError::Malformed(m));
        if self.nodes.is_empty() {
            return bad("no nodes".into());
        }
        let mut index = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if index.insert(n.id.as_str(), i).is_some() {
                return bad(format!("duplicate node {}", n.id));
            }
            if n.consume == 0 || n.produce == 0 || n.effective_latency() == 0 {
                return bad(format!("node {}: consume, produce and latency must be positive", n.id));
            }
            if let Some(f) = &n.folding {
                f.validate().map_err(|message| DataflowError::Folding {
                    node: n.id.clone(),
                    message,
                })?;
            }
        }
        let mut keys = HashSet::new();
        let mut succ = vec![Vec::new(); self.nodes.len()];
        let mut indegree = vec![0usize; self.nodes.len()];
        for e in &self.edges {
            if !keys.insert(e.key()) {
                return bad(format!("duplicate edge {}", e.key()));
            }
            let (Some(&a), Some(&b)) = (index.get(e.from.as_str()), index.get(e.to.as_str())) else {
                return bad(format!("edge {} references an unknown node", e.key()));
            };
            if a == b {
                return bad(format!("self loop on {}", e.from));
            }
            succ[a].push(b);
            indegree[b] += 1;
        }
        let sources: Vec<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        if sources.is_empty() {
            return bad("no source node".into());
        }
        if !succ.iter().any(Vec::is_empty) {
            return bad("no sink node".into());
        }
        // Kahn's algorithm for acyclicity; every node must be reachable.
        let mut deg = indegree.clone();
        let mut queue: VecDeque<usize> = sources.into_iter().collect();
        let mut seen = 0;
        while let Some(i) = queue.pop_front() {
            seen += 1;
            for &j in &succ[i] {
                deg[j] -= 1;
                if deg[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        if seen != self.nodes.len() {
            return bad("graph contains a cycle".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Completed,
    Deadlocked,
    CapExceeded,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EdgeReport {
    pub id: String,
    pub depth: u64,
    pub max_occupancy: u64,
    pub final_occupancy: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BlockedNode {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct DeadlockDiagnosis {
    pub blocked_nodes: Vec<BlockedNode>,
    pub full_edges: Vec<String>,
    pub empty_edges: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SimReport {
    pub outcome: Outcome,
    pub cycles: u64,
    pub edges: Vec<EdgeReport>,
    /// Cycles each node spent unable to push pending burst tokens.
    pub stalls: BTreeMap<String, u64>,
    /// Tokens consumed by each sink.
    pub consumed: BTreeMap<String, u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deadlock: Option<DeadlockDiagnosis>,
}

impl SimReport {
    pub fn completed(&self) -> bool {
        self.outcome == Outcome::Completed
    }

    pub fn edge(&self, id: &str) -> Option<&EdgeReport> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub fn max_occupancy(&self) -> BTreeMap<String, u64> {
        self.edges.iter().map(|e| (e.id.clone(), e.max_occupancy)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum State {
    Idle,
    Busy(u64),
    Emitting(Vec<u64>),
}

struct Sim<'a> {
    g: &'a StreamGraph,
    ins: Vec<Vec<usize>>,
    outs: Vec<Vec<usize>>,
    occ: Vec<u64>,
    max_occ: Vec<u64>,
    state: Vec<State>,
    /// Remaining firings for sources.
    budget: Vec<u64>,
    stalls: Vec<u64>,
    consumed: Vec<u64>,
}

impl<'a> Sim<'a> {
    fn new(g: &'a StreamGraph, workload: u64) -> Result<Self, DataflowError> {
        let index: HashMap<&str, usize> = g.nodes.iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        let n = g.nodes.len();
        let mut ins = vec![Vec::new(); n];
        let mut outs = vec![Vec::new(); n];
        for (ei, e) in g.edges.iter().enumerate() {
            outs[index[e.from.as_str()]].push(ei);
            ins[index[e.to.as_str()]].push(ei);
        }
        let mut budget = vec![0; n];
        for (i, node) in g.nodes.iter().enumerate() {
            if ins[i].is_empty() {
                if !workload.is_multiple_of(node.produce) {
                    return Err(DataflowError::Malformed(format!(
                        "workload {workload} is not a multiple of source {} burst {}",
                        node.id, node.produce
                    )));
                }
                budget[i] = workload / node.produce;
            }
        }
        Ok(Self {
            g,
            ins,
            outs,
            occ: vec![0; g.edges.len()],
            max_occ: vec![0; g.edges.len()],
            state: vec![State::Idle; n],
            budget,
            stalls: vec![0; n],
            consumed: vec![0; n],
        })
    }

    fn done(&self) -> bool {
        self.budget.iter().all(|&b| b == 0)
            && self.state.iter().all(|s| *s == State::Idle)
            && self.occ.iter().all(|&o| o == 0)
    }

    /// One cycle; returns whether anything changed.
    fn step(&mut self) -> bool {
        let mut progress = false;
        for i in 0..self.g.nodes.len() {
            let State::Emitting(pending) = &mut self.state[i] else { continue };
            for (k, &ei) in self.outs[i].iter().enumerate() {
                let space = self.g.edges[ei].depth - self.occ[ei];
                let n = pending[k].min(space);
                if n > 0 {
                    self.occ[ei] += n;
                    pending[k] -= n;
                    progress = true;
                }
            }
            if pending.iter().all(|&p| p == 0) {
                self.state[i] = State::Idle;
            } else {
                self.stalls[i] += 1;
            }
        }
        for (m, &o) in self.max_occ.iter_mut().zip(&self.occ) {
            *m = (*m).max(o);
        }
        for i in 0..self.g.nodes.len() {
            if self.state[i] != State::Idle {
                continue;
            }
            let node = &self.g.nodes[i];
            if self.ins[i].is_empty() {
                if self.budget[i] == 0 {
                    continue;
                }
                self.budget[i] -= 1;
            } else {
                if self.ins[i].iter().any(|&ei| self.occ[ei] < node.consume) {
                    continue;
                }
                for &ei in &self.ins[i] {
                    self.occ[ei] -= node.consume;
                }
                if self.outs[i].is_empty() {
                    self.consumed[i] += node.consume;
                }
            }
            self.state[i] = State::Busy(node.effective_latency());
            progress = true;
        }
        for i in 0..self.g.nodes.len() {
            if let State::Busy(r) = self.state[i] {
                progress = true;
                self.state[i] = if r > 1 {
                    State::Busy(r - 1)
                } else if self.outs[i].is_empty() {
                    State::Idle
                } else {
                    State::Emitting(vec![self.g.nodes[i].produce; self.outs[i].len()])
                };
            }
        }
        progress
    }

    fn diagnose(&self) -> DeadlockDiagnosis {
        let mut d = DeadlockDiagnosis::default();
        for (i, node) in self.g.nodes.iter().enumerate() {
            let reason = match &self.state[i] {
                State::Emitting(pending) => {
                    let full: Vec<String> = self.outs[i]
                        .iter()
                        .zip(pending)
                        .filter(|(_, &p)| p > 0)
                        .map(|(&ei, _)| self.g.edges[ei].key())
                        .collect();
                    Some(format!("output full: {}", full.join(", ")))
                }
                State::Idle if !self.ins[i].is_empty() => {
                    let starved: Vec<String> = self.ins[i]
                        .iter()
                        .filter(|&&ei| self.occ[ei] < node.consume)
                        .map(|&ei| self.g.edges[ei].key())
                        .collect();
                    let waiting = self.ins[i].iter().any(|&ei| self.occ[ei] > 0)
                        || self.ins[i].iter().any(|&ei| {
                            let p = self.g.nodes.iter().position(|n| n.id == self.g.edges[ei].from);
                            p.is_some_and(|p| self.state[p] != State::Idle)
                        });
                    waiting.then(|| format!("waiting for input on {}", starved.join(", ")))
                }
                _ => None,
            };
            if let Some(reason) = reason {
                d.blocked_nodes.push(BlockedNode {
                    id: node.id.clone(),
                    reason,
                });
            }
        }
        for (ei, e) in self.g.edges.iter().enumerate() {
            if self.occ[ei] == e.depth {
                d.full_edges.push(e.key());
            } else if self.occ[ei] == 0 {
                d.empty_edges.push(e.key());
            }
        }
        d
    }

    fn report(&self, outcome: Outcome, cycles: u64) -> SimReport {
        let name = |i: usize| self.g.nodes[i].id.clone();
        SimReport {
            outcome,
            cycles,
            edges: self
                .g
                .edges
                .iter()
                .enumerate()
                .map(|(ei, e)| EdgeReport {
                    id: e.key(),
                    depth: e.depth,
                    max_occupancy: self.max_occ[ei],
                    final_occupancy: self.occ[ei],
                })
                .collect(),
            stalls: (0..self.g.nodes.len()).map(|i| (name(i), self.stalls[i])).collect(),
            consumed: (0..self.g.nodes.len())
                .filter(|&i| self.outs[i].is_empty())
                .map(|i| (name(i), self.consumed[i]))
                .collect(),
            deadlock: (outcome == Outcome::Deadlocked).then(|| self.diagnose()),
        }
    }
}

/// Run until every source has emitted `workload` tokens and the graph has
/// drained, until no state changes (deadlock), or until `cycle_cap`.
pub fn simulate(g: &StreamGraph, workload: u64, cycle_cap: u64) -> Result<SimReport, DataflowError> {
    g.validate()?;
    if cycle_cap == 0 {
        return Err(DataflowError::Malformed("cycle cap must be positive".into()));
    }
    let mut sim = Sim::new(g, workload)?;
    let mut cycle = 0;
    loop {
        if sim.done() {
            return Ok(sim.report(Outcome::Completed, cycle));
        }
        if cycle >= cycle_cap {
            return Ok(sim.report(Outcome::CapExceeded, cycle));
        }
        let progress = sim.step();
        cycle += 1;
        if !progress {
            return Ok(sim.report(Outcome::Deadlocked, cycle));
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SizingReport {
    pub recommended: BTreeMap<String, u64>,
    pub probe: SimReport,
    pub verification: SimReport,
}

/// Probe with effectively unbounded FIFOs and recommend each edge's peak
/// occupancy as its depth. The returned verification run uses the
/// recommendations.
pub fn size_fifos(g: &StreamGraph, workload: u64, cycle_cap: u64) -> Result<SizingReport, DataflowError> {
    let mut probe_graph = g.clone();
    for e in &mut probe_graph.edges {
        e.depth = PROBE_DEPTH;
    }
    let probe = simulate(&probe_graph, workload, cycle_cap)?;
    if !probe.completed() {
        return Err(DataflowError::ProbeFailed(probe.outcome));
    }
    let recommended: BTreeMap<String, u64> = probe
        .edges
        .iter()
        .map(|e| (e.id.clone(), e.max_occupancy.max(1)))
        .collect();
    let verification = simulate(&g.with_depths(&recommended), workload, cycle_cap)?;
    Ok(SizingReport {
        recommended,
        probe,
        verification,
    })
}

/// Steady-state initiation interval in cycles per frame: the slowest folded
/// node's cycles per output times its outputs per frame.
pub fn throughput(g: &StreamGraph) -> Result<u64, DataflowError> {
    let mut worst = None;
    for n in &g.nodes {
        if let Some(f) = &n.folding {
            f.validate().map_err(|message| DataflowError::Folding {
                node: n.id.clone(),
                message,
            })?;
            worst = worst.max(Some(f.cycles_per_frame()));
        }
    }
    worst.ok_or(DataflowError::NoFoldedNodes)
}

/// Reference graphs for tests and the CLI.
pub mod fixtures {
    use super::*;

    pub const BURST_EDGE: &str = "src->consumer";
    pub const SHORT_EDGES: [&str; 2] = ["fork->short", "short->join"];

    /// `src -> mid -> sink`, one token per cycle everywhere.
    pub fn linear_chain(depth: u64) -> StreamGraph {
        StreamGraph {
            nodes: vec![
                StreamNode::new("src", 1, 1, 1),
                StreamNode::new("mid", 1, 1, 1),
                StreamNode::new("sink", 1, 1, 1),
            ],
            edges: vec![FifoEdge::new("src", "mid", depth), FifoEdge::new("mid", "sink", depth)],
        }
    }

    /// A producer that accumulates for 8 cycles and then emits 8 tokens,
    /// feeding a consumer that reads one token per cycle.
    pub fn burst_chain(depth: u64) -> StreamGraph {
        StreamGraph {
            nodes: vec![
                StreamNode::new("src", 1, 8, 8),
                StreamNode::new("consumer", 1, 1, 1),
                StreamNode::new("sink", 1, 1, 1),
            ],
            edges: vec![FifoEdge::new("src", "consumer", depth), FifoEdge::new("consumer", "sink", 1)],
        }
    }

    /// A fork into a one-cycle branch and a branch that gathers 10 tokens
    /// before emitting them, joined by an elementwise add. The short branch
    /// has to buffer what the long branch holds back.
    pub fn fork_join(short_depth: u64) -> StreamGraph {
        StreamGraph {
            nodes: vec![
                StreamNode::new("src", 1, 1, 1),
                StreamNode::new("fork", 1, 1, 1),
                StreamNode::new("short", 1, 1, 1),
                StreamNode::new("long", 10, 10, 10),
                StreamNode::new("join", 1, 1, 1),
                StreamNode::new("sink", 1, 1, 1),
            ],
            edges: vec![
                FifoEdge::new("src", "fork", 1),
                FifoEdge::new("fork", "short", short_depth),
                FifoEdge::new("short", "join", short_depth),
                FifoEdge::new("fork", "long", 10),
                FifoEdge::new("long", "join", 10),
                FifoEdge::new("join", "sink", 1),
            ],
        }
    }

    /// One matrix node with 8 input and 8 output channels, 1x1 kernel and
    /// 100 outputs per frame.
    pub fn matrix_node(simd: u64, pe: u64) -> StreamGraph {
        let mut mvau = StreamNode::new("mvau", 1, 1, 1);
        mvau.latency = None;
        mvau.folding = Some(Folding {
            simd,
            pe,
            in_ch: 8,
            out_ch: 8,
            k: 1,
            outputs_per_frame: 100,
        });
        StreamGraph {
            nodes: vec![StreamNode::new("src", 1, 1, 1), mvau, StreamNode::new("sink", 1, 1, 1)],
            edges: vec![FifoEdge::new("src", "mvau", 2), FifoEdge::new("mvau", "sink", 2)],
        }
    }
}

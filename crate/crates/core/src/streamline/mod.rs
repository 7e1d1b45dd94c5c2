//! Graph IR for quantized conv networks, a reference interpreter and the
//! streamlining passes that move floating-point affine nodes down the graph
//! until they are folded into MultiThreshold nodes.
//!
//! Values are edges: each edge has exactly one producing node and one or more
//! consuming input slots. An edge with several consumers is a fork;
//! `Concat` and `EltwiseAdd` nodes are joins.

mod fixtures;
mod passes;

pub use fixtures::{c2f, conv_block, conv_block_streamlined, residual};
pub use passes::{
    absorb_into_multithreshold, merge_affine_at_join, move_scale_past_conv,
    push_affine_through_fork, run_pipeline, standalone_affines, Diagnostic, Pass, PassOutcome,
    PipelineOutcome, MAX_PIPELINE_ITERATIONS,
};

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};

use ndarray::{Array3, Array4, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quantcore::{self, MultiThresholdOp, QuantError, QuantSpec};

#[derive(Debug, Error, PartialEq)]
pub enum StreamlineError {
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("graph contains a cycle through node {0}")]
    Cycle(String),
    #[error("unknown edge {0}")]
    UnknownEdge(String),
    #[error("node {node}: affine scale is zero, cannot fold into thresholds")]
    ZeroScale { node: String },
    #[error("expected {expected} input tensors, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("input {node}: shape {got:?}, expected {expected:?}")]
    InputShape {
        node: String,
        expected: [usize; 3],
        got: [usize; 3],
    },
    #[error("pipeline did not reach a fixed point in {0} iterations")]
    NoFixedPoint(usize),
    #[error("node {node}: {source}")]
    Quant {
        node: String,
        #[source]
        source: QuantError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Op {
    Input {
        shape: [usize; 3],
    },
    Output,
    Conv {
        /// Flattened `[out_ch][in_ch][kh][kw]` integer weights.
        weights: Vec<i64>,
        weight_shape: [usize; 4],
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Mul {
        /// One value, or one per channel.
        scale: Vec<f64>,
    },
    Add {
        bias: Vec<f64>,
    },
    MultiThreshold(MultiThresholdOp),
    Split {
        sizes: Vec<usize>,
    },
    Concat,
    EltwiseAdd,
    MaxPool {
        kernel: usize,
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Resize {
        factor: usize,
    },
}

fn one() -> usize {
    1
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "Input",
            Op::Output => "Output",
            Op::Conv { .. } => "Conv",
            Op::Mul { .. } => "Mul",
            Op::Add { .. } => "Add",
            Op::MultiThreshold(_) => "MultiThreshold",
            Op::Split { .. } => "Split",
            Op::Concat => "Concat",
            Op::EltwiseAdd => "EltwiseAdd",
            Op::MaxPool { .. } => "MaxPool",
            Op::Resize { .. } => "Resize",
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Op::Mul { .. } | Op::Add { .. })
    }

    pub fn conv(weights: &Array4<i64>, stride: usize, pad: usize) -> Self {
        let (o, i, kh, kw) = weights.dim();
        Op::Conv {
            weights: weights.iter().copied().collect(),
            weight_shape: [o, i, kh, kw],
            stride,
            pad,
        }
    }

    /// `(a, b)` such that the node computes `a*x + b`.
    pub(crate) fn affine_params(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        match self {
            Op::Mul { scale } => Some((scale.clone(), vec![0.0])),
            Op::Add { bias } => Some((vec![1.0], bias.clone())),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    #[serde(flatten)]
    pub op: Op,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default)]
    pub outputs: Vec<String>,
}

impl Node {
    pub fn new(id: &str, op: Op, inputs: &[&str], outputs: &[&str]) -> Self {
        Self {
            id: id.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            outputs: outputs.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub id: String,
    /// `[channels, height, width]`, filled in by shape inference.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSpec>,
}

impl Edge {
    pub fn new(id: &str) -> Self {
        Self {
            id: id.to_string(),
            shape: None,
            quant: None,
        }
    }

    pub fn with_quant(mut self, q: QuantSpec) -> Self {
        self.quant = Some(q);
        self
    }
}

/// Edges that must share one quantization scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleGroup {
    pub tag: String,
    pub edges: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleViolation {
    pub group: String,
    pub edge: String,
    pub expected: Option<f64>,
    pub found: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OpGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub scale_groups: Vec<ScaleGroup>,
}

impl OpGraph {
    pub fn from_json(text: &str) -> Result<Self, StreamlineError> {
        let g: OpGraph =
            serde_json::from_str(text).map_err(|e| StreamlineError::Invalid(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph serializes")
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn edge(&self, id: &str) -> Option<&Edge> {
        self.edges.iter().find(|e| e.id == id)
    }

    pub(crate) fn edge_mut(&mut self, id: &str) -> Option<&mut Edge> {
        self.edges.iter_mut().find(|e| e.id == id)
    }

    pub fn count_kind(&self, name: &str) -> usize {
        self.nodes.iter().filter(|n| n.op.name() == name).count()
    }

    pub fn producer(&self, edge: &str) -> Option<usize> {
        self.nodes
            .iter()
            .position(|n| n.outputs.iter().any(|o| o == edge))
    }

    /// `(node index, input slot)` for every use of `edge`.
    pub fn consumers(&self, edge: &str) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (ni, n) in self.nodes.iter().enumerate() {
            for (slot, e) in n.inputs.iter().enumerate() {
                if e == edge {
                    out.push((ni, slot));
                }
            }
        }
        out
    }

    pub(crate) fn fresh_node_id(&self, base: &str) -> String {
        fresh(base, |c| self.node(c).is_some())
    }

    pub(crate) fn fresh_edge_id(&self, base: &str) -> String {
        fresh(base, |c| self.edge(c).is_some())
    }

    pub fn input_nodes(&self) -> Vec<&Node> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Input { .. }))
            .collect()
    }

    pub fn output_nodes(&self) -> Vec<&Node> {
        self.nodes.iter().filter(|n| n.op == Op::Output).collect()
    }

    /// Node indices in dependency order.
    pub fn topo_order(&self) -> Result<Vec<usize>, StreamlineError> {
        let mut producer: HashMap<&str, usize> = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            for o in &n.outputs {
                producer.insert(o.as_str(), i);
            }
        }
        let mut indegree = vec![0usize; self.nodes.len()];
        let mut succ: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            for e in &n.inputs {
                let p = *producer
                    .get(e.as_str())
                    .ok_or_else(|| StreamlineError::UnknownEdge(e.clone()))?;
                succ[p].push(i);
                indegree[i] += 1;
            }
        }
        let mut queue: VecDeque<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(i) = queue.pop_front() {
            order.push(i);
            for &j in &succ[i] {
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    queue.push_back(j);
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = (0..self.nodes.len()).find(|&i| indegree[i] > 0).unwrap_or(0);
            return Err(StreamlineError::Cycle(self.nodes[stuck].id.clone()));
        }
        Ok(order)
    }

    /// Structural checks, acyclicity and shape inference. Returns the shape
    /// of every edge.
    pub fn validate(&self) -> Result<BTreeMap<String, [usize; 3]>, StreamlineError> {
        let invalid = |m: String| Err(StreamlineError::Invalid(m));
        if self.input_nodes().is_empty() || self.output_nodes().is_empty() {
            return invalid("graph needs at least one Input and one Output".into());
        }
        let mut ids = HashSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.as_str()) {
                return invalid(format!("duplicate node id {}", n.id));
            }
        }
        let mut edge_ids = HashSet::new();
        for e in &self.edges {
            if !edge_ids.insert(e.id.as_str()) {
                return invalid(format!("duplicate edge id {}", e.id));
            }
        }
        let mut produced: HashMap<&str, &str> = HashMap::new();
        for n in &self.nodes {
            check_arity(n)?;
            for o in &n.outputs {
                if !edge_ids.contains(o.as_str()) {
                    return Err(StreamlineError::UnknownEdge(o.clone()));
                }
                if let Some(prev) = produced.insert(o.as_str(), n.id.as_str()) {
                    return invalid(format!("edge {o} produced by both {prev} and {}", n.id));
                }
            }
            for i in &n.inputs {
                if !edge_ids.contains(i.as_str()) {
                    return Err(StreamlineError::UnknownEdge(i.clone()));
                }
            }
        }
        for e in &self.edges {
            if !produced.contains_key(e.id.as_str()) {
                return invalid(format!("edge {} has no producer", e.id));
            }
            if self.consumers(&e.id).is_empty() {
                return invalid(format!("edge {} has no consumer", e.id));
            }
        }
        let order = self.topo_order()?;
        let mut shapes: BTreeMap<String, [usize; 3]> = BTreeMap::new();
        for &ni in &order {
            let n = &self.nodes[ni];
            let ins: Vec<[usize; 3]> = n.inputs.iter().map(|e| shapes[e]).collect();
            let outs = infer_shape(n, &ins)?;
            for (o, s) in n.outputs.iter().zip(outs) {
                shapes.insert(o.clone(), s);
            }
        }
        for e in &self.edges {
            if let Some(s) = e.shape {
                if s != shapes[&e.id] {
                    return invalid(format!(
                        "edge {} annotated {:?}, inferred {:?}",
                        e.id, s, shapes[&e.id]
                    ));
                }
            }
        }
        Ok(shapes)
    }

    /// Validate and overwrite every edge's shape annotation with the
    /// inferred one.
    pub fn refresh_shapes(&mut self) -> Result<(), StreamlineError> {
        for e in &mut self.edges {
            e.shape = None;
        }
        let shapes = self.validate()?;
        for e in &mut self.edges {
            e.shape = Some(shapes[&e.id]);
        }
        Ok(())
    }

    pub(crate) fn remove_node(&mut self, idx: usize) -> Node {
        self.nodes.remove(idx)
    }

    pub(crate) fn remove_edge(&mut self, id: &str) {
        self.edges.retain(|e| e.id != id);
    }
}

fn fresh(base: &str, taken: impl Fn(&str) -> bool) -> String {
    if !taken(base) {
        return base.to_string();
    }
    (1..)
        .map(|i| format!("{base}.{i}"))
        .find(|c| !taken(c))
        .expect("unbounded counter")
}

fn check_arity(n: &Node) -> Result<(), StreamlineError> {
    let (ni, no) = (n.inputs.len(), n.outputs.len());
    let ok = match &n.op {
        Op::Input { .. } => ni == 0 && no == 1,
        Op::Output => ni == 1 && no == 0,
        Op::Split { sizes } => ni == 1 && no == sizes.len() && !sizes.is_empty(),
        Op::Concat => ni >= 1 && no == 1,
        Op::EltwiseAdd => ni >= 2 && no == 1,
        _ => ni == 1 && no == 1,
    };
    if ok {
        Ok(())
    } else {
        Err(StreamlineError::Invalid(format!(
            "{} node {} has {ni} inputs and {no} outputs",
            n.op.name(),
            n.id
        )))
    }
}

fn param_len_ok(len: usize, channels: usize) -> bool {
    len == 1 || len == channels
}

fn infer_shape(n: &Node, ins: &[[usize; 3]]) -> Result<Vec<[usize; 3]>, StreamlineError> {
    let bad = |m: String| StreamlineError::Invalid(format!("{} node {}: {m}", n.op.name(), n.id));
    let quant = |e: QuantError| StreamlineError::Quant {
        node: n.id.clone(),
        source: e,
    };
    let out = match &n.op {
        Op::Input { shape } => vec![*shape],
        Op::Output => vec![],
        Op::Conv {
            weights,
            weight_shape,
            stride,
            pad,
        } => {
            let [o, i, kh, kw] = *weight_shape;
            if weights.len() != o * i * kh * kw {
                return Err(bad(format!("{} weights for shape {:?}", weights.len(), weight_shape)));
            }
            let [c, h, w] = ins[0];
            if c != i {
                return Err(bad(format!("weights expect {i} channels, input has {c}")));
            }
            let (oh, ow) = quantcore::output_size(h, w, kh, kw, *stride, *pad).map_err(quant)?;
            vec![[o, oh, ow]]
        }
        Op::Mul { scale: p } | Op::Add { bias: p } => {
            if !param_len_ok(p.len(), ins[0][0]) || p.iter().any(|v| !v.is_finite()) {
                return Err(bad(format!("{} parameters for {} channels", p.len(), ins[0][0])));
            }
            vec![ins[0]]
        }
        Op::MultiThreshold(op) => {
            op.validate().map_err(quant)?;
            if !param_len_ok(op.num_channels(), ins[0][0]) {
                return Err(bad(format!(
                    "{} threshold channels for {} input channels",
                    op.num_channels(),
                    ins[0][0]
                )));
            }
            vec![ins[0]]
        }
        Op::Split { sizes } => {
            let [c, h, w] = ins[0];
            if sizes.iter().sum::<usize>() != c || sizes.contains(&0) {
                return Err(bad(format!("sizes {sizes:?} do not partition {c} channels")));
            }
            sizes.iter().map(|&s| [s, h, w]).collect()
        }
        Op::Concat => {
            let [_, h, w] = ins[0];
            if ins.iter().any(|s| s[1] != h || s[2] != w) {
                return Err(bad(format!("spatial mismatch {ins:?}")));
            }
            vec![[ins.iter().map(|s| s[0]).sum(), h, w]]
        }
        Op::EltwiseAdd => {
            if ins.iter().any(|s| *s != ins[0]) {
                return Err(bad(format!("shape mismatch {ins:?}")));
            }
            vec![ins[0]]
        }
        Op::MaxPool {
            kernel,
            stride,
            pad,
        } => {
            let [c, h, w] = ins[0];
            if *pad >= *kernel {
                return Err(bad("padding must be smaller than the kernel".into()));
            }
            let (oh, ow) =
                quantcore::output_size(h, w, *kernel, *kernel, *stride, *pad).map_err(quant)?;
            vec![[c, oh, ow]]
        }
        Op::Resize { factor } => {
            if *factor == 0 {
                return Err(bad("factor must be positive".into()));
            }
            let [c, h, w] = ins[0];
            vec![[c, h * factor, w * factor]]
        }
    };
    Ok(out)
}

fn per_channel(x: &mut Array3<f64>, params: &[f64], f: impl Fn(&mut f64, f64)) {
    for (c, mut plane) in x.outer_iter_mut().enumerate() {
        let p = if params.len() == 1 { params[0] } else { params[c] };
        plane.mapv_inplace(|mut v| {
            f(&mut v, p);
            v
        });
    }
}

fn max_pool(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    Array3::from_shape_fn((c, oh, ow), |(ci, oy, ox)| {
        let mut m = f64::NEG_INFINITY;
        for ky in 0..k {
            for kx in 0..k {
                let iy = (oy * stride + ky) as isize - pad as isize;
                let ix = (ox * stride + kx) as isize - pad as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    m = m.max(x[[ci, iy as usize, ix as usize]]);
                }
            }
        }
        m
    })
}

/// Evaluate the graph. `inputs` follow the order of Input nodes in
/// `g.nodes`; results follow the order of Output nodes.
pub fn interpret(g: &OpGraph, inputs: &[Array3<f64>]) -> Result<Vec<Array3<f64>>, StreamlineError> {
    g.validate()?;
    let input_nodes = g.input_nodes();
    if inputs.len() != input_nodes.len() {
        return Err(StreamlineError::InputCount {
            expected: input_nodes.len(),
            got: inputs.len(),
        });
    }
    let mut feed: HashMap<&str, &Array3<f64>> = HashMap::new();
    for (n, x) in input_nodes.iter().zip(inputs) {
        if let Op::Input { shape } = n.op {
            let (c, h, w) = x.dim();
            if [c, h, w] != shape {
                return Err(StreamlineError::InputShape {
                    node: n.id.clone(),
                    expected: shape,
                    got: [c, h, w],
                });
            }
        }
        feed.insert(n.id.as_str(), x);
    }

    let mut values: HashMap<&str, Array3<f64>> = HashMap::new();
    let mut results: HashMap<&str, Array3<f64>> = HashMap::new();
    for ni in g.topo_order()? {
        let n = &g.nodes[ni];
        let quant = |e: QuantError| StreamlineError::Quant {
            node: n.id.clone(),
            source: e,
        };
        let ins: Vec<&Array3<f64>> = n.inputs.iter().map(|e| &values[e.as_str()]).collect();
        let outs: Vec<Array3<f64>> = match &n.op {
            Op::Input { .. } => vec![feed[n.id.as_str()].clone()],
            Op::Output => {
                results.insert(n.id.as_str(), ins[0].clone());
                vec![]
            }
            Op::Conv {
                weights,
                weight_shape,
                stride,
                pad,
            } => {
                let [o, i, kh, kw] = *weight_shape;
                let w = Array4::from_shape_vec((o, i, kh, kw), weights.iter().map(|&v| v as f64).collect())
                    .map_err(|e| StreamlineError::Invalid(e.to_string()))?;
                vec![quantcore::conv2d(ins[0], &w, *stride, *pad).map_err(quant)?]
            }
            Op::Mul { scale } => {
                let mut x = ins[0].clone();
                per_channel(&mut x, scale, |v, p| *v *= p);
                vec![x]
            }
            Op::Add { bias } => {
                let mut x = ins[0].clone();
                per_channel(&mut x, bias, |v, p| *v += p);
                vec![x]
            }
            Op::MultiThreshold(op) => vec![op.apply_tensor(ins[0]).map_err(quant)?.mapv(|v| v as f64)],
            Op::Split { sizes } => quantcore::split_array(ins[0], sizes).map_err(quant)?,
            Op::Concat => {
                let views: Vec<_> = ins.iter().map(|a| a.view()).collect();
                vec![quantcore::concat_arrays(&views).map_err(quant)?]
            }
            Op::EltwiseAdd => {
                let mut acc = ins[0].clone();
                for x in &ins[1..] {
                    Zip::from(&mut acc).and(*x).for_each(|a, &b| *a += b);
                }
                vec![acc]
            }
            Op::MaxPool {
                kernel,
                stride,
                pad,
            } => vec![max_pool(ins[0], *kernel, *stride, *pad)],
            Op::Resize { factor } => {
                let (c, h, w) = ins[0].dim();
                let f = *factor;
                vec![Array3::from_shape_fn((c, h * f, w * f), |(ci, y, x)| {
                    ins[0][[ci, y / f, x / f]]
                })]
            }
        };
        for (e, v) in n.outputs.iter().zip(outs) {
            values.insert(e.as_str(), v);
        }
    }
    Ok(g.output_nodes()
        .iter()
        .map(|n| results.remove(n.id.as_str()).expect("every output evaluated"))
        .collect())
}

/// Check that every group's edges carry one common scale. An edge without
/// a quantization annotation is reported as a violation.
pub fn validate_scale_groups(
    g: &OpGraph,
    groups: &[ScaleGroup],
) -> Result<Vec<ScaleViolation>, StreamlineError> {
    let mut report = Vec::new();
    for group in groups {
        let mut scales = Vec::with_capacity(group.edges.len());
        for id in &group.edges {
            let e = g
                .edge(id)
                .ok_or_else(|| StreamlineError::UnknownEdge(id.clone()))?;
            scales.push((id, e.quant.map(|q| q.scale)));
        }
        let expected = scales.iter().find_map(|(_, s)| *s);
        for (id, found) in scales {
            if found.is_none() || found != expected {
                report.push(ScaleViolation {
                    group: group.tag.clone(),
                    edge: id.clone(),
                    expected,
                    found,
                });
            }
        }
    }
    Ok(report)
}

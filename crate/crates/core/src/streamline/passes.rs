use std::collections::HashSet;
use std::fmt;

use serde::Serialize;

use super::{Edge, Node, Op, OpGraph, StreamlineError};
use crate::quantcore::{absorb_affine, MultiThresholdOp, QuantError};

pub const MAX_PIPELINE_ITERATIONS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pass {
    MoveScalePastConv,
    PushThroughFork,
    MergeAtJoin,
    AbsorbIntoMultiThreshold,
}

impl Pass {
    pub const PIPELINE: [Pass; 4] = [
        Pass::MoveScalePastConv,
        Pass::PushThroughFork,
        Pass::MergeAtJoin,
        Pass::AbsorbIntoMultiThreshold,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pass::MoveScalePastConv => "move-scale",
            Pass::PushThroughFork => "fork",
            Pass::MergeAtJoin => "join",
            Pass::AbsorbIntoMultiThreshold => "absorb",
        }
    }

    pub fn parse(name: &str) -> Option<Pass> {
        Pass::PIPELINE.into_iter().find(|p| p.name() == name)
    }

    pub fn apply(self, g: &OpGraph) -> Result<PassOutcome, StreamlineError> {
        match self {
            Pass::MoveScalePastConv => move_scale_past_conv(g),
            Pass::PushThroughFork => push_affine_through_fork(g),
            Pass::MergeAtJoin => merge_affine_at_join(g),
            Pass::AbsorbIntoMultiThreshold => absorb_into_multithreshold(g),
        }
    }
}

/// A site a pass looked at but left alone, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub pass: &'static str,
    pub node: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {}: {}", self.pass, self.node, self.message)
    }
}

#[derive(Debug, Clone)]
pub struct PassOutcome {
    pub graph: OpGraph,
    pub changed: bool,
    pub diagnostics: Vec<Diagnostic>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub graph: OpGraph,
    pub iterations: usize,
    pub diagnostics: Vec<Diagnostic>,
}

/// Rewrite one site at a time until `step` finds nothing to do, then let
/// `diagnose` explain the sites that were skipped.
fn fixed_point(
    g: &OpGraph,
    mut step: impl FnMut(&mut OpGraph) -> Result<bool, StreamlineError>,
    diagnose: impl Fn(&OpGraph) -> Vec<Diagnostic>,
) -> Result<PassOutcome, StreamlineError> {
    g.validate()?;
    let mut graph = g.clone();
    let mut changed = false;
    while step(&mut graph)? {
        changed = true;
    }
    graph.refresh_shapes()?;
    let diagnostics = diagnose(&graph);
    Ok(PassOutcome {
        graph,
        changed,
        diagnostics,
    })
}

fn uniform(p: &[f64]) -> Option<f64> {
    let first = *p.first()?;
    p.iter().all(|&v| v.to_bits() == first.to_bits()).then_some(first)
}

/// Edge consumed by exactly one slot of one node.
fn sole_consumer(g: &OpGraph, edge: &str) -> Option<usize> {
    match g.consumers(edge).as_slice() {
        [(n, _)] => Some(*n),
        _ => None,
    }
}

fn scale_into_conv(g: &OpGraph) -> Option<(usize, usize)> {
    g.nodes.iter().enumerate().find_map(|(mi, m)| {
        let Op::Mul { scale } = &m.op else { return None };
        let ci = sole_consumer(g, &m.outputs[0])?;
        (matches!(g.nodes[ci].op, Op::Conv { .. }) && uniform(scale).is_some()).then_some((mi, ci))
    })
}

/// Move a uniform `Mul` that feeds a `Conv` to the conv's output. Exact by
/// linearity; zero padding is unaffected by scaling.
pub fn move_scale_past_conv(g: &OpGraph) -> Result<PassOutcome, StreamlineError> {
    fixed_point(
        g,
        |g| {
            let Some((mi, ci)) = scale_into_conv(g) else {
                return Ok(false);
            };
            let Op::Mul { scale } = &g.nodes[mi].op else { unreachable!() };
            let s = scale[0];
            let mid = g.nodes[mi].outputs[0].clone();
            let src = g.nodes[mi].inputs[0].clone();
            let dst = g.nodes[ci].outputs[0].clone();
            g.nodes[ci].inputs = vec![src];
            g.nodes[ci].outputs = vec![mid.clone()];
            let m = &mut g.nodes[mi];
            m.op = Op::Mul { scale: vec![s] };
            m.inputs = vec![mid.clone()];
            m.outputs = vec![dst];
            if let Some(e) = g.edge_mut(&mid) {
                e.quant = None;
            }
            // Keep node order roughly topological for readable output.
            let mul = g.remove_node(mi);
            let ci = g.nodes.iter().position(|n| n.outputs.first() == Some(&mid)).unwrap();
            g.nodes.insert(ci + 1, mul);
            Ok(true)
        },
        |g| {
            g.nodes
                .iter()
                .filter_map(|m| {
                    let Op::Mul { scale } = &m.op else { return None };
                    let ci = sole_consumer(g, &m.outputs[0])?;
                    let conv = &g.nodes[ci];
                    (matches!(conv.op, Op::Conv { .. }) && uniform(scale).is_none()).then(|| Diagnostic {
                        pass: Pass::MoveScalePastConv.name(),
                        node: m.id.clone(),
                        message: format!(
                            "per-channel scale feeds conv {} which mixes channels; left in place",
                            conv.id
                        ),
                    })
                })
                .collect()
        },
    )
}

fn affine_before_fork(g: &OpGraph) -> Option<usize> {
    g.nodes.iter().position(|a| {
        if !a.op.is_affine() {
            return false;
        }
        let uses = g.consumers(&a.outputs[0]);
        uses.len() > 1 || (uses.len() == 1 && matches!(g.nodes[uses[0].0].op, Op::Split { .. }))
    })
}

fn with_params(op: &Op, params: Vec<f64>) -> Op {
    match op {
        Op::Mul { .. } => Op::Mul { scale: params },
        Op::Add { .. } => Op::Add { bias: params },
        _ => unreachable!("affine op"),
    }
}

fn params(op: &Op) -> &[f64] {
    match op {
        Op::Mul { scale } => scale,
        Op::Add { bias } => bias,
        _ => &[],
    }
}

/// Copy an affine that feeds a fork onto the start of every branch. A
/// `Split` counts as a fork; per-channel parameters are split with it.
pub fn push_affine_through_fork(g: &OpGraph) -> Result<PassOutcome, StreamlineError> {
    fixed_point(
        g,
        |g| {
            let Some(ai) = affine_before_fork(g) else {
                return Ok(false);
            };
            let a = g.nodes[ai].clone();
            let (src, mid) = (a.inputs[0].clone(), a.outputs[0].clone());
            let uses = g.consumers(&mid);
            if let [(si, _)] = uses.as_slice() {
                let si = *si;
                let Op::Split { sizes } = g.nodes[si].op.clone() else { unreachable!() };
                let p = params(&a.op);
                g.nodes[si].inputs = vec![src];
                g.remove_edge(&mid);
                let mut offset = 0;
                for (j, &n) in sizes.iter().enumerate() {
                    let out = g.nodes[si].outputs[j].clone();
                    let part = g.fresh_edge_id(&format!("{out}.pre"));
                    g.edges.push(Edge::new(&part));
                    g.nodes[si].outputs[j] = part.clone();
                    let sub = if p.len() == 1 { p.to_vec() } else { p[offset..offset + n].to_vec() };
                    offset += n;
                    let id = g.fresh_node_id(&format!("{}.{j}", a.id));
                    g.nodes.push(Node {
                        id,
                        op: with_params(&a.op, sub),
                        inputs: vec![part],
                        outputs: vec![out],
                    });
                }
                g.nodes.retain(|n| n.id != a.id);
                return Ok(true);
            }
            // Fan-out: the first use keeps the original node and edge.
            for &(ci, slot) in &uses[1..] {
                let e = g.fresh_edge_id(&format!("{mid}.{}", g.nodes[ci].id));
                g.edges.push(Edge::new(&e));
                g.nodes[ci].inputs[slot] = e.clone();
                let id = g.fresh_node_id(&format!("{}.{}", a.id, g.nodes[ci].id));
                g.nodes.push(Node {
                    id,
                    op: a.op.clone(),
                    inputs: vec![src.clone()],
                    outputs: vec![e],
                });
            }
            Ok(true)
        },
        |_| Vec::new(),
    )
}

struct JoinSite {
    join: usize,
    affines: Vec<usize>,
    merged: Op,
}

/// Examine a join. `Ok(Some)` when it can be merged, `Err(msg)` when at
/// least one input is an affine but merging is not possible.
fn join_site(g: &OpGraph, ji: usize) -> Result<Option<JoinSite>, String> {
    let j = &g.nodes[ji];
    let producers: Vec<Option<usize>> = j.inputs.iter().map(|e| g.producer(e)).collect();
    let affine: Vec<Option<usize>> = producers
        .iter()
        .zip(&j.inputs)
        .map(|(p, e)| p.filter(|&p| g.nodes[p].op.is_affine() && sole_consumer(g, e).is_some()))
        .collect();
    if affine.iter().all(Option::is_none) {
        return Ok(None);
    }
    if affine.iter().any(Option::is_none) {
        let missing: Vec<&str> = j
            .inputs
            .iter()
            .zip(&affine)
            .filter(|(_, a)| a.is_none())
            .map(|(e, _)| e.as_str())
            .collect();
        return Err(format!(
            "inputs {missing:?} carry no matching affine; the join cannot be crossed"
        ));
    }
    let affines: Vec<usize> = affine.into_iter().map(Option::unwrap).collect();
    let first = &g.nodes[affines[0]].op;
    let same = affines.iter().all(|&a| {
        let op = &g.nodes[a].op;
        op.name() == first.name()
            && params(op).len() == params(first).len()
            && params(op).iter().zip(params(first)).all(|(x, y)| x.to_bits() == y.to_bits())
    });
    if !same {
        let desc: Vec<String> = affines
            .iter()
            .map(|&a| format!("{}{:?}", g.nodes[a].op.name(), params(&g.nodes[a].op)))
            .collect();
        return Err(format!(
            "branch affines differ ({}); train with a shared quantization scale on edges {:?} to allow merging",
            desc.join(", "),
            j.inputs
        ));
    }
    let p = params(first).to_vec();
    let merged = match (&j.op, first) {
        (Op::EltwiseAdd, Op::Mul { .. }) => with_params(first, p),
        (Op::EltwiseAdd, _) => with_params(first, p.iter().map(|b| b * affines.len() as f64).collect()),
        (_, _) if p.len() == 1 => with_params(first, p),
        _ => {
            // Concat with identical per-channel vectors: the merged vector is
            // their concatenation.
            let cat: Vec<f64> = (0..affines.len()).flat_map(|_| p.iter().copied()).collect();
            with_params(first, cat)
        }
    };
    Ok(Some(JoinSite {
        join: ji,
        affines,
        merged,
    }))
}

fn is_join(op: &Op) -> bool {
    matches!(op, Op::Concat | Op::EltwiseAdd)
}

/// Move bit-identical affines from every input of a `Concat` or
/// `EltwiseAdd` to its output. Identical biases into an add of `k` inputs
/// become one bias of `k * b`.
pub fn merge_affine_at_join(g: &OpGraph) -> Result<PassOutcome, StreamlineError> {
    fixed_point(
        g,
        |g| {
            let site = (0..g.nodes.len())
                .filter(|&i| is_join(&g.nodes[i].op))
                .find_map(|i| join_site(g, i).ok().flatten());
            let Some(site) = site else {
                return Ok(false);
            };
            let jid = g.nodes[site.join].id.clone();
            let mut new_inputs = Vec::new();
            for &a in &site.affines {
                new_inputs.push(g.nodes[a].inputs[0].clone());
            }
            let old_edges: Vec<String> = site.affines.iter().map(|&a| g.nodes[a].outputs[0].clone()).collect();
            let ids: Vec<String> = site.affines.iter().map(|&a| g.nodes[a].id.clone()).collect();
            let ji = g.nodes.iter().position(|n| n.id == jid).unwrap();
            let out = g.nodes[ji].outputs[0].clone();
            let pre = g.fresh_edge_id(&format!("{out}.pre"));
            g.nodes[ji].inputs = new_inputs;
            g.nodes[ji].outputs = vec![pre.clone()];
            g.edges.push(Edge::new(&pre));
            for e in &old_edges {
                g.remove_edge(e);
            }
            g.nodes.retain(|n| !ids.contains(&n.id));
            let id = g.fresh_node_id(&format!("{jid}.affine"));
            let ji = g.nodes.iter().position(|n| n.id == jid).unwrap();
            g.nodes.insert(
                ji + 1,
                Node {
                    id,
                    op: site.merged,
                    inputs: vec![pre],
                    outputs: vec![out],
                },
            );
            Ok(true)
        },
        |g| {
            (0..g.nodes.len())
                .filter(|&i| is_join(&g.nodes[i].op))
                .filter_map(|i| match join_site(g, i) {
                    Err(message) => Some(Diagnostic {
                        pass: Pass::MergeAtJoin.name(),
                        node: g.nodes[i].id.clone(),
                        message,
                    }),
                    Ok(_) => None,
                })
                .collect()
        },
    )
}

fn affine_into_mt(g: &OpGraph) -> Option<(usize, usize)> {
    g.nodes.iter().enumerate().find_map(|(ai, a)| {
        if !a.op.is_affine() {
            return None;
        }
        let mi = sole_consumer(g, &a.outputs[0])?;
        matches!(g.nodes[mi].op, Op::MultiThreshold(_)).then_some((ai, mi))
    })
}

/// Fold an affine whose only consumer is a MultiThreshold into the
/// thresholds and delete it. A zero scale is refused with an error.
pub fn absorb_into_multithreshold(g: &OpGraph) -> Result<PassOutcome, StreamlineError> {
    fixed_point(
        g,
        |g| {
            let Some((ai, mi)) = affine_into_mt(g) else {
                return Ok(false);
            };
            let a = g.nodes[ai].clone();
            let (scale, bias) = a.op.affine_params().expect("affine");
            let Op::MultiThreshold(mt) = &g.nodes[mi].op else { unreachable!() };
            let width = scale.len().max(bias.len());
            let mt = if mt.num_channels() == 1 && width > 1 {
                MultiThresholdOp {
                    channels: vec![mt.channels[0].clone(); width],
                    ..mt.clone()
                }
            } else {
                mt.clone()
            };
            let folded = absorb_affine(&mt, &scale, &bias).map_err(|e| match e {
                QuantError::ZeroScale { .. } => StreamlineError::ZeroScale { node: a.id.clone() },
                other => StreamlineError::Quant {
                    node: a.id.clone(),
                    source: other,
                },
            })?;
            g.nodes[mi].op = Op::MultiThreshold(folded);
            g.nodes[mi].inputs = vec![a.inputs[0].clone()];
            g.remove_edge(&a.outputs[0]);
            g.nodes.remove(ai);
            Ok(true)
        },
        |_| Vec::new(),
    )
}

/// Run `passes` in order, repeatedly, until a full round changes nothing.
pub fn run_pipeline(g: &OpGraph, passes: &[Pass]) -> Result<PipelineOutcome, StreamlineError> {
    let mut graph = g.clone();
    graph.refresh_shapes()?;
    for iteration in 1..=MAX_PIPELINE_ITERATIONS {
        let mut changed = false;
        let mut diagnostics: Vec<Diagnostic> = Vec::new();
        for &p in passes {
            let out = p.apply(&graph)?;
            changed |= out.changed;
            graph = out.graph;
            for d in out.diagnostics {
                if !diagnostics.contains(&d) {
                    diagnostics.push(d);
                }
            }
        }
        if !changed {
            prune_scale_groups(&mut graph);
            return Ok(PipelineOutcome {
                graph,
                iterations: iteration,
                diagnostics,
            });
        }
    }
    Err(StreamlineError::NoFixedPoint(MAX_PIPELINE_ITERATIONS))
}

/// Drop scale-group members whose edges were rewritten away, and groups
/// left with fewer than two members.
fn prune_scale_groups(g: &mut OpGraph) {
    let live: HashSet<String> = g.edges.iter().map(|e| e.id.clone()).collect();
    for group in &mut g.scale_groups {
        group.edges.retain(|e| live.contains(e));
    }
    g.scale_groups.retain(|group| group.edges.len() > 1);
}

/// Affine nodes left in the graph other than output scales (an affine whose
/// result goes only to Output nodes).
pub fn standalone_affines(g: &OpGraph) -> Vec<String> {
    g.nodes
        .iter()
        .filter(|n| n.op.is_affine())
        .filter(|n| {
            !g.consumers(&n.outputs[0])
                .iter()
                .all(|&(c, _)| g.nodes[c].op == Op::Output)
        })
        .map(|n| n.id.clone())
        .collect()
}

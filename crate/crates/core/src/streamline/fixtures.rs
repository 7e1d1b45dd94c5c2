//! Small hand-built graphs used by tests, the CLI and the acceptance suite.
//!
//! Activation and weight scales are powers of two, so real-valued and
//! integer evaluation agree exactly up to the first MultiThreshold.

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Edge, Node, Op, OpGraph, ScaleGroup};
use crate::quantcore::{MultiThresholdOp, QuantSpec, ThresholdChannel};

const IN_SCALE: f64 = 0.25;
const W_SCALE: f64 = 0.125;
const ACT_SCALE: f64 = 0.5;
const BN_GAMMA: [f64; 4] = [0.9, 1.3, -0.7, 1.1];
const BN_BETA: [f64; 4] = [0.3, -0.45, 2.1, 0.05];

fn weights(seed: u64, shape: (usize, usize, usize, usize)) -> Array4<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array4::from_shape_fn(shape, |_| rng.gen_range(-8..8))
}

fn uspec(bits: u32, scale: f64) -> QuantSpec {
    QuantSpec::unsigned(bits, scale).expect("valid fixture spec")
}

fn mul(s: f64) -> Op {
    Op::Mul { scale: vec![s] }
}

fn relu_quant(channels: usize, bits: u32, scale: f64) -> Op {
    Op::MultiThreshold(MultiThresholdOp::uniform(channels, uspec(bits, scale)))
}

/// Builder that names edges after the node producing them.
struct Chain {
    g: OpGraph,
}

impl Chain {
    fn new() -> Self {
        Self { g: OpGraph::default() }
    }

    fn node(&mut self, id: &str, op: Op, inputs: &[&str]) -> String {
        self.node_q(id, op, inputs, None)
    }

    fn node_q(&mut self, id: &str, op: Op, inputs: &[&str], quant: Option<QuantSpec>) -> String {
        let mut e = Edge::new(id);
        e.quant = quant;
        self.g.edges.push(e);
        self.g.nodes.push(Node::new(id, op, inputs, &[id]));
        id.to_string()
    }

    fn output(mut self, input: &str) -> OpGraph {
        self.g.nodes.push(Node::new("out", Op::Output, &[input], &[]));
        self.g.refresh_shapes().expect("fixture is well formed");
        self.g
    }
}

/// Convolution block in its trained form: input scale, integer conv, weight
/// scale, batch-norm affine, ReLU quantizer and output scale.
pub fn conv_block() -> OpGraph {
    let mut c = Chain::new();
    let x = c.node_q("in", Op::Input { shape: [3, 8, 8] }, &[], Some(uspec(4, 1.0)));
    let x = c.node("in_scale", mul(IN_SCALE), &[&x]);
    let x = c.node("conv", Op::conv(&weights(7, (4, 3, 3, 3)), 1, 1), &[&x]);
    let x = c.node("w_scale", mul(W_SCALE), &[&x]);
    let x = c.node("bn_mul", Op::Mul { scale: BN_GAMMA.to_vec() }, &[&x]);
    let x = c.node("bn_add", Op::Add { bias: BN_BETA.to_vec() }, &[&x]);
    let x = c.node_q("act", relu_quant(4, 4, ACT_SCALE), &[&x], Some(uspec(4, 1.0)));
    let x = c.node_q("out_scale", mul(ACT_SCALE), &[&x], Some(uspec(4, ACT_SCALE)));
    c.output(&x)
}

/// The same block written directly in integer form: conv on the raw input,
/// thresholds pre-folded per channel, output scale last.
pub fn conv_block_streamlined() -> OpGraph {
    let base = MultiThresholdOp::uniform(1, uspec(4, ACT_SCALE));
    let total = IN_SCALE * W_SCALE;
    let channels = BN_GAMMA
        .iter()
        .zip(BN_BETA)
        .map(|(&gamma, beta)| {
            let mut t: Vec<f64> = base.channels[0]
                .thresholds
                .iter()
                .map(|&t| (t - beta) / (gamma * total))
                .collect();
            if gamma < 0.0 {
                t.reverse();
            }
            ThresholdChannel {
                thresholds: t,
                inverted: gamma < 0.0,
            }
        })
        .collect();
    let mt = MultiThresholdOp::new(channels, 4, 0).expect("valid thresholds");
    let mut c = Chain::new();
    let x = c.node("in", Op::Input { shape: [3, 8, 8] }, &[]);
    let x = c.node("conv", Op::conv(&weights(7, (4, 3, 3, 3)), 1, 1), &[&x]);
    let x = c.node("act", Op::MultiThreshold(mt), &[&x]);
    let x = c.node("out_scale", mul(ACT_SCALE), &[&x]);
    c.output(&x)
}

/// Residual block: the scaled input forks into a conv branch and a shortcut
/// that meet at an add. The conv branch ends with `branch_scale`; it can
/// only merge with the shortcut when that equals the input scale.
pub fn residual(branch_scale: f64) -> OpGraph {
    let mut c = Chain::new();
    let x = c.node("in", Op::Input { shape: [2, 6, 6] }, &[]);
    let x = c.node("x_scale", mul(IN_SCALE), &[&x]);
    let b = c.node("conv", Op::conv(&weights(11, (2, 2, 3, 3)), 1, 1), &[&x]);
    let b = c.node("w_scale", mul(W_SCALE), &[&b]);
    let b = c.node("act", relu_quant(2, 4, branch_scale), &[&b]);
    let b = c.node("branch_scale", mul(branch_scale), &[&b]);
    let y = c.node("add", Op::EltwiseAdd, &[&x, &b]);
    let y = c.node("requant", relu_quant(2, 5, IN_SCALE), &[&y]);
    let y = c.node("out_scale", mul(IN_SCALE), &[&y]);
    c.output(&y)
}

/// Cross-stage block with one bottleneck: conv, channel split, bottleneck
/// with shortcut, concat of all parts, closing conv. The first conv's output
/// and the bottleneck's second conv output form the "red" scale group.
pub fn c2f() -> OpGraph {
    let red = uspec(4, ACT_SCALE);
    let mut c = Chain::new();
    let x = c.node("in", Op::Input { shape: [4, 6, 6] }, &[]);
    let x = c.node("in_scale", mul(IN_SCALE), &[&x]);
    let x = c.node("cv1", Op::conv(&weights(21, (4, 4, 1, 1)), 1, 0), &[&x]);
    let x = c.node("cv1.w", mul(W_SCALE), &[&x]);
    let x = c.node("cv1.act", relu_quant(4, 4, ACT_SCALE), &[&x]);
    let x = c.node_q("cv1.out", mul(ACT_SCALE), &[&x], Some(red));

    c.g.edges.push(Edge::new("split.a").with_quant(red));
    c.g.edges.push(Edge::new("split.b").with_quant(red));
    c.g.nodes.push(Node::new("split", Op::Split { sizes: vec![2, 2] }, &[&x], &["split.a", "split.b"]));

    let m = c.node("m0.cv1", Op::conv(&weights(22, (2, 2, 3, 3)), 1, 1), &["split.b"]);
    let m = c.node("m0.cv1.w", mul(W_SCALE), &[&m]);
    let m = c.node("m0.cv1.act", relu_quant(2, 4, 0.25), &[&m]);
    let m = c.node_q("m0.cv1.out", mul(0.25), &[&m], Some(uspec(4, 0.25)));
    let m = c.node("m0.cv2", Op::conv(&weights(23, (2, 2, 3, 3)), 1, 1), &[&m]);
    let m = c.node("m0.cv2.w", mul(W_SCALE), &[&m]);
    let m = c.node("m0.cv2.act", relu_quant(2, 4, ACT_SCALE), &[&m]);
    let m = c.node_q("m0.cv2.out", mul(ACT_SCALE), &[&m], Some(red));
    let m = c.node_q("m0.add", Op::EltwiseAdd, &["split.b", &m], Some(uspec(5, ACT_SCALE)));

    let y = c.node("cat", Op::Concat, &["split.a", "split.b", &m]);
    let y = c.node("cv2", Op::conv(&weights(24, (4, 6, 1, 1)), 1, 0), &[&y]);
    let y = c.node("cv2.w", mul(W_SCALE), &[&y]);
    let y = c.node("cv2.act", relu_quant(4, 4, 1.0), &[&y]);
    let y = c.node("cv2.out", mul(1.0), &[&y]);
    let mut g = c.output(&y);
    g.scale_groups.push(ScaleGroup {
        tag: "red".into(),
        edges: ["cv1.out", "split.a", "split.b", "m0.cv2.out"].map(String::from).to_vec(),
    });
    g
}

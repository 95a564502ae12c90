use std::collections::BTreeSet;

use serde::Serialize;

use crate::bundle::Weight;
use crate::error::GraphError;

use super::{duplicate_ids, infer_shapes, DataType, DataflowGraph, NodeId, Op};

/// Accumulators are 32-bit signed; a layer whose worst case reaches this
/// magnitude is rejected.
pub const ACCUMULATOR_LIMIT: u64 = 1 << 31;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "violation")]
pub enum Violation {
    CycleDetected,
    InputCount { found: usize },
    OutputCount { found: usize },
    DuplicateNodeId { node: NodeId },
    DanglingEdge { from: NodeId, to: NodeId },
    Arity { node: NodeId, expected: usize, found: usize },
    BadAttribute { node: NodeId, reason: String },
    ThresholdsNotIncreasing { node: NodeId, channel: usize },
    MissingWeight { node: NodeId, name: String },
    WeightMismatch { node: NodeId, name: String, reason: String },
    Shape { reason: String },
    StaleAnnotation { from: NodeId, to: NodeId },
    AccumulatorOverflow { node: NodeId, bound: u64 },
}

pub fn weight_shape(op: &Op) -> Option<Vec<usize>> {
    match op {
        Op::Conv { in_channels, out_channels, kernel, .. } => {
            Some(vec![*out_channels, *in_channels, *kernel, *kernel])
        }
        Op::DepthwiseConv { channels, kernel, .. } => Some(vec![*channels, 1, *kernel, *kernel]),
        Op::FC { in_features, out_features, .. } => Some(vec![*out_features, *in_features]),
        _ => None,
    }
}

fn check_attributes(id: NodeId, op: &Op, out: &mut Vec<Violation>) {
    let bad = |reason: &str| Violation::BadAttribute { node: id, reason: reason.to_string() };
    match op {
        Op::Conv { kernel, stride, weight_bits, .. } | Op::DepthwiseConv { kernel, stride, weight_bits, .. } => {
            if *kernel == 0 || *stride == 0 {
                out.push(bad("kernel and stride must be positive"));
            }
            if !matches!(weight_bits, 1 | 2 | 4 | 8) {
                out.push(bad("weight_bits must be 1, 2, 4 or 8"));
            }
        }
        Op::FC { weight_bits, .. } => {
            if !matches!(weight_bits, 1 | 2 | 4 | 8) {
                out.push(bad("weight_bits must be 1, 2, 4 or 8"));
            }
        }
        Op::MaxPool { kernel, stride } => {
            if *kernel == 0 || *stride == 0 {
                out.push(bad("kernel and stride must be positive"));
            }
        }
        Op::QuantActivation { bits, mode, step } => {
            if !(*step > 0.0 && step.is_finite()) {
                out.push(bad("step must be positive and finite"));
            }
            let ok = match mode {
                super::ActMode::Bipolar => *bits == 1,
                _ => (1..=16).contains(bits),
            };
            if !ok {
                out.push(bad("bit width does not match activation mode"));
            }
        }
        Op::BatchNorm { gamma, beta, mean, var, eps } => {
            let all = gamma.iter().chain(beta).chain(mean).chain(var);
            if all.clone().any(|v| !v.is_finite()) || !eps.is_finite() {
                out.push(bad("non-finite batch-norm parameter"));
            }
            if var.iter().any(|v| v + eps <= 0.0) {
                out.push(bad("var + eps must be positive"));
            }
        }
        Op::Scale { factor } => {
            if factor.is_empty() || factor.iter().any(|v| !v.is_finite()) {
                out.push(bad("factor must be non-empty and finite"));
            }
        }
        Op::Add { bias } => {
            if bias.is_empty() || bias.iter().any(|v| !v.is_finite()) {
                out.push(bad("bias must be non-empty and finite"));
            }
        }
        Op::MultiThreshold { thresholds, out_scale, .. } => {
            if thresholds.is_empty() {
                out.push(bad("threshold matrix is empty"));
            }
            let n = thresholds.first().map_or(0, Vec::len);
            if thresholds.iter().any(|row| row.len() != n) {
                out.push(bad("threshold rows differ in length"));
            }
            if *out_scale == 0 {
                out.push(bad("out_scale must be non-zero"));
            }
            for (channel, row) in thresholds.iter().enumerate() {
                if row.iter().any(|t| t.is_nan()) || row.windows(2).any(|w| w[1] < w[0]) {
                    out.push(Violation::ThresholdsNotIncreasing { node: id, channel });
                }
            }
        }
        _ => {}
    }
}

fn check_weight(id: NodeId, op: &Op, g: &DataflowGraph, out: &mut Vec<Violation>) {
    let Some((name, bits)) = op.weight_ref() else { return };
    let Some(w) = g.weights.get(name) else {
        out.push(Violation::MissingWeight { node: id, name: name.to_string() });
        return;
    };
    let mismatch = |reason: String| Violation::WeightMismatch { node: id, name: name.to_string(), reason };
    if let Some(expected) = weight_shape(op) {
        if w.shape() != expected.as_slice() {
            out.push(mismatch(format!("shape {:?}, node expects {:?}", w.shape(), expected)));
        }
    }
    match (w, bits) {
        (Weight::Bipolar { .. }, 1) => {}
        (Weight::Int(q), b) if b > 1 => {
            let (lo, hi) = crate::qtensor::int_range(b);
            if q.data().iter().any(|&v| i64::from(v) < lo || i64::from(v) > hi) {
                out.push(mismatch(format!("values exceed {b}-bit range")));
            }
        }
        _ => out.push(mismatch(format!("stored as {}-bit, node expects {bits}-bit", w.bits()))),
    }
}

/// Lists every broken invariant; an empty list means the graph is valid.
pub fn validate(g: &DataflowGraph) -> Vec<Violation> {
    let mut out = Vec::new();
    for node in duplicate_ids(&g.nodes) {
        out.push(Violation::DuplicateNodeId { node });
    }
    let ids: BTreeSet<NodeId> = g.nodes.iter().map(|n| n.id).collect();
    for e in &g.edges {
        if !ids.contains(&e.from) || !ids.contains(&e.to) {
            out.push(Violation::DanglingEdge { from: e.from, to: e.to });
        }
    }
    if g.nodes.is_empty() {
        return out;
    }
    let inputs = g.nodes.iter().filter(|n| matches!(n.op, Op::Input { .. })).count();
    let outputs = g.nodes.iter().filter(|n| matches!(n.op, Op::Output)).count();
    if inputs != 1 {
        out.push(Violation::InputCount { found: inputs });
    }
    if outputs != 1 {
        out.push(Violation::OutputCount { found: outputs });
    }
    let cyclic = g.topo_order().is_err();
    if cyclic {
        out.push(Violation::CycleDetected);
    }
    for n in &g.nodes {
        let found = g.predecessors(n.id).len();
        if found != n.op.arity() {
            out.push(Violation::Arity { node: n.id, expected: n.op.arity(), found });
        }
        if matches!(n.op, Op::Output) && !g.successors(n.id).is_empty() {
            out.push(Violation::BadAttribute { node: n.id, reason: "Output has consumers".into() });
        }
        check_attributes(n.id, &n.op, &mut out);
        check_weight(n.id, &n.op, g, &mut out);
    }
    if cyclic || !out.is_empty() {
        return out;
    }
    match infer_shapes(g) {
        Ok(annotated) => {
            for (have, want) in g.edges.iter().zip(&annotated.edges) {
                let stale = (have.shape.is_some() && have.shape != want.shape)
                    || (have.dtype.is_some() && have.dtype != want.dtype);
                if stale {
                    out.push(Violation::StaleAnnotation { from: have.from, to: have.to });
                }
            }
            for n in &g.nodes {
                if n.op.weight_ref().is_none() && !matches!(n.op, super::Op::AvgPool { .. }) {
                    continue;
                }
                let dt = annotated.edges.iter().find(|e| e.from == n.id).and_then(|e| e.dtype);
                if let Some(DataType::Acc { bound }) = dt {
                    if bound >= ACCUMULATOR_LIMIT {
                        out.push(Violation::AccumulatorOverflow { node: n.id, bound });
                    }
                }
            }
        }
        Err(GraphError::Cycle) => out.push(Violation::CycleDetected),
        Err(e) => out.push(Violation::Shape { reason: e.to_string() }),
    }
    out
}

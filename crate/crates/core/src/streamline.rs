//! Semantics-preserving rewrites that turn a float-annotated graph into an
//! integer and threshold-only graph.
//!
//! Three passes run in a fixed order until nothing changes:
//! [`collapse_affine`], [`move_scale_past_maxpool`] and
//! [`absorb_into_threshold`]. Threshold values are derived in exact rational
//! arithmetic from the `f64` constants of the absorbed chain.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use serde::Serialize;

use crate::error::StreamlineError;
use crate::graph::{infer_shapes, ActMode, DataType, DataflowGraph, NodeId, Op, PoolMode};
use crate::kernels::scalar::code_range;

pub const DEFAULT_MAX_ITERATIONS: usize = 100;

/// Thresholds beyond this magnitude are clamped; no accumulator reaches it.
const THRESHOLD_CLAMP: i64 = 1 << 53;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Pass {
    CollapseAffine,
    MoveScalePastMaxpool,
    AbsorbIntoThreshold,
}

impl Pass {
    pub const ALL: [Pass; 3] = [Pass::CollapseAffine, Pass::MoveScalePastMaxpool, Pass::AbsorbIntoThreshold];

    pub fn name(self) -> &'static str {
        match self {
            Pass::CollapseAffine => "collapse_affine",
            Pass::MoveScalePastMaxpool => "move_scale_past_maxpool",
            Pass::AbsorbIntoThreshold => "absorb_into_threshold",
        }
    }

    pub fn apply(self, g: &DataflowGraph) -> Result<PassOutcome, StreamlineError> {
        let g = infer_shapes(g)?;
        let mut out = match self {
            Pass::CollapseAffine => collapse_affine_impl(g),
            Pass::MoveScalePastMaxpool => move_scale_impl(g),
            Pass::AbsorbIntoThreshold => absorb_impl(g),
        };
        out.graph = infer_shapes(&out.graph)?;
        Ok(out)
    }
}

/// Something a pass declined to rewrite.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum Issue {
    /// The affine scale feeding a quantizer is not positive on `channel`.
    NonMonotoneAffine { node: NodeId, channel: usize },
}

#[derive(Debug, Clone)]
pub struct PassOutcome {
    pub graph: DataflowGraph,
    /// Node ids touched by each application.
    pub applied: Vec<Vec<NodeId>>,
    pub issues: Vec<Issue>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LogEntry {
    pub pass: &'static str,
    pub node_ids: Vec<NodeId>,
    pub iteration: usize,
}

/// A float-domain node that survived streamlining.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Residual {
    pub node: NodeId,
    pub kind: &'static str,
}

#[derive(Debug, Clone)]
pub struct StreamlineReport {
    pub graph: DataflowGraph,
    pub log: Vec<LogEntry>,
    pub issues: Vec<Issue>,
    pub residual: Vec<Residual>,
    pub iterations: usize,
}

pub fn collapse_affine(g: &DataflowGraph) -> Result<DataflowGraph, StreamlineError> {
    Ok(Pass::CollapseAffine.apply(g)?.graph)
}

pub fn move_scale_past_maxpool(g: &DataflowGraph) -> Result<DataflowGraph, StreamlineError> {
    Ok(Pass::MoveScalePastMaxpool.apply(g)?.graph)
}

pub fn absorb_into_threshold(g: &DataflowGraph) -> Result<DataflowGraph, StreamlineError> {
    Ok(Pass::AbsorbIntoThreshold.apply(g)?.graph)
}

pub fn streamline_all(g: &DataflowGraph) -> Result<StreamlineReport, StreamlineError> {
    streamline_with_limit(g, DEFAULT_MAX_ITERATIONS)
}

pub fn streamline_with_limit(g: &DataflowGraph, limit: usize) -> Result<StreamlineReport, StreamlineError> {
    let mut graph = infer_shapes(g)?;
    let mut log = Vec::new();
    let mut issues: Vec<Issue> = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for pass in Pass::ALL {
            let out = pass.apply(&graph)?;
            for ids in out.applied {
                changed = true;
                log.push(LogEntry { pass: pass.name(), node_ids: ids, iteration: iterations + 1 });
            }
            for issue in out.issues {
                if !issues.contains(&issue) {
                    issues.push(issue);
                }
            }
            graph = out.graph;
        }
        if !changed {
            break;
        }
        iterations += 1;
        if iterations >= limit {
            return Err(StreamlineError::FixpointNotReached(limit));
        }
    }
    let residual = graph
        .nodes()
        .iter()
        .filter(|n| !n.op.is_integer_domain())
        .map(|n| Residual { node: n.id, kind: n.op.kind() })
        .collect();
    Ok(StreamlineReport { graph, log, issues, residual, iterations })
}

fn rat(v: f64) -> BigRational {
    BigRational::from_float(v).expect("graph constants are finite")
}

/// Per-channel `x ↦ a·x + b` in exact arithmetic.
#[derive(Debug, Clone)]
struct Affine {
    a: Vec<BigRational>,
    b: Vec<BigRational>,
}

fn param(v: &[f64], c: usize) -> f64 {
    crate::kernels::scalar::param(v, c)
}

impl Affine {
    fn identity(width: usize) -> Self {
        Self { a: vec![BigRational::one(); width], b: vec![BigRational::zero(); width] }
    }

    /// Composes `op` after `self`, mirroring the executor's evaluation.
    fn then(&mut self, op: &Op) {
        for c in 0..self.a.len() {
            let (a, b) = (&mut self.a[c], &mut self.b[c]);
            match op {
                Op::Scale { factor } => {
                    let f = rat(param(factor, c));
                    *a = &*a * &f;
                    *b = &*b * &f;
                }
                Op::Add { bias } => *b = &*b + rat(param(bias, c)),
                Op::BatchNorm { gamma, beta, mean, var, eps } => {
                    let s = rat((param(var, c) + eps).sqrt());
                    let g = rat(param(gamma, c));
                    let k = &g / &s;
                    *b = (&*b - rat(param(mean, c))) * &k + rat(param(beta, c));
                    *a = &*a * &k;
                }
                _ => unreachable!("only affine ops compose"),
            }
        }
    }
}

/// Width of the per-channel parameters: 1 if every op broadcasts.
fn affine_width(ops: &[&Op], channels: usize) -> usize {
    let broadcast = ops.iter().all(|op| match op {
        Op::Scale { factor } => factor.len() == 1,
        Op::Add { bias } => bias.len() == 1,
        Op::BatchNorm { gamma, beta, mean, var, .. } => [gamma, beta, mean, var].iter().all(|v| v.len() == 1),
        _ => true,
    });
    if broadcast {
        1
    } else {
        channels
    }
}

fn channels_at(g: &DataflowGraph, id: NodeId) -> usize {
    g.output_shape(id).and_then(|s| s.get(1).copied()).unwrap_or(1)
}

fn to_f64(r: &BigRational) -> f64 {
    r.to_f64().expect("finite rational")
}

/// `Scale(γ/σ)` and `Add(β − γμ/σ)` equivalent to a BatchNorm node, with
/// `σ = sqrt(var + eps)`.
pub fn batchnorm_to_affine(op: &Op) -> Option<(Vec<f64>, Vec<f64>)> {
    let Op::BatchNorm { gamma, .. } = op else { return None };
    let mut aff = Affine::identity(gamma.len());
    aff.then(op);
    Some((aff.a.iter().map(to_f64).collect(), aff.b.iter().map(to_f64).collect()))
}

/// Maximal runs of single-consumer affine nodes, in topological order.
fn affine_chains(g: &DataflowGraph) -> Vec<Vec<NodeId>> {
    let order = g.topo_order().unwrap_or_default();
    let mut seen = std::collections::BTreeSet::new();
    let mut chains = Vec::new();
    for id in order {
        if seen.contains(&id) || !g.node(id).is_some_and(|n| n.op.is_affine()) {
            continue;
        }
        let mut chain = vec![id];
        seen.insert(id);
        let mut cur = id;
        while let Some(next) = g.sole_successor(cur) {
            if !g.node(next).is_some_and(|n| n.op.is_affine()) || g.predecessors(next).len() != 1 {
                break;
            }
            chain.push(next);
            seen.insert(next);
            cur = next;
        }
        chains.push(chain);
    }
    chains
}

fn collapse_affine_impl(mut g: DataflowGraph) -> PassOutcome {
    let mut applied = Vec::new();
    for chain in affine_chains(&g) {
        let kinds: Vec<&str> = chain.iter().map(|&id| g.node(id).expect("chain ids").op.kind()).collect();
        if chain.len() < 2 || kinds == ["Scale", "Add"] {
            continue;
        }
        let ops: Vec<Op> = chain.iter().map(|&id| g.node(id).expect("chain ids").op.clone()).collect();
        let refs: Vec<&Op> = ops.iter().collect();
        let width = affine_width(&refs, channels_at(&g, chain[0]));
        let mut aff = Affine::identity(width);
        for op in &ops {
            aff.then(op);
        }
        let scale: Vec<f64> = aff.a.iter().map(to_f64).collect();
        let bias: Vec<f64> = aff.b.iter().map(to_f64).collect();
        let first = chain[0];
        let name = g.node(first).expect("chain ids").name.clone();
        for &id in &chain[1..] {
            g.bypass(id);
        }
        let keep_scale = scale.iter().any(|&s| s != 1.0);
        let keep_bias = bias.iter().any(|&b| b != 0.0);
        match (keep_scale, keep_bias) {
            (true, _) => {
                g.node_mut(first).expect("chain ids").op = Op::Scale { factor: scale };
                if keep_bias {
                    g.insert_after(first, format!("{name}_bias"), Op::Add { bias });
                }
            }
            (false, true) => g.node_mut(first).expect("chain ids").op = Op::Add { bias },
            (false, false) => g.bypass(first),
        }
        applied.push(chain);
    }
    applied.extend(defer_mean_divisor(&mut g));
    PassOutcome { graph: g, applied, issues: Vec::new() }
}

/// `AvgPool(mean) → FC → Scale(c)` becomes `AvgPool(sum) → FC → Scale(c/N)`,
/// so the pooled sum stays on the integer grid.
fn defer_mean_divisor(g: &mut DataflowGraph) -> Vec<Vec<NodeId>> {
    let mut applied = Vec::new();
    let pools: Vec<NodeId> =
        g.nodes().iter().filter(|n| matches!(n.op, Op::AvgPool { mode: PoolMode::Mean })).map(|n| n.id).collect();
    for pool in pools {
        let Some(pred) = g.predecessors(pool).first().copied() else { continue };
        let integer_in = g.input_edge(pool).and_then(|e| e.dtype).is_some_and(DataType::is_integer);
        let window: usize = g.output_shape(pred).map_or(0, |s| s.iter().skip(2).product());
        let Some(fc) = g.sole_successor(pool) else { continue };
        let Some(scale) = g.sole_successor(fc) else { continue };
        if !integer_in || window == 0 || !matches!(g.node(fc).map(|n| &n.op), Some(Op::FC { .. })) {
            continue;
        }
        let Some(Op::Scale { factor }) = g.node(scale).map(|n| n.op.clone()) else { continue };
        let n = rat(window as f64);
        let factor = factor.iter().map(|&f| to_f64(&(rat(f) / &n))).collect();
        g.node_mut(scale).expect("present").op = Op::Scale { factor };
        g.node_mut(pool).expect("present").op = Op::AvgPool { mode: PoolMode::Sum };
        applied.push(vec![pool, fc, scale]);
    }
    applied
}

fn move_scale_impl(mut g: DataflowGraph) -> PassOutcome {
    let mut applied = Vec::new();
    let candidates: Vec<NodeId> = g.nodes().iter().filter(|n| matches!(n.op, Op::Scale { .. })).map(|n| n.id).collect();
    for scale in candidates {
        let Some(pool) = g.sole_successor(scale) else { continue };
        if !matches!(g.node(pool).map(|n| &n.op), Some(Op::MaxPool { .. })) {
            continue;
        }
        let node = g.node(scale).expect("present").clone();
        let Op::Scale { factor } = &node.op else { unreachable!() };
        if factor.iter().any(|&f| !(f > 0.0)) {
            continue;
        }
        g.bypass(scale);
        let new_id = g.insert_after(pool, node.name.clone(), node.op.clone());
        applied.push(vec![scale, pool, new_id]);
    }
    PassOutcome { graph: g, applied, issues: Vec::new() }
}

/// Quantizer levels as `(thresholds on y, out_scale, out_offset)`.
fn quantizer_levels(op: &Op) -> Option<(Vec<BigRational>, i32, i32)> {
    match op {
        Op::Sign | Op::QuantActivation { mode: ActMode::Bipolar, .. } => Some((vec![BigRational::zero()], 2, -1)),
        Op::QuantActivation { bits, mode, step } => {
            let (lo, hi) = code_range(*mode, *bits);
            let step = rat(*step);
            let half = BigRational::new(BigInt::from(1), BigInt::from(2));
            let taus = (lo + 1..=hi).map(|m| (BigRational::from_integer(BigInt::from(m)) - &half) * &step).collect();
            Some((taus, 1, lo))
        }
        _ => None,
    }
}

/// Smallest integer `x` with `a·x + b ≥ tau`, for `a > 0`.
fn integer_threshold(a: &BigRational, b: &BigRational, tau: &BigRational) -> f64 {
    let t = ((tau - b) / a).ceil().to_integer();
    let clamp = BigInt::from(THRESHOLD_CLAMP);
    let t = if t > clamp {
        clamp
    } else if t < -&clamp {
        -clamp
    } else {
        t
    };
    t.to_f64().expect("clamped")
}

fn absorb_impl(mut g: DataflowGraph) -> PassOutcome {
    let mut applied = Vec::new();
    let mut issues = Vec::new();
    let quantizers: Vec<NodeId> =
        g.nodes().iter().filter(|n| quantizer_levels(&n.op).is_some()).map(|n| n.id).collect();
    'next: for q in quantizers {
        // Walk back over single-consumer affine nodes to an integer producer.
        let mut chain = Vec::new();
        let mut cur = q;
        let producer = loop {
            let Some(pred) = g.predecessors(cur).first().copied() else { continue 'next };
            if g.successors(pred).len() != 1 {
                continue 'next;
            }
            match g.node(pred).map(|n| &n.op) {
                Some(op) if op.is_affine() => {
                    chain.push(pred);
                    cur = pred;
                }
                Some(_) => break pred,
                None => continue 'next,
            }
        };
        chain.reverse();
        let integer_in = g.edges().iter().find(|e| e.from == producer).and_then(|e| e.dtype).is_some_and(DataType::is_integer);
        if !integer_in {
            continue;
        }
        let qop = g.node(q).expect("present").op.clone();
        let (taus, out_scale, out_offset) = quantizer_levels(&qop).expect("filtered");
        let ops: Vec<Op> = chain.iter().map(|&id| g.node(id).expect("present").op.clone()).collect();
        let refs: Vec<&Op> = ops.iter().collect();
        let width = affine_width(&refs, channels_at(&g, producer));
        let mut aff = Affine::identity(width);
        for op in &ops {
            aff.then(op);
        }
        if let Some(channel) = aff.a.iter().position(|a| !a.is_positive()) {
            issues.push(Issue::NonMonotoneAffine { node: q, channel });
            continue;
        }
        let thresholds = (0..width)
            .map(|c| taus.iter().map(|tau| integer_threshold(&aff.a[c], &aff.b[c], tau)).collect())
            .collect();
        for &id in &chain {
            g.bypass(id);
        }
        g.node_mut(q).expect("present").op = Op::MultiThreshold { thresholds, out_scale, out_offset };
        let mut ids = chain;
        ids.push(q);
        applied.push(ids);
    }
    PassOutcome { graph: g, applied, issues }
}

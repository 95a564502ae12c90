//! Per-layer parallelism (PE, SIMD) and a cycle-count throughput model.
//!
//! A matrix-lowered layer is a `[H, W]` weight matrix applied at `spatial`
//! output positions. H is the output-feature count and W the kernel-expanded
//! input-feature count; PE must divide H and SIMD must divide W.

use serde::{Deserialize, Serialize};

use crate::error::FoldError;
use crate::graph::{infer_shapes, DataflowGraph, NodeId, Op};

/// Folding dimensions of one layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FoldLayer {
    pub node: NodeId,
    pub name: String,
    pub kind: &'static str,
    /// H: output features.
    pub rows: u64,
    /// W: input features times kernel area.
    pub cols: u64,
    pub spatial: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerFold {
    pub node: NodeId,
    pub pe: u64,
    pub simd: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldingConfig {
    pub layers: Vec<LayerFold>,
    pub clock_hz: f64,
}

impl FoldingConfig {
    /// PE = SIMD = 1 for every foldable layer.
    pub fn all_ones(g: &DataflowGraph, clock_hz: f64) -> Result<Self, FoldError> {
        let layers = foldable_layers(g)?.iter().map(|l| LayerFold { node: l.node, pe: 1, simd: 1 }).collect();
        Ok(Self { layers, clock_hz })
    }

    pub fn get(&self, node: NodeId) -> Option<&LayerFold> {
        self.layers.iter().find(|l| l.node == node)
    }

    pub fn lanes(&self) -> u64 {
        self.layers.iter().map(|l| l.pe * l.simd).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum FoldViolation {
    PeNotDivisor { node: NodeId, rows: u64, pe: u64 },
    SimdNotDivisor { node: NodeId, cols: u64, simd: u64 },
    MissingLayer { node: NodeId },
    UnknownLayer { node: NodeId },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCycles {
    pub node: NodeId,
    pub name: String,
    pub pe: u64,
    pub simd: u64,
    pub cycles: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThroughputEstimate {
    pub layers: Vec<LayerCycles>,
    pub bottleneck: NodeId,
    pub bottleneck_cycles: u64,
    pub fps_estimate: f64,
    pub clock_hz: f64,
    pub lanes: u64,
}

/// Conv, depthwise conv and FC layers in id order.
pub fn foldable_layers(g: &DataflowGraph) -> Result<Vec<FoldLayer>, FoldError> {
    let g = infer_shapes(g)?;
    let mut out = Vec::new();
    for n in g.nodes() {
        let spatial = || -> u64 { g.output_shape(n.id).map_or(1, |s| s.iter().skip(2).product::<usize>() as u64) };
        let (rows, cols) = match &n.op {
            Op::Conv { in_channels, out_channels, kernel, .. } => (*out_channels, in_channels * kernel * kernel),
            Op::DepthwiseConv { channels, kernel, .. } => (*channels, kernel * kernel),
            Op::FC { in_features, out_features, .. } => (*out_features, *in_features),
            _ => continue,
        };
        out.push(FoldLayer {
            node: n.id,
            name: n.name.clone(),
            kind: n.op.kind(),
            rows: rows as u64,
            cols: cols as u64,
            spatial: spatial(),
        });
    }
    out.sort_by_key(|l| l.node);
    Ok(out)
}

pub fn check_layer(layer: &FoldLayer, pe: u64, simd: u64) -> Vec<FoldViolation> {
    let mut v = Vec::new();
    if pe == 0 || layer.rows % pe != 0 {
        v.push(FoldViolation::PeNotDivisor { node: layer.node, rows: layer.rows, pe });
    }
    if simd == 0 || layer.cols % simd != 0 {
        v.push(FoldViolation::SimdNotDivisor { node: layer.node, cols: layer.cols, simd });
    }
    v
}

pub fn validate_folding(g: &DataflowGraph, f: &FoldingConfig) -> Result<Vec<FoldViolation>, FoldError> {
    let layers = foldable_layers(g)?;
    let mut out = Vec::new();
    for layer in &layers {
        match f.get(layer.node) {
            Some(lf) => out.extend(check_layer(layer, lf.pe, lf.simd)),
            None => out.push(FoldViolation::MissingLayer { node: layer.node }),
        }
    }
    for lf in &f.layers {
        if !layers.iter().any(|l| l.node == lf.node) {
            out.push(FoldViolation::UnknownLayer { node: lf.node });
        }
    }
    Ok(out)
}

/// `(H / pe) · (W / simd) · spatial`.
pub fn estimate_cycles(layer: &FoldLayer, pe: u64, simd: u64) -> Result<u64, FoldError> {
    if let Some(v) = check_layer(layer, pe, simd).first() {
        return Err(FoldError::InvalidFolding { node: layer.node, reason: format!("{v:?}") });
    }
    Ok((layer.rows / pe) * (layer.cols / simd) * layer.spatial)
}

pub fn report_throughput(g: &DataflowGraph, f: &FoldingConfig) -> Result<ThroughputEstimate, FoldError> {
    if !(f.clock_hz > 0.0) {
        return Err(FoldError::InvalidFolding { node: 0, reason: "clock must be positive".into() });
    }
    let mut layers = Vec::new();
    for layer in foldable_layers(g)? {
        let lf = f
            .get(layer.node)
            .ok_or_else(|| FoldError::InvalidFolding { node: layer.node, reason: "no folding given".into() })?;
        let cycles = estimate_cycles(&layer, lf.pe, lf.simd)?;
        layers.push(LayerCycles { node: layer.node, name: layer.name, pe: lf.pe, simd: lf.simd, cycles });
    }
    let worst = layers
        .iter()
        .max_by(|a, b| a.cycles.cmp(&b.cycles).then(b.node.cmp(&a.node)))
        .ok_or_else(|| FoldError::InvalidFolding { node: 0, reason: "graph has no foldable layers".into() })?;
    let (bottleneck, bottleneck_cycles) = (worst.node, worst.cycles);
    Ok(ThroughputEstimate {
        bottleneck,
        bottleneck_cycles,
        fps_estimate: f.clock_hz / bottleneck_cycles as f64,
        clock_hz: f.clock_hz,
        lanes: f.lanes(),
        layers,
    })
}

fn next_divisor(n: u64, cur: u64) -> Option<u64> {
    (cur + 1..=n).find(|d| n % d == 0)
}

/// Greedy folding under a lane budget `Σ pe·simd ≤ budget`.
///
/// Each step takes the slowest layer that can still widen (ties to the
/// lowest id) and moves PE or SIMD to its next divisor, whichever removes
/// more cycles per added lane (ties to PE). Allocation stops at the first
/// step that does not fit, so a larger budget always extends the step
/// sequence of a smaller one.
pub fn auto_fold(g: &DataflowGraph, budget: u64, clock_hz: f64) -> Result<FoldingConfig, FoldError> {
    let layers = foldable_layers(g)?;
    let mut folds: Vec<LayerFold> = layers.iter().map(|l| LayerFold { node: l.node, pe: 1, simd: 1 }).collect();
    let mut used: u64 = folds.len() as u64;
    loop {
        let pick = layers
            .iter()
            .zip(&folds)
            .enumerate()
            .filter(|(_, (l, f))| f.pe < l.rows || f.simd < l.cols)
            .max_by(|(_, (la, fa)), (_, (lb, fb))| {
                let ca = (la.rows / fa.pe) * (la.cols / fa.simd) * la.spatial;
                let cb = (lb.rows / fb.pe) * (lb.cols / fb.simd) * lb.spatial;
                ca.cmp(&cb).then(lb.node.cmp(&la.node))
            })
            .map(|(i, _)| i);
        let Some(i) = pick else { break };
        let (l, f) = (&layers[i], folds[i]);
        let cycles = |pe: u64, simd: u64| (l.rows / pe) * (l.cols / simd) * l.spatial;
        let now = cycles(f.pe, f.simd);
        // (gain per lane, extra lanes, new pe, new simd)
        let mut best: Option<(f64, u64, u64, u64)> = None;
        if let Some(pe) = next_divisor(l.rows, f.pe) {
            let extra = (pe - f.pe) * f.simd;
            best = Some(((now - cycles(pe, f.simd)) as f64 / extra as f64, extra, pe, f.simd));
        }
        if let Some(simd) = next_divisor(l.cols, f.simd) {
            let extra = f.pe * (simd - f.simd);
            let gain = (now - cycles(f.pe, simd)) as f64 / extra as f64;
            if best.map_or(true, |b| gain > b.0) {
                best = Some((gain, extra, f.pe, simd));
            }
        }
        let (_, extra, pe, simd) = best.expect("layer can still widen");
        if used + extra > budget {
            break;
        }
        used += extra;
        folds[i] = LayerFold { node: l.node, pe, simd };
    }
    Ok(FoldingConfig { layers: folds, clock_hz })
}

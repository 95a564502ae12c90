//! Dataflow IR: a DAG of typed layer nodes.
//!
//! Model builders emit graphs, streamlining passes rewrite them, folding
//! annotates them and the executor runs them. Layout is N,C,H,W throughout.
//! Graphs are never mutated in place by public API; rewrites clone.

mod io;
mod shape;
mod validate;

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::cmp::Reverse;

use serde::{Deserialize, Serialize};

pub use io::{deserialize, serialize, GRAPH_SCHEMA};
pub use shape::{infer_shapes, op_output};
pub use validate::{validate, weight_shape, Violation, ACCUMULATOR_LIMIT};

use crate::bundle::Weight;
use crate::error::GraphError;

pub type NodeId = u32;

/// Value domain carried along an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DataType {
    /// Exactly ±1.
    Bipolar,
    /// Integer codes of the given width.
    Int { bits: u8, signed: bool },
    /// Integer accumulator with a worst-case magnitude bound.
    Acc { bound: u64 },
    /// Real-valued, only legal before streamlining.
    Real,
}

impl DataType {
    /// Largest absolute value the domain admits, `None` for reals.
    pub fn max_abs(self) -> Option<u64> {
        match self {
            DataType::Bipolar => Some(1),
            DataType::Int { bits, signed: true } => Some(1u64 << (bits - 1)),
            DataType::Int { bits, signed: false } => Some((1u64 << bits) - 1),
            DataType::Acc { bound } => Some(bound),
            DataType::Real => None,
        }
    }

    pub fn is_integer(self) -> bool {
        !matches!(self, DataType::Real)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActMode {
    /// `y ≥ 0 → +1`, else −1.
    Bipolar,
    /// Codes `−2^(b−1) ..= 2^(b−1)−1`.
    Signed,
    /// Codes `0 ..= 2^b−1` (quantized ReLU).
    Unsigned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    Mean,
    /// Sum over the window; the divisor has been pushed downstream.
    Sum,
}

/// Node operation with its attributes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum Op {
    Input {
        shape: Vec<usize>,
        dtype: DataType,
    },
    Output,
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weight: String,
        weight_bits: u8,
    },
    DepthwiseConv {
        channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        weight: String,
        weight_bits: u8,
    },
    FC {
        in_features: usize,
        out_features: usize,
        weight: String,
        weight_bits: u8,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    /// Global pooling over all spatial positions.
    AvgPool {
        mode: PoolMode,
    },
    /// `(x − mean) / sqrt(var + eps) · gamma + beta`, per channel.
    BatchNorm {
        gamma: Vec<f64>,
        beta: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
        eps: f64,
    },
    QuantActivation {
        bits: u8,
        mode: ActMode,
        /// Real value of one code step.
        step: f64,
    },
    /// `out = out_offset + out_scale · |{k : x ≥ thresholds[c][k]}|`.
    /// One row per channel, or a single row broadcast to all channels.
    MultiThreshold {
        thresholds: Vec<Vec<f64>>,
        out_scale: i32,
        out_offset: i32,
    },
    /// Per-channel (or broadcast) multiplier.
    Scale {
        factor: Vec<f64>,
    },
    /// Per-channel (or broadcast) additive constant.
    Add {
        bias: Vec<f64>,
    },
    Sign,
    Flatten,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "Input",
            Op::Output => "Output",
            Op::Conv { .. } => "Conv",
            Op::DepthwiseConv { .. } => "DepthwiseConv",
            Op::FC { .. } => "FC",
            Op::MaxPool { .. } => "MaxPool",
            Op::AvgPool { .. } => "AvgPool",
            Op::BatchNorm { .. } => "BatchNorm",
            Op::QuantActivation { .. } => "QuantActivation",
            Op::MultiThreshold { .. } => "MultiThreshold",
            Op::Scale { .. } => "Scale",
            Op::Add { .. } => "Add",
            Op::Sign => "Sign",
            Op::Flatten => "Flatten",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            Op::Input { .. } => 0,
            _ => 1,
        }
    }

    /// Weight tensor name and bit width for matrix-lowered layers.
    pub fn weight_ref(&self) -> Option<(&str, u8)> {
        match self {
            Op::Conv { weight, weight_bits, .. }
            | Op::DepthwiseConv { weight, weight_bits, .. }
            | Op::FC { weight, weight_bits, .. } => Some((weight.as_str(), *weight_bits)),
            _ => None,
        }
    }

    /// Kinds that survive streamlining.
    pub fn is_integer_domain(&self) -> bool {
        match self {
            Op::BatchNorm { .. } | Op::Scale { .. } | Op::Add { .. } | Op::QuantActivation { .. } => false,
            Op::AvgPool { mode } => *mode == PoolMode::Sum,
            _ => true,
        }
    }

    pub fn is_affine(&self) -> bool {
        matches!(self, Op::Scale { .. } | Op::Add { .. } | Op::BatchNorm { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    #[serde(default)]
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub from: NodeId,
    pub to: NodeId,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dtype: Option<DataType>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DataflowGraph {
    pub(crate) name: String,
    pub(crate) nodes: Vec<Node>,
    pub(crate) edges: Vec<Edge>,
    pub(crate) weights: BTreeMap<String, Weight>,
}

impl DataflowGraph {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn weights(&self) -> &BTreeMap<String, Weight> {
        &self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Weight> {
        self.weights.get(name)
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.iter_mut().find(|n| n.id == id)
    }

    pub fn predecessors(&self, id: NodeId) -> Vec<NodeId> {
        self.edges.iter().filter(|e| e.to == id).map(|e| e.from).collect()
    }

    pub fn successors(&self, id: NodeId) -> Vec<NodeId> {
        self.edges.iter().filter(|e| e.from == id).map(|e| e.to).collect()
    }

    /// The unique edge feeding `id`, if it has exactly one.
    pub fn input_edge(&self, id: NodeId) -> Option<&Edge> {
        let mut it = self.edges.iter().filter(|e| e.to == id);
        let first = it.next()?;
        it.next().is_none().then_some(first)
    }

    /// Shape annotated on the edge leaving `id` (all out-edges agree).
    pub fn output_shape(&self, id: NodeId) -> Option<&[usize]> {
        self.edges.iter().find(|e| e.from == id).and_then(|e| e.shape.as_deref())
    }

    pub fn input_node(&self) -> Option<&Node> {
        self.nodes.iter().find(|n| matches!(n.op, Op::Input { .. }))
    }

    pub fn output_node(&self) -> Option<&Node> {
        self.nodes.iter().find(|n| matches!(n.op, Op::Output))
    }

    /// Input shape and domain declared by the Input node.
    pub fn input_spec(&self) -> Option<(&[usize], DataType)> {
        self.input_node().and_then(|n| match &n.op {
            Op::Input { shape, dtype } => Some((shape.as_slice(), *dtype)),
            _ => None,
        })
    }

    /// Kahn's algorithm; ready nodes are released in ascending id order so
    /// the order is a pure function of the graph.
    pub fn topo_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut indegree: BTreeMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        for e in &self.edges {
            if let Some(d) = indegree.get_mut(&e.to) {
                *d += 1;
            }
        }
        let mut ready: BinaryHeap<Reverse<NodeId>> =
            indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| Reverse(id)).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for e in self.edges.iter().filter(|e| e.from == id) {
                if let Some(d) = indegree.get_mut(&e.to) {
                    *d -= 1;
                    if *d == 0 {
                        ready.push(Reverse(e.to));
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(GraphError::Cycle);
        }
        Ok(order)
    }

    /// Census of node kinds, e.g. `{"Conv": 6, ...}`.
    pub fn kind_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut counts = BTreeMap::new();
        for n in &self.nodes {
            *counts.entry(n.op.kind()).or_insert(0) += 1;
        }
        counts
    }

    /// True when no float-domain node remains.
    pub fn is_integer_only(&self) -> bool {
        self.nodes.iter().all(|n| n.op.is_integer_domain())
    }

    pub fn with_weights(mut self, weights: BTreeMap<String, Weight>) -> Self {
        self.weights = weights;
        self
    }

    // Rewriting helpers used by passes and the trainer.

    pub(crate) fn fresh_id(&self) -> NodeId {
        self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0)
    }

    /// Deletes a single-input node, wiring its producer to all consumers.
    pub(crate) fn bypass(&mut self, id: NodeId) {
        let Some(pred) = self.input_edge(id).map(|e| e.from) else { return };
        self.edges.retain(|e| e.to != id);
        for e in self.edges.iter_mut().filter(|e| e.from == id) {
            e.from = pred;
            e.shape = None;
            e.dtype = None;
        }
        self.nodes.retain(|n| n.id != id);
    }

    /// Inserts a new node between `id` and all of its consumers.
    pub(crate) fn insert_after(&mut self, id: NodeId, name: String, op: Op) -> NodeId {
        let new_id = self.fresh_id();
        for e in self.edges.iter_mut().filter(|e| e.from == id) {
            e.from = new_id;
            e.shape = None;
            e.dtype = None;
        }
        self.edges.push(Edge { from: id, to: new_id, shape: None, dtype: None });
        let pos = self.nodes.iter().position(|n| n.id == id).map_or(self.nodes.len(), |p| p + 1);
        self.nodes.insert(pos, Node { id: new_id, name, op });
        new_id
    }

    /// Consumers of `id` if there is exactly one.
    pub(crate) fn sole_successor(&self, id: NodeId) -> Option<NodeId> {
        let succ = self.successors(id);
        (succ.len() == 1).then(|| succ[0])
    }

    pub(crate) fn set_weight(&mut self, name: String, w: Weight) {
        self.weights.insert(name, w);
    }
}

/// Builds chain-shaped graphs node by node.
#[derive(Debug)]
pub struct GraphBuilder {
    graph: DataflowGraph,
    last: NodeId,
}

impl GraphBuilder {
    pub fn new(name: impl Into<String>, input_shape: Vec<usize>, input_dtype: DataType) -> Self {
        let graph = DataflowGraph {
            name: name.into(),
            nodes: vec![Node {
                id: 0,
                name: "input".into(),
                op: Op::Input { shape: input_shape, dtype: input_dtype },
            }],
            edges: Vec::new(),
            weights: BTreeMap::new(),
        };
        Self { graph, last: 0 }
    }

    /// Appends `op` fed by the previously pushed node.
    pub fn push(&mut self, name: impl Into<String>, op: Op) -> NodeId {
        let id = self.graph.fresh_id();
        self.graph.nodes.push(Node { id, name: name.into(), op });
        self.graph.edges.push(Edge { from: self.last, to: id, shape: None, dtype: None });
        self.last = id;
        id
    }

    pub fn add_weight(&mut self, name: impl Into<String>, w: Weight) {
        self.graph.weights.insert(name.into(), w);
    }

    pub fn last(&self) -> NodeId {
        self.last
    }

    /// Appends the Output node and annotates shapes.
    pub fn finish(mut self) -> Result<DataflowGraph, GraphError> {
        self.push("output", Op::Output);
        infer_shapes(&self.graph)
    }
}

/// Direct construction from parts, mainly for tests and deserialization.
pub fn from_parts(name: impl Into<String>, nodes: Vec<Node>, edges: Vec<Edge>) -> DataflowGraph {
    DataflowGraph { name: name.into(), nodes, edges, weights: BTreeMap::new() }
}

/// Ids of nodes that appear in more than one node entry.
pub(crate) fn duplicate_ids(nodes: &[Node]) -> Vec<NodeId> {
    let mut seen = BTreeSet::new();
    let mut dups = Vec::new();
    for n in nodes {
        if !seen.insert(n.id) {
            dups.push(n.id);
        }
    }
    dups
}

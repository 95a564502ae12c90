//! Graph executor.
//!
//! [`Executor`] prepares weights and threshold tables once and then runs
//! inputs through the nodes in topological order. [`Mode::Fast`] uses the
//! integer kernels; [`Mode::Reference`] evaluates every node with the naive
//! real-valued kernels and serves as the oracle path.

use std::collections::BTreeMap;
use std::time::Instant;

use serde::Serialize;

use crate::error::{ExecError, GraphError, KernelError};
use crate::graph::{validate, DataflowGraph, NodeId, Op, PoolMode};
use crate::kernels::{self, reference, scalar, LayerWeights, ThresholdTable};
use crate::qtensor::{FTensor, QTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Fast,
    Reference,
}

/// A tensor flowing along an edge.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(QTensor),
    Real(FTensor),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Int(q) => q.shape(),
            Value::Real(f) => f.shape(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            Value::Int(q) => q.data().iter().map(|&v| f64::from(v)).collect(),
            Value::Real(f) => f.data().to_vec(),
        }
    }

    fn real(&self) -> FTensor {
        match self {
            Value::Int(q) => q.to_real_codes(),
            Value::Real(f) => f.clone(),
        }
    }

    /// Integer view; real values must be integral.
    pub fn to_int(&self) -> Option<QTensor> {
        match self {
            Value::Int(q) => Some(q.clone()),
            Value::Real(f) => {
                if f.data().iter().all(|v| v.fract() == 0.0 && v.abs() < 2_147_483_648.0) {
                    QTensor::from_codes(f.shape().to_vec(), f.data().iter().map(|&v| v as i32).collect()).ok()
                } else {
                    None
                }
            }
        }
    }
}

impl From<QTensor> for Value {
    fn from(q: QTensor) -> Self {
        Value::Int(q)
    }
}

impl From<FTensor> for Value {
    fn from(f: FTensor) -> Self {
        Value::Real(f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct NodeTiming {
    pub node: NodeId,
    pub kind: &'static str,
    pub nanos: u64,
}

#[derive(Debug, Clone)]
pub struct ExecOutput {
    pub output: Value,
    pub timings: Vec<NodeTiming>,
    pub total_nanos: u64,
}

enum Prepared {
    None,
    Weights(LayerWeights),
    Thresholds(ThresholdTable),
}

/// A graph bound to its weights, ready to run.
pub struct Executor {
    graph: DataflowGraph,
    order: Vec<NodeId>,
    prepared: BTreeMap<NodeId, Prepared>,
    mode: Mode,
}

fn kernel_err(node: NodeId) -> impl Fn(KernelError) -> ExecError {
    move |source| ExecError::Kernel { node, source }
}

/// Channel index of flat element `i` for layout `[N, C, ...]`.
fn channel_of(shape: &[usize]) -> impl Fn(usize) -> usize {
    let c = if shape.len() >= 2 { shape[1] } else { 1 };
    let inner: usize = shape.iter().skip(2).product::<usize>().max(1);
    move |i| (i / inner) % c.max(1)
}

fn map_real(x: &FTensor, f: impl Fn(usize, f64) -> f64) -> FTensor {
    let ch = channel_of(x.shape());
    let data = x.data().iter().enumerate().map(|(i, &v)| f(ch(i), v)).collect();
    FTensor::from_parts(x.shape().to_vec(), data)
}

fn weight_real(w: &LayerWeights) -> FTensor {
    FTensor::from_parts(w.shape.clone(), w.ints.iter().map(|&v| f64::from(v)).collect())
}

impl Executor {
    pub fn new(g: &DataflowGraph, mode: Mode) -> Result<Self, ExecError> {
        let violations = validate(g);
        if !violations.is_empty() {
            return Err(GraphError::Invalid(format!("{violations:?}")).into());
        }
        let order = g.topo_order()?;
        let mut prepared = BTreeMap::new();
        for node in g.nodes() {
            let p = match &node.op {
                op if op.weight_ref().is_some() => {
                    let (name, _) = op.weight_ref().expect("checked");
                    let w = g
                        .weight(name)
                        .ok_or_else(|| ExecError::MissingWeight { node: node.id, name: name.to_string() })?;
                    Prepared::Weights(LayerWeights::new(w))
                }
                Op::MultiThreshold { thresholds, out_scale, out_offset } => Prepared::Thresholds(
                    ThresholdTable::new(thresholds.clone(), *out_scale, *out_offset).map_err(kernel_err(node.id))?,
                ),
                _ => Prepared::None,
            };
            prepared.insert(node.id, p);
        }
        Ok(Self { graph: g.clone(), order, prepared, mode })
    }

    pub fn graph(&self) -> &DataflowGraph {
        &self.graph
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn run(&self, x: impl Into<Value>) -> Result<ExecOutput, ExecError> {
        let start = Instant::now();
        let mut values: BTreeMap<NodeId, Value> = BTreeMap::new();
        let mut timings = Vec::with_capacity(self.order.len());
        let mut input = Some(x.into());
        let mut last = None;
        for &id in &self.order {
            let node = self.graph.node(id).expect("order holds graph ids");
            let t0 = Instant::now();
            let out = match &node.op {
                Op::Input { shape, .. } => {
                    let x = input.take().expect("single input");
                    if x.shape() != shape.as_slice() {
                        return Err(ExecError::Kernel {
                            node: id,
                            source: KernelError::ShapeMismatch { expected: shape.clone(), found: x.shape().to_vec() },
                        });
                    }
                    match self.mode {
                        Mode::Fast => x,
                        Mode::Reference => Value::Real(x.real()),
                    }
                }
                op => {
                    let pred = self.graph.predecessors(id)[0];
                    // Consumers are single, so the producer's value can move.
                    let x = values.remove(&pred).expect("topological order");
                    self.eval(id, op, x)?
                }
            };
            timings.push(NodeTiming { node: id, kind: node.op.kind(), nanos: t0.elapsed().as_nanos() as u64 });
            last = Some(id);
            values.insert(id, out);
        }
        let output = last.and_then(|id| values.remove(&id)).ok_or_else(|| GraphError::Invalid("empty graph".into()))?;
        Ok(ExecOutput { output, timings, total_nanos: start.elapsed().as_nanos() as u64 })
    }

    fn weights(&self, id: NodeId) -> &LayerWeights {
        match &self.prepared[&id] {
            Prepared::Weights(w) => w,
            _ => unreachable!("weight layer prepared in new"),
        }
    }

    pub(crate) fn eval(&self, id: NodeId, op: &Op, x: Value) -> Result<Value, ExecError> {
        let err = kernel_err(id);
        let fast = self.mode == Mode::Fast;
        let out = match op {
            Op::Input { .. } => unreachable!(),
            Op::Output => x,
            Op::Conv { stride, pad, .. } | Op::DepthwiseConv { stride, pad, .. } => {
                let w = self.weights(id);
                let dw = matches!(op, Op::DepthwiseConv { .. });
                match (&x, fast) {
                    (Value::Int(q), true) => Value::Int(if dw {
                        kernels::depthwise_conv2d_prepared(q, w, *stride, *pad)
                    } else {
                        kernels::conv2d_prepared(q, w, *stride, *pad)
                    }
                    .map_err(err)?),
                    _ => Value::Real(if dw {
                        reference::depthwise_conv2d(&x.real(), &weight_real(w), *stride, *pad)
                    } else {
                        reference::conv2d(&x.real(), &weight_real(w), *stride, *pad)
                    }
                    .map_err(err)?),
                }
            }
            Op::FC { .. } => {
                let w = self.weights(id);
                match (&x, fast) {
                    (Value::Int(q), true) => Value::Int(kernels::fully_connected_prepared(q, w, None).map_err(err)?),
                    _ => Value::Real(reference::fully_connected(&x.real(), &weight_real(w)).map_err(err)?),
                }
            }
            Op::MaxPool { kernel, stride } => match x {
                Value::Int(q) if fast => {
                    let (shape, data) = kernels::maxpool2d(q.shape(), q.data(), *kernel, *stride).map_err(&err)?;
                    Value::Int(QTensor::new(shape, data, q.bits(), q.scale().clone()).map_err(|e| err(e.into()))?)
                }
                other => Value::Real(reference::maxpool2d(&other.real(), *kernel, *stride).map_err(err)?),
            },
            Op::AvgPool { mode } => match (x, mode, fast) {
                (Value::Int(q), PoolMode::Sum, true) => Value::Int(kernels::sumpool_global(&q).map_err(err)?),
                (other, PoolMode::Mean, true) => Value::Real(kernels::avgpool_global(&other.real()).map_err(err)?),
                (other, mode, _) => Value::Real(reference::global_pool(&other.real(), *mode == PoolMode::Mean).map_err(err)?),
            },
            Op::BatchNorm { gamma, beta, mean, var, eps } => Value::Real(map_real(&x.real(), |c, v| {
                scalar::batchnorm(
                    v,
                    scalar::param(gamma, c),
                    scalar::param(beta, c),
                    scalar::param(mean, c),
                    scalar::param(var, c),
                    *eps,
                )
            })),
            Op::Scale { factor } => Value::Real(map_real(&x.real(), |c, v| v * scalar::param(factor, c))),
            Op::Add { bias } => Value::Real(map_real(&x.real(), |c, v| v + scalar::param(bias, c))),
            Op::QuantActivation { bits, mode, step } => {
                let codes = map_real(&x.real(), |_, v| f64::from(scalar::quantize_activation(v, *mode, *bits, *step)));
                if fast {
                    Value::Int(to_codes(codes).map_err(err)?)
                } else {
                    Value::Real(codes)
                }
            }
            Op::MultiThreshold { thresholds, out_scale, out_offset } => {
                if fast {
                    let Prepared::Thresholds(t) = &self.prepared[&id] else { unreachable!() };
                    Value::Int(match &x {
                        Value::Int(q) => kernels::multithreshold_int(q, t),
                        Value::Real(f) => kernels::multithreshold(f, t),
                    }
                    .map_err(err)?)
                } else {
                    Value::Real(reference::multithreshold(&x.real(), thresholds, *out_scale, *out_offset).map_err(err)?)
                }
            }
            Op::Sign => match x {
                Value::Int(q) if fast => {
                    let data = q.data().iter().map(|&v| if v >= 0 { 1 } else { -1 }).collect();
                    Value::Int(QTensor::from_codes(q.shape().to_vec(), data).map_err(|e| err(e.into()))?)
                }
                other => Value::Real(map_real(&other.real(), |_, v| if v >= 0.0 { 1.0 } else { -1.0 })),
            },
            Op::Flatten => {
                let shape = x.shape();
                let flat = vec![shape[0], shape[1..].iter().product()];
                match x {
                    Value::Int(q) => Value::Int(q.reshape(flat).map_err(|e| err(e.into()))?),
                    Value::Real(f) => Value::Real(f.reshape(flat).map_err(|e| err(e.into()))?),
                }
            }
        };
        Ok(out)
    }
}

fn to_codes(f: FTensor) -> Result<QTensor, KernelError> {
    let shape = f.shape().to_vec();
    Ok(QTensor::from_codes(shape, f.into_data().into_iter().map(|v| v as i32).collect())?)
}

/// Runs `g` once in fast mode.
pub fn execute(g: &DataflowGraph, x: impl Into<Value>) -> Result<ExecOutput, ExecError> {
    Executor::new(g, Mode::Fast)?.run(x)
}

/// Binary prediction from a single-logit output: `logit ≥ 0` is positive.
pub fn predict(out: &Value) -> Vec<bool> {
    out.to_f64().iter().map(|&v| v >= 0.0).collect()
}

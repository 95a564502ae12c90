use crate::error::GraphError;

use super::{ActMode, DataType, DataflowGraph, NodeId, Op, PoolMode};

fn weight_max(bits: u8) -> u64 {
    if bits <= 1 {
        1
    } else {
        1u64 << (bits - 1)
    }
}

fn acc_of(input: DataType, fan_in: usize, weight_bits: u8) -> DataType {
    match input.max_abs() {
        Some(m) => DataType::Acc {
            bound: (fan_in as u64).saturating_mul(m).saturating_mul(weight_max(weight_bits)),
        },
        None => DataType::Real,
    }
}

/// Output domain of a MultiThreshold with `n` thresholds.
pub(crate) fn threshold_dtype(n: usize, out_scale: i32, out_offset: i32) -> DataType {
    let a = i64::from(out_offset);
    let b = a + i64::from(out_scale) * n as i64;
    let (lo, hi) = (a.min(b), a.max(b));
    if lo == -1 && hi == 1 && out_scale.abs() == 2 && n == 1 {
        return DataType::Bipolar;
    }
    if lo >= 0 {
        let mut bits = 1u8;
        while (1i64 << bits) - 1 < hi {
            bits += 1;
        }
        DataType::Int { bits, signed: false }
    } else {
        let mut bits = 1u8;
        while -(1i64 << (bits - 1)) > lo || (1i64 << (bits - 1)) - 1 < hi {
            bits += 1;
        }
        DataType::Int { bits, signed: true }
    }
}

fn channels_of(shape: &[usize]) -> usize {
    shape.get(1).copied().unwrap_or(1)
}

fn check_param_len(name: &str, len: usize, shape: &[usize]) -> Result<(), String> {
    let c = channels_of(shape);
    if len == 1 || len == c {
        Ok(())
    } else {
        Err(format!("{name} has {len} entries for {c} channels"))
    }
}

/// Failure of a single node's shape rule.
#[derive(Debug)]
pub enum ShapeFault {
    /// Input shape does not fit; `expected` is the shape the node needs.
    Mismatch { expected: Vec<usize> },
    Attribute(String),
}

/// Output shape and domain of `op` given its input.
pub fn op_output(op: &Op, input: Option<(&[usize], DataType)>) -> Result<(Vec<usize>, DataType), ShapeFault> {
    let attr = |s: String| ShapeFault::Attribute(s);
    if let Op::Input { shape, dtype } = op {
        return Ok((shape.clone(), *dtype));
    }
    let (shape, dtype) = input.ok_or_else(|| attr("missing input".into()))?;
    let spatial = |expect_c: usize, k: usize, s: usize, p: usize| -> Result<(usize, usize), ShapeFault> {
        if k == 0 || s == 0 {
            return Err(attr("kernel and stride must be positive".into()));
        }
        match shape {
            [n, c, h, w] if *c == expect_c && h + 2 * p >= k && w + 2 * p >= k => {
                let _ = n;
                Ok(((h + 2 * p - k) / s + 1, (w + 2 * p - k) / s + 1))
            }
            [n, _, h, w] => Err(ShapeFault::Mismatch {
                expected: vec![*n, expect_c, (*h).max(k.saturating_sub(2 * p)), (*w).max(k.saturating_sub(2 * p))],
            }),
            _ => Err(ShapeFault::Mismatch { expected: vec![1, expect_c, k, k] }),
        }
    };
    match op {
        Op::Input { .. } => unreachable!(),
        Op::Output | Op::Sign => {
            let dt = if matches!(op, Op::Sign) { DataType::Bipolar } else { dtype };
            Ok((shape.to_vec(), dt))
        }
        Op::Conv { in_channels, out_channels, kernel, stride, pad, weight_bits, .. } => {
            let (oh, ow) = spatial(*in_channels, *kernel, *stride, *pad)?;
            Ok((vec![shape[0], *out_channels, oh, ow], acc_of(dtype, in_channels * kernel * kernel, *weight_bits)))
        }
        Op::DepthwiseConv { channels, kernel, stride, pad, weight_bits, .. } => {
            let (oh, ow) = spatial(*channels, *kernel, *stride, *pad)?;
            Ok((vec![shape[0], *channels, oh, ow], acc_of(dtype, kernel * kernel, *weight_bits)))
        }
        Op::FC { in_features, out_features, weight_bits, .. } => match shape {
            [n, f] if f == in_features => Ok((vec![*n, *out_features], acc_of(dtype, *in_features, *weight_bits))),
            [n, ..] => Err(ShapeFault::Mismatch { expected: vec![*n, *in_features] }),
            [] => Err(ShapeFault::Mismatch { expected: vec![1, *in_features] }),
        },
        Op::MaxPool { kernel, stride } => {
            let c = channels_of(shape);
            let (oh, ow) = spatial(c, *kernel, *stride, 0)?;
            Ok((vec![shape[0], c, oh, ow], dtype))
        }
        Op::AvgPool { mode } => match shape {
            [n, c, h, w] => {
                let dt = match (mode, dtype.max_abs()) {
                    (PoolMode::Sum, Some(m)) => DataType::Acc { bound: m.saturating_mul((h * w) as u64) },
                    _ => DataType::Real,
                };
                Ok((vec![*n, *c], dt))
            }
            _ => Err(ShapeFault::Mismatch { expected: vec![1, channels_of(shape), 1, 1] }),
        },
        Op::Flatten => match shape {
            [] => Err(ShapeFault::Mismatch { expected: vec![1, 1] }),
            [n, rest @ ..] => Ok((vec![*n, rest.iter().product()], dtype)),
        },
        Op::Scale { factor } => {
            check_param_len("factor", factor.len(), shape).map_err(attr)?;
            Ok((shape.to_vec(), DataType::Real))
        }
        Op::Add { bias } => {
            check_param_len("bias", bias.len(), shape).map_err(attr)?;
            Ok((shape.to_vec(), DataType::Real))
        }
        Op::BatchNorm { gamma, beta, mean, var, .. } => {
            for (name, v) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
                check_param_len(name, v.len(), shape).map_err(attr)?;
            }
            Ok((shape.to_vec(), DataType::Real))
        }
        Op::QuantActivation { bits, mode, .. } => {
            let dt = match mode {
                ActMode::Bipolar => DataType::Bipolar,
                ActMode::Signed => DataType::Int { bits: *bits, signed: true },
                ActMode::Unsigned => DataType::Int { bits: *bits, signed: false },
            };
            Ok((shape.to_vec(), dt))
        }
        Op::MultiThreshold { thresholds, out_scale, out_offset } => {
            check_param_len("thresholds", thresholds.len(), shape).map_err(attr)?;
            let n = thresholds.first().map_or(0, Vec::len);
            Ok((shape.to_vec(), threshold_dtype(n, *out_scale, *out_offset)))
        }
    }
}

/// Annotates every edge with its producer's output shape and domain.
/// Existing annotations are recomputed, so the operation is idempotent.
pub fn infer_shapes(g: &DataflowGraph) -> Result<DataflowGraph, GraphError> {
    let mut out = g.clone();
    let order = g.topo_order()?;
    let mut computed: std::collections::BTreeMap<NodeId, (Vec<usize>, DataType)> = Default::default();
    for id in order {
        let node = g.node(id).expect("topo order yields known ids");
        let preds = g.predecessors(id);
        if preds.len() != node.op.arity() {
            return Err(GraphError::InvalidNode {
                node: id,
                reason: format!("{} expects {} input(s), has {}", node.op.kind(), node.op.arity(), preds.len()),
            });
        }
        let input = preds.first().and_then(|p| computed.get(p)).map(|(s, d)| (s.as_slice(), *d));
        let result = op_output(&node.op, input).map_err(|fault| match fault {
            ShapeFault::Mismatch { expected } => GraphError::ShapeMismatch {
                from: preds[0],
                to: id,
                expected,
                found: input.map(|(s, _)| s.to_vec()).unwrap_or_default(),
            },
            ShapeFault::Attribute(reason) => GraphError::InvalidNode { node: id, reason },
        })?;
        computed.insert(id, result);
    }
    for e in &mut out.edges {
        let (shape, dtype) = computed.get(&e.from).cloned().ok_or_else(|| GraphError::InvalidNode {
            node: e.from,
            reason: "edge references unknown node".into(),
        })?;
        e.shape = Some(shape);
        e.dtype = Some(dtype);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    fn conv(in_c: usize, out_c: usize) -> Op {
        Op::Conv {
            in_channels: in_c,
            out_channels: out_c,
            kernel: 3,
            stride: 1,
            pad: 0,
            weight: "w".into(),
            weight_bits: 1,
        }
    }

    #[test]
    fn first_cnv_conv_gives_30x30() {
        let mut b = GraphBuilder::new("t", vec![1, 3, 32, 32], DataType::Int { bits: 8, signed: false });
        let c = b.push("conv", conv(3, 64));
        let g = b.finish().unwrap();
        assert_eq!(g.output_shape(c), Some(&[1usize, 64, 30, 30][..]));
        assert_eq!(g.edges()[1].dtype, Some(DataType::Acc { bound: 27 * 255 }));
    }

    #[test]
    fn maxpool_halves() {
        let mut b = GraphBuilder::new("t", vec![1, 64, 28, 28], DataType::Bipolar);
        let p = b.push("pool", Op::MaxPool { kernel: 2, stride: 2 });
        let g = b.finish().unwrap();
        assert_eq!(g.output_shape(p), Some(&[1usize, 64, 14, 14][..]));
    }

    #[test]
    fn identity_graph_unchanged() {
        let g = GraphBuilder::new("t", vec![1, 3, 32, 32], DataType::Bipolar).finish().unwrap();
        let again = infer_shapes(&g).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn channel_mismatch_reports_both_shapes() {
        let mut b = GraphBuilder::new("t", vec![1, 4, 8, 8], DataType::Bipolar);
        b.push("conv", conv(3, 8));
        match b.finish() {
            Err(GraphError::ShapeMismatch { from: 0, to: 1, expected, found }) => {
                assert_eq!(found, vec![1, 4, 8, 8]);
                assert_eq!(expected[1], 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn threshold_domains() {
        assert_eq!(threshold_dtype(1, 2, -1), DataType::Bipolar);
        assert_eq!(threshold_dtype(3, 1, -2), DataType::Int { bits: 2, signed: true });
        assert_eq!(threshold_dtype(15, 1, 0), DataType::Int { bits: 4, signed: false });
        assert_eq!(threshold_dtype(1, 1, 0), DataType::Int { bits: 1, signed: false });
    }
}

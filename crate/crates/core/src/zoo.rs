//! Model builders: `cnv_w1a1`, `cnv_w2a2` and `mobilenet_w4a4`.
//!
//! Builders emit the float-annotated form: every weight layer is followed by
//! a `Scale` carrying `weight_scale × input_step`, then BatchNorm and a
//! quantizer. Weights are drawn uniformly over the representable grid and the
//! BatchNorm statistics are calibrated on a few random images so that the
//! quantizers see spread-out inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bundle::Weight;
use crate::error::{ExecError, ZooError};
use crate::exec::{Executor, Mode, Value};
use crate::graph::{ActMode, DataType, DataflowGraph, GraphBuilder, Op, PoolMode};
use crate::qtensor::{FTensor, PackedBitTensor, QScale, QTensor};

pub use crate::bundle::{load_weights, save_weights};

pub const MODEL_NAMES: [&str; 3] = ["cnv_w1a1", "cnv_w2a2", "mobilenet_w4a4"];
pub const INPUT_SHAPE: [usize; 4] = [1, 3, 32, 32];
/// Real value of one pixel code.
pub const PIXEL_STEP: f64 = 1.0 / 255.0;
pub const BN_EPS: f64 = 1e-5;

const CNV_CONV_CHANNELS: [usize; 6] = [64, 64, 128, 128, 256, 256];
/// Convs followed by a 2×2 max pool.
const CNV_POOL_AFTER: [usize; 2] = [1, 3];
const CNV_FC: [usize; 2] = [512, 512];

const MOBILENET_STEM: usize = 32;
const MOBILENET_CHANNELS: [usize; 13] = [64, 128, 128, 256, 256, 512, 512, 512, 512, 512, 512, 1024, 1024];
/// Strides of the stem and the first seven blocks; later blocks use 1.
const MOBILENET_STRIDES: [usize; 8] = [1, 1, 2, 1, 2, 1, 2, 1];
const MOBILENET_HEAD: usize = 64;

const CALIBRATION_IMAGES: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ModelSpec {
    pub name: &'static str,
    pub weight_bits: u8,
    pub act_bits: u8,
    pub input_shape: [usize; 4],
}

pub fn model_spec(name: &str) -> Result<ModelSpec, ZooError> {
    let (name, weight_bits, act_bits) = match name {
        "cnv_w1a1" => ("cnv_w1a1", 1, 1),
        "cnv_w2a2" => ("cnv_w2a2", 2, 2),
        "mobilenet_w4a4" => ("mobilenet_w4a4", 4, 4),
        other => return Err(ZooError::UnknownModel(other.to_string())),
    };
    Ok(ModelSpec { name, weight_bits, act_bits, input_shape: INPUT_SHAPE })
}

pub fn build_model(name: &str, seed: u64) -> Result<DataflowGraph, ZooError> {
    match model_spec(name)?.name {
        "cnv_w1a1" => build_cnv(1, seed),
        "cnv_w2a2" => build_cnv(2, seed),
        _ => build_mobilenet_w4a4(seed),
    }
}

/// Scale of one weight code for a bit width.
pub fn weight_scale(bits: u8) -> f64 {
    match bits {
        1 => 1.0,
        2 => 0.5,
        _ => 0.125,
    }
}

/// Quantizer attributes `(mode, bits, step)` for an activation width.
pub fn activation(bits: u8) -> (ActMode, u8, f64) {
    match bits {
        1 => (ActMode::Bipolar, 1, 1.0),
        2 => (ActMode::Signed, 2, 0.5),
        _ => (ActMode::Unsigned, 4, 0.25),
    }
}

fn random_weight(rng: &mut ChaCha8Rng, shape: Vec<usize>, bits: u8) -> Weight {
    let n: usize = shape.iter().product();
    if bits == 1 {
        let signs: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        let tensor = PackedBitTensor::from_signs(shape, &signs).expect("sizes agree");
        return Weight::Bipolar { tensor, scale: 1.0 };
    }
    let lo = -(1i32 << (bits - 1));
    let hi = (1i32 << (bits - 1)) - 1;
    let data = (0..n).map(|_| rng.gen_range(lo..=hi)).collect();
    Weight::Int(QTensor::new(shape, data, bits, QScale::PerTensor(weight_scale(bits))).expect("codes in range"))
}

fn placeholder_bn(c: usize) -> Op {
    Op::BatchNorm { gamma: vec![1.0; c], beta: vec![0.0; c], mean: vec![0.0; c], var: vec![1.0; c], eps: BN_EPS }
}

/// Appends `Scale → [MaxPool] → BatchNorm → quantizer` after a weight layer.
fn push_tail(b: &mut GraphBuilder, name: &str, channels: usize, factor: f64, pool: bool, act_bits: u8) {
    b.push(format!("{name}_scale"), Op::Scale { factor: vec![factor] });
    if pool {
        b.push(format!("{name}_pool"), Op::MaxPool { kernel: 2, stride: 2 });
    }
    b.push(format!("{name}_bn"), placeholder_bn(channels));
    let (mode, bits, step) = activation(act_bits);
    b.push(format!("{name}_act"), Op::QuantActivation { bits, mode, step });
}

pub fn build_cnv(bits: u8, seed: u64) -> Result<DataflowGraph, ZooError> {
    if !matches!(bits, 1 | 2) {
        return Err(ZooError::UnsupportedBits(bits));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let name = if bits == 1 { "cnv_w1a1" } else { "cnv_w2a2" };
    let mut b = GraphBuilder::new(name, INPUT_SHAPE.to_vec(), DataType::Int { bits: 8, signed: false });
    let w_scale = weight_scale(bits);
    let act_step = activation(bits).2;
    let mut in_c = INPUT_SHAPE[1];
    let mut in_step = PIXEL_STEP;
    for (i, &out_c) in CNV_CONV_CHANNELS.iter().enumerate() {
        let layer = format!("conv{i}");
        let weight = format!("{layer}.w");
        b.push(
            layer.clone(),
            Op::Conv { in_channels: in_c, out_channels: out_c, kernel: 3, stride: 1, pad: 0, weight: weight.clone(), weight_bits: bits },
        );
        b.add_weight(weight, random_weight(&mut rng, vec![out_c, in_c, 3, 3], bits));
        push_tail(&mut b, &layer, out_c, w_scale * in_step, CNV_POOL_AFTER.contains(&i), bits);
        in_c = out_c;
        in_step = act_step;
    }
    b.push("flatten", Op::Flatten);
    let mut in_f = in_c;
    for (i, &out_f) in CNV_FC.iter().enumerate() {
        let layer = format!("fc{i}");
        let weight = format!("{layer}.w");
        b.push(layer.clone(), Op::FC { in_features: in_f, out_features: out_f, weight: weight.clone(), weight_bits: bits });
        b.add_weight(weight, random_weight(&mut rng, vec![out_f, in_f], bits));
        push_tail(&mut b, &layer, out_f, w_scale * act_step, false, bits);
        in_f = out_f;
    }
    let weight = format!("fc{}.w", CNV_FC.len());
    b.push(format!("fc{}", CNV_FC.len()), Op::FC { in_features: in_f, out_features: 1, weight: weight.clone(), weight_bits: bits });
    b.add_weight(weight, random_weight(&mut rng, vec![1, in_f], bits));
    let g = b.finish()?;
    calibrate(&g, &mut rng)
}

pub fn build_mobilenet_w4a4(seed: u64) -> Result<DataflowGraph, ZooError> {
    const BITS: u8 = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b = GraphBuilder::new("mobilenet_w4a4", INPUT_SHAPE.to_vec(), DataType::Int { bits: 8, signed: false });
    let w_scale = weight_scale(BITS);
    let act_step = activation(BITS).2;
    let stride = |i: usize| MOBILENET_STRIDES.get(i).copied().unwrap_or(1);

    b.push(
        "conv0",
        Op::Conv { in_channels: 3, out_channels: MOBILENET_STEM, kernel: 3, stride: stride(0), pad: 1, weight: "conv0.w".into(), weight_bits: BITS },
    );
    b.add_weight("conv0.w", random_weight(&mut rng, vec![MOBILENET_STEM, 3, 3, 3], BITS));
    push_tail(&mut b, "conv0", MOBILENET_STEM, w_scale * PIXEL_STEP, false, BITS);

    let mut c = MOBILENET_STEM;
    for (i, &out_c) in MOBILENET_CHANNELS.iter().enumerate() {
        let block = i + 1;
        let dw = format!("dw{block}");
        b.push(
            dw.clone(),
            Op::DepthwiseConv { channels: c, kernel: 3, stride: stride(block), pad: 1, weight: format!("{dw}.w"), weight_bits: BITS },
        );
        b.add_weight(format!("{dw}.w"), random_weight(&mut rng, vec![c, 1, 3, 3], BITS));
        push_tail(&mut b, &dw, c, w_scale * act_step, false, BITS);
        let pw = format!("pw{block}");
        b.push(
            pw.clone(),
            Op::Conv { in_channels: c, out_channels: out_c, kernel: 1, stride: 1, pad: 0, weight: format!("{pw}.w"), weight_bits: BITS },
        );
        b.add_weight(format!("{pw}.w"), random_weight(&mut rng, vec![out_c, c, 1, 1], BITS));
        push_tail(&mut b, &pw, out_c, w_scale * act_step, false, BITS);
        c = out_c;
    }
    b.push("pool", Op::AvgPool { mode: PoolMode::Mean });
    b.push("fc0", Op::FC { in_features: c, out_features: MOBILENET_HEAD, weight: "fc0.w".into(), weight_bits: BITS });
    b.add_weight("fc0.w", random_weight(&mut rng, vec![MOBILENET_HEAD, c], BITS));
    push_tail(&mut b, "fc0", MOBILENET_HEAD, w_scale * act_step, false, BITS);
    b.push("fc1", Op::FC { in_features: MOBILENET_HEAD, out_features: 1, weight: "fc1.w".into(), weight_bits: BITS });
    b.add_weight("fc1.w", random_weight(&mut rng, vec![1, MOBILENET_HEAD], BITS));
    let g = b.finish()?;
    calibrate(&g, &mut rng)
}

/// Random pixel images `[n, 3, 32, 32]` drawn from smooth colour fields
/// plus noise.
pub fn random_images(rng: &mut impl Rng, n: usize) -> QTensor {
    let [_, c, h, w] = INPUT_SHAPE;
    let mut data = Vec::with_capacity(n * c * h * w);
    for _ in 0..n {
        for _ in 0..c {
            let base: f64 = rng.gen_range(0.0..255.0);
            let (gx, gy): (f64, f64) = (rng.gen_range(-4.0..4.0), rng.gen_range(-4.0..4.0));
            for y in 0..h {
                for x in 0..w {
                    let v = base + gx * (x as f64 - 16.0) + gy * (y as f64 - 16.0) + rng.gen_range(-40.0..40.0);
                    data.push(v.round().clamp(0.0, 255.0) as i32);
                }
            }
        }
    }
    QTensor::from_codes(vec![n, c, h, w], data).expect("pixel codes")
}

/// Sets every BatchNorm's statistics from its input on a random batch, in
/// topological order, and draws gamma and beta.
fn calibrate(g: &DataflowGraph, rng: &mut ChaCha8Rng) -> Result<DataflowGraph, ZooError> {
    let exec = Executor::new(g, Mode::Fast).map_err(exec_to_zoo)?;
    let mut out = g.clone();
    let mut values = std::collections::BTreeMap::new();
    let order = g.topo_order()?;
    for &id in &order {
        let node = g.node(id).expect("ordered ids");
        let v = match &node.op {
            Op::Input { .. } => Value::Int(random_images(rng, CALIBRATION_IMAGES)),
            op => {
                let x: Value = values.remove(&g.predecessors(id)[0]).expect("topological order");
                let op = match op {
                    Op::BatchNorm { eps, .. } => {
                        let next = g.sole_successor(id).and_then(|s| g.node(s)).map(|n| n.op.clone());
                        let bn = fit_batchnorm(&x, *eps, next.as_ref(), rng);
                        out.node_mut(id).expect("same ids").op = bn.clone();
                        bn
                    }
                    op => op.clone(),
                };
                exec.eval(id, &op, x).map_err(exec_to_zoo)?
            }
        };
        values.insert(id, v);
    }
    Ok(out)
}

fn exec_to_zoo(e: ExecError) -> ZooError {
    match e {
        ExecError::Graph(g) => ZooError::Graph(g),
        other => ZooError::Graph(crate::error::GraphError::Invalid(other.to_string())),
    }
}

fn fit_batchnorm(x: &Value, eps: f64, next: Option<&Op>, rng: &mut ChaCha8Rng) -> Op {
    let shape = x.shape().to_vec();
    let data = x.to_f64();
    let c = shape[1];
    let inner: usize = shape[2..].iter().product::<usize>().max(1);
    let n = shape[0];
    let count = (n * inner) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ch in 0..c {
            for v in &data[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                mean[ch] += v;
            }
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    for b in 0..n {
        for ch in 0..c {
            for v in &data[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                var[ch] += (v - mean[ch]).powi(2);
            }
        }
    }
    // A dead channel still needs a usable scale.
    var.iter_mut().for_each(|v| *v = (*v / count).max(1e-4));
    let (lo, hi) = match next {
        Some(Op::QuantActivation { mode: ActMode::Unsigned, .. }) => (0.5, 1.5),
        _ => (-0.25, 0.25),
    };
    let gamma = (0..c).map(|_| rng.gen_range(0.5..1.5)).collect();
    let beta = (0..c).map(|_| rng.gen_range(lo..hi)).collect();
    Op::BatchNorm { gamma, beta, mean, var, eps }
}

/// Pixel codes of an `[H, W, 3]` byte tile as an NCHW input tensor.
pub fn tile_to_input(hwc: &[u8], h: usize, w: usize) -> QTensor {
    let mut data = vec![0i32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                data[(ch * h + y) * w + x] = i32::from(hwc[(y * w + x) * 3 + ch]);
            }
        }
    }
    QTensor::from_codes(vec![1, 3, h, w], data).expect("pixel codes")
}

/// Real-valued view used by float-path tests.
pub fn input_as_real(q: &QTensor) -> FTensor {
    q.to_real_codes()
}

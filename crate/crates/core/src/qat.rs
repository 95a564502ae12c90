//! Quantization-aware training with straight-through estimators.
//!
//! The trainer lowers a float-annotated chain graph (as built by the zoo)
//! into a layer list, trains latent `f64` weights with SGD and momentum, and
//! writes quantized weights and BatchNorm statistics back into the graph.
//! In eval mode the forward pass evaluates the same expressions as the
//! executor, so exported graphs reproduce its logits exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bundle::Weight;
use crate::error::TrainError;
use crate::graph::{ActMode, DataflowGraph, NodeId, Op, PoolMode};
use crate::kernels::scalar;
use crate::qtensor::{round_half_up, PackedBitTensor, QScale, QTensor};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplier from the raw integer logit to the loss logit; derived
    /// from the last layer when `None`.
    pub logit_scale: Option<f64>,
    /// Stop once eval-mode train accuracy reaches this value.
    pub target_accuracy: Option<f64>,
    pub bn_momentum: f64,
    /// `false` trains the float path: no weight or activation quantization.
    pub quantize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 1.0,
            momentum: 0.9,
            batch_size: 32,
            seed: 42,
            logit_scale: None,
            target_accuracy: None,
            bn_momentum: 0.1,
            quantize: true,
        }
    }
}

/// Labeled inputs, each `[1, C, H, W]` or `[1, F]`.
#[derive(Debug, Clone, Default)]
pub struct LabeledSet {
    pub inputs: Vec<QTensor>,
    pub labels: Vec<bool>,
}

impl LabeledSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn push(&mut self, input: QTensor, label: bool) {
        self.inputs.push(input);
        self.labels.push(label);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
}

#[derive(Debug, Clone)]
struct Buf {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Buf {
    fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    /// `(batch, channels, inner)` for layout `[N, C, ...]`.
    fn nci(&self) -> (usize, usize, usize) {
        let n = self.shape[0];
        let c = self.shape.get(1).copied().unwrap_or(1);
        let inner = self.shape.iter().skip(2).product::<usize>().max(1);
        (n, c, inner)
    }
}

/// Row-major `C (+)= op(A) · op(B)` with `op(A)` of shape `[m, k]` and
/// `op(B)` of shape `[k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the bounds above cover every element the strides address.
    unsafe {
        matrixmultiply::dgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), n as isize, 1);
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn simple(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Visits `(col_row, col_pos, input_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        for ic in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ic * self.k + ky) * self.k + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            f(row, oy * self.ow + ox, (ic * self.h + iy as usize) * self.w + ix as usize);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let p = self.oh * self.ow;
        cols.iter_mut().for_each(|v| *v = 0.0);
        self.for_each_tap(|row, pos, idx| cols[row * p + pos] = img[idx]);
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.oh * self.ow;
        self.for_each_tap(|row, pos, idx| img[idx] += cols[row * p + pos]);
    }
}

const BIPOLAR_LATENT: f64 = 0.05;

#[derive(Debug, Clone)]
struct WeightParam {
    name: String,
    shape: Vec<usize>,
    bits: u8,
    w_scale: f64,
    latent: Vec<f64>,
    vel: Vec<f64>,
    grad: Vec<f64>,
}

impl WeightParam {
    fn from_weight(name: &str, w: &Weight) -> Self {
        let (bits, w_scale) = match w {
            Weight::Bipolar { scale, .. } => (1, *scale),
            Weight::Int(q) => (q.bits(), q.scale().for_index(0)),
        };
        // Binary latents start near zero so a few updates can flip a sign.
        let unit = if bits == 1 { BIPOLAR_LATENT } else { w_scale };
        let latent: Vec<f64> = w.to_i32().iter().map(|&c| f64::from(c) * unit).collect();
        let n = latent.len();
        Self { name: name.to_string(), shape: w.shape().to_vec(), bits, w_scale, latent, vel: vec![0.0; n], grad: vec![0.0; n] }
    }

    fn code_range(&self) -> (f64, f64) {
        let b = u32::from(self.bits);
        (-(2f64.powi(b as i32 - 1)), 2f64.powi(b as i32 - 1) - 1.0)
    }

    /// Weight values in code units as used by the forward pass.
    fn effective(&self, quantize: bool) -> Vec<f64> {
        if !quantize {
            return self.latent.iter().map(|&l| l / self.w_scale).collect();
        }
        if self.bits == 1 {
            return self.latent.iter().map(|&l| if l >= 0.0 { 1.0 } else { -1.0 }).collect();
        }
        let (lo, hi) = self.code_range();
        self.latent.iter().map(|&l| round_half_up(l / self.w_scale).clamp(lo, hi)).collect()
    }

    /// Adds the gradient w.r.t. effective codes, mapped through the STE.
    fn accumulate(&mut self, d_codes: &[f64], quantize: bool) {
        for ((g, &d), &l) in self.grad.iter_mut().zip(d_codes).zip(&self.latent) {
            if !quantize || l.abs() <= 1.0 {
                *g += d / self.w_scale;
            }
        }
    }

    fn export(&self) -> Weight {
        let codes = self.effective(true);
        if self.bits == 1 {
            let signs: Vec<bool> = codes.iter().map(|&c| c > 0.0).collect();
            let tensor = PackedBitTensor::from_signs(self.shape.clone(), &signs).expect("sizes agree");
            return Weight::Bipolar { tensor, scale: self.w_scale };
        }
        let data = codes.iter().map(|&c| c as i32).collect();
        Weight::Int(QTensor::new(self.shape.clone(), data, self.bits, QScale::PerTensor(self.w_scale)).expect("codes in range"))
    }
}

#[derive(Debug, Clone)]
struct BnParam {
    node: NodeId,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    eps: f64,
    vel_g: Vec<f64>,
    vel_b: Vec<f64>,
    grad_g: Vec<f64>,
    grad_b: Vec<f64>,
}

#[derive(Debug, Clone)]
enum Kind {
    Conv { p: WeightParam, stride: usize, pad: usize, depthwise: bool },
    Fc { p: WeightParam },
    Scale(Vec<f64>),
    Add(Vec<f64>),
    MaxPool { k: usize, stride: usize },
    AvgPool { mean: bool },
    Bn(BnParam),
    Quant { mode: ActMode, bits: u8, step: f64 },
    Flatten,
}

#[derive(Debug, Clone, Default)]
enum Cache {
    #[default]
    None,
    Input(Buf),
    Argmax(Vec<usize>, Vec<usize>),
    Bn { xhat: Vec<f64>, inv_std: Vec<f64> },
    Shape(Vec<usize>),
}

#[derive(Debug, Clone)]
struct Layer {
    kind: Kind,
    cache: Cache,
}

/// Identifies one trainable tensor for gradient inspection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Gamma,
    Beta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId {
    pub layer: usize,
    pub kind: ParamKind,
}

/// Trainable state of a chain graph.
#[derive(Debug, Clone)]
pub struct Network {
    graph: DataflowGraph,
    layers: Vec<Layer>,
    quantize: bool,
    logit_scale: f64,
    bn_momentum: f64,
}

fn param(v: &[f64], c: usize) -> f64 {
    scalar::param(v, c)
}

fn code_bounds(mode: ActMode, bits: u8) -> (f64, f64) {
    let (lo, hi) = scalar::code_range(mode, bits);
    (f64::from(lo), f64::from(hi))
}

impl Network {
    pub fn from_graph(g: &DataflowGraph, cfg: &TrainConfig) -> Result<Self, TrainError> {
        let order = g.topo_order()?;
        let mut layers = Vec::new();
        let mut last_fc: Option<(usize, f64)> = None;
        let mut in_step = 1.0;
        for id in order {
            if g.successors(id).len() > 1 {
                return Err(TrainError::Unsupported("graph is not a chain".into()));
            }
            let node = g.node(id).expect("ordered ids");
            let weight = |name: &str| {
                g.weight(name).ok_or_else(|| TrainError::Unsupported(format!("missing weight {name}")))
            };
            let kind = match &node.op {
                Op::Input { .. } | Op::Output => continue,
                Op::Conv { stride, pad, weight: w, .. } | Op::DepthwiseConv { stride, pad, weight: w, .. } => Kind::Conv {
                    p: WeightParam::from_weight(w, weight(w)?),
                    stride: *stride,
                    pad: *pad,
                    depthwise: matches!(node.op, Op::DepthwiseConv { .. }),
                },
                Op::FC { weight: w, in_features, .. } => {
                    let p = WeightParam::from_weight(w, weight(w)?);
                    last_fc = Some((*in_features, p.w_scale * in_step));
                    Kind::Fc { p }
                }
                Op::Scale { factor } => Kind::Scale(factor.clone()),
                Op::Add { bias } => Kind::Add(bias.clone()),
                Op::MaxPool { kernel, stride } => Kind::MaxPool { k: *kernel, stride: *stride },
                Op::AvgPool { mode } => Kind::AvgPool { mean: *mode == PoolMode::Mean },
                Op::BatchNorm { gamma, beta, mean, var, eps } => Kind::Bn(BnParam {
                    node: id,
                    vel_g: vec![0.0; gamma.len()],
                    vel_b: vec![0.0; beta.len()],
                    grad_g: vec![0.0; gamma.len()],
                    grad_b: vec![0.0; beta.len()],
                    gamma: gamma.clone(),
                    beta: beta.clone(),
                    mean: mean.clone(),
                    var: var.clone(),
                    eps: *eps,
                }),
                Op::QuantActivation { bits, mode, step } => {
                    in_step = *step;
                    Kind::Quant { mode: *mode, bits: *bits, step: *step }
                }
                Op::Sign => {
                    in_step = 1.0;
                    Kind::Quant { mode: ActMode::Bipolar, bits: 1, step: 1.0 }
                }
                Op::Flatten => Kind::Flatten,
                Op::MultiThreshold { .. } => {
                    return Err(TrainError::Unsupported("streamlined graphs cannot be trained".into()))
                }
            };
            layers.push(Layer { kind, cache: Cache::None });
        }
        let default_scale = last_fc.map_or(1.0, |(fan_in, s)| s / (fan_in as f64).sqrt());
        Ok(Self {
            graph: g.clone(),
            layers,
            quantize: cfg.quantize,
            logit_scale: cfg.logit_scale.unwrap_or(default_scale),
            bn_momentum: cfg.bn_momentum,
        })
    }

    pub fn logit_scale(&self) -> f64 {
        self.logit_scale
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Trainable tensors in layer order.
    pub fn params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                Kind::Conv { .. } | Kind::Fc { .. } => out.push(ParamId { layer: i, kind: ParamKind::Weight }),
                Kind::Bn(_) => {
                    out.push(ParamId { layer: i, kind: ParamKind::Gamma });
                    out.push(ParamId { layer: i, kind: ParamKind::Beta });
                }
                _ => {}
            }
        }
        out
    }

    fn param_views(&mut self, id: ParamId) -> (&mut Vec<f64>, &mut Vec<f64>) {
        match (&mut self.layers[id.layer].kind, id.kind) {
            (Kind::Conv { p, .. } | Kind::Fc { p }, ParamKind::Weight) => (&mut p.latent, &mut p.grad),
            (Kind::Bn(b), ParamKind::Gamma) => (&mut b.gamma, &mut b.grad_g),
            (Kind::Bn(b), ParamKind::Beta) => (&mut b.beta, &mut b.grad_b),
            _ => panic!("no such parameter"),
        }
    }

    pub fn param_values(&mut self, id: ParamId) -> Vec<f64> {
        self.param_views(id).0.clone()
    }

    pub fn set_param_values(&mut self, id: ParamId, v: &[f64]) {
        self.param_views(id).0.copy_from_slice(v);
    }

    /// Gradient from the last [`Network::loss_and_grads`] call.
    pub fn param_grad(&mut self, id: ParamId) -> Vec<f64> {
        self.param_views(id).1.clone()
    }

    fn zero_grads(&mut self) {
        for l in &mut self.layers {
            match &mut l.kind {
                Kind::Conv { p, .. } | Kind::Fc { p } => p.grad.iter_mut().for_each(|g| *g = 0.0),
                Kind::Bn(b) => {
                    b.grad_g.iter_mut().for_each(|g| *g = 0.0);
                    b.grad_b.iter_mut().for_each(|g| *g = 0.0);
                }
                _ => {}
            }
        }
    }

    fn stack(inputs: &[&QTensor]) -> Buf {
        let mut shape = inputs[0].shape().to_vec();
        shape[0] = inputs.len();
        let mut data = Vec::with_capacity(shape.iter().product());
        for q in inputs {
            data.extend(q.data().iter().map(|&v| f64::from(v)));
        }
        Buf { shape, data }
    }

    fn forward(&mut self, mut x: Buf, train: bool) -> Buf {
        let quantize = self.quantize;
        let bn_momentum = self.bn_momentum;
        for layer in &mut self.layers {
            x = layer.forward(x, train, quantize, bn_momentum);
        }
        x
    }

    /// Raw integer-domain logits in eval mode.
    pub fn logits(&mut self, inputs: &[&QTensor]) -> Vec<f64> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            out.extend(self.forward(Self::stack(chunk), false).data);
        }
        self.clear_caches();
        out
    }

    fn clear_caches(&mut self) {
        for l in &mut self.layers {
            l.cache = Cache::None;
        }
    }

    /// Mean binary cross-entropy over the batch and gradients of every
    /// trainable tensor, with BatchNorm in batch-statistics mode.
    pub fn loss_and_grads(&mut self, inputs: &[&QTensor], labels: &[bool]) -> Result<f64, TrainError> {
        self.zero_grads();
        let y = self.forward(Self::stack(inputs), true);
        let n = labels.len() as f64;
        let mut loss = 0.0;
        let mut dy = Buf::zeros(y.shape.clone());
        for (i, (&raw, &t)) in y.data.iter().zip(labels).enumerate() {
            let z = raw * self.logit_scale;
            let t = if t { 1.0 } else { 0.0 };
            loss += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
            dy.data[i] = (1.0 / (1.0 + (-z).exp()) - t) / n * self.logit_scale;
        }
        let loss = loss / n;
        if !loss.is_finite() {
            return Err(TrainError::NumericalOverflow { epoch: 0 });
        }
        let quantize = self.quantize;
        let count = self.layers.len();
        for (i, layer) in self.layers.iter_mut().enumerate().rev() {
            dy = layer.backward(dy, quantize, i > 0 || count == 1);
        }
        Ok(loss)
    }

    /// One SGD-with-momentum update from the stored gradients.
    pub fn step(&mut self, lr: f64, momentum: f64) {
        let quantize = self.quantize;
        let update = |v: &mut [f64], vel: &mut [f64], g: &[f64]| {
            for ((p, m), &g) in v.iter_mut().zip(vel.iter_mut()).zip(g) {
                *m = momentum * *m + g;
                *p -= lr * *m;
            }
        };
        for l in &mut self.layers {
            match &mut l.kind {
                Kind::Conv { p, .. } | Kind::Fc { p } => {
                    update(&mut p.latent, &mut p.vel, &p.grad);
                    if quantize {
                        p.latent.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
                    }
                }
                Kind::Bn(b) => {
                    update(&mut b.gamma, &mut b.vel_g, &b.grad_g);
                    update(&mut b.beta, &mut b.vel_b, &b.grad_b);
                    // Streamlining needs a positive per-channel scale.
                    b.gamma.iter_mut().for_each(|g| *g = g.max(1e-3));
                }
                _ => {}
            }
        }
    }

    /// The source graph with quantized weights and BatchNorm statistics
    /// written back.
    pub fn to_graph(&self) -> DataflowGraph {
        let mut g = self.graph.clone();
        for l in &self.layers {
            match &l.kind {
                Kind::Conv { p, .. } | Kind::Fc { p } => {
                    g.set_weight(p.name.clone(), p.export());
                }
                Kind::Bn(b) => {
                    if let Some(node) = g.node_mut(b.node) {
                        node.op = Op::BatchNorm {
                            gamma: b.gamma.clone(),
                            beta: b.beta.clone(),
                            mean: b.mean.clone(),
                            var: b.var.clone(),
                            eps: b.eps,
                        };
                    }
                }
                _ => {}
            }
        }
        g
    }

    /// Mean loss and accuracy in eval mode.
    pub fn evaluate(&mut self, set: &LabeledSet) -> (f64, f64) {
        let refs: Vec<&QTensor> = set.inputs.iter().collect();
        let logits = self.logits(&refs);
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (&raw, &t) in logits.iter().zip(&set.labels) {
            let z = raw * self.logit_scale;
            let tv = if t { 1.0 } else { 0.0 };
            loss += z.max(0.0) - z * tv + (-z.abs()).exp().ln_1p();
            correct += usize::from((raw >= 0.0) == t);
        }
        let n = set.len().max(1) as f64;
        (loss / n, correct as f64 / n)
    }
}

impl Layer {
    fn forward(&mut self, x: Buf, train: bool, quantize: bool, bn_momentum: f64) -> Buf {
        match &mut self.kind {
            Kind::Conv { p, stride, pad, depthwise } => {
                let w = p.effective(quantize);
                let (_, c, _) = x.nci();
                let (h, wd) = (x.shape[2], x.shape[3]);
                let k = p.shape[2];
                let oh = (h + 2 * *pad - k) / *stride + 1;
                let ow = (wd + 2 * *pad - k) / *stride + 1;
                let geo = Geometry { c, h, w: wd, k, stride: *stride, pad: *pad, oh, ow };
                let out = if *depthwise { dw_forward(&x, &w, geo) } else { conv_forward(&x, &w, p.shape[0], geo) };
                if train {
                    self.cache = Cache::Input(x);
                }
                out
            }
            Kind::Fc { p } => {
                let w = p.effective(quantize);
                let (n, f) = (x.shape[0], x.shape[1]);
                let o = p.shape[0];
                let mut y = Buf::zeros(vec![n, o]);
                gemm(n, f, o, &x.data, false, &w, true, &mut y.data, false);
                if train {
                    self.cache = Cache::Input(x);
                }
                y
            }
            Kind::Scale(f) => map_channels(x, |c, v| v * param(f, c)),
            Kind::Add(b) => map_channels(x, |c, v| v + param(b, c)),
            Kind::MaxPool { k, stride } => {
                let (n, c, _) = x.nci();
                let (h, w) = (x.shape[2], x.shape[3]);
                let (oh, ow) = ((h - *k) / *stride + 1, (w - *k) / *stride + 1);
                let mut y = Buf::zeros(vec![n, c, oh, ow]);
                let mut arg = vec![0usize; y.data.len()];
                for plane in 0..n * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + oy * *stride * w + ox * *stride;
                            for ky in 0..*k {
                                for kx in 0..*k {
                                    let idx = base + (oy * *stride + ky) * w + ox * *stride + kx;
                                    if x.data[idx] > x.data[best] {
                                        best = idx;
                                    }
                                }
                            }
                            let o = (plane * oh + oy) * ow + ox;
                            y.data[o] = x.data[best];
                            arg[o] = best;
                        }
                    }
                }
                if train {
                    self.cache = Cache::Argmax(arg, x.shape.clone());
                }
                y
            }
            Kind::AvgPool { mean } => {
                let (n, c, inner) = x.nci();
                let data = x
                    .data
                    .chunks_exact(inner)
                    .map(|p| {
                        let s: f64 = p.iter().sum();
                        if *mean {
                            s / inner as f64
                        } else {
                            s
                        }
                    })
                    .collect();
                if train {
                    self.cache = Cache::Shape(x.shape.clone());
                }
                Buf { shape: vec![n, c], data }
            }
            Kind::Bn(b) => {
                if !train {
                    return map_channels(x, |c, v| {
                        scalar::batchnorm(v, param(&b.gamma, c), param(&b.beta, c), param(&b.mean, c), param(&b.var, c), b.eps)
                    });
                }
                let (n, c, inner) = x.nci();
                let m = (n * inner) as f64;
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for bi in 0..n {
                    for ch in 0..c {
                        mean[ch] += x.data[(bi * c + ch) * inner..(bi * c + ch + 1) * inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m);
                for bi in 0..n {
                    for ch in 0..c {
                        var[ch] += x.data[(bi * c + ch) * inner..(bi * c + ch + 1) * inner]
                            .iter()
                            .map(|v| (v - mean[ch]).powi(2))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m);
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + b.eps).sqrt()).collect();
                let mut xhat = vec![0.0; x.data.len()];
                let mut y = Buf::zeros(x.shape.clone());
                for i in 0..x.data.len() {
                    let ch = (i / inner) % c;
                    xhat[i] = (x.data[i] - mean[ch]) * inv_std[ch];
                    y.data[i] = param(&b.gamma, ch) * xhat[i] + param(&b.beta, ch);
                }
                for ch in 0..b.mean.len() {
                    b.mean[ch] = (1.0 - bn_momentum) * b.mean[ch] + bn_momentum * mean[ch];
                    b.var[ch] = (1.0 - bn_momentum) * b.var[ch] + bn_momentum * var[ch];
                }
                self.cache = Cache::Bn { xhat, inv_std };
                y
            }
            Kind::Quant { mode, bits, step } => {
                if train {
                    self.cache = Cache::Input(x.clone());
                }
                let (mode, bits, step) = (*mode, *bits, *step);
                if quantize {
                    map_channels(x, |_, v| f64::from(scalar::quantize_activation(v, mode, bits, step)))
                } else {
                    map_channels(x, |_, v| v / step)
                }
            }
            Kind::Flatten => {
                let n = x.shape[0];
                let f = x.data.len() / n.max(1);
                if train {
                    self.cache = Cache::Shape(x.shape.clone());
                }
                Buf { shape: vec![n, f], data: x.data }
            }
        }
    }

    fn backward(&mut self, dy: Buf, quantize: bool, need_dx: bool) -> Buf {
        let cache = std::mem::take(&mut self.cache);
        match (&mut self.kind, cache) {
            (Kind::Conv { p, stride, pad, depthwise }, Cache::Input(x)) => {
                let w = p.effective(quantize);
                let (_, c, _) = x.nci();
                let (h, wd) = (x.shape[2], x.shape[3]);
                let k = p.shape[2];
                let (oh, ow) = (dy.shape[2], dy.shape[3]);
                let geo = Geometry { c, h, w: wd, k, stride: *stride, pad: *pad, oh, ow };
                let mut dw = vec![0.0; w.len()];
                let dx = if *depthwise {
                    dw_backward(&x, &w, &dy, geo, &mut dw, need_dx)
                } else {
                    conv_backward(&x, &w, p.shape[0], &dy, geo, &mut dw, need_dx)
                };
                p.accumulate(&dw, quantize);
                dx
            }
            (Kind::Fc { p }, Cache::Input(x)) => {
                let w = p.effective(quantize);
                let (n, f) = (x.shape[0], x.shape[1]);
                let o = p.shape[0];
                let mut dw = vec![0.0; o * f];
                gemm(o, n, f, &dy.data, true, &x.data, false, &mut dw, false);
                p.accumulate(&dw, quantize);
                let mut dx = Buf::zeros(x.shape.clone());
                if need_dx {
                    gemm(n, o, f, &dy.data, false, &w, false, &mut dx.data, false);
                }
                dx
            }
            (Kind::Scale(f), _) => map_channels(dy, |c, v| v * param(f, c)),
            (Kind::Add(_), _) => dy,
            (Kind::MaxPool { .. }, Cache::Argmax(arg, shape)) => {
                let mut dx = Buf::zeros(shape);
                for (o, &src) in arg.iter().enumerate() {
                    dx.data[src] += dy.data[o];
                }
                dx
            }
            (Kind::AvgPool { mean }, Cache::Shape(shape)) => {
                let mut dx = Buf::zeros(shape);
                let (_, _, inner) = dx.nci();
                let div = if *mean { inner as f64 } else { 1.0 };
                for (i, v) in dx.data.iter_mut().enumerate() {
                    *v = dy.data[i / inner] / div;
                }
                dx
            }
            (Kind::Bn(b), Cache::Bn { xhat, inv_std }) => {
                let (n, c, inner) = dy.nci();
                let m = (n * inner) as f64;
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for i in 0..dy.data.len() {
                    let ch = (i / inner) % c;
                    sum_dy[ch] += dy.data[i];
                    sum_dy_xhat[ch] += dy.data[i] * xhat[i];
                }
                for ch in 0..c {
                    let gi = if b.gamma.len() == 1 { 0 } else { ch };
                    b.grad_g[gi] += sum_dy_xhat[ch];
                    b.grad_b[gi] += sum_dy[ch];
                }
                let mut dx = Buf::zeros(dy.shape.clone());
                for i in 0..dy.data.len() {
                    let ch = (i / inner) % c;
                    let k = param(&b.gamma, ch) * inv_std[ch] / m;
                    dx.data[i] = k * (m * dy.data[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch]);
                }
                dx
            }
            (Kind::Quant { mode, bits, step }, Cache::Input(x)) => {
                let (lo, hi) = code_bounds(*mode, *bits);
                let step = *step;
                let mode = *mode;
                let mut dx = dy;
                for (d, &v) in dx.data.iter_mut().zip(&x.data) {
                    let pass = !quantize
                        || match mode {
                            ActMode::Bipolar => v.abs() <= 1.0,
                            _ => v >= lo * step && v <= hi * step,
                        };
                    *d = if pass { *d / step } else { 0.0 };
                }
                dx
            }
            (Kind::Flatten, Cache::Shape(shape)) => Buf { shape, data: dy.data },
            _ => panic!("backward without a training forward"),
        }
    }
}

fn map_channels(mut x: Buf, f: impl Fn(usize, f64) -> f64) -> Buf {
    let (_, c, inner) = x.nci();
    for (i, v) in x.data.iter_mut().enumerate() {
        *v = f((i / inner) % c, *v);
    }
    x
}

fn conv_forward(x: &Buf, w: &[f64], oc: usize, geo: Geometry) -> Buf {
    let n = x.shape[0];
    let kk = geo.c * geo.k * geo.k;
    let p = geo.oh * geo.ow;
    let img = geo.c * geo.h * geo.w;
    let mut y = Buf::zeros(vec![n, oc, geo.oh, geo.ow]);
    let mut cols = vec![0.0; if geo.simple() { 0 } else { kk * p }];
    for b in 0..n {
        let xb = &x.data[b * img..(b + 1) * img];
        let src: &[f64] = if geo.simple() {
            xb
        } else {
            geo.im2col(xb, &mut cols);
            &cols
        };
        gemm(oc, kk, p, w, false, src, false, &mut y.data[b * oc * p..(b + 1) * oc * p], false);
    }
    y
}

fn conv_backward(x: &Buf, w: &[f64], oc: usize, dy: &Buf, geo: Geometry, dw: &mut [f64], need_dx: bool) -> Buf {
    let n = x.shape[0];
    let kk = geo.c * geo.k * geo.k;
    let p = geo.oh * geo.ow;
    let img = geo.c * geo.h * geo.w;
    let mut dx = Buf::zeros(x.shape.clone());
    let mut cols = vec![0.0; if geo.simple() { 0 } else { kk * p }];
    let mut dcols = vec![0.0; if need_dx { kk * p } else { 0 }];
    for b in 0..n {
        let xb = &x.data[b * img..(b + 1) * img];
        let src: &[f64] = if geo.simple() {
            xb
        } else {
            geo.im2col(xb, &mut cols);
            &cols
        };
        let dyb = &dy.data[b * oc * p..(b + 1) * oc * p];
        gemm(oc, p, kk, dyb, false, src, true, dw, true);
        if need_dx {
            if geo.simple() {
                gemm(kk, oc, p, w, true, dyb, false, &mut dx.data[b * img..(b + 1) * img], false);
            } else {
                gemm(kk, oc, p, w, true, dyb, false, &mut dcols, false);
                geo.col2im(&dcols, &mut dx.data[b * img..(b + 1) * img]);
            }
        }
    }
    dx
}

fn dw_forward(x: &Buf, w: &[f64], geo: Geometry) -> Buf {
    let n = x.shape[0];
    let (c, k) = (geo.c, geo.k);
    let mut y = Buf::zeros(vec![n, c, geo.oh, geo.ow]);
    for b in 0..n {
        for ch in 0..c {
            let xin = &x.data[(b * c + ch) * geo.h * geo.w..(b * c + ch + 1) * geo.h * geo.w];
            let out = &mut y.data[(b * c + ch) * geo.oh * geo.ow..(b * c + ch + 1) * geo.oh * geo.ow];
            let single = Geometry { c: 1, ..geo };
            single.for_each_tap(|row, pos, idx| out[pos] += w[ch * k * k + row] * xin[idx]);
        }
    }
    y
}

fn dw_backward(x: &Buf, w: &[f64], dy: &Buf, geo: Geometry, dw: &mut [f64], need_dx: bool) -> Buf {
    let n = x.shape[0];
    let (c, k) = (geo.c, geo.k);
    let mut dx = Buf::zeros(x.shape.clone());
    let single = Geometry { c: 1, ..geo };
    for b in 0..n {
        for ch in 0..c {
            let plane = (b * c + ch) * geo.h * geo.w;
            let oplane = (b * c + ch) * geo.oh * geo.ow;
            single.for_each_tap(|row, pos, idx| {
                let g = dy.data[oplane + pos];
                dw[ch * k * k + row] += g * x.data[plane + idx];
                if need_dx {
                    dx.data[plane + idx] += g * w[ch * k * k + row];
                }
            });
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub graph: DataflowGraph,
    pub history: History,
    pub network: Network,
}

/// Trains `g` on `train`, evaluating on `val` after every epoch.
///
/// Batches follow one seeded permutation that is reused every epoch, so
/// with a zero learning rate every epoch sees identical batches.
pub fn train(g: &DataflowGraph, train: &LabeledSet, val: Option<&LabeledSet>, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut net = Network::from_graph(g, cfg)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let bs = cfg.batch_size.max(1);
    let mut history = History::default();
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(bs) {
            // BatchNorm needs more than one sample.
            if chunk.len() < 2 && batches > 0 {
                continue;
            }
            let inputs: Vec<&QTensor> = chunk.iter().map(|&i| &train.inputs[i]).collect();
            let labels: Vec<bool> = chunk.iter().map(|&i| train.labels[i]).collect();
            let loss = net.loss_and_grads(&inputs, &labels).map_err(|_| TrainError::NumericalOverflow { epoch })?;
            net.step(cfg.lr, cfg.momentum);
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NumericalOverflow { epoch });
        }
        let (_, train_accuracy) = net.evaluate(train);
        let (val_loss, val_accuracy) = match val {
            Some(v) if !v.is_empty() => {
                let (l, a) = net.evaluate(v);
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        history.epochs.push(EpochStats { epoch, train_loss, train_accuracy, val_loss, val_accuracy });
        if cfg.target_accuracy.is_some_and(|t| train_accuracy >= t) {
            break;
        }
    }
    Ok(TrainOutcome { graph: net.to_graph(), history, network: net })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{DataType, GraphBuilder};
    use rand::Rng;

    fn toy(seed: u64, zero: bool) -> DataflowGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = GraphBuilder::new("toy", vec![1, 6], DataType::Int { bits: 8, signed: true });
        let mut w = |shape: Vec<usize>| {
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| if zero { 0 } else { rng.gen_range(-8..8) }).collect();
            Weight::Int(QTensor::new(shape, data, 4, QScale::PerTensor(0.125)).unwrap())
        };
        b.push("fc0", Op::FC { in_features: 6, out_features: 5, weight: "fc0.w".into(), weight_bits: 4 });
        b.add_weight("fc0.w", w(vec![5, 6]));
        b.push("s", Op::Scale { factor: vec![0.125] });
        b.push(
            "bn",
            Op::BatchNorm { gamma: vec![1.2; 5], beta: vec![0.3; 5], mean: vec![0.0; 5], var: vec![1.0; 5], eps: 1e-5 },
        );
        b.push("q", Op::QuantActivation { bits: 4, mode: ActMode::Unsigned, step: 0.25 });
        b.push("fc1", Op::FC { in_features: 5, out_features: 1, weight: "fc1.w".into(), weight_bits: 4 });
        b.add_weight("fc1.w", w(vec![1, 5]));
        b.finish().unwrap()
    }

    fn toy_batch(seed: u64, n: usize) -> (Vec<QTensor>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let xs = (0..n).map(|_| QTensor::from_codes(vec![1, 6], (0..6).map(|_| rng.gen_range(-20..20)).collect()).unwrap()).collect();
        let ys = (0..n).map(|i| i % 2 == 0).collect();
        (xs, ys)
    }

    #[test]
    fn zero_weights_give_ln2() {
        let cfg = TrainConfig { quantize: false, ..TrainConfig::default() };
        let mut net = Network::from_graph(&toy(1, true), &cfg).unwrap();
        let (xs, ys) = toy_batch(2, 8);
        let refs: Vec<&QTensor> = xs.iter().collect();
        let loss = net.loss_and_grads(&refs, &ys).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_central_differences() {
        let cfg = TrainConfig { quantize: false, logit_scale: Some(0.5), ..TrainConfig::default() };
        let mut net = Network::from_graph(&toy(3, false), &cfg).unwrap();
        let (xs, ys) = toy_batch(4, 8);
        let refs: Vec<&QTensor> = xs.iter().collect();
        net.loss_and_grads(&refs, &ys).unwrap();
        for id in net.params() {
            let analytic = net.param_grad(id);
            let base = net.param_values(id);
            let mut numeric = vec![0.0; base.len()];
            let h = 1e-5;
            for i in 0..base.len() {
                let mut v = base.clone();
                v[i] += h;
                net.set_param_values(id, &v);
                let up = net.clone().loss_and_grads(&refs, &ys).unwrap();
                v[i] -= 2.0 * h;
                net.set_param_values(id, &v);
                let down = net.clone().loss_and_grads(&refs, &ys).unwrap();
                numeric[i] = (up - down) / (2.0 * h);
            }
            net.set_param_values(id, &base);
            let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let norm = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            assert!(diff / norm <= 1e-4, "{id:?}: {diff} / {norm}");
        }
    }

    #[test]
    fn clipped_latent_gets_no_gradient() {
        let mut p = WeightParam::from_weight("w", &Weight::Int(QTensor::new(vec![2], vec![1, 1], 4, QScale::PerTensor(0.125)).unwrap()));
        p.latent = vec![1.5, 0.5];
        p.accumulate(&[1.0, 1.0], true);
        assert_eq!(p.grad, vec![0.0, 8.0]);
    }

    #[test]
    fn latent_init_reproduces_codes() {
        let g = toy(5, false);
        let net = Network::from_graph(&g, &TrainConfig::default()).unwrap();
        assert_eq!(net.to_graph(), g);
    }

    #[test]
    fn zero_lr_keeps_loss_and_weights() {
        let g = toy(6, false);
        let (xs, ys) = toy_batch(7, 40);
        let set = LabeledSet { inputs: xs, labels: ys };
        let cfg = TrainConfig { epochs: 3, lr: 0.0, batch_size: 8, ..TrainConfig::default() };
        let out = train(&g, &set, None, &cfg).unwrap();
        let losses: Vec<f64> = out.history.epochs.iter().map(|e| e.train_loss).collect();
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(out.graph.weights(), g.weights());
    }

    #[test]
    fn same_seed_same_history() {
        let g = toy(8, false);
        let (xs, ys) = toy_batch(9, 40);
        let set = LabeledSet { inputs: xs, labels: ys };
        let cfg = TrainConfig { epochs: 3, lr: 0.05, batch_size: 8, ..TrainConfig::default() };
        assert_eq!(train(&g, &set, None, &cfg).unwrap().history, train(&g, &set, None, &cfg).unwrap().history);
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion and fails if
//! any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use finnlite_core::exec::{Executor, Mode};
use finnlite_core::folding::{self, FoldLayer, FoldViolation, FoldingConfig, LayerFold};
use finnlite_core::graph::{infer_shapes, ActMode, DataType, GraphBuilder, Op};
use finnlite_core::kernels::{self, reference, ThresholdTable};
use finnlite_core::qat::{self, Network, TrainConfig};
use finnlite_core::streamline::streamline_all;
use finnlite_core::tiles::{self, Split};
use finnlite_core::{synth, zoo, FTensor, PackedBitTensor, QScale, QTensor, Weight};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    check(t < limit, || format!("took {t:.1?}, limit {limit:?}"))
}

// 1. XNOR-popcount dot products.

fn pack(v: &[i32]) -> PackedBitTensor {
    let signs: Vec<bool> = v.iter().map(|&x| x > 0).collect();
    PackedBitTensor::from_signs(vec![v.len()], &signs).unwrap()
}

fn dot(a: &[i32], b: &[i32]) -> i32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn bipolar_from_bits(bits: u32, n: usize) -> Vec<i32> {
    (0..n).map(|i| if bits >> i & 1 == 1 { 1 } else { -1 }).collect()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut pairs = 0u64;
    for n in 1..=12usize {
        let vectors: Vec<Vec<i32>> = (0..1u32 << n).map(|m| bipolar_from_bits(m, n)).collect();
        let packed: Vec<PackedBitTensor> = vectors.iter().map(|v| pack(v)).collect();
        for (a, pa) in vectors.iter().zip(&packed) {
            for (b, pb) in vectors.iter().zip(&packed) {
                let got = kernels::xnor_popcount_dot(pa.words(), pb.words(), n).map_err(|e| e.to_string())?;
                check(got == dot(a, b), || format!("n={n}: {a:?} . {b:?} gave {got}"))?;
                pairs += 1;
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..10_000 {
        let n = rng.gen_range(1..=512);
        let a: Vec<i32> = (0..n).map(|_| if rng.gen() { 1 } else { -1 }).collect();
        let b: Vec<i32> = (0..n).map(|_| if rng.gen() { 1 } else { -1 }).collect();
        let got = kernels::xnor_popcount_dot(pack(&a).words(), pack(&b).words(), n).map_err(|e| e.to_string())?;
        check(got == dot(&a, &b), || format!("random n={n} gave {got}"))?;
    }
    within(start, Duration::from_secs(10))?;
    Ok(format!("{pairs} exhaustive pairs, 10000 random pairs, {:.1?}", start.elapsed()))
}

// 2. Kernel paths against naive oracles.

fn random_codes(rng: &mut ChaCha8Rng, n: usize, bipolar: bool) -> Vec<i32> {
    if bipolar {
        (0..n).map(|_| if rng.gen() { 1 } else { -1 }).collect()
    } else {
        let bits = [2u32, 4, 8][rng.gen_range(0..3)];
        let lo = -(1 << (bits - 1));
        (0..n).map(|_| rng.gen_range(lo..-lo)).collect()
    }
}

fn random_weight(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> (Weight, FTensor) {
    let n: usize = shape.iter().product();
    let bipolar = rng.gen_bool(0.5);
    let codes = random_codes(rng, n, bipolar);
    let real = FTensor::new(shape.clone(), codes.iter().map(|&c| f64::from(c)).collect()).unwrap();
    let w = if bipolar {
        let signs: Vec<bool> = codes.iter().map(|&c| c > 0).collect();
        Weight::Bipolar { tensor: PackedBitTensor::from_signs(shape, &signs).unwrap(), scale: 1.0 }
    } else {
        Weight::Int(QTensor::new(shape, codes, 8, QScale::PerTensor(1.0)).unwrap())
    };
    (w, real)
}

fn random_input(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> QTensor {
    let n = shape.iter().product();
    let bipolar = rng.gen_bool(0.5);
    QTensor::from_codes(shape, random_codes(rng, n, bipolar)).unwrap()
}

fn same(q: &QTensor, f: &FTensor) -> bool {
    q.shape() == f.shape() && q.data().iter().zip(f.data()).all(|(&a, &b)| f64::from(a) == b)
}

fn naive_maxpool(shape: &[usize], data: &[i32], k: usize, s: usize) -> Vec<i32> {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
    let mut out = Vec::new();
    for p in 0..n * c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = i32::MIN;
                for ky in 0..k {
                    for kx in 0..k {
                        m = m.max(data[p * h * w + (oy * s + ky) * w + ox * s + kx]);
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn kernel_instance(rng: &mut ChaCha8Rng, i: usize) -> Result<(), String> {
    let err = |e: finnlite_core::KernelError| format!("instance {i}: {e}");
    match i % 6 {
        0 | 1 => {
            let (c, oc, k) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..4));
            let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
            let (h, w) = (rng.gen_range(k..9), rng.gen_range(k..9));
            let x = random_input(rng, vec![1, c, h, w]);
            let (wq, wf) = random_weight(rng, vec![oc, c, k, k]);
            let fast = kernels::conv2d(&x, &wq, stride, pad).map_err(err)?;
            let oracle = reference::conv2d(&x.to_real_codes(), &wf, stride, pad).map_err(err)?;
            check(same(&fast, &oracle), || format!("conv instance {i} differs"))
        }
        2 => {
            let (c, k) = (rng.gen_range(1..6), rng.gen_range(1..4));
            let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
            let (h, w) = (rng.gen_range(k..9), rng.gen_range(k..9));
            let x = random_input(rng, vec![1, c, h, w]);
            let (wq, wf) = random_weight(rng, vec![c, 1, k, k]);
            let fast = kernels::depthwise_conv2d(&x, &wq, stride, pad).map_err(err)?;
            let oracle = reference::depthwise_conv2d(&x.to_real_codes(), &wf, stride, pad).map_err(err)?;
            check(same(&fast, &oracle), || format!("depthwise instance {i} differs"))
        }
        3 => {
            let (f, o) = (rng.gen_range(1..200), rng.gen_range(1..8));
            let x = random_input(rng, vec![1, f]);
            let (wq, wf) = random_weight(rng, vec![o, f]);
            let fast = kernels::fully_connected(&x, &wq, None).map_err(err)?;
            let oracle = reference::fully_connected(&x.to_real_codes(), &wf).map_err(err)?;
            check(same(&fast, &oracle), || format!("fc instance {i} differs"))
        }
        4 => {
            let (c, k) = (rng.gen_range(1..4), rng.gen_range(1..4));
            let stride = rng.gen_range(1..3);
            let (h, w) = (rng.gen_range(k..10), rng.gen_range(k..10));
            let x = random_input(rng, vec![1, c, h, w]);
            let (_, fast) = kernels::maxpool2d(x.shape(), x.data(), k, stride).map_err(err)?;
            check(fast == naive_maxpool(x.shape(), x.data(), k, stride), || format!("maxpool instance {i} differs"))
        }
        _ => {
            let (c, steps) = (rng.gen_range(1..4), rng.gen_range(1..8));
            let rows: Vec<Vec<f64>> = (0..c)
                .map(|_| {
                    let mut r: Vec<f64> = (0..steps).map(|_| f64::from(rng.gen_range(-40..40))).collect();
                    r.sort_by(f64::total_cmp);
                    r
                })
                .collect();
            let (scale, offset) = (rng.gen_range(1..3), rng.gen_range(-4..1));
            let x = random_input(rng, vec![1, c, 3, 3]);
            let table = ThresholdTable::new(rows.clone(), scale, offset).map_err(err)?;
            let fast = kernels::multithreshold_int(&x, &table).map_err(err)?;
            // Oracle: count thresholds met by hand.
            let expect: Vec<i32> = x
                .data()
                .iter()
                .enumerate()
                .map(|(j, &v)| offset + scale * rows[j / 9].iter().filter(|&&t| f64::from(v) >= t).count() as i32)
                .collect();
            check(fast.data() == expect.as_slice(), || format!("threshold instance {i} differs"))
        }
    }
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..1000 {
        kernel_instance(&mut rng, i)?;
    }
    within(start, Duration::from_secs(60))?;
    Ok(format!("1000 instances bit-equal, {:.1?}", start.elapsed()))
}

// 3. Streamlining preserves predictions.

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut notes = Vec::new();
    for name in zoo::MODEL_NAMES {
        let g = zoo::build_model(name, 3).map_err(|e| e.to_string())?;
        let report = streamline_all(&g).map_err(|e| e.to_string())?;
        check(report.graph.is_integer_only() && report.residual.is_empty(), || {
            format!("{name}: float nodes remain: {:?}", report.residual)
        })?;
        let before = Executor::new(&g, Mode::Fast).map_err(|e| e.to_string())?;
        let after = Executor::new(&report.graph, Mode::Fast).map_err(|e| e.to_string())?;
        let mut positives = 0;
        for k in 0..100 {
            let x = zoo::random_images(&mut rng, 1);
            let a = before.run(x.clone()).map_err(|e| e.to_string())?.output.to_f64();
            let b = after.run(x).map_err(|e| e.to_string())?.output.to_f64();
            check(a == b, || format!("{name}: image {k}: {a:?} vs {b:?}"))?;
            positives += usize::from(a[0] >= 0.0);
        }
        notes.push(format!("{name} {positives}/100 positive"));
    }
    within(start, Duration::from_secs(300))?;
    Ok(format!("{}, {:.1?}", notes.join(", "), start.elapsed()))
}

// 4. CNV layer table.

fn criterion_4() -> Outcome {
    let expected: [(&str, &[usize], Option<&[usize]>); 12] = [
        ("Conv", &[1, 3, 32, 32], Some(&[64, 3, 3, 3])),
        ("Conv", &[1, 64, 30, 30], Some(&[64, 64, 3, 3])),
        ("MaxPool", &[1, 64, 28, 28], None),
        ("Conv", &[1, 64, 14, 14], Some(&[128, 64, 3, 3])),
        ("Conv", &[1, 128, 12, 12], Some(&[128, 128, 3, 3])),
        ("MaxPool", &[1, 128, 10, 10], None),
        ("Conv", &[1, 128, 5, 5], Some(&[256, 128, 3, 3])),
        ("Conv", &[1, 256, 3, 3], Some(&[256, 256, 3, 3])),
        ("Flatten", &[1, 256, 1, 1], None),
        ("FC", &[1, 256], Some(&[512, 256])),
        ("FC", &[1, 512], Some(&[512, 512])),
        ("FC", &[1, 512], Some(&[1, 512])),
    ];
    let mut checked = 0;
    for bits in [1, 2] {
        let g = infer_shapes(&zoo::build_cnv(bits, 4).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        let order = g.topo_order().map_err(|e| e.to_string())?;
        let layers: Vec<_> = order
            .iter()
            .map(|&id| g.node(id).unwrap())
            .filter(|n| matches!(n.op, Op::Conv { .. } | Op::MaxPool { .. } | Op::Flatten | Op::FC { .. }))
            .collect();
        check(layers.len() == expected.len(), || format!("w{bits}: {} table layers", layers.len()))?;
        for (n, (kind, input, filter)) in layers.iter().zip(expected) {
            let shape = g.input_edge(n.id).and_then(|e| e.shape.clone()).unwrap_or_default();
            check(n.op.kind() == kind && shape == input, || {
                format!("w{bits} {}: {} {:?}, expected {kind} {:?}", n.name, n.op.kind(), shape, input)
            })?;
            if let Some(f) = filter {
                let name = match &n.op {
                    Op::Conv { weight, .. } | Op::FC { weight, .. } => weight.clone(),
                    _ => unreachable!(),
                };
                let w = g.weight(&name).ok_or_else(|| format!("missing {name}"))?;
                check(w.shape() == f, || format!("{name}: {:?}, expected {f:?}", w.shape()))?;
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} rows matched across cnv_w1a1 and cnv_w2a2"))
}

// 5. Folding.

fn divisors(n: u64) -> Vec<u64> {
    (1..=n).filter(|d| n % d == 0).collect()
}

fn criterion_5() -> Outcome {
    for name in zoo::MODEL_NAMES {
        let g = zoo::build_model(name, 5).map_err(|e| e.to_string())?;
        let ones = FoldingConfig::all_ones(&g, 100e6).map_err(|e| e.to_string())?;
        let v = folding::validate_folding(&g, &ones).map_err(|e| e.to_string())?;
        check(v.is_empty(), || format!("{name}: all-ones rejected: {v:?}"))?;
    }
    let g = zoo::build_model("cnv_w1a1", 5).map_err(|e| e.to_string())?;
    let layers = folding::foldable_layers(&g).map_err(|e| e.to_string())?;
    let conv2 = layers.iter().find(|l| l.rows == 64 && l.cols == 576).ok_or("no 64-row conv")?;
    let mut cfg = FoldingConfig::all_ones(&g, 100e6).map_err(|e| e.to_string())?;
    for lf in &mut cfg.layers {
        if lf.node == conv2.node {
            *lf = LayerFold { node: lf.node, pe: 12, simd: 1 };
        }
    }
    let v = folding::validate_folding(&g, &cfg).map_err(|e| e.to_string())?;
    check(v == vec![FoldViolation::PeNotDivisor { node: conv2.node, rows: 64, pe: 12 }], || format!("PE=12 gave {v:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut pairs = 0;
    for _ in 0..50 {
        let layer = FoldLayer {
            node: 0,
            name: "l".into(),
            kind: "Conv",
            rows: rng.gen_range(1..=256),
            cols: rng.gen_range(1..=600),
            spatial: rng.gen_range(1..=900),
        };
        let base = folding::estimate_cycles(&layer, 1, 1).map_err(|e| e.to_string())?;
        for pe in divisors(layer.rows) {
            for simd in divisors(layer.cols) {
                let c = folding::estimate_cycles(&layer, pe, simd).map_err(|e| e.to_string())?;
                check(c * pe * simd == base, || format!("{layer:?} pe={pe} simd={simd}: {c}"))?;
                pairs += 1;
            }
        }
    }

    let mut sweeps = Vec::new();
    for name in zoo::MODEL_NAMES {
        let g = zoo::build_model(name, 5).map_err(|e| e.to_string())?;
        let n = folding::foldable_layers(&g).map_err(|e| e.to_string())?.len() as u64;
        let mut last = 0.0;
        for i in 0..20u32 {
            let budget = n + (n as f64 * 2f64.powf(f64::from(i) * 0.6)) as u64;
            let cfg = folding::auto_fold(&g, budget, 100e6).map_err(|e| e.to_string())?;
            check(cfg.lanes() <= budget, || format!("{name}: {} lanes over budget {budget}", cfg.lanes()))?;
            check(folding::validate_folding(&g, &cfg).map_err(|e| e.to_string())?.is_empty(), || {
                format!("{name}: auto_fold produced an invalid config")
            })?;
            let fps = folding::report_throughput(&g, &cfg).map_err(|e| e.to_string())?.fps_estimate;
            check(fps >= last, || format!("{name}: fps fell from {last} to {fps} at budget {budget}"))?;
            last = fps;
        }
        sweeps.push(format!("{name} {last:.0} fps"));
    }
    Ok(format!("{pairs} divisor pairs linear; sweep tops {}", sweeps.join(", ")))
}

// 6. Frame rates.

fn criterion_6() -> Outcome {
    let r = tiles::fps_report(&[1e-3], 1980).map_err(|e| e.to_string())?;
    check((r.fps_chunk - 1000.0).abs() < 1e-9 && (r.fps_image - 1_980_000.0).abs() < 1e-6, || format!("{r:?}"))?;
    let fast = tiles::speedup(6610.94, tiles::REALTIME_FPS);
    let slow = tiles::speedup(819.33, tiles::REALTIME_FPS);
    check((fast - 263.0).abs() / 263.0 <= 0.01, || format!("speedup {fast} not within 1% of 263"))?;
    check((slow - 32.0).abs() / 32.0 <= 0.03, || format!("speedup {slow} not within 3% of 32"))?;
    Ok(format!("(1000, 1980000); speedups {fast:.1}x and {slow:.1}x"))
}

// 7. Tiler geometry.

fn criterion_7() -> Outcome {
    let t = tiles::split_frame("f", 1920, 1080).map_err(|e| e.to_string())?;
    check(t.len() == 1980, || format!("{} tiles", t.len()))?;
    let mut runner = TestRunner::new(Config { cases: 200, failure_persistence: None, ..Config::default() });
    runner
        .run(&(32u32..700, 32u32..700), |(w, h)| {
            let tiles = tiles::split_frame("f", w, h).unwrap();
            prop_assert_eq!(tiles.len() as u32, (w / 32) * (h / 32));
            let mut seen = vec![false; (w * h) as usize];
            for t in &tiles {
                prop_assert!(t.width == 32 && t.height == 32 && t.x + 32 <= w && t.y + 32 <= h);
                for y in t.y..t.y + 32 {
                    for x in t.x..t.x + 32 {
                        let i = (y * w + x) as usize;
                        prop_assert!(!seen[i], "pixel ({}, {}) covered twice", x, y);
                        seen[i] = true;
                    }
                }
            }
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok("1920x1080 gives 1980 tiles; 200 random frames disjoint and in bounds".into())
}

// 8. Quantization-aware training.

fn toy_graph() -> finnlite_core::DataflowGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut w = |shape: Vec<usize>| {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-8..8)).collect();
        Weight::Int(QTensor::new(shape, data, 4, QScale::PerTensor(0.125)).unwrap())
    };
    let mut b = GraphBuilder::new("toy", vec![1, 8], DataType::Int { bits: 8, signed: true });
    b.push("fc0", Op::FC { in_features: 8, out_features: 6, weight: "fc0.w".into(), weight_bits: 4 });
    b.add_weight("fc0.w", w(vec![6, 8]));
    b.push("bn", Op::BatchNorm { gamma: vec![1.1; 6], beta: vec![0.2; 6], mean: vec![0.0; 6], var: vec![1.0; 6], eps: 1e-5 });
    b.push("act", Op::QuantActivation { bits: 4, mode: ActMode::Unsigned, step: 0.25 });
    b.push("fc1", Op::FC { in_features: 6, out_features: 1, weight: "fc1.w".into(), weight_bits: 4 });
    b.add_weight("fc1.w", w(vec![1, 6]));
    b.finish().unwrap()
}

fn gradient_check() -> Result<f64, String> {
    let cfg = TrainConfig { quantize: false, logit_scale: Some(0.3), ..TrainConfig::default() };
    let mut net = Network::from_graph(&toy_graph(), &cfg).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let xs: Vec<QTensor> =
        (0..10).map(|_| QTensor::from_codes(vec![1, 8], (0..8).map(|_| rng.gen_range(-30..30)).collect()).unwrap()).collect();
    let refs: Vec<&QTensor> = xs.iter().collect();
    let ys: Vec<bool> = (0..10).map(|i| i % 3 == 0).collect();
    net.loss_and_grads(&refs, &ys).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for id in net.params() {
        let analytic = net.param_grad(id);
        let base = net.param_values(id);
        let h = 1e-5;
        let mut numeric = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut v = base.clone();
            v[i] = base[i] + h;
            net.set_param_values(id, &v);
            let up = net.clone().loss_and_grads(&refs, &ys).map_err(|e| e.to_string())?;
            v[i] = base[i] - h;
            net.set_param_values(id, &v);
            let down = net.clone().loss_and_grads(&refs, &ys).map_err(|e| e.to_string())?;
            numeric.push((up - down) / (2.0 * h));
        }
        net.set_param_values(id, &base);
        let diff = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
        worst = worst.max(diff / scale);
    }
    check(worst <= 1e-4, || format!("gradient relative error {worst:e}"))?;
    Ok(worst)
}

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let worst = gradient_check()?;
    let g = zoo::build_model("cnv_w1a1", 42).map_err(|e| e.to_string())?;
    let set = synth::synthetic_set(2000, 42);
    let cfg = TrainConfig { epochs: 20, seed: 42, target_accuracy: Some(0.9), ..TrainConfig::default() };
    let first = qat::train(&g, &set, None, &cfg).map_err(|e| e.to_string())?;
    let acc = first.history.epochs.last().map_or(0.0, |e| e.train_accuracy);
    let epochs = first.history.epochs.len();
    check(acc >= 0.9, || format!("train accuracy {acc:.3} after {epochs} epochs"))?;
    let second = qat::train(&g, &set, None, &cfg).map_err(|e| e.to_string())?;
    check(first.history == second.history, || "second run diverged".into())?;
    check(first.graph.weights() == second.graph.weights(), || "second run exported different weights".into())?;
    within(start, Duration::from_secs(600))?;
    Ok(format!(
        "train accuracy {acc:.3} after {epochs} epoch(s), repeat identical, gradient error {worst:.1e}, {:.1?}",
        start.elapsed()
    ))
}

// 9. Worker-count independence through the CLI.

fn finnlite(args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_finnlite"))
        .args(args)
        .env_remove("FINNLITE_SEED")
        .output()
        .map_err(|e| e.to_string())?;
    check(out.status.success(), || format!("finnlite {args:?}: {}", String::from_utf8_lossy(&out.stderr)))?;
    serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())
}

fn strip_timing(mut v: Value) -> Value {
    if let Some(preds) = v["predictions"].as_array_mut() {
        for p in preds {
            let obj = p.as_object_mut().unwrap();
            obj.remove("compute_nanos");
            obj.remove("total_nanos");
        }
    }
    v
}

fn criterion_9() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |s: &str| dir.path().join(s).to_string_lossy().into_owned();
    finnlite(&["build", "--model", "cnv_w1a1", "--out", &p("g")])?;
    finnlite(&["dataset", "--synthetic-frames", "10", "--tiles-per-frame", "12", "--out", &p("data")])?;
    finnlite(&["streamline", "--graph", &p("g/graph.json"), "--out", &p("s")])?;
    let mut tiles = 0;
    for graph in ["g", "s"] {
        let one = strip_timing(finnlite(&["eval", "--graph", &p(graph), "--data", &p("data"), "--split", "test", "--workers", "1"])?);
        let eight = strip_timing(finnlite(&["eval", "--graph", &p(graph), "--data", &p("data"), "--split", "test", "--workers", "8"])?);
        for key in ["tp", "fp", "fn", "tn"] {
            check(one["report"][key] == eight["report"][key], || format!("{graph}: {key} differs"))?;
        }
        check(one["predictions"] == eight["predictions"], || format!("{graph}: predictions differ"))?;
        tiles = one["predictions"].as_array().map_or(0, Vec::len);
    }
    check(tiles == 24, || format!("{tiles} test tiles"))?;
    Ok(format!("{tiles} test tiles, identical counts and predictions, float and streamlined graphs"))
}

// 10. Optional: a downloaded copy of the real dataset.

fn criterion_10() -> Option<Outcome> {
    let root = std::env::var("FINNLITE_DATASET").ok()?;
    let run = || -> Outcome {
        let index = tiles::load_index(Path::new(&root)).map_err(|e| e.to_string())?;
        let train = tiles::load_split(&index, Split::Train).map_err(|e| e.to_string())?;
        let g = zoo::build_model("mobilenet_w4a4", 42).map_err(|e| e.to_string())?;
        let cfg = TrainConfig { epochs: 10, ..TrainConfig::default() };
        let out = qat::train(&g, &train, None, &cfg).map_err(|e| e.to_string())?;
        let (r, _) = tiles::evaluate(&out.graph, &index, Split::Test, &tiles::EvalOptions::default()).map_err(|e| e.to_string())?;
        let f = |v: Option<f64>| v.map_or("n/a".into(), |v| format!("{:.1}%", v * 100.0));
        Ok(format!("informational: precision {} recall {} f1 {}", f(r.precision), f(r.recall), f(r.f1)))
    };
    Some(run())
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("xnor-popcount equivalence", criterion_1),
        ("kernel oracle equivalence", criterion_2),
        ("streamlining preservation", criterion_3),
        ("cnv layer table", criterion_4),
        ("folding", criterion_5),
        ("frame rates", criterion_6),
        ("tiler geometry", criterion_7),
        ("quantization-aware training", criterion_8),
        ("worker-count determinism", criterion_9),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let label = format!("criterion {} ({name})", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| label.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("{label}: PASS: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("{label}: FAIL: {detail}");
            }
        }
    }
    match criterion_10() {
        None => println!("criterion 10 (real dataset): SKIP: set FINNLITE_DATASET to a dataset root to run"),
        Some(Ok(detail)) => println!("criterion 10 (real dataset): INFO: {detail}"),
        Some(Err(detail)) => println!("criterion 10 (real dataset): INFO: could not run: {detail}"),
    }
    if failed > 0 {
        std::process::exit(1);
    }
}

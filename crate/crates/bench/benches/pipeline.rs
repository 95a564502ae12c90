use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use finnlite_bench::{image, model};
use finnlite_core::exec::{Executor, Mode};
use finnlite_core::streamline::streamline_all;
use finnlite_core::zoo::MODEL_NAMES;

fn inference(c: &mut Criterion) {
    let mut group = c.benchmark_group("inference");
    group.sample_size(10);
    let x = image(4);
    for name in MODEL_NAMES {
        let (g, s) = model(name);
        let before = Executor::new(&g, Mode::Fast).unwrap();
        let after = Executor::new(&s, Mode::Fast).unwrap();
        group.bench_function(format!("{name}/float"), |b| b.iter(|| before.run(black_box(x.clone()))));
        group.bench_function(format!("{name}/streamlined"), |b| b.iter(|| after.run(black_box(x.clone()))));
    }
    group.finish();
}

fn streamlining(c: &mut Criterion) {
    let (g, _) = model("mobilenet_w4a4");
    let mut group = c.benchmark_group("streamline_all");
    group.sample_size(10);
    group.bench_function("mobilenet_w4a4", |b| b.iter(|| streamline_all(black_box(&g))));
    group.finish();
}

criterion_group!(benches, inference, streamlining);
criterion_main!(benches);

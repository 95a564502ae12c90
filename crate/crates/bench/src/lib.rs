//! Shared fixtures for the benchmarks.

use finnlite_core::streamline::streamline_all;
use finnlite_core::{zoo, DataflowGraph, PackedBitTensor, QTensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Two packed ±1 vectors of length `n`.
pub fn bipolar_pair(n: usize, seed: u64) -> (PackedBitTensor, PackedBitTensor) {
    let mut r = rng(seed);
    let mut v = || {
        let signs: Vec<bool> = (0..n).map(|_| r.gen()).collect();
        PackedBitTensor::from_signs(vec![n], &signs).expect("sizes agree")
    };
    (v(), v())
}

/// A `[1, c, h, w]` tensor of ±1 codes.
pub fn bipolar_input(c: usize, h: usize, w: usize, seed: u64) -> QTensor {
    let mut r = rng(seed);
    let data = (0..c * h * w).map(|_| if r.gen() { 1 } else { -1 }).collect();
    QTensor::from_codes(vec![1, c, h, w], data).expect("codes")
}

/// A model as built and after streamlining.
pub fn model(name: &str) -> (DataflowGraph, DataflowGraph) {
    let g = zoo::build_model(name, 1).expect("known model");
    let s = streamline_all(&g).expect("streamlines").graph;
    (g, s)
}

pub fn image(seed: u64) -> QTensor {
    zoo::random_images(&mut rng(seed), 1)
}

//! Synthetic 32x32 tiles with a known class: red-purple blobs on foliage
//! versus foliage only.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::qat::LabeledSet;
use crate::zoo::tile_to_input;

pub const TILE: usize = 32;

/// One `[32, 32, 3]` RGB tile.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthTile {
    pub rgb: Vec<u8>,
    pub grape: bool,
}

fn foliage(rng: &mut impl Rng) -> Vec<u8> {
    let base = [rng.gen_range(30..90i32), rng.gen_range(90..170), rng.gen_range(20..70)];
    let mut rgb = Vec::with_capacity(TILE * TILE * 3);
    for _ in 0..TILE * TILE {
        let shade = rng.gen_range(-30..30);
        for b in base {
            rgb.push((b + shade + rng.gen_range(-15..15)).clamp(0, 255) as u8);
        }
    }
    rgb
}

fn paint_blob(rgb: &mut [u8], rng: &mut impl Rng) {
    let (cx, cy) = (rng.gen_range(6.0..26.0), rng.gen_range(6.0..26.0));
    let r: f64 = rng.gen_range(7.0..12.0);
    let colour = [rng.gen_range(110..190i32), rng.gen_range(10..50), rng.gen_range(60..130)];
    for y in 0..TILE {
        for x in 0..TILE {
            let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
            if d <= r {
                let shade = ((1.0 - d / r) * 40.0) as i32;
                for (ch, c) in colour.iter().enumerate() {
                    rgb[(y * TILE + x) * 3 + ch] = (c + shade + rng.gen_range(-10..10)).clamp(0, 255) as u8;
                }
            }
        }
    }
}

/// `n` tiles alternating grape / no-grape, reproducible from `seed`.
pub fn synthetic_tiles(n: usize, seed: u64) -> Vec<SynthTile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let grape = i % 2 == 0;
            let mut rgb = foliage(&mut rng);
            if grape {
                for _ in 0..rng.gen_range(1..3) {
                    paint_blob(&mut rgb, &mut rng);
                }
            }
            SynthTile { rgb, grape }
        })
        .collect()
}

/// Tiles as network inputs.
pub fn synthetic_set(n: usize, seed: u64) -> LabeledSet {
    let mut set = LabeledSet::default();
    for t in synthetic_tiles(n, seed) {
        set.push(tile_to_input(&t.rgb, TILE, TILE), t.grape);
    }
    set
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balanced_and_reproducible() {
        let a = synthetic_tiles(10, 3);
        assert_eq!(a, synthetic_tiles(10, 3));
        assert_eq!(a.iter().filter(|t| t.grape).count(), 5);
        assert!(a.iter().all(|t| t.rgb.len() == TILE * TILE * 3));
    }

    #[test]
    fn classes_differ_in_red_over_green() {
        let mean_excess = |grape: bool| {
            let tiles: Vec<_> = synthetic_tiles(40, 1).into_iter().filter(|t| t.grape == grape).collect();
            let s: i64 = tiles.iter().flat_map(|t| t.rgb.chunks(3).map(|p| i64::from(p[0]) - i64::from(p[1]))).sum();
            s as f64 / (tiles.len() * TILE * TILE) as f64
        };
        assert!(mean_excess(true) > mean_excess(false) + 20.0);
    }
}

use finnlite_core::tiles::{
    evaluate, load_index, load_split, split_frame, write_synthetic_dataset, EvalOptions, Label, Split,
};
use finnlite_core::zoo;
use proptest::prelude::*;

proptest! {
    #[test]
    fn tiles_are_disjoint_and_in_bounds(w in 32u32..400, h in 32u32..400) {
        let tiles = split_frame("f", w, h).unwrap();
        prop_assert_eq!(tiles.len() as u32, (w / 32) * (h / 32));
        for t in &tiles {
            prop_assert!(t.width == 32 && t.height == 32);
            prop_assert!(t.x + t.width <= w && t.y + t.height <= h);
        }
        for (i, a) in tiles.iter().enumerate() {
            for b in &tiles[i + 1..] {
                let apart = a.x + a.width <= b.x || b.x + b.width <= a.x || a.y + a.height <= b.y || b.y + b.height <= a.y;
                prop_assert!(apart);
            }
        }
        // Only the partial right and bottom strips are left uncovered.
        let covered: u64 = tiles.iter().map(|t| u64::from(t.width * t.height)).sum();
        prop_assert_eq!(covered, u64::from((w - w % 32) * (h - h % 32)));
    }
}

#[test]
fn synthetic_dataset_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let written = write_synthetic_dataset(dir.path(), 10, 4, 3).unwrap();
    let read = load_index(dir.path()).unwrap();
    assert_eq!(written, read);
    assert_eq!(read.counts(Split::Train).frames, 6);
    assert_eq!(read.counts(Split::Val).frames, 2);
    assert_eq!(read.counts(Split::Test).frames, 2);
    let test = read.counts(Split::Test);
    assert_eq!(test.grape + test.no_grape, 8);
    let set = load_split(&read, Split::Train).unwrap();
    assert_eq!(set.len(), 24);
    assert_eq!(set.inputs[0].shape(), &[1, 3, 32, 32]);
}

#[test]
fn evaluation_is_independent_of_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let index = write_synthetic_dataset(dir.path(), 5, 6, 9).unwrap();
    let g = zoo::build_model("cnv_w1a1", 1).unwrap();
    let one = evaluate(&g, &index, Split::Train, &EvalOptions { workers: 1, ..EvalOptions::default() }).unwrap();
    let four = evaluate(&g, &index, Split::Train, &EvalOptions { workers: 4, ..EvalOptions::default() }).unwrap();
    assert_eq!(one.0.confusion, four.0.confusion);
    let strip = |v: &[finnlite_core::tiles::TilePrediction]| {
        v.iter().map(|p| (p.frame.clone(), p.row, p.col, p.prediction, p.score)).collect::<Vec<_>>()
    };
    assert_eq!(strip(&one.1), strip(&four.1));
    // Independent recount.
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for p in &one.1 {
        match (p.score >= 0.0, p.label == Label::Grape) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    let c = one.0.confusion;
    assert_eq!((c.tp, c.fp, c.fn_, c.tn), (tp, fp, fn_, tn));
    assert_eq!(c.total(), 18);
    assert_eq!(one.0.fps.fps_image, one.0.fps.fps_chunk * 1980.0);
}

#[test]
fn empty_split_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let index = load_index(dir.path()).unwrap();
    let g = zoo::build_model("cnv_w1a1", 1).unwrap();
    assert!(evaluate(&g, &index, Split::Test, &EvalOptions::default()).is_err());
}

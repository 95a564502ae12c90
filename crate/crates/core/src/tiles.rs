//! Frame tiling, colour pre-labeling, on-disk datasets, splits and tile
//! evaluation.
//!
//! Datasets live at `<root>/<split>/<class>/<frame>_<row>_<col>.png` with
//! classes `grape` and `no_grape`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::PipelineError;
use crate::exec::{Executor, Mode};
use crate::graph::DataflowGraph;
use crate::qat::LabeledSet;
use crate::qtensor::QTensor;
use crate::synth;
use crate::zoo::tile_to_input;

pub const TILE: u32 = 32;
/// Frame rate treated as real time.
pub const REALTIME_FPS: f64 = 25.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Grape,
    NoGrape,
    Unlabeled,
}

impl Label {
    pub fn from_bool(grape: bool) -> Self {
        if grape {
            Label::Grape
        } else {
            Label::NoGrape
        }
    }

    pub fn dir_name(self) -> Option<&'static str> {
        match self {
            Label::Grape => Some("grape"),
            Label::NoGrape => Some("no_grape"),
            Label::Unlabeled => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One 32x32 chunk of a frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub frame: String,
    pub row: u32,
    pub col: u32,
    /// Top-left pixel.
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub label: Label,
    pub prediction: Option<bool>,
    pub score: Option<f64>,
    pub nanos: Option<u64>,
}

/// Tile grid of a `width x height` frame; partial edge strips are dropped.
pub fn tile_grid(width: u32, height: u32) -> Result<(u32, u32), PipelineError> {
    if width < TILE || height < TILE {
        return Err(PipelineError::FrameTooSmall { width, height, tile: TILE });
    }
    Ok((height / TILE, width / TILE))
}

/// Row-major tiles of a frame.
pub fn split_frame(frame: &str, width: u32, height: u32) -> Result<Vec<TileRecord>, PipelineError> {
    let (rows, cols) = tile_grid(width, height)?;
    let mut out = Vec::with_capacity((rows * cols) as usize);
    for row in 0..rows {
        for col in 0..cols {
            out.push(TileRecord {
                frame: frame.to_string(),
                row,
                col,
                x: col * TILE,
                y: row * TILE,
                width: TILE,
                height: TILE,
                label: Label::Unlabeled,
                prediction: None,
                score: None,
                nanos: None,
            });
        }
    }
    Ok(out)
}

/// Copies a tile's pixels out of an `[H, W, 3]` frame.
pub fn extract_tile(rgb: &[u8], frame_width: u32, t: &TileRecord) -> Vec<u8> {
    let mut out = Vec::with_capacity((t.width * t.height * 3) as usize);
    for y in t.y..t.y + t.height {
        let start = ((y * frame_width + t.x) * 3) as usize;
        out.extend_from_slice(&rgb[start..start + (t.width * 3) as usize]);
    }
    out
}

/// Hue band in degrees (wrapping when `hue_from > hue_to`) with minimum
/// saturation and value in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HsvRange {
    pub hue_from: f64,
    pub hue_to: f64,
    pub min_saturation: f64,
    pub min_value: f64,
}

impl Default for HsvRange {
    /// Red-purple band. A heuristic, not a calibrated range.
    fn default() -> Self {
        Self { hue_from: 280.0, hue_to: 20.0, min_saturation: 0.25, min_value: 0.15 }
    }
}

impl HsvRange {
    pub fn contains(&self, rgb: [u8; 3]) -> bool {
        let (h, s, v) = rgb_to_hsv(rgb);
        let in_hue = if self.hue_from <= self.hue_to {
            (self.hue_from..=self.hue_to).contains(&h)
        } else {
            h >= self.hue_from || h <= self.hue_to
        };
        in_hue && s >= self.min_saturation && v >= self.min_value
    }
}

pub const DEFAULT_MIN_FRACTION: f64 = 0.25;

/// Hue in degrees `[0, 360)`, saturation and value in `[0, 1]`.
pub fn rgb_to_hsv([r, g, b]: [u8; 3]) -> (f64, f64, f64) {
    let (r, g, b) = (f64::from(r) / 255.0, f64::from(g) / 255.0, f64::from(b) / 255.0);
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        60.0 * ((g - b) / d).rem_euclid(6.0)
    } else if max == g {
        60.0 * ((b - r) / d + 2.0)
    } else {
        60.0 * ((r - g) / d + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

/// Grape iff at least `min_fraction` of the pixels fall inside `range`.
pub fn prelabel_color_threshold(rgb: &[u8], range: &HsvRange, min_fraction: f64) -> Label {
    let total = rgb.len() / 3;
    if total == 0 {
        return Label::NoGrape;
    }
    let inside = rgb.chunks_exact(3).filter(|p| range.contains([p[0], p[1], p[2]])).count();
    Label::from_bool(inside as f64 >= min_fraction * total as f64)
}

/// Contiguous 60/20/20 split of `n` frames in acquisition order.
///
/// Boundaries are the rounded cumulative fractions, so 10 frames give
/// 6/2/2 and 1198 give 719/239/240.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let b1 = (6 * n + 5) / 10;
    let b2 = (8 * n + 5) / 10;
    [b1, b2 - b1, n - b2]
}

/// Split of each frame, by position.
pub fn make_splits(n_frames: usize) -> Vec<Split> {
    let [train, val, _] = split_sizes(n_frames);
    (0..n_frames)
        .map(|i| {
            if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub split: Split,
    pub label: Label,
    pub frame: String,
    pub row: u32,
    pub col: u32,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub root: PathBuf,
    /// Sorted by split, then `(frame, row, col)`.
    pub entries: Vec<DatasetEntry>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct SplitCounts {
    pub frames: usize,
    pub grape: usize,
    pub no_grape: usize,
}

impl DatasetIndex {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn counts(&self, split: Split) -> SplitCounts {
        let mut frames: Vec<&str> = self.split(split).map(|e| e.frame.as_str()).collect();
        frames.dedup();
        let mut c = SplitCounts { frames: frames.len(), ..SplitCounts::default() };
        for e in self.split(split) {
            match e.label {
                Label::Grape => c.grape += 1,
                _ => c.no_grape += 1,
            }
        }
        c
    }

    fn sort(&mut self) {
        self.entries.sort_by(|a, b| (a.split, &a.frame, a.row, a.col).cmp(&(b.split, &b.frame, b.row, b.col)));
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

fn tile_path(root: &Path, split: Split, label: Label, frame: &str, row: u32, col: u32) -> PathBuf {
    root.join(split.name())
        .join(label.dir_name().unwrap_or("unlabeled"))
        .join(format!("{frame}_{row}_{col}.png"))
}

/// Writes one `[32, 32, 3]` tile as PNG and returns its index entry.
pub fn write_tile(
    root: &Path,
    split: Split,
    label: Label,
    frame: &str,
    row: u32,
    col: u32,
    rgb: &[u8],
) -> Result<DatasetEntry, PipelineError> {
    let path = tile_path(root, split, label, frame, row, col);
    let dir = path.parent().expect("tile path has a parent");
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    image::save_buffer(&path, rgb, TILE, TILE, image::ExtendedColorType::Rgb8)
        .map_err(|e| PipelineError::Image { path: path.clone(), reason: e.to_string() })?;
    Ok(DatasetEntry { split, label, frame: frame.to_string(), row, col, path })
}

/// Decodes an image file into `(rgb, width, height)`.
pub fn read_rgb(path: &Path) -> Result<(Vec<u8>, u32, u32), PipelineError> {
    let img = image::open(path).map_err(|e| PipelineError::Image { path: path.to_path_buf(), reason: e.to_string() })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    Ok((rgb.into_raw(), w, h))
}

/// Network input for one dataset tile.
pub fn load_tile(path: &Path) -> Result<QTensor, PipelineError> {
    let (rgb, w, h) = read_rgb(path)?;
    if w != TILE || h != TILE {
        return Err(PipelineError::Image { path: path.to_path_buf(), reason: format!("expected 32x32, got {w}x{h}") });
    }
    Ok(tile_to_input(&rgb, h as usize, w as usize))
}

fn parse_tile_name(stem: &str) -> Option<(String, u32, u32)> {
    let mut parts = stem.rsplitn(3, '_');
    let col = parts.next()?.parse().ok()?;
    let row = parts.next()?.parse().ok()?;
    let frame = parts.next()?;
    Some((frame.to_string(), row, col))
}

/// Scans a dataset directory. Files that do not follow the naming scheme
/// are skipped.
pub fn load_index(root: &Path) -> Result<DatasetIndex, PipelineError> {
    let mut index = DatasetIndex { root: root.to_path_buf(), entries: Vec::new() };
    for split in Split::ALL {
        for label in [Label::Grape, Label::NoGrape] {
            let dir = root.join(split.name()).join(label.dir_name().expect("labeled"));
            if !dir.is_dir() {
                continue;
            }
            for entry in std::fs::read_dir(&dir).map_err(io_err(&dir))? {
                let path = entry.map_err(io_err(&dir))?.path();
                let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
                let parsed = path.file_stem().and_then(|s| s.to_str()).and_then(parse_tile_name);
                if let (true, Some((frame, row, col))) = (is_png, parsed) {
                    index.entries.push(DatasetEntry { split, label, frame, row, col, path });
                }
            }
        }
    }
    index.sort();
    Ok(index)
}

/// Decoded tiles of one split, in index order.
pub fn load_split(index: &DatasetIndex, split: Split) -> Result<LabeledSet, PipelineError> {
    let mut set = LabeledSet::default();
    for e in index.split(split) {
        set.push(load_tile(&e.path)?, e.label == Label::Grape);
    }
    Ok(set)
}

/// Tiles and pre-labels frame images, given in acquisition order, into a
/// dataset under `out`.
pub fn build_dataset(frames: &[PathBuf], out: &Path, range: &HsvRange, min_fraction: f64) -> Result<DatasetIndex, PipelineError> {
    let splits = make_splits(frames.len());
    let mut index = DatasetIndex { root: out.to_path_buf(), entries: Vec::new() };
    for (path, split) in frames.iter().zip(splits) {
        let (rgb, w, h) = read_rgb(path)?;
        let frame = path.file_stem().and_then(|s| s.to_str()).unwrap_or("frame").replace('_', "-");
        for t in split_frame(&frame, w, h)? {
            let pixels = extract_tile(&rgb, w, &t);
            let label = prelabel_color_threshold(&pixels, range, min_fraction);
            index.entries.push(write_tile(out, split, label, &frame, t.row, t.col, &pixels)?);
        }
    }
    index.sort();
    Ok(index)
}

/// Writes `frames x tiles_per_frame` synthetic tiles, split by frame.
pub fn write_synthetic_dataset(out: &Path, frames: usize, tiles_per_frame: usize, seed: u64) -> Result<DatasetIndex, PipelineError> {
    let tiles = synth::synthetic_tiles(frames * tiles_per_frame, seed);
    let splits = make_splits(frames);
    let mut index = DatasetIndex { root: out.to_path_buf(), entries: Vec::new() };
    for (i, t) in tiles.iter().enumerate() {
        let f = i / tiles_per_frame.max(1);
        let k = (i % tiles_per_frame.max(1)) as u32;
        let frame = format!("s{f:05}");
        index.entries.push(write_tile(out, splits[f], Label::from_bool(t.grape), &frame, k / 8, k % 8, &t.rgb)?);
    }
    index.sort();
    Ok(index)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FpsReport {
    pub fps_chunk: f64,
    pub fps_image: f64,
    pub n_c: u64,
}

/// `fps_chunk = 1 / mean(t)` with `t` in seconds; `fps_image = fps_chunk * n_c`.
pub fn fps_report(timings: &[f64], n_c: u64) -> Result<FpsReport, PipelineError> {
    if n_c == 0 {
        return Err(PipelineError::InvalidTileCount);
    }
    if timings.is_empty() {
        return Err(PipelineError::EmptyTimings);
    }
    let mean = timings.iter().sum::<f64>() / timings.len() as f64;
    let fps_chunk = 1.0 / mean;
    Ok(FpsReport { fps_chunk, fps_image: fps_chunk * n_c as f64, n_c })
}

/// How many times faster than `realtime` a rate is.
pub fn speedup(fps: f64, realtime: f64) -> f64 {
    fps / realtime
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn precision(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> Option<f64> {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> Option<f64> {
        let (p, r) = (self.precision()?, self.recall()?);
        (p + r > 0.0).then(|| 2.0 * p * r / (p + r))
    }

    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.tp + self.tn, self.total())
    }
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TilePrediction {
    pub frame: String,
    pub row: u32,
    pub col: u32,
    pub label: Label,
    pub prediction: bool,
    pub score: f64,
    /// Executor time only.
    pub compute_nanos: u64,
    /// Decode, conversion and execution.
    pub total_nanos: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub tiles: u64,
    #[serde(flatten)]
    pub confusion: Confusion,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub accuracy: Option<f64>,
    /// From executor time.
    pub fps: FpsReport,
    /// Including decode.
    pub fps_end_to_end: FpsReport,
    pub speedup: f64,
}

impl EvalReport {
    /// Plain-text table.
    pub fn table(&self) -> String {
        let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{:.2}%", v * 100.0));
        let c = &self.confusion;
        let mut s = String::new();
        s.push_str(&format!("split        {}\n", self.split));
        s.push_str(&format!("tiles        {}\n", self.tiles));
        s.push_str(&format!("TP FP FN TN  {} {} {} {}\n", c.tp, c.fp, c.fn_, c.tn));
        s.push_str(&format!("precision    {}\n", pct(self.precision)));
        s.push_str(&format!("recall       {}\n", pct(self.recall)));
        s.push_str(&format!("f1           {}\n", pct(self.f1)));
        s.push_str(&format!("accuracy     {}\n", pct(self.accuracy)));
        s.push_str(&format!("fps_chunk    {:.2}\n", self.fps.fps_chunk));
        s.push_str(&format!("fps_image    {:.2} (n_c = {})\n", self.fps.fps_image, self.fps.n_c));
        s.push_str(&format!("speedup      {:.1}x over {REALTIME_FPS} fps\n", self.speedup));
        s
    }

    /// Bar-chart rows `metric,value`.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [("precision", self.precision), ("recall", self.recall), ("f1", self.f1), ("accuracy", self.accuracy)] {
            s.push_str(&format!("{k},{}\n", v.map_or(String::new(), |v| format!("{v:.6}"))));
        }
        s.push_str(&format!("fps_chunk,{:.6}\nfps_image,{:.6}\n", self.fps.fps_chunk, self.fps.fps_image));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalOptions {
    pub workers: usize,
    /// Tiles per frame used for `fps_image`.
    pub n_c: u64,
    pub realtime_fps: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { workers: 1, n_c: 1980, realtime_fps: REALTIME_FPS }
    }
}

/// Runs every tile of `split` through `g`. Tiles are processed by
/// `workers` threads and merged in `(frame, row, col)` order.
pub fn evaluate(
    g: &DataflowGraph,
    index: &DatasetIndex,
    split: Split,
    opts: &EvalOptions,
) -> Result<(EvalReport, Vec<TilePrediction>), PipelineError> {
    let entries: Vec<&DatasetEntry> = index.split(split).collect();
    if entries.is_empty() {
        return Err(PipelineError::EmptySplit(split.name().to_string()));
    }
    let exec = Executor::new(g, Mode::Fast)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| PipelineError::WorkerPool(e.to_string()))?;
    let results: Vec<Result<TilePrediction, PipelineError>> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let start = Instant::now();
                let x = load_tile(&e.path)?;
                let out = exec.run(x)?;
                let score = out.output.to_f64().first().copied().unwrap_or(f64::NAN);
                Ok(TilePrediction {
                    frame: e.frame.clone(),
                    row: e.row,
                    col: e.col,
                    label: e.label,
                    prediction: score >= 0.0,
                    score,
                    compute_nanos: out.total_nanos,
                    total_nanos: start.elapsed().as_nanos() as u64,
                })
            })
            .collect()
    });
    let preds: Vec<TilePrediction> = results.into_iter().collect::<Result<_, _>>()?;
    Ok((summarize(split, &preds, opts)?, preds))
}

/// Metrics over per-tile predictions.
pub fn summarize(split: Split, preds: &[TilePrediction], opts: &EvalOptions) -> Result<EvalReport, PipelineError> {
    let mut confusion = Confusion::default();
    for p in preds {
        confusion.add(p.prediction, p.label == Label::Grape);
    }
    let secs = |f: fn(&TilePrediction) -> u64| preds.iter().map(|p| f(p) as f64 * 1e-9).collect::<Vec<_>>();
    let fps = fps_report(&secs(|p| p.compute_nanos), opts.n_c)?;
    let fps_end_to_end = fps_report(&secs(|p| p.total_nanos), opts.n_c)?;
    Ok(EvalReport {
        split,
        tiles: confusion.total(),
        precision: confusion.precision(),
        recall: confusion.recall(),
        f1: confusion.f1(),
        accuracy: confusion.accuracy(),
        confusion,
        speedup: speedup(fps.fps_chunk, opts.realtime_fps),
        fps,
        fps_end_to_end,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeCost {
    pub node: crate::graph::NodeId,
    pub kind: &'static str,
    pub mean_nanos: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub runs: usize,
    pub workers: usize,
    pub mean_nanos: f64,
    pub nodes: Vec<NodeCost>,
    pub fps: FpsReport,
    pub speedup: f64,
}

/// Times `g` on every input, spread over `opts.workers` threads.
pub fn benchmark(g: &DataflowGraph, inputs: &[QTensor], opts: &EvalOptions) -> Result<BenchReport, PipelineError> {
    if inputs.is_empty() {
        return Err(PipelineError::EmptyTimings);
    }
    let exec = Executor::new(g, Mode::Fast)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.workers.max(1))
        .build()
        .map_err(|e| PipelineError::WorkerPool(e.to_string()))?;
    let outs: Vec<Result<_, PipelineError>> =
        pool.install(|| inputs.par_iter().map(|x| Ok(exec.run(x.clone())?)).collect());
    let outs: Vec<_> = outs.into_iter().collect::<Result<_, _>>()?;
    let mut nodes: Vec<NodeCost> = outs[0]
        .timings
        .iter()
        .map(|t| NodeCost { node: t.node, kind: t.kind, mean_nanos: 0.0 })
        .collect();
    for o in &outs {
        for (acc, t) in nodes.iter_mut().zip(&o.timings) {
            acc.mean_nanos += t.nanos as f64 / outs.len() as f64;
        }
    }
    let secs: Vec<f64> = outs.iter().map(|o| o.total_nanos as f64 * 1e-9).collect();
    let fps = fps_report(&secs, opts.n_c)?;
    Ok(BenchReport {
        runs: outs.len(),
        workers: opts.workers.max(1),
        mean_nanos: outs.iter().map(|o| o.total_nanos as f64).sum::<f64>() / outs.len() as f64,
        nodes,
        speedup: speedup(fps.fps_chunk, opts.realtime_fps),
        fps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_hd_frame_has_1980_tiles() {
        let t = split_frame("f", 1920, 1080).unwrap();
        assert_eq!(t.len(), 60 * 33);
        assert_eq!((t[0].x, t[0].y), (0, 0));
        assert_eq!((t[1].x, t[1].y), (32, 0));
        assert_eq!((t[60].row, t[60].col), (1, 0));
        let last = t.last().unwrap();
        assert!(last.x + 32 <= 1920 && last.y + 32 <= 1080);
    }

    #[test]
    fn tiny_frames() {
        assert_eq!(split_frame("f", 32, 32).unwrap().len(), 1);
        assert!(matches!(split_frame("f", 31, 64), Err(PipelineError::FrameTooSmall { width: 31, height: 64, tile: 32 })));
    }

    #[test]
    fn extract_reads_the_right_pixels() {
        let (w, h) = (64u32, 32u32);
        let rgb: Vec<u8> = (0..w * h * 3).map(|i| ((i / 3) % w) as u8).collect();
        let t = &split_frame("f", w, h).unwrap()[1];
        let px = extract_tile(&rgb, w, t);
        assert_eq!(px.len(), 32 * 32 * 3);
        assert_eq!(px[0], 32);
        assert_eq!(px[31 * 3], 63);
    }

    #[test]
    fn hsv_of_primaries() {
        assert_eq!(rgb_to_hsv([255, 0, 0]), (0.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([0, 255, 0]), (120.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([0, 0, 255]), (240.0, 1.0, 1.0));
        assert_eq!(rgb_to_hsv([0, 0, 0]), (0.0, 0.0, 0.0));
        let (h, _, _) = rgb_to_hsv([128, 0, 128]);
        assert!((h - 300.0).abs() < 1e-9);
    }

    #[test]
    fn prelabel_fractions() {
        let range = HsvRange::default();
        let purple = [120u8, 20, 100];
        let green = [40u8, 140, 40];
        assert!(range.contains(purple) && !range.contains(green));
        let tile = |n_in: usize| -> Vec<u8> { (0..1024).flat_map(|i| if i < n_in { purple } else { green }).collect() };
        assert_eq!(prelabel_color_threshold(&tile(1024), &range, 0.25), Label::Grape);
        assert_eq!(prelabel_color_threshold(&tile(0), &range, 0.25), Label::NoGrape);
        // 30% of 1024 pixels, rounded down.
        assert_eq!(prelabel_color_threshold(&tile(307), &range, 0.25), Label::Grape);
        assert_eq!(prelabel_color_threshold(&tile(255), &range, 0.25), Label::NoGrape);
        assert_eq!(prelabel_color_threshold(&tile(256), &range, 0.25), Label::Grape);
    }

    #[test]
    fn split_rounding() {
        assert_eq!(split_sizes(10), [6, 2, 2]);
        assert_eq!(split_sizes(1198), [719, 239, 240]);
        assert_eq!(split_sizes(0), [0, 0, 0]);
        let s = make_splits(10);
        assert_eq!(&s[..6], &[Split::Train; 6]);
        assert_eq!(&s[6..8], &[Split::Val; 2]);
        assert_eq!(&s[8..], &[Split::Test; 2]);
    }

    #[test]
    fn fps_values() {
        let r = fps_report(&[1e-3, 1e-3], 1).unwrap();
        assert!((r.fps_chunk - 1000.0).abs() < 1e-9 && (r.fps_image - 1000.0).abs() < 1e-9);
        assert!(matches!(fps_report(&[], 1), Err(PipelineError::EmptyTimings)));
        assert!(matches!(fps_report(&[1.0], 0), Err(PipelineError::InvalidTileCount)));
    }

    #[test]
    fn confusion_metrics() {
        let mut perfect = Confusion::default();
        for t in [true, false, true, false] {
            perfect.add(t, t);
        }
        assert_eq!((perfect.precision(), perfect.recall(), perfect.f1()), (Some(1.0), Some(1.0), Some(1.0)));
        let mut all_pos = Confusion::default();
        for t in [true, false, true, false] {
            all_pos.add(true, t);
        }
        assert_eq!((all_pos.precision(), all_pos.recall()), (Some(0.5), Some(1.0)));
        assert_eq!(Confusion::default().precision(), None);
    }

    #[test]
    fn tile_names_round_trip() {
        assert_eq!(parse_tile_name("a_b_3_17"), Some(("a_b".to_string(), 3, 17)));
        assert_eq!(parse_tile_name("x_1"), None);
        assert_eq!(parse_tile_name("f_one_2"), None);
    }
}

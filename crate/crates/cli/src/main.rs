//! `finnlite`: build, train, streamline, fold and evaluate quantized models.
//!
//! Every stage reads and writes files. A graph lives at `<dir>/graph.json`
//! with its weights in `<dir>/bundle/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use finnlite_core::folding::{self, FoldingConfig};
use finnlite_core::graph::{deserialize, serialize};
use finnlite_core::qat::{self, TrainConfig};
use finnlite_core::streamline::streamline_all;
use finnlite_core::tiles::{self, EvalOptions, HsvRange, Split};
use finnlite_core::{load_weights, save_weights, zoo, DataflowGraph};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

const SCHEMA: u32 = 1;
const SEED_ENV: &str = "FINNLITE_SEED";

#[derive(Parser)]
#[command(name = "finnlite", version, about = "Quantized dataflow compiler and tile classifier")]
struct Cli {
    /// Seed for every random choice. FINNLITE_SEED takes precedence.
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Write the JSON result here instead of stdout.
    #[arg(long, global = true)]
    json_out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a model with seeded weights.
    Build {
        #[arg(long)]
        model: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a tile dataset from frame images or synthetic tiles.
    Dataset(DatasetArgs),
    /// Quantization-aware training on a tile dataset.
    Train(TrainArgs),
    /// Rewrite a graph into integer and threshold form.
    Streamline {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Write the applied passes as JSON.
        #[arg(long)]
        dump_pass_log: Option<PathBuf>,
    },
    /// Choose or check per-layer PE/SIMD and estimate throughput.
    Fold {
        #[arg(long)]
        graph: PathBuf,
        /// Lane budget for automatic folding.
        #[arg(long, conflicts_with = "config")]
        budget: Option<u64>,
        /// Folding config to validate instead.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 200e6)]
        clock_hz: f64,
    },
    /// Classify the tiles of one image.
    Infer {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long)]
        image: PathBuf,
    },
    /// Evaluate a graph on one split of a dataset.
    Eval(EvalArgs),
    /// Time the executor on random inputs.
    Bench {
        #[arg(long)]
        graph: PathBuf,
        #[arg(long, default_value_t = 64)]
        runs: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 1980)]
        n_c: u64,
        #[arg(long, default_value_t = tiles::REALTIME_FPS)]
        realtime_fps: f64,
    },
}

#[derive(Args)]
struct DatasetArgs {
    #[arg(long)]
    out: PathBuf,
    /// Directory of frames (PNG or JPEG), taken in file-name order.
    #[arg(long, conflicts_with = "synthetic_frames", required_unless_present = "synthetic_frames")]
    frames: Option<PathBuf>,
    /// Number of synthetic frames.
    #[arg(long)]
    synthetic_frames: Option<usize>,
    #[arg(long, default_value_t = 40)]
    tiles_per_frame: usize,
    #[arg(long, default_value_t = tiles::DEFAULT_MIN_FRACTION)]
    min_fraction: f64,
    #[arg(long, default_value_t = HsvRange::default().hue_from)]
    hue_from: f64,
    #[arg(long, default_value_t = HsvRange::default().hue_to)]
    hue_to: f64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1.0)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long)]
    target_accuracy: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Tiles per frame for the per-frame rate.
    #[arg(long, default_value_t = 1980)]
    n_c: u64,
    #[arg(long, default_value_t = tiles::REALTIME_FPS)]
    realtime_fps: f64,
    /// Write bar-chart data as CSV.
    #[arg(long)]
    plot: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Pipeline(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Pipeline(e)
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nFor more information, try '--help'.");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            let chain: Vec<String> = e.chain().map(|c| c.to_string()).collect();
            let doc = json!({ "schema": SCHEMA, "error": { "message": e.to_string(), "chain": chain } });
            eprintln!("{doc}");
            ExitCode::from(1)
        }
    }
}

fn seed(cli_seed: u64) -> Result<u64, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(cli_seed),
    }
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(usage(format!("{} does not exist", path.display())))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = seed(cli.seed)?;
    let doc = match cli.command {
        Command::Build { model, out } => build(&model, &out, seed)?,
        Command::Dataset(a) => dataset(&a, seed)?,
        Command::Train(a) => train(&a, seed)?,
        Command::Streamline { graph, out, dump_pass_log } => streamline(&graph, &out, dump_pass_log.as_deref())?,
        Command::Fold { graph, budget, config, clock_hz } => fold(&graph, budget, config.as_deref(), clock_hz)?,
        Command::Infer { graph, image } => infer(&graph, &image)?,
        Command::Eval(a) => eval(&a)?,
        Command::Bench { graph, runs, workers, n_c, realtime_fps } => {
            bench(&graph, runs, EvalOptions { workers, n_c, realtime_fps }, seed)?
        }
    };
    let mut text = serde_json::to_string_pretty(&doc).map_err(anyhow::Error::from)?;
    text.push('\n');
    match cli.json_out {
        Some(path) => fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn envelope(command: &str, body: impl Serialize) -> Result<Value, Failure> {
    let mut v = serde_json::to_value(body).map_err(anyhow::Error::from)?;
    let obj = v.as_object_mut().ok_or_else(|| anyhow!("result is not an object"))?;
    obj.insert("command".into(), json!(command));
    obj.insert("schema".into(), json!(SCHEMA));
    Ok(v)
}

/// `graph.json` path for either a graph file or its directory.
fn graph_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join("graph.json")
    } else {
        path.to_path_buf()
    }
}

fn read_graph(path: &Path) -> Result<DataflowGraph, Failure> {
    let file = graph_file(path);
    require(&file)?;
    let bytes = fs::read(&file).with_context(|| format!("reading {}", file.display()))?;
    let g = deserialize(&bytes).with_context(|| format!("parsing {}", file.display()))?;
    let bundle = file.parent().unwrap_or(Path::new(".")).join("bundle");
    require(&bundle)?;
    Ok(load_weights(&g, &bundle).with_context(|| format!("loading {}", bundle.display()))?)
}

/// Fills a fresh sibling directory and renames it over `out`, so readers
/// never see a half-written stage.
fn write_atomically(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let staging = tempfile::Builder::new().prefix(".finnlite-").tempdir_in(&parent)?;
    fill(staging.path())?;
    let staged = staging.keep();
    if out.exists() {
        let old = tempfile::Builder::new().prefix(".finnlite-old-").tempdir_in(&parent)?.keep();
        fs::remove_dir(&old)?;
        fs::rename(out, &old).with_context(|| format!("replacing {}", out.display()))?;
        fs::rename(&staged, out).with_context(|| format!("writing {}", out.display()))?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&staged, out).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

fn write_graph(dir: &Path, g: &DataflowGraph) -> Result<()> {
    fs::write(dir.join("graph.json"), serialize(g))?;
    save_weights(g, &dir.join("bundle"))?;
    Ok(())
}

fn graph_summary(g: &DataflowGraph) -> Value {
    json!({
        "name": g.name(),
        "nodes": g.nodes().len(),
        "kinds": g.kind_counts(),
        "weights": g.weights().len(),
        "integer_only": g.is_integer_only(),
    })
}

fn build(model: &str, out: &Path, seed: u64) -> Result<Value, Failure> {
    if !zoo::MODEL_NAMES.contains(&model) {
        return Err(usage(format!("unknown model {model:?}; expected one of {}", zoo::MODEL_NAMES.join(", "))));
    }
    let g = zoo::build_model(model, seed).map_err(anyhow::Error::from)?;
    write_atomically(out, |dir| write_graph(dir, &g))?;
    eprintln!("built {model} ({} nodes) into {}", g.nodes().len(), out.display());
    envelope("build", json!({ "model": model, "seed": seed, "out": out, "graph": graph_summary(&g) }))
}

fn dataset(a: &DatasetArgs, seed: u64) -> Result<Value, Failure> {
    if let Some(frames) = &a.frames {
        require(frames)?;
    }
    let mut index = None;
    write_atomically(&a.out, |dir| {
        let built = if let Some(n) = a.synthetic_frames {
            tiles::write_synthetic_dataset(dir, n, a.tiles_per_frame, seed)?
        } else {
            let root = a.frames.as_ref().expect("clap requires one source");
            let mut frames: Vec<PathBuf> = fs::read_dir(root)
                .with_context(|| format!("reading {}", root.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    let ext = p.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
                    matches!(ext.as_deref(), Some("png" | "jpg" | "jpeg"))
                })
                .collect();
            frames.sort();
            let range = HsvRange { hue_from: a.hue_from, hue_to: a.hue_to, ..HsvRange::default() };
            tiles::build_dataset(&frames, dir, &range, a.min_fraction)?
        };
        index = Some(built);
        Ok(())
    })
    .map_err(Failure::Pipeline)?;
    let index = index.expect("filled above");
    let counts: serde_json::Map<String, Value> =
        Split::ALL.iter().map(|s| (s.name().to_string(), json!(index.counts(*s)))).collect();
    eprintln!("wrote {} tiles to {}", index.entries.len(), a.out.display());
    envelope("dataset", json!({ "out": a.out, "tiles": index.entries.len(), "splits": counts }))
}

fn train(a: &TrainArgs, seed: u64) -> Result<Value, Failure> {
    let g = read_graph(&a.graph)?;
    require(&a.data)?;
    let index = tiles::load_index(&a.data).map_err(anyhow::Error::from)?;
    let train_set = tiles::load_split(&index, Split::Train).map_err(anyhow::Error::from)?;
    if train_set.is_empty() {
        return Err(usage(format!("{} has no training tiles", a.data.display())));
    }
    let val_set = tiles::load_split(&index, Split::Val).map_err(anyhow::Error::from)?;
    let cfg = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed,
        target_accuracy: a.target_accuracy,
        ..TrainConfig::default()
    };
    let out = qat::train(&g, &train_set, Some(&val_set), &cfg).map_err(anyhow::Error::from)?;
    let history = serde_json::to_vec_pretty(&json!({ "schema": SCHEMA, "config": cfg, "epochs": out.history.epochs }))
        .map_err(anyhow::Error::from)?;
    write_atomically(&a.out, |dir| {
        write_graph(dir, &out.graph)?;
        fs::write(dir.join("history.json"), &history)?;
        Ok(())
    })?;
    for e in &out.history.epochs {
        eprintln!("epoch {:>2}  loss {:.4}  train acc {:.3}", e.epoch, e.train_loss, e.train_accuracy);
    }
    envelope("train", json!({ "out": a.out, "config": cfg, "history": out.history }))
}

fn streamline(graph: &Path, out: &Path, log_path: Option<&Path>) -> Result<Value, Failure> {
    let g = read_graph(graph)?;
    let report = streamline_all(&g).map_err(anyhow::Error::from)?;
    write_atomically(out, |dir| write_graph(dir, &report.graph))?;
    let log = json!({ "schema": SCHEMA, "iterations": report.iterations, "passes": report.log });
    if let Some(p) = log_path {
        let mut text = serde_json::to_string_pretty(&log).map_err(anyhow::Error::from)?;
        text.push('\n');
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    eprintln!(
        "{} rewrites in {} iterations; {} float nodes remain",
        report.log.len(),
        report.iterations,
        report.residual.len()
    );
    envelope(
        "streamline",
        json!({
            "out": out,
            "iterations": report.iterations,
            "rewrites": report.log.len(),
            "issues": report.issues,
            "residual": report.residual,
            "graph": graph_summary(&report.graph),
        }),
    )
}

fn fold(graph: &Path, budget: Option<u64>, config: Option<&Path>, clock_hz: f64) -> Result<Value, Failure> {
    if !(clock_hz > 0.0) {
        return Err(usage("--clock-hz must be positive"));
    }
    let g = read_graph(graph)?;
    let cfg = match (budget, config) {
        (_, Some(p)) => {
            require(p)?;
            let text = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let mut cfg: FoldingConfig = serde_json::from_slice(&text).with_context(|| format!("parsing {}", p.display()))?;
            cfg.clock_hz = clock_hz;
            cfg
        }
        (Some(b), None) => folding::auto_fold(&g, b, clock_hz).map_err(anyhow::Error::from)?,
        (None, None) => FoldingConfig::all_ones(&g, clock_hz).map_err(anyhow::Error::from)?,
    };
    let violations = folding::validate_folding(&g, &cfg).map_err(anyhow::Error::from)?;
    if !violations.is_empty() {
        let detail = serde_json::to_string(&violations).map_err(anyhow::Error::from)?;
        return Err(Failure::Pipeline(anyhow!("invalid folding: {detail}")));
    }
    let estimate = folding::report_throughput(&g, &cfg).map_err(anyhow::Error::from)?;
    eprintln!("{:.1} fps at {} lanes; bottleneck node {}", estimate.fps_estimate, estimate.lanes, estimate.bottleneck);
    envelope("fold", json!({ "config": cfg, "estimate": estimate }))
}

fn infer(graph: &Path, image: &Path) -> Result<Value, Failure> {
    let g = read_graph(graph)?;
    require(image)?;
    let (rgb, w, h) = tiles::read_rgb(image).map_err(anyhow::Error::from)?;
    let exec = finnlite_core::exec::Executor::new(&g, finnlite_core::exec::Mode::Fast).map_err(anyhow::Error::from)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mut out = Vec::new();
    for mut t in tiles::split_frame(stem, w, h).map_err(anyhow::Error::from)? {
        let px = tiles::extract_tile(&rgb, w, &t);
        let r = exec.run(zoo::tile_to_input(&px, 32, 32)).map_err(anyhow::Error::from)?;
        let score = r.output.to_f64()[0];
        t.prediction = Some(score >= 0.0);
        t.score = Some(score);
        t.nanos = Some(r.total_nanos);
        out.push(t);
    }
    let positives = out.iter().filter(|t| t.prediction == Some(true)).count();
    eprintln!("{positives} of {} tiles classified as grape", out.len());
    envelope("infer", json!({ "image": image, "width": w, "height": h, "tiles": out }))
}

fn eval(a: &EvalArgs) -> Result<Value, Failure> {
    let split = Split::parse(&a.split).ok_or_else(|| usage(format!("unknown split {:?}", a.split)))?;
    if a.workers == 0 {
        return Err(usage("--workers must be at least 1"));
    }
    let g = read_graph(&a.graph)?;
    require(&a.data)?;
    let index = tiles::load_index(&a.data).map_err(anyhow::Error::from)?;
    let opts = EvalOptions { workers: a.workers, n_c: a.n_c, realtime_fps: a.realtime_fps };
    let (report, predictions) = tiles::evaluate(&g, &index, split, &opts).map_err(anyhow::Error::from)?;
    if let Some(p) = &a.plot {
        fs::write(p, report.plot_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    eprint!("{}", report.table());
    envelope("eval", json!({ "report": report, "predictions": predictions }))
}

fn bench(graph: &Path, runs: usize, opts: EvalOptions, seed: u64) -> Result<Value, Failure> {
    if runs == 0 || opts.workers == 0 {
        return Err(usage("--runs and --workers must be at least 1"));
    }
    let g = read_graph(graph)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<_> = (0..runs).map(|_| zoo::random_images(&mut rng, 1)).collect();
    let report = tiles::benchmark(&g, &inputs, &opts).map_err(anyhow::Error::from)?;
    eprintln!("{:.1} tiles/s, {:.1} frames/s over {} runs", report.fps.fps_chunk, report.fps.fps_image, report.runs);
    envelope("bench", report)
}

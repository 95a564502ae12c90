use std::path::PathBuf;

use thiserror::Error;

use crate::graph::NodeId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("element {0} is not exactly +1 or -1")]
    NonBipolarValue(usize),
    #[error("unsupported bit width {0}")]
    InvalidBits(u8),
    #[error("scale must be positive and finite, got {0}")]
    NonPositiveScale(f64),
    #[error("per-channel scale has {found} entries, expected {expected}")]
    ScaleLength { expected: usize, found: usize },
    #[error("shape holds {expected} elements but {found} were given")]
    ElementCount { expected: usize, found: usize },
    #[error("element {index} = {value} does not fit {bits}-bit two's complement")]
    OutOfRange { index: usize, value: i64, bits: u8 },
    #[error("element {index} is not finite")]
    NonFinite { index: usize },
    #[error("padding bits set in packed row {row}")]
    PaddingBitsSet { row: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KernelError {
    #[error("packed rows hold {found} words but length {len} needs {expected}")]
    LengthMismatch { len: usize, expected: usize, found: usize },
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },
    #[error("thresholds of channel {channel} are not increasing")]
    ThresholdsNotIncreasing { channel: usize },
    #[error("{0}")]
    Unsupported(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("shape mismatch on edge {from}->{to}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { from: NodeId, to: NodeId, expected: Vec<usize>, found: Vec<usize> },
    #[error("node {node}: {reason}")]
    InvalidNode { node: NodeId, reason: String },
    #[error("graph contains a cycle")]
    Cycle,
    #[error("malformed graph stream at byte {offset}: {reason}")]
    MalformedStream { offset: usize, reason: String },
    #[error("graph is invalid: {0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ExecError {
    #[error("node {node}: {source}")]
    Kernel { node: NodeId, source: KernelError },
    #[error("node {node}: missing weight tensor {name}")]
    MissingWeight { node: NodeId, name: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum BundleError {
    #[error("tensor {tensor}: expected {expected}, found {found}")]
    ManifestMismatch { tensor: String, expected: String, found: String },
    #[error("malformed bundle: {0}")]
    Malformed(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum StreamlineError {
    #[error("pass pipeline did not reach a fixpoint within {0} iterations")]
    FixpointNotReached(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FoldError {
    #[error("invalid folding for node {node}: {reason}")]
    InvalidFolding { node: NodeId, reason: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum ZooError {
    #[error("unsupported bit width {0}")]
    UnsupportedBits(u8),
    #[error("unknown model {0}")]
    UnknownModel(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}")]
    NumericalOverflow { epoch: usize },
    #[error("unsupported layer for training: {0}")]
    Unsupported(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("frame {width}x{height} is smaller than one {tile}x{tile} tile")]
    FrameTooSmall { width: u32, height: u32, tile: u32 },
    #[error("split {0} holds no tiles")]
    EmptySplit(String),
    #[error("no timings to average")]
    EmptyTimings,
    #[error("tiles per frame must be at least 1")]
    InvalidTileCount,
    #[error("worker pool: {0}")]
    WorkerPool(String),
    #[error("image error on {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Exec(#[from] ExecError),
}

/// Umbrella error for callers that drive several stages.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error(transparent)]
    Bundle(#[from] BundleError),
    #[error(transparent)]
    Streamline(#[from] StreamlineError),
    #[error(transparent)]
    Fold(#[from] FoldError),
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

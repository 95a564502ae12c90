//! Quantized dataflow compiler: IR, streamlining, folding and a
//! bit-exact integer executor for binarized and low-bit networks.

pub mod bundle;
pub mod exec;
pub mod folding;
pub mod error;
pub mod graph;
pub mod kernels;
pub mod qat;
pub mod qtensor;
pub mod streamline;
pub mod synth;
pub mod tiles;
pub mod zoo;

pub use bundle::{load_bundle, load_weights, save_bundle, save_weights, Weight};
pub use error::*;
pub use graph::{DataType, DataflowGraph, GraphBuilder, Node, NodeId, Op};
pub use qtensor::{FTensor, PackedBitTensor, QScale, QTensor};

//! Compute kernels for every node kind.
//!
//! Two flavors live here: the fast quantized path (XNOR-popcount for ±1
//! operands, im2col plus integer GEMM otherwise) and [`reference`], naive
//! nested loops over reals that serve as the oracle path. The fast path
//! accumulates in `i32`; graph validation guarantees the worst case fits.

mod bits;
mod conv;
mod pool;
pub mod reference;
pub mod scalar;
mod threshold;

pub use bits::{xnor_popcount_dot, xnor_popcount_unchecked};
pub use conv::{conv2d, conv2d_prepared, depthwise_conv2d, depthwise_conv2d_prepared, fully_connected, fully_connected_prepared, LayerWeights};
pub use pool::{avgpool_global, maxpool2d, maxpool_shape, sumpool_global};
pub use threshold::{multithreshold, multithreshold_int, ThresholdTable};

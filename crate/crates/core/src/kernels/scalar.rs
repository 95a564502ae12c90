//! Per-element arithmetic shared by the executor and the trainer, so both
//! evaluate the same expressions in the same order.

use crate::graph::ActMode;
use crate::qtensor::round_half_up;

/// Channel parameter with single-entry broadcast.
#[inline]
pub fn param(v: &[f64], channel: usize) -> f64 {
    if v.len() == 1 {
        v[0]
    } else {
        v[channel]
    }
}

#[inline]
pub fn batchnorm(x: f64, gamma: f64, beta: f64, mean: f64, var: f64, eps: f64) -> f64 {
    (x - mean) / (var + eps).sqrt() * gamma + beta
}

/// Inclusive code range of a quantizer.
pub fn code_range(mode: ActMode, bits: u8) -> (i32, i32) {
    let b = u32::from(bits);
    match mode {
        ActMode::Bipolar => (-1, 1),
        ActMode::Signed => (-(1 << (b - 1)), (1 << (b - 1)) - 1),
        ActMode::Unsigned => (0, (1 << b) - 1),
    }
}

/// Integer code of `y`: bipolar is `y ≥ 0 → +1`; uniform modes round half
/// up on the `step` grid and clamp to the code range.
#[inline]
pub fn quantize_activation(y: f64, mode: ActMode, bits: u8, step: f64) -> i32 {
    match mode {
        ActMode::Bipolar => {
            if y >= 0.0 {
                1
            } else {
                -1
            }
        }
        _ => {
            let (lo, hi) = code_range(mode, bits);
            round_half_up(y / step).clamp(f64::from(lo), f64::from(hi)) as i32
        }
    }
}

//! Tensor value types: bit-packed bipolar tensors, low-bit integer tensors
//! and the real-valued tensor used before streamlining and in oracles.
//!
//! All tensors are immutable once built. Layout is row-major over `shape`.

use serde::{Deserialize, Serialize};

use crate::error::TensorError;

/// Bit widths a [`QTensor`] may carry.
pub const SUPPORTED_BITS: [u8; 6] = [1, 2, 4, 8, 16, 32];

/// Number of bits in one packed word.
pub const WORD_BITS: usize = 64;

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Real-valued tensor. Only finite values are admitted.
#[derive(Debug, Clone, PartialEq)]
pub struct FTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl FTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if numel(&shape) != data.len() {
            return Err(TensorError::ElementCount { expected: numel(&shape), found: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Self { shape, data: vec![0.0; n] }
    }

    /// Builds a tensor without re-checking finiteness. Callers guarantee
    /// `data` came out of finite arithmetic on finite inputs.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if numel(&shape) != self.data.len() {
            return Err(TensorError::ElementCount { expected: numel(&shape), found: self.data.len() });
        }
        Ok(Self { shape, data: self.data })
    }
}

/// Quantization scale: one multiplier for the whole tensor or one per entry
/// along axis 0 (the output-channel axis of weight tensors).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QScale {
    PerTensor(f64),
    PerChannel(Vec<f64>),
}

impl QScale {
    pub fn for_index(&self, channel: usize) -> f64 {
        match self {
            QScale::PerTensor(s) => *s,
            QScale::PerChannel(v) => v[channel],
        }
    }
}

/// Signed integer tensor with bit width and scale metadata.
///
/// Every element fits `bits` as two's complement. `zero_point` is always 0
/// for the models built here (symmetric quantization) but is carried so
/// that bundles stay self-describing.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor {
    shape: Vec<usize>,
    data: Vec<i32>,
    bits: u8,
    scale: QScale,
    zero_point: i32,
}

pub(crate) fn int_range(bits: u8) -> (i64, i64) {
    let b = u32::from(bits);
    (-(1i64 << (b - 1)), (1i64 << (b - 1)) - 1)
}

/// Smallest supported width whose two's complement range holds `[lo, hi]`.
pub fn bits_for_range(lo: i64, hi: i64) -> u8 {
    for bits in SUPPORTED_BITS {
        let (min, max) = int_range(bits);
        if lo >= min && hi <= max {
            return bits;
        }
    }
    32
}

impl QTensor {
    pub fn new(
        shape: Vec<usize>,
        data: Vec<i32>,
        bits: u8,
        scale: QScale,
    ) -> Result<Self, TensorError> {
        if !SUPPORTED_BITS.contains(&bits) {
            return Err(TensorError::InvalidBits(bits));
        }
        if numel(&shape) != data.len() {
            return Err(TensorError::ElementCount { expected: numel(&shape), found: data.len() });
        }
        match &scale {
            QScale::PerTensor(s) => {
                if !(*s > 0.0) || !s.is_finite() {
                    return Err(TensorError::NonPositiveScale(*s));
                }
            }
            QScale::PerChannel(v) => {
                let channels = shape.first().copied().unwrap_or(1);
                if v.len() != channels {
                    return Err(TensorError::ScaleLength { expected: channels, found: v.len() });
                }
                if let Some(s) = v.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
                    return Err(TensorError::NonPositiveScale(*s));
                }
            }
        }
        let (lo, hi) = int_range(bits);
        if let Some(index) = data.iter().position(|&v| i64::from(v) < lo || i64::from(v) > hi) {
            return Err(TensorError::OutOfRange { index, value: i64::from(data[index]), bits });
        }
        Ok(Self { shape, data, bits, scale, zero_point: 0 })
    }

    /// Integer codes with unit scale, stored at the narrowest width that
    /// holds them.
    pub fn from_codes(shape: Vec<usize>, data: Vec<i32>) -> Result<Self, TensorError> {
        let lo = data.iter().copied().min().unwrap_or(0);
        let hi = data.iter().copied().max().unwrap_or(0);
        let bits = bits_for_range(i64::from(lo), i64::from(hi));
        Self::new(shape, data, bits, QScale::PerTensor(1.0))
    }

    /// Accumulator output of an integer kernel: 32-bit, unit scale.
    pub(crate) fn accumulator(shape: Vec<usize>, data: Vec<i32>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data, bits: 32, scale: QScale::PerTensor(1.0), zero_point: 0 }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn scale(&self) -> &QScale {
        &self.scale
    }

    pub fn zero_point(&self) -> i32 {
        self.zero_point
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self, TensorError> {
        if numel(&shape) != self.data.len() {
            return Err(TensorError::ElementCount { expected: numel(&shape), found: self.data.len() });
        }
        Ok(Self { shape, ..self })
    }

    /// Integer values as reals, ignoring scale.
    pub fn to_real_codes(&self) -> FTensor {
        FTensor::from_parts(self.shape.clone(), self.data.iter().map(|&v| f64::from(v)).collect())
    }
}

/// `data × scale` elementwise.
pub fn dequantize(q: &QTensor) -> FTensor {
    let channels = q.shape.first().copied().unwrap_or(1).max(1);
    let inner = q.data.len() / channels.max(1);
    let data = q
        .data
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = if inner == 0 { 0 } else { i / inner };
            f64::from(v - q.zero_point) * q.scale.for_index(c)
        })
        .collect();
    FTensor::from_parts(q.shape.clone(), data)
}

/// Rounds half-way cases towards +∞.
pub fn round_half_up(v: f64) -> f64 {
    (v + 0.5).floor()
}

/// `clamp(round(t / scale), −2^(bits−1), 2^(bits−1)−1)`.
pub fn quantize_uniform(t: &FTensor, bits: u8, scale: f64) -> Result<QTensor, TensorError> {
    if !matches!(bits, 2 | 4 | 8) {
        return Err(TensorError::InvalidBits(bits));
    }
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(TensorError::NonPositiveScale(scale));
    }
    let (lo, hi) = int_range(bits);
    let data = t
        .data
        .iter()
        .map(|&v| round_half_up(v / scale).clamp(lo as f64, hi as f64) as i32)
        .collect();
    QTensor::new(t.shape.clone(), data, bits, QScale::PerTensor(scale))
}

/// ±1 tensor packed one bit per element, 1 ↔ +1 and 0 ↔ −1.
///
/// The tensor is viewed as a matrix `[shape[0], product(shape[1..])]`; each
/// matrix row starts on a fresh word and bit `i % 64` of word `i / 64` holds
/// element `i` of the row. Bits past the row length are always zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBitTensor {
    shape: Vec<usize>,
    rows: usize,
    row_len: usize,
    words: Vec<u64>,
}

pub fn words_for(len: usize) -> usize {
    len.div_ceil(WORD_BITS)
}

fn matrix_view(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [n] => (1, *n),
        [rows, rest @ ..] => (*rows, numel(rest)),
    }
}

impl PackedBitTensor {
    /// Packs sign bits, `true` meaning +1.
    pub fn from_signs(shape: Vec<usize>, positive: &[bool]) -> Result<Self, TensorError> {
        if numel(&shape) != positive.len() {
            return Err(TensorError::ElementCount { expected: numel(&shape), found: positive.len() });
        }
        let (rows, row_len) = matrix_view(&shape);
        let wpr = words_for(row_len);
        let mut words = vec![0u64; rows * wpr];
        for r in 0..rows {
            let row_words = &mut words[r * wpr..(r + 1) * wpr];
            for (i, &p) in positive[r * row_len..(r + 1) * row_len].iter().enumerate() {
                if p {
                    row_words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
                }
            }
        }
        Ok(Self { shape, rows, row_len, words })
    }

    /// Rebuilds from a raw word stream, rejecting set padding bits.
    pub fn from_words(shape: Vec<usize>, words: Vec<u64>) -> Result<Self, TensorError> {
        let (rows, row_len) = matrix_view(&shape);
        let wpr = words_for(row_len);
        if words.len() != rows * wpr {
            return Err(TensorError::ElementCount { expected: rows * wpr, found: words.len() });
        }
        let tail = row_len % WORD_BITS;
        if tail != 0 {
            let mask = !((1u64 << tail) - 1);
            for r in 0..rows {
                if words[r * wpr + wpr - 1] & mask != 0 {
                    return Err(TensorError::PaddingBitsSet { row: r });
                }
            }
        }
        Ok(Self { shape, rows, row_len, words })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn words_per_row(&self) -> usize {
        words_for(self.row_len)
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn row(&self, r: usize) -> &[u64] {
        let wpr = self.words_per_row();
        &self.words[r * wpr..(r + 1) * wpr]
    }

    pub fn len(&self) -> usize {
        self.rows * self.row_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element `i` in logical row-major order, as ±1.
    pub fn get(&self, i: usize) -> i32 {
        let (r, c) = (i / self.row_len, i % self.row_len);
        let w = self.row(r)[c / WORD_BITS];
        if (w >> (c % WORD_BITS)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    pub fn to_signs(&self) -> Vec<i32> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    pub fn unpack(&self) -> FTensor {
        FTensor::from_parts(self.shape.clone(), self.to_signs().into_iter().map(f64::from).collect())
    }
}

/// Packs a tensor whose elements are all exactly ±1.
pub fn pack_bipolar(t: &FTensor) -> Result<PackedBitTensor, TensorError> {
    if let Some(index) = t.data.iter().position(|&v| v != 1.0 && v != -1.0) {
        return Err(TensorError::NonBipolarValue(index));
    }
    let signs: Vec<bool> = t.data.iter().map(|&v| v > 0.0).collect();
    PackedBitTensor::from_signs(t.shape.clone(), &signs)
}

pub fn unpack_bipolar(p: &PackedBitTensor) -> FTensor {
    p.unpack()
}

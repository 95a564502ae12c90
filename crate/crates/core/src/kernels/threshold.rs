use crate::error::KernelError;
use crate::qtensor::{FTensor, QTensor};

/// Validated per-channel threshold rows.
///
/// Holds either one row per channel or a single row broadcast to all
/// channels. Rows must be non-decreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdTable {
    rows: Vec<Vec<f64>>,
    pub out_scale: i32,
    pub out_offset: i32,
}

impl ThresholdTable {
    pub fn new(rows: Vec<Vec<f64>>, out_scale: i32, out_offset: i32) -> Result<Self, KernelError> {
        let width = rows.first().map_or(0, Vec::len);
        for (channel, row) in rows.iter().enumerate() {
            if row.len() != width {
                return Err(KernelError::ShapeMismatch { expected: vec![width], found: vec![row.len()] });
            }
            if row.iter().any(|t| t.is_nan()) || row.windows(2).any(|p| p[1] < p[0]) {
                return Err(KernelError::ThresholdsNotIncreasing { channel });
            }
        }
        if rows.is_empty() {
            return Err(KernelError::Unsupported("threshold table has no rows".into()));
        }
        Ok(Self { rows, out_scale, out_offset })
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    fn row_for(&self, channel: usize) -> &[f64] {
        if self.rows.len() == 1 {
            &self.rows[0]
        } else {
            &self.rows[channel]
        }
    }

    fn check_channels(&self, shape: &[usize]) -> Result<usize, KernelError> {
        let c = if shape.len() >= 2 { shape[1] } else { 1 };
        if self.rows.len() != 1 && self.rows.len() != c {
            return Err(KernelError::ShapeMismatch { expected: vec![self.rows.len()], found: vec![c] });
        }
        Ok(c)
    }

    /// `out_offset + out_scale · |{k : x ≥ row[k]}|`.
    #[inline]
    pub fn apply(&self, channel: usize, x: f64) -> i32 {
        let count = self.row_for(channel).partition_point(|&t| t <= x);
        self.out_offset + self.out_scale * count as i32
    }

    fn map(&self, shape: &[usize], len: usize, mut value: impl FnMut(usize) -> f64) -> Result<Vec<i32>, KernelError> {
        let c = self.check_channels(shape)?;
        let inner: usize = if shape.len() > 2 { shape[2..].iter().product() } else { 1 };
        Ok((0..len).map(|i| self.apply((i / inner.max(1)) % c.max(1), value(i))).collect())
    }
}

fn codes(shape: Vec<usize>, data: Vec<i32>) -> Result<QTensor, KernelError> {
    Ok(QTensor::from_codes(shape, data)?)
}

pub fn multithreshold(x: &FTensor, table: &ThresholdTable) -> Result<QTensor, KernelError> {
    let data = table.map(x.shape(), x.len(), |i| x.data()[i])?;
    codes(x.shape().to_vec(), data)
}

/// Thresholding of integer input; comparison is exact for integer-valued
/// thresholds.
pub fn multithreshold_int(x: &QTensor, table: &ThresholdTable) -> Result<QTensor, KernelError> {
    let data = table.map(x.shape(), x.len(), |i| f64::from(x.data()[i]))?;
    codes(x.shape().to_vec(), data)
}

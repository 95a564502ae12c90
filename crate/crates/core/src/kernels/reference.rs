//! Naive real-valued kernels. Slow on purpose; they are the oracle the fast
//! path is checked against.

use crate::error::KernelError;
use crate::qtensor::FTensor;

fn mismatch(expected: &[usize], found: &[usize]) -> KernelError {
    KernelError::ShapeMismatch { expected: expected.to_vec(), found: found.to_vec() }
}

pub fn conv2d(x: &FTensor, w: &FTensor, stride: usize, pad: usize) -> Result<FTensor, KernelError> {
    let (&[n, c, h, wd], &[oc, ic, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(mismatch(&[1, 1, 1, 1], x.shape()));
    };
    if ic != c || kh != kw || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(mismatch(&[n, ic, h.max(kh), wd.max(kw)], x.shape()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * oc * oh * ow];
    for b in 0..n {
        for o in 0..oc {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for i in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += wdat[((o * c + i) * kh + ky) * kw + kx]
                                    * xd[((b * c + i) * h + iy as usize) * wd + ix as usize];
                            }
                        }
                    }
                    out[((b * oc + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(FTensor::from_parts(vec![n, oc, oh, ow], out))
}

pub fn depthwise_conv2d(x: &FTensor, w: &FTensor, stride: usize, pad: usize) -> Result<FTensor, KernelError> {
    let (&[n, c, h, wd], &[wc, 1, kh, kw]) = (x.shape(), w.shape()) else {
        return Err(mismatch(&[1, 1, 1, 1], x.shape()));
    };
    if wc != c || stride == 0 || h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(mismatch(&[n, wc, h, wd], x.shape()));
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                continue;
                            }
                            acc += w.data()[(ch * kh + ky) * kw + kx] * x.data()[((b * c + ch) * h + iy as usize) * wd + ix as usize];
                        }
                    }
                    out[((b * c + ch) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(FTensor::from_parts(vec![n, c, oh, ow], out))
}

pub fn fully_connected(x: &FTensor, w: &FTensor) -> Result<FTensor, KernelError> {
    let (&[n, f], &[out_f, in_f]) = (x.shape(), w.shape()) else {
        return Err(mismatch(&[1, 1], x.shape()));
    };
    if f != in_f {
        return Err(mismatch(&[n, in_f], x.shape()));
    }
    let mut out = vec![0.0; n * out_f];
    for b in 0..n {
        for o in 0..out_f {
            let mut acc = 0.0;
            for i in 0..f {
                acc += w.data()[o * f + i] * x.data()[b * f + i];
            }
            out[b * out_f + o] = acc;
        }
    }
    Ok(FTensor::from_parts(vec![n, out_f], out))
}

pub fn maxpool2d(x: &FTensor, k: usize, stride: usize) -> Result<FTensor, KernelError> {
    let (shape, data) = super::maxpool2d(x.shape(), x.data(), k, stride)?;
    Ok(FTensor::from_parts(shape, data))
}

/// Global pooling; `mean` divides by the window size.
pub fn global_pool(x: &FTensor, mean: bool) -> Result<FTensor, KernelError> {
    let &[n, c, h, w] = x.shape() else {
        return Err(mismatch(&[1, 1, 1, 1], x.shape()));
    };
    let mut out = Vec::with_capacity(n * c);
    for p in 0..n * c {
        let mut acc = 0.0;
        for i in 0..h * w {
            acc += x.data()[p * h * w + i];
        }
        out.push(if mean { acc / (h * w) as f64 } else { acc });
    }
    Ok(FTensor::from_parts(vec![n, c], out))
}

/// Counts thresholds met by walking each row.
pub fn multithreshold(x: &FTensor, rows: &[Vec<f64>], out_scale: i32, out_offset: i32) -> Result<FTensor, KernelError> {
    let c = if x.shape().len() >= 2 { x.shape()[1] } else { 1 };
    if rows.len() != 1 && rows.len() != c {
        return Err(mismatch(&[rows.len()], &[c]));
    }
    let inner: usize = x.shape().iter().skip(2).product();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let row = if rows.len() == 1 { &rows[0] } else { &rows[(i / inner.max(1)) % c] };
            let mut count = 0;
            for &t in row {
                if v >= t {
                    count += 1;
                }
            }
            f64::from(out_offset + out_scale * count)
        })
        .collect();
    Ok(FTensor::from_parts(x.shape().to_vec(), data))
}

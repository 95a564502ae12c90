use crate::error::KernelError;
use crate::qtensor::{FTensor, QTensor};

/// Output shape of a `k×k` max pool with the given stride, no padding.
pub fn maxpool_shape(shape: &[usize], k: usize, stride: usize) -> Result<Vec<usize>, KernelError> {
    match shape {
        [n, c, h, w] if k > 0 && stride > 0 && *h >= k && *w >= k => {
            Ok(vec![*n, *c, (h - k) / stride + 1, (w - k) / stride + 1])
        }
        _ => Err(KernelError::ShapeMismatch { expected: vec![1, 1, k.max(1), k.max(1)], found: shape.to_vec() }),
    }
}

/// Max pool over `[N, C, H, W]` data of any ordered element type.
pub fn maxpool2d<T: Copy + PartialOrd>(shape: &[usize], data: &[T], k: usize, stride: usize) -> Result<(Vec<usize>, Vec<T>), KernelError> {
    let out_shape = maxpool_shape(shape, k, stride)?;
    let (h, w) = (shape[2], shape[3]);
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let planes = shape[0] * shape[1];
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = plane[oy * stride * w + ox * stride];
                for ky in 0..k {
                    for kx in 0..k {
                        let v = plane[(oy * stride + ky) * w + ox * stride + kx];
                        if v > best {
                            best = v;
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    Ok((out_shape, out))
}

fn global_dims(shape: &[usize]) -> Result<(usize, usize, usize), KernelError> {
    match shape {
        [n, c, h, w] if h * w > 0 => Ok((*n, *c, h * w)),
        _ => Err(KernelError::ShapeMismatch { expected: vec![1, 1, 1, 1], found: shape.to_vec() }),
    }
}

/// Mean over all spatial positions: `[N, C, H, W] → [N, C]`.
pub fn avgpool_global(x: &FTensor) -> Result<FTensor, KernelError> {
    let (n, c, hw) = global_dims(x.shape())?;
    let data = x.data().chunks_exact(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
    Ok(FTensor::from_parts(vec![n, c], data))
}

/// Sum over all spatial positions, exact in `i32`.
pub fn sumpool_global(x: &QTensor) -> Result<QTensor, KernelError> {
    let (n, c, hw) = global_dims(x.shape())?;
    let data = x.data().chunks_exact(hw).map(|p| p.iter().sum()).collect();
    Ok(QTensor::accumulator(vec![n, c], data))
}

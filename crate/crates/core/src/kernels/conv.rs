use crate::bundle::Weight;
use crate::error::KernelError;
use crate::qtensor::{words_for, PackedBitTensor, QTensor, WORD_BITS};

use super::bits::xnor_popcount_unchecked;

/// A weight tensor decoded once into the forms the kernels read: a dense
/// `[rows, cols]` integer matrix and, for ±1 weights, the packed rows.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub rows: usize,
    pub cols: usize,
    pub ints: Vec<i32>,
    pub packed: Option<PackedBitTensor>,
    pub shape: Vec<usize>,
}

impl LayerWeights {
    pub fn new(w: &Weight) -> Self {
        let shape = w.shape().to_vec();
        let rows = shape.first().copied().unwrap_or(1);
        let cols = shape.iter().skip(1).product();
        let packed = match w {
            Weight::Bipolar { tensor, .. } => Some(tensor.clone()),
            Weight::Int(_) => None,
        };
        Self { rows, cols, ints: w.to_i32(), packed, shape }
    }

    pub fn row(&self, r: usize) -> &[i32] {
        &self.ints[r * self.cols..(r + 1) * self.cols]
    }
}

fn is_bipolar(data: &[i32]) -> bool {
    data.iter().all(|&v| v == 1 || v == -1)
}

fn dims4(shape: &[usize]) -> Result<[usize; 4], KernelError> {
    match shape {
        [n, c, h, w] => Ok([*n, *c, *h, *w]),
        _ => Err(KernelError::ShapeMismatch { expected: vec![1, 1, 1, 1], found: shape.to_vec() }),
    }
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize, KernelError> {
    if stride == 0 || k == 0 {
        return Err(KernelError::Unsupported("kernel and stride must be positive".into()));
    }
    if input + 2 * pad < k {
        return Err(KernelError::ShapeMismatch { expected: vec![k], found: vec![input + 2 * pad] });
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

/// Lowers one image `[C, H, W]` to a `[C·k·k, OH·OW]` patch matrix.
fn im2col(img: &[i32], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, oh: usize, ow: usize) -> Vec<i32> {
    let p = oh * ow;
    let mut cols = vec![0i32; c * k * k * p];
    for ic in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ic * k + ky) * k + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &img[(ic * h + iy as usize) * w..(ic * h + iy as usize + 1) * w];
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[oy * ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// `out[r, p] = Σ_k w[r, k] · cols[k, p]`.
fn gemm_i32(w: &LayerWeights, cols: &[i32], p: usize, out: &mut [i32]) {
    for r in 0..w.rows {
        let acc = &mut out[r * p..(r + 1) * p];
        for (k, &wk) in w.row(r).iter().enumerate() {
            if wk == 0 {
                continue;
            }
            let src = &cols[k * p..(k + 1) * p];
            for (a, &x) in acc.iter_mut().zip(src) {
                *a += wk * x;
            }
        }
    }
}

/// Packs each output position's receptive field (pad 0) into words.
fn pack_patches(img: &[i32], c: usize, h: usize, w: usize, k: usize, stride: usize, oh: usize, ow: usize) -> Vec<u64> {
    let len = c * k * k;
    let wpr = words_for(len);
    let mut words = vec![0u64; oh * ow * wpr];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut words[(oy * ow + ox) * wpr..(oy * ow + ox + 1) * wpr];
            let mut bit = 0usize;
            for ic in 0..c {
                for ky in 0..k {
                    let base = (ic * h + oy * stride + ky) * w + ox * stride;
                    for kx in 0..k {
                        if img[base + kx] > 0 {
                            dst[bit / WORD_BITS] |= 1u64 << (bit % WORD_BITS);
                        }
                        bit += 1;
                    }
                }
            }
        }
    }
    words
}

/// Convolution over `[N, C, H, W]` integer input with prepared weights
/// `[OC, C, k, k]`; output is the raw `i32` accumulator.
pub fn conv2d_prepared(x: &QTensor, w: &LayerWeights, stride: usize, pad: usize) -> Result<QTensor, KernelError> {
    let [n, c, h, wd] = dims4(x.shape())?;
    let [oc, ic, k, k2] = dims4(&w.shape)?;
    if ic != c || k != k2 {
        return Err(KernelError::ShapeMismatch { expected: vec![n, ic, h, wd], found: x.shape().to_vec() });
    }
    let oh = out_dim(h, k, stride, pad)?;
    let ow = out_dim(wd, k, stride, pad)?;
    let p = oh * ow;
    let mut out = vec![0i32; n * oc * p];
    let img_len = c * h * wd;
    let use_xnor = w.packed.is_some() && pad == 0 && is_bipolar(x.data());
    for b in 0..n {
        let img = &x.data()[b * img_len..(b + 1) * img_len];
        let dst = &mut out[b * oc * p..(b + 1) * oc * p];
        if use_xnor {
            let packed = w.packed.as_ref().expect("checked above");
            let len = c * k * k;
            let wpr = words_for(len);
            let patches = pack_patches(img, c, h, wd, k, stride, oh, ow);
            for r in 0..oc {
                let wrow = packed.row(r);
                for q in 0..p {
                    dst[r * p + q] = xnor_popcount_unchecked(wrow, &patches[q * wpr..(q + 1) * wpr], len);
                }
            }
        } else if k == 1 && stride == 1 && pad == 0 {
            gemm_i32(w, img, p, dst);
        } else {
            let cols = im2col(img, c, h, wd, k, stride, pad, oh, ow);
            gemm_i32(w, &cols, p, dst);
        }
    }
    Ok(QTensor::accumulator(vec![n, oc, oh, ow], out))
}

pub fn conv2d(x: &QTensor, w: &Weight, stride: usize, pad: usize) -> Result<QTensor, KernelError> {
    conv2d_prepared(x, &LayerWeights::new(w), stride, pad)
}

/// One `k×k` filter per channel, weights `[C, 1, k, k]`.
pub fn depthwise_conv2d_prepared(x: &QTensor, w: &LayerWeights, stride: usize, pad: usize) -> Result<QTensor, KernelError> {
    let [n, c, h, wd] = dims4(x.shape())?;
    let [wc, one, k, k2] = dims4(&w.shape)?;
    if wc != c || one != 1 || k != k2 {
        return Err(KernelError::ShapeMismatch { expected: vec![n, wc, h, wd], found: x.shape().to_vec() });
    }
    let oh = out_dim(h, k, stride, pad)?;
    let ow = out_dim(wd, k, stride, pad)?;
    let mut out = vec![0i32; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let img = &x.data()[((b * c) + ch) * h * wd..((b * c) + ch + 1) * h * wd];
            let filt = w.row(ch);
            let dst = &mut out[((b * c) + ch) * oh * ow..((b * c) + ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0i32;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            acc += filt[ky * k + kx] * img[iy as usize * wd + ix as usize];
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    }
    Ok(QTensor::accumulator(vec![n, c, oh, ow], out))
}

pub fn depthwise_conv2d(x: &QTensor, w: &Weight, stride: usize, pad: usize) -> Result<QTensor, KernelError> {
    depthwise_conv2d_prepared(x, &LayerWeights::new(w), stride, pad)
}

/// `[N, F] × [OUT, F]ᵀ (+ bias) → [N, OUT]`.
pub fn fully_connected_prepared(x: &QTensor, w: &LayerWeights, bias: Option<&[i32]>) -> Result<QTensor, KernelError> {
    let [n, f] = match x.shape() {
        [n, f] => [*n, *f],
        other => return Err(KernelError::ShapeMismatch { expected: vec![1, w.cols], found: other.to_vec() }),
    };
    if f != w.cols {
        return Err(KernelError::ShapeMismatch { expected: vec![n, w.cols], found: x.shape().to_vec() });
    }
    if let Some(b) = bias {
        if b.len() != w.rows {
            return Err(KernelError::ShapeMismatch { expected: vec![w.rows], found: vec![b.len()] });
        }
    }
    let mut out = vec![0i32; n * w.rows];
    let use_xnor = w.packed.is_some() && is_bipolar(x.data());
    for b in 0..n {
        let row = &x.data()[b * f..(b + 1) * f];
        let dst = &mut out[b * w.rows..(b + 1) * w.rows];
        if use_xnor {
            let signs: Vec<bool> = row.iter().map(|&v| v > 0).collect();
            let xp = PackedBitTensor::from_signs(vec![f], &signs)?;
            let packed = w.packed.as_ref().expect("checked above");
            for (r, d) in dst.iter_mut().enumerate() {
                *d = xnor_popcount_unchecked(packed.row(r), xp.words(), f);
            }
        } else {
            for (r, d) in dst.iter_mut().enumerate() {
                *d = w.row(r).iter().zip(row).map(|(a, b)| a * b).sum();
            }
        }
        if let Some(bias) = bias {
            for (d, bv) in dst.iter_mut().zip(bias) {
                *d += bv;
            }
        }
    }
    Ok(QTensor::accumulator(vec![n, w.rows], out))
}

pub fn fully_connected(x: &QTensor, w: &Weight, bias: Option<&[i32]>) -> Result<QTensor, KernelError> {
    fully_connected_prepared(x, &LayerWeights::new(w), bias)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::reference;
    use crate::qtensor::{pack_bipolar, FTensor, QScale};
    use rand::{Rng, SeedableRng};

    fn int_weight(shape: Vec<usize>, data: Vec<i32>, bits: u8) -> Weight {
        Weight::Int(QTensor::new(shape, data, bits, QScale::PerTensor(1.0)).unwrap())
    }

    fn bip_weight(shape: Vec<usize>, data: &[i32]) -> Weight {
        let t = FTensor::new(shape, data.iter().map(|&v| f64::from(v)).collect()).unwrap();
        Weight::Bipolar { tensor: pack_bipolar(&t).unwrap(), scale: 1.0 }
    }

    #[test]
    fn cnv_first_layer_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let x = QTensor::from_codes(vec![1, 3, 32, 32], (0..3 * 32 * 32).map(|_| rng.gen_range(0..256)).collect()).unwrap();
        let wdata: Vec<i32> = (0..64 * 27).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        let out = conv2d(&x, &bip_weight(vec![64, 3, 3, 3], &wdata), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 64, 30, 30]);
    }

    #[test]
    fn identity_kernel_copies_input() {
        let x = QTensor::from_codes(vec![1, 1, 3, 3], (0..9).collect()).unwrap();
        let out = conv2d(&x, &int_weight(vec![1, 1, 1, 1], vec![1], 2), 1, 0).unwrap();
        assert_eq!(out.data(), x.data());
        let out = conv2d(&x, &bip_weight(vec![1, 1, 1, 1], &[1]), 1, 0).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn random_small_conv_matches_six_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x: Vec<i32> = (0..2 * 5 * 5).map(|_| rng.gen_range(-3..4)).collect();
        let w: Vec<i32> = (0..3 * 2 * 3 * 3).map(|_| rng.gen_range(-2..2)).collect();
        let xq = QTensor::from_codes(vec![1, 2, 5, 5], x.clone()).unwrap();
        let out = conv2d(&xq, &int_weight(vec![3, 2, 3, 3], w.clone(), 2), 1, 0).unwrap();
        // direct nested loops
        let mut expected = vec![0i32; 3 * 3 * 3];
        for oc in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    for ic in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                expected[(oc * 3 + oy) * 3 + ox] +=
                                    w[((oc * 2 + ic) * 3 + ky) * 3 + kx] * x[(ic * 5 + oy + ky) * 5 + ox + kx];
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(out.data(), expected.as_slice());
    }

    #[test]
    fn xnor_path_equals_integer_path() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let sign = |rng: &mut rand_chacha::ChaCha8Rng| if rng.gen::<bool>() { 1 } else { -1 };
        let x: Vec<i32> = (0..2 * 7 * 4 * 4).map(|_| sign(&mut rng)).collect();
        let w: Vec<i32> = (0..5 * 7 * 9).map(|_| sign(&mut rng)).collect();
        let xq = QTensor::from_codes(vec![2, 7, 4, 4], x).unwrap();
        let a = conv2d(&xq, &bip_weight(vec![5, 7, 3, 3], &w), 1, 0).unwrap();
        let lw = LayerWeights { packed: None, ..LayerWeights::new(&bip_weight(vec![5, 7, 3, 3], &w)) };
        let b = conv2d_prepared(&xq, &lw, 1, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn padded_strided_conv_matches_reference() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let x: Vec<i32> = (0..3 * 6 * 6).map(|_| rng.gen_range(0..16)).collect();
        let w: Vec<i32> = (0..4 * 3 * 9).map(|_| rng.gen_range(-8..8)).collect();
        let xq = QTensor::from_codes(vec![1, 3, 6, 6], x).unwrap();
        let wq = int_weight(vec![4, 3, 3, 3], w, 4);
        let fast = conv2d(&xq, &wq, 2, 1).unwrap();
        let slow = reference::conv2d(&xq.to_real_codes(), &FTensor::new(vec![4, 3, 3, 3], wq.to_i32().iter().map(|&v| f64::from(v)).collect()).unwrap(), 2, 1).unwrap();
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.data().iter().zip(slow.data()).all(|(a, b)| f64::from(*a) == *b));
    }

    #[test]
    fn depthwise_identity_and_stride() {
        let x = QTensor::from_codes(vec![1, 2, 2, 2], vec![1, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let w = int_weight(vec![2, 1, 1, 1], vec![1, 1], 2);
        assert_eq!(depthwise_conv2d(&x, &w, 1, 0).unwrap().data(), x.data());

        let x = QTensor::from_codes(vec![1, 1, 4, 4], (0..16).collect()).unwrap();
        let w = int_weight(vec![1, 1, 2, 2], vec![1, -1, 1, 0], 2);
        let out = depthwise_conv2d(&x, &w, 2, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 2, 2]);
        let naive = |oy: usize, ox: usize| {
            let at = |y: usize, x: usize| (y * 4 + x) as i32;
            at(2 * oy, 2 * ox) - at(2 * oy, 2 * ox + 1) + at(2 * oy + 1, 2 * ox)
        };
        assert_eq!(out.data(), &[naive(0, 0), naive(0, 1), naive(1, 0), naive(1, 1)]);
    }

    #[test]
    fn depthwise_channel_mismatch() {
        let x = QTensor::from_codes(vec![1, 3, 2, 2], vec![0; 12]).unwrap();
        let w = int_weight(vec![2, 1, 1, 1], vec![1, 1], 2);
        assert!(matches!(depthwise_conv2d(&x, &w, 1, 0), Err(KernelError::ShapeMismatch { .. })));
    }

    #[test]
    fn fc_shapes_and_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let x = QTensor::from_codes(vec![1, 256], (0..256).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect()).unwrap();
        let w: Vec<i32> = (0..512 * 256).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        let out = fully_connected(&x, &bip_weight(vec![512, 256], &w), None).unwrap();
        assert_eq!(out.shape(), &[1, 512]);

        let eye: Vec<i32> = (0..16).map(|i| i32::from(i % 5 == 0)).collect();
        let x = QTensor::from_codes(vec![1, 4], vec![3, -1, 0, 7]).unwrap();
        let out = fully_connected(&x, &int_weight(vec![4, 4], eye, 2), Some(&[0, 0, 0, 0])).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn fc_random_matches_dot_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let x: Vec<i32> = (0..2 * 6).map(|_| rng.gen_range(-8..8)).collect();
        let w: Vec<i32> = (0..3 * 6).map(|_| rng.gen_range(-8..8)).collect();
        let bias = [5, -3, 0];
        let out = fully_connected(&QTensor::from_codes(vec![2, 6], x.clone()).unwrap(), &int_weight(vec![3, 6], w.clone(), 4), Some(&bias)).unwrap();
        for b in 0..2 {
            for r in 0..3 {
                let dot: i32 = (0..6).map(|i| x[b * 6 + i] * w[r * 6 + i]).sum::<i32>() + bias[r];
                assert_eq!(out.data()[b * 3 + r], dot);
            }
        }
    }
}

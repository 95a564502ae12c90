use crate::error::KernelError;
use crate::qtensor::words_for;

/// Dot product of two packed ±1 rows of logical length `n`:
/// `2·popcount(XNOR(a, b)) − n` over the live bits.
///
/// Padding bits are zero in both operands, so XNOR sets them to one; they
/// are masked out of the final word.
pub fn xnor_popcount_dot(a: &[u64], b: &[u64], n: usize) -> Result<i32, KernelError> {
    let expected = words_for(n);
    for found in [a.len(), b.len()] {
        if found != expected {
            return Err(KernelError::LengthMismatch { len: n, expected, found });
        }
    }
    Ok(xnor_popcount_unchecked(a, b, n))
}

#[inline]
pub fn xnor_popcount_unchecked(a: &[u64], b: &[u64], n: usize) -> i32 {
    let full = n / 64;
    let mut matches: u32 = 0;
    for i in 0..full {
        matches += (!(a[i] ^ b[i])).count_ones();
    }
    let tail = n % 64;
    if tail != 0 {
        let mask = (1u64 << tail) - 1;
        matches += (!(a[full] ^ b[full]) & mask).count_ones();
    }
    2 * matches as i32 - n as i32
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qtensor::{pack_bipolar, FTensor};

    fn packed(v: &[f64]) -> Vec<u64> {
        pack_bipolar(&FTensor::new(vec![v.len()], v.to_vec()).unwrap()).unwrap().words().to_vec()
    }

    #[test]
    fn self_dot_is_length() {
        let a = packed(&[1.0, -1.0, 1.0, -1.0]);
        assert_eq!(xnor_popcount_dot(&a, &a, 4).unwrap(), 4);
    }

    #[test]
    fn anti_aligned_is_negative_length() {
        let a = packed(&[1.0, 1.0]);
        let b = packed(&[-1.0, -1.0]);
        assert_eq!(xnor_popcount_dot(&a, &b, 2).unwrap(), -2);
    }

    #[test]
    fn word_count_checked() {
        let a = packed(&[1.0; 65]);
        let err = xnor_popcount_dot(&a[..1], &a, 65).unwrap_err();
        assert_eq!(err, KernelError::LengthMismatch { len: 65, expected: 2, found: 1 });
    }

    #[test]
    fn random_pairs_match_integer_dot() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for n in 8..=512 {
            let x: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let y: Vec<f64> = (0..n).map(|_| if rng.gen::<bool>() { 1.0 } else { -1.0 }).collect();
            let expected: i32 = x.iter().zip(&y).map(|(a, b)| (a * b) as i32).sum();
            assert_eq!(xnor_popcount_dot(&packed(&x), &packed(&y), n).unwrap(), expected);
        }
    }
}

//! Blocked row-major matrix multiply used by matmul and the im2col
//! convolution paths.

use super::Real;

const N_BLOCK: usize = 512;
const K_BLOCK: usize = 256;

/// C[m x n] += A[m x k] * B[k x n], all row-major.
///
/// The innermost loop is an axpy over a column block of C, which keeps the
/// accumulation order fixed (deterministic) while still vectorizing.
pub fn gemm_acc<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut n0 = 0;
    while n0 < n {
        let n1 = (n0 + N_BLOCK).min(n);
        let mut k0 = 0;
        while k0 < k {
            let k1 = (k0 + K_BLOCK).min(k);
            for i in 0..m {
                let a_row = &a[i * k + k0..i * k + k1];
                let c_row = &mut c[i * n + n0..i * n + n1];
                for (kk, &aik) in a_row.iter().enumerate() {
                    let b_row = &b[(k0 + kk) * n + n0..(k0 + kk) * n + n1];
                    for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                        *cv = *cv + aik * bv;
                    }
                }
            }
            k0 = k1;
        }
        n0 = n1;
    }
}

/// Row-major transpose: returns B[n x m] from A[m x n].
pub fn transpose<T: Real>(m: usize, n: usize, a: &[T]) -> Vec<T> {
    debug_assert_eq!(a.len(), m * n);
    let mut out = vec![T::zero(); m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matches_naive_across_block_boundaries() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for &(m, k, n) in &[(1, 1, 1), (3, 7, 5), (4, 300, 600), (17, 513, 1025)] {
            let a: Vec<f64> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let b: Vec<f64> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut c = vec![0.0; m * n];
            gemm_acc(m, k, n, &a, &b, &mut c);
            let want = naive(m, k, n, &a, &b);
            for (x, y) in c.iter().zip(&want) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }
}

//! Dense matrix kernels shared by matmul and the convolution lowering.
//!
//! Loop orders are chosen so the innermost loop runs over contiguous output
//! and right-hand-side memory; accumulation order is fixed, so results are
//! bit-identical regardless of vector width.

use crate::tensor::Scalar;
use alloc::vec;
use alloc::vec::Vec;

/// C += A(m,k) * B(k,n), row-major.
pub(crate) fn matmul_nn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// C = A(m,k) * B(k,n).
pub(crate) fn matmul_nn<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_nn_acc(a, b, &mut c, m, k, n);
    c
}

/// C += A(m,k) * B(n,k)^T; inner loop is a dot product over k.
pub(crate) fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc = acc + av * bv;
            }
            crow[j] = crow[j] + acc;
        }
    }
}

/// C += A(k,m)^T * B(k,n); inner loop over contiguous rows of B and C.
pub(crate) fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == S::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.3 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.7 - 3.0).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        assert_eq!(matmul_nn(&a, &b, m, k, n), naive);

        // A * B^T with B stored transposed.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c = vec![0.0; m * n];
        matmul_nt_acc(&a, &bt, &mut c, m, k, n);
        assert_eq!(c, naive);

        // A^T * B with A stored transposed.
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        matmul_tn_acc(&at, &b, &mut c2, m, k, n);
        assert_eq!(c2, naive);
    }
}

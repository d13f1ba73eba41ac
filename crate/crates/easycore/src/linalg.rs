//! Dense row-major f64 kernels shared by the tape and its backward rules.
//!
//! Accumulation order inside every output element is fixed (sequential over
//! the contraction index), and parallelism is only ever over disjoint output
//! rows, so results are bitwise identical for any thread count.

use rayon::prelude::*;

/// Work threshold below which the serial path is used.
const PAR_FLOPS: usize = 1 << 17;

/// C[m,n] = A[m,k] * B[k,n]
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    let row = |i: usize, out_row: &mut [f64]| {
        for kk in 0..k {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[kk * n..kk * n + n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(n).enumerate() {
            row(i, out_row);
        }
    }
    out
}

/// C[m,k] = A[m,n] * B[k,n]^T  (i.e. A * B-transposed; rows of B are dotted)
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * k];
    let row = |i: usize, out_row: &mut [f64]| {
        let arow = &a[i * n..i * n + n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * n..j * n + n];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * n * k >= PAR_FLOPS {
        out.par_chunks_mut(k)
            .enumerate()
            .for_each(|(i, out_row)| row(i, out_row));
    } else {
        for (i, out_row) in out.chunks_mut(k).enumerate() {
            row(i, out_row);
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    let mut out = vec![0.0; k * n];
    let row = |kk: usize, out_row: &mut [f64]| {
        for i in 0..m {
            let aik = a[i * k + kk];
            if aik == 0.0 {
                continue;
            }
            let brow = &b[i * n..i * n + n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(kk, out_row)| row(kk, out_row));
    } else {
        for (kk, out_row) in out.chunks_mut(n).enumerate() {
            row(kk, out_row);
        }
    }
    out
}

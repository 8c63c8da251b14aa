//! Dense CPU kernels. Parallel loops split only over independent output
//! rows, so results do not depend on the thread count.

use rayon::prelude::*;

const PAR_WORK: usize = 1 << 15;
/// Row block handed to one task. Fixed, so the work split never depends on
/// the number of threads.
const ROW_BLOCK: usize = 64;

/// `C[m,n] = A[m,k] B[k,n]` with explicit element strides for `A` and `B`.
#[allow(clippy::too_many_arguments)]
fn gemm_strided(
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    m: usize,
    k: usize,
    n: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let block = |(blk, out): (usize, &mut [f64])| {
        let rows = out.len() / n;
        let a0 = (blk * ROW_BLOCK) as isize * rsa;
        // SAFETY: every index touched lies inside `a`, `b` and `out` by the
        // shapes and strides checked by the callers.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.as_ptr().offset(a0),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * k * n >= PAR_WORK && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    } else {
        c.chunks_mut(ROW_BLOCK * n).enumerate().for_each(block);
    }
    c
}

/// `C[m,n] = A[m,k] B[k,n]`, all row-major.
pub(crate) fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm_strided(a, k as isize, 1, b, n as isize, 1, m, k, n)
}

/// `C[m,n] = A[k,m]^T B[k,n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm_strided(a, 1, m as isize, b, n as isize, 1, m, k, n)
}

/// `C[m,n] = A[m,k] B[n,k]^T`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert!(a.len() >= m * k && b.len() >= k * n);
    gemm_strided(a, k as isize, 1, b, 1, k as isize, m, k, n)
}

#[cfg(test)]
fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut t = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}

/// Batched `C[b] = A[b] B[b]` (or `A[b] B[b]^T` with `trans_b`).
pub(crate) fn bmm(a: &[f64], b: &[f64], batch: usize, m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    if m * n == 0 {
        return c;
    }
    let one = |(t, out): (usize, &mut [f64])| {
        let at = &a[t * m * k..(t + 1) * m * k];
        let bt = &b[t * k * n..(t + 1) * k * n];
        let r = if trans_b {
            gemm_nt(at, bt, m, k, n)
        } else {
            gemm(at, bt, m, k, n)
        };
        out.copy_from_slice(&r);
    };
    if batch > 1 && batch * m * k * n >= PAR_WORK {
        c.par_chunks_mut(m * n).enumerate().for_each(one);
    } else {
        c.chunks_mut(m * n).enumerate().for_each(one);
    }
    c
}

//! Small dense linear algebra: f64 GEMM wrappers and Cholesky routines.

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{DinError, Result};

/// Strided C = A * B core. Splits the n axis into fixed equal chunks when
/// the product is large, one independent dgemm per chunk writing a disjoint
/// column block of C. Chunk boundaries depend only on the shapes and the
/// pool size, so a given thread configuration always reproduces the same
/// bytes.
#[allow(clippy::too_many_arguments)]
fn gemm_core(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    beta: f64,
    c: *mut f64,
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(csb >= 0 && csc >= 0, "negative column strides unsupported");
    let threads = rayon::current_num_threads();
    let flops = 2.0 * m as f64 * k as f64 * n as f64;
    if threads <= 1 || flops < 4.0e6 || n < 2 * threads {
        unsafe {
            matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
        }
        return;
    }
    let chunk = n.div_ceil(threads);
    let blocks: Vec<(usize, usize)> = (0..threads)
        .map(|t| (t * chunk, ((t + 1) * chunk).min(n)))
        .filter(|(s, e)| s < e)
        .collect();
    let a_addr = a as usize;
    let b_addr = b as usize;
    let c_addr = c as usize;
    blocks.par_iter().for_each(|&(s, e)| {
        let cols = e - s;
        unsafe {
            matrixmultiply::dgemm(
                m, k, cols, 1.0,
                a_addr as *const f64, rsa, csa,
                (b_addr as *const f64).offset(s as isize * csb), rsb, csb,
                beta,
                (c_addr as *mut f64).offset(s as isize * csc), rsc, csc,
            );
        }
    });
}

/// C = A (m x k) * B (k x n), all row-major contiguous slices.
pub fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    gemm_core(
        m, k, n,
        a.as_ptr(), k as isize, 1,
        b.as_ptr(), n as isize, 1,
        0.0,
        c.as_mut_ptr(), n as isize, 1,
    );
}

/// C = A * B written into a row-major `out` slice of length m*n.
pub fn matmul_into(a: &ArrayView2<f64>, b: &ArrayView2<f64>, out: &mut [f64]) {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul_into inner dims {k} vs {k2}");
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = strides2(a);
    let (rsb, csb) = strides2(b);
    gemm_core(
        m, k, n,
        a.as_ptr(), rsa, csa,
        b.as_ptr(), rsb, csb,
        0.0,
        out.as_mut_ptr(), n as isize, 1,
    );
}

/// C = A^T * B written into a row-major `out` slice; A given as (k x m).
pub fn matmul_tn_into(a: &ArrayView2<f64>, b: &ArrayView2<f64>, out: &mut [f64]) {
    let t = a.t();
    matmul_into(&t, b, out);
}

/// C += A * B^T for B given as (n x k); used to accumulate per-sample
/// weight-gradient contributions without temporaries.
pub fn matmul_nt_acc(a: &ArrayView2<f64>, b: &ArrayView2<f64>, c: &mut Array2<f64>) {
    let (m, k) = a.dim();
    let (n, k2) = b.dim();
    assert_eq!(k, k2, "matmul_nt_acc inner dims {k} vs {k2}");
    assert_eq!(c.dim(), (m, n), "matmul_nt_acc output shape");
    let bt = b.t();
    let (rsa, csa) = strides2(a);
    let (rsb, csb) = strides2(&bt);
    let cs = c.as_slice_mut().expect("matmul_nt_acc output must be contiguous");
    gemm_core(
        m, k, n,
        a.as_ptr(), rsa, csa,
        bt.as_ptr(), rsb, csb,
        1.0,
        cs.as_mut_ptr(), n as isize, 1,
    );
}

fn strides2(v: &ArrayView2<f64>) -> (isize, isize) {
    let s = v.strides();
    (s[0], s[1])
}

/// A (m x k) * B (k x n), stride-aware (no repacking of either operand).
pub fn matmul(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, n) = b.dim();
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let (rsa, csa) = strides2(a);
    let (rsb, csb) = strides2(b);
    let mut c = Array2::<f64>::zeros((m, n));
    gemm_core(
        m, k, n,
        a.as_ptr(), rsa, csa,
        b.as_ptr(), rsb, csb,
        0.0,
        c.as_mut_ptr(), n as isize, 1,
    );
    c
}

/// A (m x k) * B^T for B given as (n x k).
pub fn matmul_nt(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let t = b.t();
    matmul(a, &t)
}

/// A^T * B for A given as (k x m), B as (k x n).
pub fn matmul_tn(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    let t = a.t();
    matmul(&t, b)
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Array2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(DinError::shape(format!("cholesky needs square input, got {:?}", a.dim())));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(DinError::numerical(format!(
                        "cholesky failed at pivot {i} (value {s:.3e}); matrix not positive definite"
                    )));
                }
                l[[i, i]] = s.sqrt();
            } else {
                l[[i, j]] = s / l[[j, j]];
            }
        }
    }
    Ok(l)
}

/// Solve A x = b given the Cholesky factor L of A (forward then back substitution).
pub fn cholesky_solve(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    debug_assert_eq!(b.len(), n);
    let mut y = b.clone();
    for i in 0..n {
        let mut s = y[i];
        for k in 0..i {
            s -= l[[i, k]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in (i + 1)..n {
            s -= l[[k, i]] * y[k];
        }
        y[i] = s / l[[i, i]];
    }
    y
}

/// Inverse of an SPD matrix from its Cholesky factor, symmetrized.
pub fn spd_inverse(l: &Array2<f64>) -> Array2<f64> {
    let n = l.nrows();
    let mut inv = Array2::<f64>::zeros((n, n));
    let mut e = Array1::<f64>::zeros(n);
    for j in 0..n {
        e.fill(0.0);
        e[j] = 1.0;
        let col = cholesky_solve(l, &e);
        inv.column_mut(j).assign(&col);
    }
    // enforce exact symmetry
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[[i, j]] + inv[[j, i]]);
            inv[[i, j]] = v;
            inv[[j, i]] = v;
        }
    }
    inv
}

//! Inner loops shared by the tape's forward and backward rules. All loops have
//! a fixed traversal order so results do not depend on scheduling.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Scalar;

/// Dot product with eight partial sums combined in a fixed order.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `y += x · a`.
#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], x: T, a: &[T]) {
    for (y, &v) in y.iter_mut().zip(a) {
        *y += x * v;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`, all row-major.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n < 8 && k >= 8 {
        let bt = transpose(b, k, n);
        gemm_nt_dot(a, &bt, c, m, n, k);
        return;
    }
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..(i + 4) * n].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, c3) = rest.split_at_mut(n);
        let rows = &a[i * k..(i + 4) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let (x0, x1, x2, x3) = (rows[p], rows[k + p], rows[2 * k + p], rows[3 * k + p]);
            let lanes = c0.iter_mut().zip(c1.iter_mut()).zip(c2.iter_mut()).zip(c3.iter_mut());
            for ((((y0, y1), y2), y3), &bv) in lanes.zip(brow) {
                *y0 += x0 * bv;
                *y1 += x1 * bv;
                *y2 += x2 * bv;
                *y3 += x3 * bv;
            }
        }
        i += 4;
    }
    while i < m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &x) in arow.iter().enumerate() {
            axpy(crow, x, &b[p * n..(p + 1) * n]);
        }
        i += 1;
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ` as row dot products.
fn gemm_nt_dot<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * n..(j + 1) * n]);
        }
    }
}

/// Transpose of a row-major `rows × cols` matrix.
pub fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `da[m,k] += g[m,n] · b[k,n]ᵀ`.
pub fn gemm_nt_acc<T: Scalar>(g: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    if n >= 8 {
        gemm_nt_dot(g, b, da, m, k, n);
    } else {
        let bt = transpose(b, k, n);
        gemm_acc(g, &bt, da, m, n, k);
    }
}

/// `db[k,n] += a[m,k]ᵀ · g[m,n]`.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], g: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    if n >= 8 {
        for i in 0..m {
            let grow = &g[i * n..(i + 1) * n];
            for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
                axpy(&mut db[p * n..(p + 1) * n], x, grow);
            }
        }
    } else {
        let at = transpose(a, m, k);
        gemm_acc(&at, g, db, k, m, n);
    }
}

pub fn gelu<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * x * (T::one() + (x * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    let cdf = half * (T::one() + (x * T::of(core::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::of(0.398_942_280_401_432_7);
    cdf + x * pdf
}

// Row-major dense kernels. Every reduction runs left to right in a fixed
// order so results do not depend on scheduling.

use super::Scalar;

/// out[m×n] = a[m×k] · b[k×n]
pub(crate) fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|x| *x = F::zero());
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
}

/// da[m×k] += g[m×n] · b[k×n]ᵀ
pub(crate) fn matmul_grad_lhs<F: Scalar>(g: &[F], b: &[F], m: usize, k: usize, n: usize, da: &mut [F]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = F::zero();
            for (&gv, &bv) in grow.iter().zip(brow) {
                acc += gv * bv;
            }
            da[i * k + p] += acc;
        }
    }
}

/// db[k×n] += a[m×k]ᵀ · g[m×n]
pub(crate) fn matmul_grad_rhs<F: Scalar>(a: &[F], g: &[F], m: usize, k: usize, n: usize, db: &mut [F]) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let drow = &mut db[p * n..(p + 1) * n];
            for (d, &gv) in drow.iter_mut().zip(grow) {
                *d += aip * gv;
            }
        }
    }
}

/// Numerically stable softmax of `row / t`, written into `out`.
pub(crate) fn softmax_row<F: Scalar>(row: &[F], t: F, out: &mut [F]) {
    let mut max = row[0];
    for &x in &row[1..] {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = ((x - max) / t).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// log-softmax of `row / t` via log-sum-exp.
pub(crate) fn log_softmax_row<F: Scalar>(row: &[F], t: F, out: &mut [F]) {
    let mut max = row[0];
    for &x in &row[1..] {
        if x > max {
            max = x;
        }
    }
    let mut sum = F::zero();
    for &x in row {
        sum += ((x - max) / t).exp();
    }
    let lse = sum.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max) / t - lse;
    }
}

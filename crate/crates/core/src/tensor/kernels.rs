//! Raw slice kernels shared by the primitive ops.

use alloc::vec;
use alloc::vec::Vec;

/// For every flat index of `big`, the flat index of the element of `small`
/// it maps to when `small` (same rank, dims equal or 1) is broadcast.
pub(crate) fn broadcast_map(small: &[usize], big: &[usize]) -> Vec<usize> {
    debug_assert_eq!(small.len(), big.len());
    let rank = big.len();
    let mut small_strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        small_strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let total: usize = big.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..total {
        out.push(pos);
        // odometer increment
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += small_strides[d];
            if idx[d] < big[d] {
                break;
            }
            pos -= small_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

/// `(outer, n, inner)` factorization of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

/// out[k,n] += a[m,k]^T * b[m,n]
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_map_rows() {
        // (1,3) -> (2,3)
        assert_eq!(broadcast_map(&[1, 3], &[2, 3]), vec![0, 1, 2, 0, 1, 2]);
        // (2,1) -> (2,3)
        assert_eq!(broadcast_map(&[2, 1], &[2, 3]), vec![0, 0, 0, 1, 1, 1]);
        // (1,1,2) -> (2,2,2)
        assert_eq!(broadcast_map(&[1, 1, 2], &[2, 2, 2]), vec![0, 1, 0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0, 1.0, 1.0, 1.0, 2.0, 0.0, 1.0]; // 3x4
        let mut c = [0.0; 8];
        gemm_nn(&a, &b, &mut c, 2, 3, 4);
        assert_eq!(c, [4.0, 12.0, 4.0, 6.0, 10.0, 27.0, 13.0, 15.0]);
        // b^T is 4x3
        let mut bt = [0.0; 12];
        for p in 0..3 {
            for j in 0..4 {
                bt[j * 3 + p] = b[p * 4 + j];
            }
        }
        let mut c2 = [0.0; 8];
        gemm_nt(&a, &bt, &mut c2, 2, 3, 4);
        assert_eq!(c, c2);
        // a^T stored as 3x2; gemm_tn computes (a^T)^T b
        let mut at = [0.0; 6];
        for i in 0..2 {
            for p in 0..3 {
                at[p * 2 + i] = a[i * 3 + p];
            }
        }
        let mut c3 = [0.0; 8];
        gemm_tn(&at, &b, &mut c3, 3, 2, 4);
        assert_eq!(c, c3);
    }
}

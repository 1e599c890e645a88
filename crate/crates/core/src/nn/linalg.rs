//! Plain dense kernels on row-major slices.

use crate::scalar::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// `out[m×n] += aᵀ · b` where `a` is `k×m` and `b` is `k×n`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], k: usize, m: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a · bᵀ` where `a` is `m×k` and `b` is `n×k`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            out[i * n + j] += s;
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Divides each row by its sum. Returns the row sums, or the index of the
/// first row whose sum is not strictly positive.
pub fn row_normalize<T: Scalar>(a: &[T], n: usize, cols: usize) -> Result<(Vec<T>, Vec<T>), usize> {
    let mut out = a.to_vec();
    let mut sums = Vec::with_capacity(n);
    for i in 0..n {
        let row = &mut out[i * cols..(i + 1) * cols];
        let s: T = row.iter().copied().sum();
        if s.partial_cmp(&T::zero()) != Some(std::cmp::Ordering::Greater) {
            return Err(i);
        }
        row.iter_mut().for_each(|v| *v /= s);
        sums.push(s);
    }
    Ok((out, sums))
}

/// Backward of [`row_normalize`]: given `dP` and `P`, returns `dA`.
pub fn row_normalize_backward<T: Scalar>(dp: &[T], p: &[T], sums: &[T], cols: usize) -> Vec<T> {
    let mut da = vec![T::zero(); dp.len()];
    for (i, &s) in sums.iter().enumerate() {
        let r = i * cols..(i + 1) * cols;
        let dot: T = dp[r.clone()].iter().zip(&p[r.clone()]).map(|(&g, &v)| g * v).sum();
        for j in r {
            da[j] = (dp[j] - dot) / s;
        }
    }
    da
}

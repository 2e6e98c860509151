//! Dense row-major matrix kernels shared by the forward and backward passes.

/// `c = a · b` (or `c += a · b` when `accumulate`), all row-major.
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above and all strides describe
    // contiguous row-major buffers of exactly those sizes.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `da += dc · bᵀ` where `b` is `[k × n]` and `dc` is `[m × n]`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, dc: &[f64], b: &[f64], da: &mut [f64]) {
    assert_eq!(dc.len(), m * n);
    assert_eq!(b.len(), k * n);
    assert_eq!(da.len(), m * k);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: bᵀ is read through swapped strides of the same k×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            n,
            k,
            1.0,
            dc.as_ptr(),
            n as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            1.0,
            da.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `db += aᵀ · dc` where `a` is `[m × k]` and `dc` is `[m × n]`.
pub(crate) fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], dc: &[f64], db: &mut [f64]) {
    assert_eq!(a.len(), m * k);
    assert_eq!(dc.len(), m * n);
    assert_eq!(db.len(), k * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: aᵀ is read through swapped strides of the same m×k buffer.
    unsafe {
        matrixmultiply::dgemm(
            k,
            m,
            n,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            dc.as_ptr(),
            n as isize,
            1,
            1.0,
            db.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_variants_agree_with_naive() {
        let (m, k, n) = (5, 3, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let dc: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.13).sin()).collect();

        // da = dc · bᵀ
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let want = naive(m, n, k, &dc, &bt);
        let mut da = vec![0.0; m * k];
        gemm_nt_acc(m, k, n, &dc, &b, &mut da);
        for (x, y) in da.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // db = aᵀ · dc
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let want = naive(k, m, n, &at, &dc);
        let mut db = vec![0.0; k * n];
        gemm_tn_acc(m, k, n, &a, &dc, &mut db);
        for (x, y) in db.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-1e6) >= 0.0 && sigmoid(-1e6) < 1e-300);
        assert_eq!(sigmoid(1e6), 1.0);
    }
}

//! Raw slice kernels shared by the tape and by the standalone pipelines, so
//! both produce bit-identical values.

/// `c[m×n] = op(a) · op(b)` where each operand is read through row and
/// column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // SAFETY: the strides address only elements inside `a` and `b`, whose
    // lengths the callers assert, and `c` is a fresh dense m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    gemm(m, k, n, a, k, 1, b, n, 1)
}

/// `c[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    gemm(m, k, n, a, k, 1, b, 1, k)
}

/// `c[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), m * n);
    gemm(k, m, n, a, 1, k, b, n, 1)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Adds `row` to every row of `a[m×n]`.
pub fn add_row(a: &[f64], row: &[f64]) -> Vec<f64> {
    let n = row.len();
    a.chunks_exact(n)
        .flat_map(|r| r.iter().zip(row).map(|(x, b)| x + b))
        .collect()
}

/// Column sums of `g[m×n]`.
pub fn sum_rows(g: &[f64], n: usize) -> Vec<f64> {
    let mut s = vec![0.0; n];
    for r in g.chunks_exact(n) {
        for (acc, v) in s.iter_mut().zip(r) {
            *acc += v;
        }
    }
    s
}

/// Index of the first element with the largest magnitude. NaN compares as
/// smaller than everything.
pub fn argmax_abs(a: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in a.iter().enumerate() {
        if v.abs() > best_v {
            best_v = v.abs();
            best = i;
        }
    }
    best
}

pub fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

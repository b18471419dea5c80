//! Row-major dense products on `f64` slices, backed by `matrixmultiply`.

/// `c = a * b (+ c if accumulate)`, with `a: m x k`, `b: k x n`, `c: m x n`.
pub fn matmul(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    gemm(m, k, n, a, (k, 1), b, (n, 1), c, accumulate);
}

/// `c = a^T * b (+ c)`, with `a: k x m`, `b: k x n`, `c: m x n`.
pub fn matmul_at_b(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    gemm(m, k, n, a, (1, m), b, (n, 1), c, accumulate);
}

/// `c = a * b^T (+ c)`, with `a: m x k`, `b: n x k`, `c: m x n`.
pub fn matmul_a_bt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize, accumulate: bool) {
    gemm(m, k, n, a, (k, 1), b, (1, k), c, accumulate);
}

#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too short");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above bounds every access for the given strides,
    // which address exactly the m*k, k*n and m*n row/column-major blocks.
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
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

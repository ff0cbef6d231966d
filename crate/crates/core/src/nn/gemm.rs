//! Thin wrapper over `matrixmultiply::dgemm` for row-major buffers.

/// `c = op(a) · op(b) + beta · c` where `op(a)` is `[m × k]` and `op(b)` is `[k × n]`.
///
/// With `a_t` set, `a` is stored as `[k × m]`; with `b_t`, `b` is stored as `[n × k]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the row-major or transposed views checked above.
    unsafe { gemm_strided(m, k, n, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, c, n as isize, beta) };
}

/// Fully strided variant used for column slices (attention heads).
///
/// # Safety
/// `a` and `b` must point into live allocations covering the strided
/// `[m × k]` and `[k × n]` views; `c` must cover `[m × n]` at row stride `rsc`.
#[allow(clippy::too_many_arguments)]
pub(crate) unsafe fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    rsc: isize,
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            let row = &mut c[i * rsc as usize..i * rsc as usize + n];
            row.iter_mut().for_each(|v| *v = if beta == 0.0 { 0.0 } else { *v * beta });
        }
        return;
    }
    debug_assert!(c.len() >= (m - 1) * rsc as usize + n);
    // SAFETY: guaranteed by the caller contract above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a,
            rsa,
            csa,
            b,
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            1,
        );
    }
}

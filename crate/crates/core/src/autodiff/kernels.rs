//! Raw dense kernels shared by the tape's forward and backward passes.

/// GELU tanh-approximation constant, `sqrt(2 / pi)`.
pub const GELU_COEFF: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Value written into masked attention scores. Finite so the finiteness
/// check stays meaningful; `exp(MASK_VALUE - max)` underflows to exactly 0.
pub const MASK_VALUE: f64 = -1.0e30;

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), row-major, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`. A transposed operand is stored
/// in its untransposed layout (`k x m` or `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the `m*k`, `k*n` and `m*n`
    // elements of the slices, whose lengths are asserted in debug builds and
    // guaranteed by every caller in this crate.
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

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + gelu_tanh(x))
}

/// The `tanh` term of [`gelu`], cached by the tape for the backward pass.
pub fn gelu_tanh(x: f64) -> f64 {
    (GELU_COEFF * (x + GELU_CUBIC * x * x * x)).tanh()
}

pub fn gelu_grad(x: f64) -> f64 {
    gelu_grad_with_tanh(x, gelu_tanh(x))
}

/// [`gelu_grad`] given `t = gelu_tanh(x)`.
pub fn gelu_grad_with_tanh(x: f64, t: f64) -> f64 {
    let du = GELU_COEFF * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// In-place numerically stable softmax of one row.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// `log(sum(exp(row)))`, stable for large magnitudes.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

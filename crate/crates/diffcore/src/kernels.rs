//! Dense kernels shared by the graph ops.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major buffers.
///
/// `a` is `m x k` and `b` is `k x n`; the transposes are expressed by
/// swapping strides so no copies are made.
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
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices are bounds-checked above and the strides describe
    // exactly the m x k / k x n / m x n row-major views.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Channel-last im2col: rows are `(batch, out_t)`, columns are `(tap, channel)`.
pub(crate) fn im2col(
    x: &[f64],
    batch: usize,
    t_in: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Vec<f64> {
    let row = kernel * cin;
    let mut cols = vec![0.0; batch * t_out * row];
    for b in 0..batch {
        for to in 0..t_out {
            let dst = &mut cols[(b * t_out + to) * row..(b * t_out + to + 1) * row];
            for kk in 0..kernel {
                let ti = (to * stride + kk) as isize - pad as isize;
                if ti < 0 || ti as usize >= t_in {
                    continue;
                }
                let src = (b * t_in + ti as usize) * cin;
                dst[kk * cin..(kk + 1) * cin].copy_from_slice(&x[src..src + cin]);
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im(
    cols: &[f64],
    batch: usize,
    t_in: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    dx: &mut [f64],
) {
    let row = kernel * cin;
    for b in 0..batch {
        for to in 0..t_out {
            let src = &cols[(b * t_out + to) * row..(b * t_out + to + 1) * row];
            for kk in 0..kernel {
                let ti = (to * stride + kk) as isize - pad as isize;
                if ti < 0 || ti as usize >= t_in {
                    continue;
                }
                let dst = (b * t_in + ti as usize) * cin;
                for (d, s) in dx[dst..dst + cin].iter_mut().zip(&src[kk * cin..(kk + 1) * cin]) {
                    *d += s;
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub(crate) fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax over each row of length `cols`.
pub(crate) fn softmax_rows(data: &mut [f64], cols: usize) {
    for row in data.chunks_mut(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

use super::Scalar;

/// `out (+)= op(a) · op(b)` where `a` is stored `[m, k]` (or `[k, m]` when
/// `trans_a`) and `b` is stored `[k, n]` (or `[n, k]` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Scalar>(
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    out: &mut [T],
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    T::gemm(m, k, n, T::ONE, a, rsa, csa, b, rsb, csb, beta, out, n as isize, 1);
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    (input + 2 * pad)
        .checked_sub(kernel)
        .map(|v| v / stride + 1)
}

pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    ((input.checked_sub(1)?) * stride + kernel).checked_sub(2 * pad)
}

/// Unfolds `x: [n, c, h, w]` into patches `[n*oh*ow, c*k*k]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let oh = conv_out_dim(h, k, stride, pad).expect("kernel larger than padded input");
    let ow = conv_out_dim(w, k, stride, pad).expect("kernel larger than padded input");
    let width = c * k * k;
    let mut cols = vec![T::ZERO; n * oh * ow * width];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * width;
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            cols[row + (ch * k + ky) * k + kx] =
                                x[plane + iy as usize * w + ix as usize];
                        }
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Adjoint of [`im2col`]: scatters-and-adds patches back into `[n, c, h, w]`.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Vec<T> {
    let oh = conv_out_dim(h, k, stride, pad).expect("kernel larger than padded input");
    let ow = conv_out_dim(w, k, stride, pad).expect("kernel larger than padded input");
    let width = c * k * k;
    let mut x = vec![T::ZERO; n * c * h * w];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * width;
                for ch in 0..c {
                    let plane = (b * c + ch) * h * w;
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            x[plane + iy as usize * w + ix as usize] +=
                                cols[row + (ch * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, s]` (channel-major) to `[n*s, c]` (position-major).
pub(crate) fn nchw_to_rows<T: Scalar>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..s {
                out[(b * s + p) * c + ch] = x[(b * c + ch) * s + p];
            }
        }
    }
    out
}

/// Inverse of [`nchw_to_rows`].
pub(crate) fn rows_to_nchw<T: Scalar>(x: &[T], n: usize, c: usize, s: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; x.len()];
    for b in 0..n {
        for ch in 0..c {
            for p in 0..s {
                out[(b * c + ch) * s + p] = x[(b * s + p) * c + ch];
            }
        }
    }
    out
}

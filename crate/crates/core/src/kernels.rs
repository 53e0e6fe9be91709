//! Raw numeric kernels on flat slices. Everything above this layer (graph
//! ops, layer forwards, spike simulation) delegates its arithmetic here so
//! the hot loops live in one place. All kernels are single-threaded and
//! accumulate in deterministic order.

use crate::scalar::Scalar;

/// C[m x n] += A[m x k] * B[k x n]. Caller provides a zeroed (or partial)
/// output; accumulation lets convolution sum over the batch without temps.
pub fn mm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == F::ZERO {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// C[m x n] += A[m x k] * B[n x k]^T. Row-by-row dot products; both operands
/// are walked contiguously.
pub fn mm_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c_row[j] += acc;
        }
    }
}

/// C[k x n] += A[m x k]^T * B[m x n].
pub fn mm_tn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Lower an NCHW batch into one column matrix of layout
/// [C*kh*kw, N*oh*ow]: sample `ni`'s output position `j` occupies column
/// `ni*oh*ow + j`, so the whole batch convolves in a single matmul against
/// the [O, C*kh*kw] weight matrix with a long, vectorizable inner dimension.
/// Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<F> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut cols = vec![F::ZERO; ckk * n * ohw];
    for ni in 0..n {
        let x_n = &x[ni * c * h * w..(ni + 1) * c * h * w];
        for ci in 0..c {
            let x_c = &x_n[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let out_row = &mut cols[row * n * ohw + ni * ohw..row * n * ohw + (ni + 1) * ohw];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x_c[iy as usize * w..(iy as usize + 1) * w];
                        let o_base = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                out_row[o_base + ox] = x_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add of column gradients back to input layout; inverse of im2col.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Scalar>(
    dcols: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Vec<F> {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ohw = oh * ow;
    let mut dx = vec![F::ZERO; n * c * h * w];
    for ni in 0..n {
        let x_n = &mut dx[ni * c * h * w..(ni + 1) * c * h * w];
        for ci in 0..c {
            let x_c = &mut x_n[ci * h * w..(ci + 1) * h * w];
            for ki in 0..kh {
                for kj in 0..kw {
                    let row = (ci * kh + ki) * kw + kj;
                    let in_row = &dcols[row * n * ohw + ni * ohw..row * n * ohw + (ni + 1) * ohw];
                    for oy in 0..oh {
                        let iy = (oy * stride + ki) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &mut x_c[iy as usize * w..(iy as usize + 1) * w];
                        let o_base = oy * ow;
                        for ox in 0..ow {
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                x_row[ix as usize] += in_row[o_base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Cross-correlation forward. Returns (output [N,O,oh,ow], columns) so the
/// caller can retain the columns for the backward pass.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<F: Scalar>(
    x: &[F],
    weight: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<F>, Vec<F>) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    debug_assert_eq!(weight.len(), o * ckk);
    let cols = im2col(x, n, c, h, w, kh, kw, stride, pad);
    // One matmul over the whole batch: [O, ckk] x [ckk, N*ohw].
    let mut y_flat = vec![F::ZERO; o * n * ohw];
    mm_nn(weight, &cols, &mut y_flat, o, ckk, n * ohw);
    // Regroup [O, N*ohw] rows into the [N, O, ohw] output layout.
    let mut y = vec![F::ZERO; n * o * ohw];
    for i in 0..o {
        for ni in 0..n {
            let src = &y_flat[i * n * ohw + ni * ohw..i * n * ohw + (ni + 1) * ohw];
            y[ni * o * ohw + i * ohw..ni * o * ohw + (i + 1) * ohw].copy_from_slice(src);
        }
    }
    (y, cols)
}

/// Gradients of conv2d given upstream dy and the retained columns.
/// Returns (dx, dweight). dweight accumulates over the batch.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Scalar>(
    dy: &[F],
    weight: &[F],
    cols: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    need_dx: bool,
) -> (Option<Vec<F>>, Vec<F>) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    // Regroup dy [N, O, ohw] into [O, N*ohw] to match the column layout.
    let mut dy_flat = vec![F::ZERO; o * n * ohw];
    for ni in 0..n {
        for i in 0..o {
            let src = &dy[ni * o * ohw + i * ohw..ni * o * ohw + (i + 1) * ohw];
            dy_flat[i * n * ohw + ni * ohw..i * n * ohw + (ni + 1) * ohw].copy_from_slice(src);
        }
    }
    // dW = dY * cols^T, summed over the batch in one call.
    let mut dw = vec![F::ZERO; o * ckk];
    mm_nt(&dy_flat, cols, &mut dw, o, n * ohw, ckk);
    let dx = need_dx.then(|| {
        // dcols = W^T * dY, then scatter-add back to input layout.
        let mut dcols = vec![F::ZERO; ckk * n * ohw];
        mm_tn(weight, &dy_flat, &mut dcols, o, ckk, n * ohw);
        col2im(&dcols, n, c, h, w, kh, kw, stride, pad)
    });
    (dx, dw)
}

/// Window average pooling, no padding. Returns [N,C,oh,ow].
#[allow(clippy::too_many_arguments)]
pub fn avg_pool2d_forward<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<F> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let inv = F::ONE / F::from_usize(kh * kw);
    let mut y = vec![F::ZERO; n * c * oh * ow];
    for nc in 0..n * c {
        let x_p = &x[nc * h * w..(nc + 1) * h * w];
        let y_p = &mut y[nc * oh * ow..(nc + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = F::ZERO;
                for ky in 0..kh {
                    let row = &x_p[(oy * stride + ky) * w..(oy * stride + ky) * w + w];
                    for kx in 0..kw {
                        acc += row[ox * stride + kx];
                    }
                }
                y_p[oy * ow + ox] = acc * inv;
            }
        }
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn avg_pool2d_backward<F: Scalar>(
    dy: &[F],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<F> {
    let oh = (h - kh) / stride + 1;
    let ow = (w - kw) / stride + 1;
    let inv = F::ONE / F::from_usize(kh * kw);
    let mut dx = vec![F::ZERO; n * c * h * w];
    for nc in 0..n * c {
        let dy_p = &dy[nc * oh * ow..(nc + 1) * oh * ow];
        let dx_p = &mut dx[nc * h * w..(nc + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let g = dy_p[oy * ow + ox] * inv;
                for ky in 0..kh {
                    let row = &mut dx_p[(oy * stride + ky) * w..(oy * stride + ky) * w + w];
                    for kx in 0..kw {
                        row[ox * stride + kx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// In-place channel normalization with externally supplied statistics:
/// y = gamma * (x - mean) / sqrt(var + eps) + beta, folded per channel into
/// one multiply-add. Every execution path (graph ops and raw walkers) must
/// go through this function so their forward arithmetic agrees bitwise.
pub fn bn_normalize_nchw<F: Scalar>(
    data: &mut [F],
    gamma: &[F],
    beta: &[F],
    mean: &[F],
    var: &[F],
    eps: F,
    n: usize,
    c: usize,
    hw: usize,
) {
    debug_assert_eq!(data.len(), n * c * hw);
    for ci in 0..c {
        let inv = F::ONE / (var[ci] + eps).sqrt();
        let scale = gamma[ci] * inv;
        let shift = beta[ci] - mean[ci] * scale;
        for ni in 0..n {
            let base = (ni * c + ci) * hw;
            for v in &mut data[base..base + hw] {
                *v = *v * scale + shift;
            }
        }
    }
}

/// Row-wise softmax with max subtraction (overflow guard).
pub fn softmax_rows<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut y = vec![F::ZERO; rows * cols];
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let yi = &mut y[r * cols..(r + 1) * cols];
        let mut mx = xi[0];
        for &v in xi.iter() {
            mx = mx.maxs(v);
        }
        let mut sum = F::ZERO;
        for (o, &v) in yi.iter_mut().zip(xi) {
            let e = (v - mx).exp();
            *o = e;
            sum += e;
        }
        let inv = F::ONE / sum;
        for o in yi.iter_mut() {
            *o *= inv;
        }
    }
    y
}

/// Row-wise log-softmax, stable form: x - max - ln(sum exp(x - max)).
pub fn log_softmax_rows<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    debug_assert_eq!(x.len(), rows * cols);
    let mut y = vec![F::ZERO; rows * cols];
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let yi = &mut y[r * cols..(r + 1) * cols];
        let mut mx = xi[0];
        for &v in xi.iter() {
            mx = mx.maxs(v);
        }
        let mut sum = F::ZERO;
        for &v in xi.iter() {
            sum += (v - mx).exp();
        }
        let lse = mx + sum.ln();
        for (o, &v) in yi.iter_mut().zip(xi) {
            *o = v - lse;
        }
    }
    y
}

/// Per-channel mean and biased variance over N,H,W of an NCHW tensor.
pub fn nchw_channel_moments<F: Scalar>(
    x: &[F],
    n: usize,
    c: usize,
    hw: usize,
) -> (Vec<F>, Vec<F>) {
    let count = F::from_usize(n * hw);
    let mut mean = vec![F::ZERO; c];
    let mut var = vec![F::ZERO; c];
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            let mut s = F::ZERO;
            for &v in plane {
                s += v;
            }
            mean[ci] += s;
        }
    }
    for m in mean.iter_mut() {
        *m /= count;
    }
    for ni in 0..n {
        for ci in 0..c {
            let plane = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            let mu = mean[ci];
            let mut s = F::ZERO;
            for &v in plane {
                let d = v - mu;
                s += d * d;
            }
            var[ci] += s;
        }
    }
    for v in var.iter_mut() {
        *v /= count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity_passthrough() {
        // I2 * [[1,2],[3,4]] = [[1,2],[3,4]]
        let i2 = [1.0f64, 0.0, 0.0, 1.0];
        let b = [1.0, 2.0, 3.0, 4.0];
        let mut c = [0.0; 4];
        mm_nn(&i2, &b, &mut c, 2, 2, 2);
        assert_eq!(c, b);
    }

    #[test]
    fn matmul_hand_value() {
        // [[1,2]] * [[3],[4]] = [[11]]
        let a = [1.0f64, 2.0];
        let b = [3.0, 4.0];
        let mut c = [0.0];
        mm_nn(&a, &b, &mut c, 1, 2, 1);
        assert_eq!(c[0], 11.0);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 2x3
        // mm_nt: A(2x3) * B(2x3)^T -> 2x2
        let mut c = [0.0; 4];
        mm_nt(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [50.0, 68.0, 122.0, 167.0]);
        // mm_tn: A(2x3)^T * B2(2x2) -> 3x2
        let b2 = [1.0, 2.0, 3.0, 4.0];
        let mut d = [0.0; 6];
        mm_tn(&a, &b2, &mut d, 2, 3, 2);
        assert_eq!(d, [13.0, 18.0, 17.0, 24.0, 21.0, 30.0]);
    }

    #[test]
    fn identity_kernel_conv_is_passthrough() {
        // 1x1 kernel of value 1 on a single channel returns the input.
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let w = [1.0f64];
        let (y, _) = conv2d_forward(&x, &w, 1, 1, 4, 4, 1, 1, 1, 1, 0);
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_sums_channels() {
        // 2-channel input, one 1x1 kernel of ones -> per-pixel channel sum.
        let x = [1.0f64, 2.0, 3.0, 4.0, 10.0, 20.0, 30.0, 40.0]; // 1x2x2x2
        let w = [1.0, 1.0];
        let (y, _) = conv2d_forward(&x, &w, 1, 2, 2, 2, 1, 1, 1, 1, 0);
        assert_eq!(y, [11.0, 22.0, 33.0, 44.0]);
    }

    #[test]
    fn conv_padding_and_stride_shape() {
        let x = vec![1.0f64; 1 * 3 * 5 * 5];
        let w = vec![1.0f64; 2 * 3 * 3 * 3];
        let (y, _) = conv2d_forward(&x, &w, 1, 3, 5, 5, 2, 3, 3, 2, 1);
        assert_eq!(conv_out_dim(5, 3, 2, 1), 3);
        assert_eq!(y.len(), 2 * 3 * 3);
        // Center position sees all 27 ones.
        assert_eq!(y[3 * 1 + 1], 27.0);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish tensors: the two
        // maps are transposes of each other, which the conv backward relies
        // on.
        let (n, c, h, w, kh, kw, s, p) = (2usize, 3usize, 4usize, 4usize, 3usize, 3usize, 1usize, 1usize);
        let x: Vec<f64> = (0..n * c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols = im2col(&x, n, c, h, w, kh, kw, s, p);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, n, c, h, w, kh, kw, s, p);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn batched_conv_matches_per_sample_calls() {
        // Forwarding a batch in one call must reproduce forwarding each
        // sample alone: same dot-product order per output element (exact),
        // same dx scatter order per element (exact); dW only regroups the
        // batch sum, so it is compared with a tight tolerance.
        let (n, c, h, w, o, kh, kw, s, p) = (3usize, 2usize, 5, 5, 4, 3, 3, 2, 1);
        let x: Vec<f64> = (0..n * c * h * w).map(|i| (i as f64 * 0.293).sin() + 0.1).collect();
        let wt: Vec<f64> = (0..o * c * kh * kw).map(|i| (i as f64 * 0.171).cos() + 0.05).collect();
        let oh = conv_out_dim(h, kh, s, p);
        let ow = conv_out_dim(w, kw, s, p);
        let ohw = oh * ow;
        let (y, cols) = conv2d_forward(&x, &wt, n, c, h, w, o, kh, kw, s, p);
        let dy: Vec<f64> = (0..n * o * ohw).map(|i| (i as f64 * 0.113).sin()).collect();
        let (dx, dw) = conv2d_backward(&dy, &wt, &cols, n, c, h, w, o, kh, kw, s, p, true);
        let dx = dx.unwrap();
        let mut dw_sum = vec![0.0f64; o * c * kh * kw];
        for ni in 0..n {
            let x_n = &x[ni * c * h * w..(ni + 1) * c * h * w];
            let (y_n, cols_n) = conv2d_forward(x_n, &wt, 1, c, h, w, o, kh, kw, s, p);
            assert_eq!(y_n, y[ni * o * ohw..(ni + 1) * o * ohw]);
            let dy_n = &dy[ni * o * ohw..(ni + 1) * o * ohw];
            let (dx_n, dw_n) =
                conv2d_backward(dy_n, &wt, &cols_n, 1, c, h, w, o, kh, kw, s, p, true);
            assert_eq!(dx_n.unwrap(), dx[ni * c * h * w..(ni + 1) * c * h * w]);
            for (acc, v) in dw_sum.iter_mut().zip(&dw_n) {
                *acc += v;
            }
        }
        for (a, b) in dw.iter().zip(&dw_sum) {
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn avg_pool_hand_value_and_backward_mass() {
        let x = [1.0f64, 2.0, 3.0, 4.0]; // 1x1x2x2
        let y = avg_pool2d_forward(&x, 1, 1, 2, 2, 2, 2, 2);
        assert_eq!(y, [2.5]);
        let dx = avg_pool2d_backward(&[1.0], 1, 1, 2, 2, 2, 2, 2);
        assert_eq!(dx, [0.25; 4]);
    }

    #[test]
    fn softmax_rows_are_normalized_and_stable() {
        let y = softmax_rows(&[1000.0f64, 1000.0, 0.0, f64::ln(3.0)], 2, 2);
        assert!((y[0] - 0.5).abs() < 1e-12);
        assert!((y[1] - 0.5).abs() < 1e-12);
        assert!((y[2] - 0.25).abs() < 1e-12);
        assert!((y[3] - 0.75).abs() < 1e-12);
        let ls = log_softmax_rows(&[0.0f64, 0.0], 1, 2);
        assert!((ls[0] - (-f64::ln(2.0))).abs() < 1e-12);
    }

    #[test]
    fn channel_moments_match_hand_values() {
        // 2 samples, 1 channel, 2 pixels: values 1,2,3,4.
        let x = [1.0f64, 2.0, 3.0, 4.0];
        let (m, v) = nchw_channel_moments(&x, 2, 1, 2);
        assert_eq!(m, [2.5]);
        assert_eq!(v, [1.25]);
    }
}

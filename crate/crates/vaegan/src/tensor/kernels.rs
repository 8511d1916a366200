//! Pure numeric kernels behind the graph operations.
//!
//! Everything here is single-threaded and loops in a fixed order, so results
//! are bitwise reproducible for identical inputs. Per-output accumulation for
//! matmul and the convolutions runs in the same index order a naive
//! triple/sliding-window loop would use, which lets oracle tests compare
//! bit-for-bit.

use super::{Result, Tensor, TensorError};

/// Resolved broadcast relationship between two operand shapes.
///
/// Only three forms are supported: equal shapes, scalar against anything, and
/// a per-channel vector `[C]` against `[N,C]` or `[N,C,H,W]` (axis 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Broadcast {
    None,
    LhsScalar,
    RhsScalar,
    /// Lhs is the `[C]` vector.
    LhsChannel,
    /// Rhs is the `[C]` vector.
    RhsChannel,
}

fn is_channel_pair(vec: &[usize], full: &[usize]) -> bool {
    vec.len() == 1 && (full.len() == 2 || full.len() == 4) && full[1] == vec[0]
}

pub fn resolve_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Broadcast)> {
    let an: usize = a.iter().product();
    let bn: usize = b.iter().product();
    if a == b {
        return Ok((a.to_vec(), Broadcast::None));
    }
    if bn == 1 {
        return Ok((a.to_vec(), Broadcast::RhsScalar));
    }
    if an == 1 {
        return Ok((b.to_vec(), Broadcast::LhsScalar));
    }
    if is_channel_pair(b, a) {
        return Ok((a.to_vec(), Broadcast::RhsChannel));
    }
    if is_channel_pair(a, b) {
        return Ok((b.to_vec(), Broadcast::LhsChannel));
    }
    Err(TensorError::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

/// For a full shape `[N,C]` or `[N,C,H,W]`: (channel count, inner extent H*W).
fn channel_geometry(full: &[usize]) -> (usize, usize) {
    match full.len() {
        2 => (full[1], 1),
        4 => (full[1], full[2] * full[3]),
        _ => unreachable!("channel broadcast only resolved for rank 2 or 4"),
    }
}

/// Apply a binary elementwise function under a resolved broadcast.
pub fn binary_map(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match bc {
        Broadcast::None => {
            let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_vec(a.shape(), data).unwrap()
        }
        Broadcast::RhsScalar => {
            let s = b.data()[0];
            a.map(|x| f(x, s))
        }
        Broadcast::LhsScalar => {
            let s = a.data()[0];
            b.map(|y| f(s, y))
        }
        Broadcast::RhsChannel => {
            let (c, inner) = channel_geometry(a.shape());
            let mut data = Vec::with_capacity(a.numel());
            let bd = b.data();
            for chunk in a.data().chunks_exact(c * inner) {
                for ci in 0..c {
                    let bv = bd[ci];
                    for &x in &chunk[ci * inner..(ci + 1) * inner] {
                        data.push(f(x, bv));
                    }
                }
            }
            Tensor::from_vec(a.shape(), data).unwrap()
        }
        Broadcast::LhsChannel => {
            let (c, inner) = channel_geometry(b.shape());
            let mut data = Vec::with_capacity(b.numel());
            let ad = a.data();
            for chunk in b.data().chunks_exact(c * inner) {
                for ci in 0..c {
                    let av = ad[ci];
                    for &y in &chunk[ci * inner..(ci + 1) * inner] {
                        data.push(f(av, y));
                    }
                }
            }
            Tensor::from_vec(b.shape(), data).unwrap()
        }
    }
}

/// Reduce a full-shape gradient back onto a broadcast operand's shape by
/// summation over the broadcast axes.
pub fn reduce_to_shape(grad: &Tensor, target_shape: &[usize]) -> Tensor {
    if grad.shape() == target_shape {
        return grad.clone();
    }
    let target_numel: usize = target_shape.iter().product();
    if target_numel == 1 {
        let s: f64 = grad.data().iter().sum();
        return Tensor::from_vec(target_shape, vec![s]).unwrap();
    }
    // Channel vector [C] against [N,C] or [N,C,H,W].
    let (c, inner) = channel_geometry(grad.shape());
    debug_assert_eq!(c, target_numel);
    let mut out = vec![0.0; c];
    for chunk in grad.data().chunks_exact(c * inner) {
        for ci in 0..c {
            let mut s = 0.0;
            for &g in &chunk[ci * inner..(ci + 1) * inner] {
                s += g;
            }
            out[ci] += s;
        }
    }
    Tensor::from_vec(target_shape, out).unwrap()
}

// ---------------------------------------------------------------------------
// Matrix multiply
// ---------------------------------------------------------------------------

/// `a[m,k] * b[k,n]`. Accumulation over `k` is sequential per output element.
pub fn matmul(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,n] * b[k,n]^T -> [m,k]` (used for d/d_lhs of matmul).
///
/// Works on a transposed copy of `b` so the inner loop runs over independent
/// output lanes; every output element still accumulates its products in
/// ascending `n` order, exactly like a plain dot product would.
pub fn matmul_nt(a: &[f64], m: usize, n: usize, b: &[f64], k: usize) -> Vec<f64> {
    let mut bt = vec![0.0; n * k];
    for kk in 0..k {
        for j in 0..n {
            bt[j * k + kk] = b[kk * n + j];
        }
    }
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (j, &av) in a_row.iter().enumerate() {
            let bt_row = &bt[j * k..(j + 1) * k];
            for (o, &bv) in out_row.iter_mut().zip(bt_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// `a[m,k]^T * b[m,n] -> [k,n]` (used for d/d_rhs of matmul).
pub fn matmul_tn(a: &[f64], m: usize, k: usize, b: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let av = a[i * k + kk];
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// 2-D convolution family
//
// Layouts: input [N,C,H,W], kernel [F,C,kh,kw], output [N,F,OH,OW].
// The transposed convolution reuses `conv2d_input_grad` for its forward pass,
// which makes "transpose == gradient of conv w.r.t. input" hold bit-exactly.
// ---------------------------------------------------------------------------

pub fn conv2d_out_extent(in_extent: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = in_extent + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn pad_nchw(x: &[f64], n: usize, c: usize, h: usize, w: usize, pad: usize) -> (Vec<f64>, usize, usize) {
    let ph = h + 2 * pad;
    let pw = w + 2 * pad;
    if pad == 0 {
        return (x.to_vec(), ph, pw);
    }
    let mut out = vec![0.0; n * c * ph * pw];
    for img in 0..n * c {
        let src = &x[img * h * w..(img + 1) * h * w];
        let dst = &mut out[img * ph * pw..(img + 1) * ph * pw];
        for row in 0..h {
            let d0 = (row + pad) * pw + pad;
            dst[d0..d0 + w].copy_from_slice(&src[row * w..(row + 1) * w]);
        }
    }
    (out, ph, pw)
}

/// Unfold one padded image into a [C*kh*kw, OH*OW] column matrix.
fn im2col(
    xp: &[f64],
    img_offset: usize,
    c: usize,
    ph: usize,
    pw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    col: &mut [f64],
) {
    let mut row = 0;
    for ci in 0..c {
        let x_img = &xp[img_offset + ci * ph * pw..img_offset + (ci + 1) * ph * pw];
        for khi in 0..kh {
            for kwi in 0..kw {
                let dst = &mut col[row * oh * ow..(row + 1) * oh * ow];
                for ohi in 0..oh {
                    let src = &x_img[(ohi * stride + khi) * pw + kwi..];
                    let d_row = &mut dst[ohi * ow..(ohi + 1) * ow];
                    if stride == 1 {
                        d_row.copy_from_slice(&src[..ow]);
                    } else {
                        for (owi, d) in d_row.iter_mut().enumerate() {
                            *d = src[owi * stride];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Fold a [C*kh*kw, OH*OW] column-gradient matrix back onto the padded
/// input, accumulating overlaps. Iterates columns in (c,kh,kw,oh,ow)
/// lexicographic order, which fixes the floating-point accumulation order.
fn col2im_accumulate(
    col: &[f64],
    dxp: &mut [f64],
    img_offset: usize,
    c: usize,
    ph: usize,
    pw: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
) {
    let mut row = 0;
    for ci in 0..c {
        let dx_img = &mut dxp[img_offset + ci * ph * pw..img_offset + (ci + 1) * ph * pw];
        for khi in 0..kh {
            for kwi in 0..kw {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for ohi in 0..oh {
                    let s_row = &src[ohi * ow..(ohi + 1) * ow];
                    let d0 = (ohi * stride + khi) * pw + kwi;
                    for (owi, &v) in s_row.iter().enumerate() {
                        dx_img[d0 + owi * stride] += v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Convolution via unfold + matrix multiply. Per output element the sum over
/// `(c, kh, kw)` runs in that lexicographic order, bit-identical to the
/// direct sliding-window loop in `conv2d_forward_direct`.
pub fn conv2d_forward(
    x: &[f64],
    xs: &[usize; 4],
    w: &[f64],
    ws: &[usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = *xs;
    let [f, _, kh, kw] = *ws;
    let oh = conv2d_out_extent(h, kh, stride, pad).expect("validated by caller");
    let ow = conv2d_out_extent(wd, kw, stride, pad).expect("validated by caller");
    let (xp, ph, pw) = pad_nchw(x, n, c, h, wd, pad);
    let ckk = c * kh * kw;
    let mut col = vec![0.0; ckk * oh * ow];
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        im2col(&xp, ni * c * ph * pw, c, ph, pw, kh, kw, stride, oh, ow, &mut col);
        let prod = matmul(w, f, ckk, &col, oh * ow);
        out[ni * f * oh * ow..(ni + 1) * f * oh * ow].copy_from_slice(&prod);
    }
    (out, [n, f, oh, ow])
}

/// Reference direct convolution; kept as the oracle the fast path must match
/// bit for bit.
pub fn conv2d_forward_direct(
    x: &[f64],
    xs: &[usize; 4],
    w: &[f64],
    ws: &[usize; 4],
    stride: usize,
    pad: usize,
) -> (Vec<f64>, [usize; 4]) {
    let [n, c, h, wd] = *xs;
    let [f, _, kh, kw] = *ws;
    let oh = conv2d_out_extent(h, kh, stride, pad).expect("validated by caller");
    let ow = conv2d_out_extent(wd, kw, stride, pad).expect("validated by caller");
    let (xp, ph, pw) = pad_nchw(x, n, c, h, wd, pad);
    let mut out = vec![0.0; n * f * oh * ow];
    for ni in 0..n {
        for fi in 0..f {
            let out_img = &mut out[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
            for ohi in 0..oh {
                for owi in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        let x_img = &xp[(ni * c + ci) * ph * pw..(ni * c + ci + 1) * ph * pw];
                        let w_base = ((fi * c + ci) * kh) * kw;
                        for khi in 0..kh {
                            let x_row = &x_img[(ohi * stride + khi) * pw + owi * stride..];
                            for kwi in 0..kw {
                                acc += w[w_base + khi * kw + kwi] * x_row[kwi];
                            }
                        }
                    }
                    out_img[ohi * ow + owi] = acc;
                }
            }
        }
    }
    (out, [n, f, oh, ow])
}

/// Gradient of `conv2d_forward` with respect to its input, for incoming
/// gradient `g` of shape [N,F,OH,OW]. `in_h`/`in_w` select the target input
/// extent (a strided conv maps more than one input extent to the same output
/// extent, so the adjoint must be told which one). Contributions are summed
/// over filters first, then folded in (c,kh,kw,oh,ow) order.
pub fn conv2d_input_grad(
    g: &[f64],
    gs: &[usize; 4],
    w: &[f64],
    ws: &[usize; 4],
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Vec<f64> {
    let [n, f, oh, ow] = *gs;
    let [_, c, kh, kw] = *ws;
    let ph = in_h + 2 * pad;
    let pw = in_w + 2 * pad;
    let ckk = c * kh * kw;
    let mut dxp = vec![0.0; n * c * ph * pw];
    for ni in 0..n {
        let g_img = &g[ni * f * oh * ow..(ni + 1) * f * oh * ow];
        // col_grad[(c,kh,kw), (oh,ow)] = sum_f w[f,(c,kh,kw)] * g[f,(oh,ow)]
        let col_grad = matmul_tn(w, f, ckk, g_img, oh * ow);
        col2im_accumulate(&col_grad, &mut dxp, ni * c * ph * pw, c, ph, pw, kh, kw, stride, oh, ow);
    }
    if pad == 0 {
        return dxp;
    }
    // Crop the padding margin; gradient w.r.t. the zero padding is discarded.
    let mut dx = vec![0.0; n * c * in_h * in_w];
    for img in 0..n * c {
        let src = &dxp[img * ph * pw..(img + 1) * ph * pw];
        let dst = &mut dx[img * in_h * in_w..(img + 1) * in_h * in_w];
        for row in 0..in_h {
            let s0 = (row + pad) * pw + pad;
            dst[row * in_w..(row + 1) * in_w].copy_from_slice(&src[s0..s0 + in_w]);
        }
    }
    dx
}

/// Reference direct input gradient with the same accumulation order as the
/// fast path (filter sum first, then fold).
pub fn conv2d_input_grad_direct(
    g: &[f64],
    gs: &[usize; 4],
    w: &[f64],
    ws: &[usize; 4],
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Vec<f64> {
    let [n, f, oh, ow] = *gs;
    let [_, c, kh, kw] = *ws;
    let ph = in_h + 2 * pad;
    let pw = in_w + 2 * pad;
    let mut dxp = vec![0.0; n * c * ph * pw];
    for ni in 0..n {
        for ci in 0..c {
            let dx_img = &mut dxp[(ni * c + ci) * ph * pw..(ni * c + ci + 1) * ph * pw];
            for khi in 0..kh {
                for kwi in 0..kw {
                    for ohi in 0..oh {
                        for owi in 0..ow {
                            let mut s = 0.0;
                            for fi in 0..f {
                                let wv = w[((fi * c + ci) * kh + khi) * kw + kwi];
                                let gv = g[((ni * f + fi) * oh + ohi) * ow + owi];
                                s += wv * gv;
                            }
                            dx_img[(ohi * stride + khi) * pw + kwi + owi * stride] += s;
                        }
                    }
                }
            }
        }
    }
    if pad == 0 {
        return dxp;
    }
    let mut dx = vec![0.0; n * c * in_h * in_w];
    for img in 0..n * c {
        let src = &dxp[img * ph * pw..(img + 1) * ph * pw];
        let dst = &mut dx[img * in_h * in_w..(img + 1) * in_h * in_w];
        for row in 0..in_h {
            let s0 = (row + pad) * pw + pad;
            dst[row * in_w..(row + 1) * in_w].copy_from_slice(&src[s0..s0 + in_w]);
        }
    }
    dx
}

/// Gradient of `conv2d_forward` with respect to the kernel. Per kernel
/// element: a dot over output positions for each image, accumulated in
/// image order.
pub fn conv2d_kernel_grad(
    g: &[f64],
    gs: &[usize; 4],
    x: &[f64],
    xs: &[usize; 4],
    ws: &[usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [n, f, oh, ow] = *gs;
    let [_, c, h, wd] = *xs;
    let [_, _, kh, kw] = *ws;
    let (xp, ph, pw) = pad_nchw(x, n, c, h, wd, pad);
    let ckk = c * kh * kw;
    let mut col = vec![0.0; ckk * oh * ow];
    let mut dw = vec![0.0; f * ckk];
    for ni in 0..n {
        im2col(&xp, ni * c * ph * pw, c, ph, pw, kh, kw, stride, oh, ow, &mut col);
        let g_img = &g[ni * f * oh * ow..(ni + 1) * f * oh * ow];
        // dw[f,(c,kh,kw)] += g[f,(oh,ow)] . col[(c,kh,kw),(oh,ow)]
        let contrib = matmul_nt(g_img, f, oh * ow, &col, ckk);
        for (d, v) in dw.iter_mut().zip(&contrib) {
            *d += v;
        }
    }
    dw
}

/// Reference direct kernel gradient; same accumulation order as the fast
/// path.
pub fn conv2d_kernel_grad_direct(
    g: &[f64],
    gs: &[usize; 4],
    x: &[f64],
    xs: &[usize; 4],
    ws: &[usize; 4],
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let [n, f, oh, ow] = *gs;
    let [_, c, h, wd] = *xs;
    let [_, _, kh, kw] = *ws;
    let (xp, ph, pw) = pad_nchw(x, n, c, h, wd, pad);
    let mut dw = vec![0.0; f * c * kh * kw];
    for ni in 0..n {
        for fi in 0..f {
            let g_img = &g[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
            for ci in 0..c {
                let x_img = &xp[(ni * c + ci) * ph * pw..(ni * c + ci + 1) * ph * pw];
                let w_base = ((fi * c + ci) * kh) * kw;
                for khi in 0..kh {
                    for kwi in 0..kw {
                        let mut s = 0.0;
                        for ohi in 0..oh {
                            let g_row = &g_img[ohi * ow..(ohi + 1) * ow];
                            let x_row = &x_img[(ohi * stride + khi) * pw + kwi..];
                            for (owi, &gv) in g_row.iter().enumerate() {
                                s += gv * x_row[owi * stride];
                            }
                        }
                        dw[w_base + khi * kw + kwi] += s;
                    }
                }
            }
        }
    }
    dw
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

pub fn sum_all(x: &[f64]) -> f64 {
    x.iter().sum()
}

/// Mean over every axis except the channel axis (axis 1) of a rank-2 or
/// rank-4 tensor; result is the `[C]` vector.
pub fn mean_channels(x: &Tensor) -> Tensor {
    let (c, inner) = channel_geometry(x.shape());
    let batch = x.shape()[0];
    let count = (batch * inner) as f64;
    let mut out = vec![0.0; c];
    for chunk in x.data().chunks_exact(c * inner) {
        for ci in 0..c {
            let mut s = 0.0;
            for &v in &chunk[ci * inner..(ci + 1) * inner] {
                s += v;
            }
            out[ci] += s;
        }
    }
    for v in &mut out {
        *v /= count;
    }
    Tensor::from_vec(&[c], out).unwrap()
}

/// Backward of `mean_channels`: spread `g[c] / count` over the input.
pub fn mean_channels_grad(g: &Tensor, input_shape: &[usize]) -> Tensor {
    let (c, inner) = channel_geometry(input_shape);
    let batch = input_shape[0];
    let count = (batch * inner) as f64;
    let numel: usize = input_shape.iter().product();
    let mut out = vec![0.0; numel];
    let gd = g.data();
    for chunk in out.chunks_exact_mut(c * inner) {
        for ci in 0..c {
            let gv = gd[ci] / count;
            for v in &mut chunk[ci * inner..(ci + 1) * inner] {
                *v = gv;
            }
        }
    }
    Tensor::from_vec(input_shape, out).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let out = matmul(&[1.0, 2.0, 3.0, 4.0], 2, 2, &[5.0, 6.0], 1);
        assert_eq!(out, vec![17.0, 39.0]);
    }

    #[test]
    fn matmul_transposes_agree_with_naive() {
        let a = [1.0, -2.0, 0.5, 3.0, 4.0, -1.0]; // 2x3
        let b = [2.0, 0.0, -1.0, 1.0, 0.5, -0.5]; // 2x3
        // a[2,3]^T * b[2,3] = [3,3]
        let tn = matmul_tn(&a, 2, 3, &b, 3);
        for kk in 0..3 {
            for j in 0..3 {
                let want = a[kk] * b[j] + a[3 + kk] * b[3 + j];
                assert!((tn[kk * 3 + j] - want).abs() < 1e-15);
            }
        }
        // a[2,3] * b[2,3]^T = [2,2]
        let nt = matmul_nt(&a, 2, 3, &b, 2);
        for i in 0..2 {
            for kk in 0..2 {
                let want: f64 = (0..3).map(|j| a[i * 3 + j] * b[kk * 3 + j]).sum();
                assert!((nt[i * 2 + kk] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn broadcast_resolution() {
        let (shape, bc) = resolve_broadcast("add", &[2, 3], &[2, 3]).unwrap();
        assert_eq!((shape.as_slice(), bc), (&[2usize, 3][..], Broadcast::None));
        let (_, bc) = resolve_broadcast("add", &[2, 3], &[1]).unwrap();
        assert_eq!(bc, Broadcast::RhsScalar);
        let (_, bc) = resolve_broadcast("add", &[3], &[2, 3]).unwrap();
        assert_eq!(bc, Broadcast::LhsChannel);
        let (_, bc) = resolve_broadcast("add", &[2, 5, 4, 4], &[5]).unwrap();
        assert_eq!(bc, Broadcast::RhsChannel);
        assert!(resolve_broadcast("add", &[2, 3], &[4]).is_err());
        assert!(resolve_broadcast("add", &[2, 3, 4], &[3]).is_err());
    }

    #[test]
    fn channel_broadcast_and_reduction_roundtrip() {
        let a = Tensor::from_vec(&[2, 2, 2, 2], (0..16).map(|v| v as f64).collect()).unwrap();
        let b = Tensor::from_vec(&[2], vec![10.0, 100.0]).unwrap();
        let out = binary_map(&a, &b, Broadcast::RhsChannel, |x, y| x + y);
        assert_eq!(out.data()[0], 10.0); // n0 c0
        assert_eq!(out.data()[4], 104.0); // n0 c1
        assert_eq!(out.data()[8], 18.0); // n1 c0

        let g = Tensor::ones(&[2, 2, 2, 2]);
        let red = reduce_to_shape(&g, &[2]);
        assert_eq!(red.data(), &[8.0, 8.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        // 1x1 kernel of value 1, stride 1, pad 0 is the identity.
        let x: Vec<f64> = (0..9).map(|v| v as f64).collect();
        let (out, os) = conv2d_forward(&x, &[1, 1, 3, 3], &[1.0], &[1, 1, 1, 1], 1, 0);
        assert_eq!(os, [1, 1, 3, 3]);
        assert_eq!(out, x);
    }

    #[test]
    fn conv_output_extent() {
        assert_eq!(conv2d_out_extent(64, 5, 2, 2), Some(32));
        assert_eq!(conv2d_out_extent(6, 3, 2, 1), Some(3));
        assert_eq!(conv2d_out_extent(2, 5, 1, 0), None);
    }

    #[test]
    fn fast_conv_paths_bitwise_match_direct_loops() {
        let mut state = 0x12345u64;
        let mut next = move || {
            // xorshift64 for test data only
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state as f64 / u64::MAX as f64) * 2.0 - 1.0
        };
        for &(n, c, f, h, k, stride, pad) in &[
            (2usize, 3usize, 4usize, 8usize, 5usize, 2usize, 2usize),
            (1, 1, 1, 6, 3, 2, 1),
            (2, 2, 3, 7, 3, 1, 1),
            (1, 4, 2, 5, 5, 1, 2),
            (3, 2, 2, 9, 3, 3, 0),
        ] {
            let xs = [n, c, h, h];
            let ws = [f, c, k, k];
            let x: Vec<f64> = (0..n * c * h * h).map(|_| next()).collect();
            let w: Vec<f64> = (0..f * c * k * k).map(|_| next()).collect();
            let (fast, os) = conv2d_forward(&x, &xs, &w, &ws, stride, pad);
            let (direct, os2) = conv2d_forward_direct(&x, &xs, &w, &ws, stride, pad);
            assert_eq!(os, os2);
            assert!(
                fast.iter().zip(&direct).all(|(a, b)| a.to_bits() == b.to_bits()),
                "forward mismatch at {:?}",
                (n, c, f, h, k, stride, pad)
            );

            let g: Vec<f64> = (0..os.iter().product::<usize>()).map(|_| next()).collect();
            let fast_dx = conv2d_input_grad(&g, &os, &w, &ws, stride, pad, h, h);
            let direct_dx = conv2d_input_grad_direct(&g, &os, &w, &ws, stride, pad, h, h);
            assert!(
                fast_dx.iter().zip(&direct_dx).all(|(a, b)| a.to_bits() == b.to_bits()),
                "input grad mismatch at {:?}",
                (n, c, f, h, k, stride, pad)
            );

            let fast_dw = conv2d_kernel_grad(&g, &os, &x, &xs, &ws, stride, pad);
            let direct_dw = conv2d_kernel_grad_direct(&g, &os, &x, &xs, &ws, stride, pad);
            assert!(
                fast_dw.iter().zip(&direct_dw).all(|(a, b)| a.to_bits() == b.to_bits()),
                "kernel grad mismatch at {:?}",
                (n, c, f, h, k, stride, pad)
            );
        }
    }

    #[test]
    fn mean_channels_rank2_and_rank4() {
        let x = Tensor::from_vec(&[2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap();
        let m = mean_channels(&x);
        assert_eq!(m.data(), &[2.0, 20.0]);

        let x4 = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 3.0, 10.0, 30.0]).unwrap();
        let m4 = mean_channels(&x4);
        assert_eq!(m4.data(), &[2.0, 20.0]);

        let g = Tensor::from_vec(&[2], vec![4.0, 8.0]).unwrap();
        let spread = mean_channels_grad(&g, &[2, 2]);
        assert_eq!(spread.data(), &[2.0, 4.0, 2.0, 4.0]);
    }
}

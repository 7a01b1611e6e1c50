//! Raw numeric kernels on flat row-major buffers (NCHW).
//!
//! These are the compute hot paths; they parallelize over batch items or
//! per-channel planes via [`crate::par`] and keep a fixed accumulation
//! order per output element, so parallel and sequential runs agree
//! bit-for-bit.

use crate::error::{Error, Result};
use crate::par::{for_each_chunk_mut, map_collect};
use crate::scalar::Scalar;

/// Geometry of a 2-D convolution (cross-correlation with zero padding).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dDims {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dDims {
    pub fn new(
        input_shape: &[usize],
        weight_shape: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, cin, h, w]: [usize; 4] = input_shape
            .try_into()
            .map_err(|_| Error::Shape(format!("conv2d input must be N,C,H,W: {input_shape:?}")))?;
        let [cout, wc, kh, kw]: [usize; 4] = weight_shape.try_into().map_err(|_| {
            Error::Shape(format!("conv2d weight must be Cout,Cin/g,Kh,Kw: {weight_shape:?}"))
        })?;
        if stride == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if groups == 0 || cin % groups != 0 || cout % groups != 0 {
            return Err(Error::config(format!(
                "conv2d groups {groups} must divide cin {cin} and cout {cout}"
            )));
        }
        if wc != cin / groups {
            return Err(Error::Shape(format!(
                "conv2d weight expects {} input channels per group, input has {}",
                wc,
                cin / groups
            )));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            )));
        }
        let out_h = (h + 2 * padding - kh) / stride + 1;
        let out_w = (w + 2 * padding - kw) / stride + 1;
        if out_h == 0 || out_w == 0 {
            return Err(Error::config("conv2d produces an empty output"));
        }
        Ok(Conv2dDims {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            padding,
            groups,
            out_h,
            out_w,
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.n, self.cout, self.out_h, self.out_w]
    }

    pub fn cin_per_group(&self) -> usize {
        self.cin / self.groups
    }

    pub fn cout_per_group(&self) -> usize {
        self.cout / self.groups
    }

    /// Patch length of one group: Cin/g * Kh * Kw.
    pub fn patch_len(&self) -> usize {
        self.cin_per_group() * self.kh * self.kw
    }

    pub fn out_hw(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Multiply-accumulates of the whole convolution.
    pub fn macs(&self) -> u128 {
        self.n as u128
            * self.cout as u128
            * self.cin_per_group() as u128
            * (self.kh * self.kw) as u128
            * self.out_hw() as u128
    }
}

/// out[m x n] += a[m x k] * b[k x n], sequential, fixed accumulation order.
fn matmul_acc<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] * b[n x k]^T.
fn matmul_abt_acc<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            *o += acc;
        }
    }
}

/// out[m x n] += a[k x m]^T * b[k x n].
fn matmul_atb_acc<E: Scalar>(a: &[E], b: &[E], out: &mut [E], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for kk in 0..k {
        let a_row = &a[kk * m..(kk + 1) * m];
        let b_row = &b[kk * n..(kk + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// out = a[m x k] * b[k x n].
pub(crate) fn matmul<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    matmul_acc(a, b, &mut out, m, k, n);
    out
}

/// out = a[m x k] * b[n x k]^T.
pub(crate) fn matmul_abt<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    matmul_abt_acc(a, b, &mut out, m, k, n);
    out
}

/// out = a[k x m]^T * b[k x n].
pub(crate) fn matmul_atb<E: Scalar>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    matmul_atb_acc(a, b, &mut out, m, k, n);
    out
}

/// Lower one group of one sample into a [patch_len x out_hw] column matrix.
fn im2col_group<E: Scalar>(xs: &[E], d: &Conv2dDims, group: usize, col: &mut [E]) {
    let cpg = d.cin_per_group();
    let ohw = d.out_hw();
    debug_assert_eq!(col.len(), d.patch_len() * ohw);
    let c0 = group * cpg;
    for c in 0..cpg {
        let plane = &xs[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * ohw;
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    let base = row + oy * d.out_w;
                    if iy < 0 || iy >= d.h as isize {
                        for ox in 0..d.out_w {
                            col[base + ox] = E::ZERO;
                        }
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.out_w {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        col[base + ox] = if ix < 0 || ix >= d.w as isize {
                            E::ZERO
                        } else {
                            plane[iy * d.w + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto one group of one sample.
fn col2im_add_group<E: Scalar>(col: &[E], d: &Conv2dDims, group: usize, dxs: &mut [E]) {
    let cpg = d.cin_per_group();
    let ohw = d.out_hw();
    let c0 = group * cpg;
    for c in 0..cpg {
        let plane = &mut dxs[(c0 + c) * d.h * d.w..(c0 + c + 1) * d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = ((c * d.kh + ky) * d.kw + kx) * ohw;
                for oy in 0..d.out_h {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    if iy < 0 || iy >= d.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..d.out_w {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if ix < 0 || ix >= d.w as isize {
                            continue;
                        }
                        plane[iy * d.w + ix as usize] += col[row + oy * d.out_w + ox];
                    }
                }
            }
        }
    }
}

/// Dense convolution forward. Parallel over batch items.
pub fn conv2d_forward<E: Scalar>(x: &[E], weight: &[E], d: &Conv2dDims) -> Vec<E> {
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * d.out_hw();
    let (copg, plen, ohw) = (d.cout_per_group(), d.patch_len(), d.out_hw());
    let mut out = vec![E::ZERO; d.n * out_stride];
    for_each_chunk_mut(&mut out, out_stride, |s, out_s| {
        let xs = &x[s * in_stride..(s + 1) * in_stride];
        let mut col = vec![E::ZERO; plen * ohw];
        for g in 0..d.groups {
            im2col_group(xs, d, g, &mut col);
            let w_g = &weight[g * copg * plen..(g + 1) * copg * plen];
            let out_g = &mut out_s[g * copg * ohw..(g + 1) * copg * ohw];
            matmul_acc(w_g, &col, out_g, copg, plen, ohw);
        }
    });
    out
}

/// Gradient w.r.t. the convolution input. Parallel over batch items.
pub fn conv2d_backward_input<E: Scalar>(gy: &[E], weight: &[E], d: &Conv2dDims) -> Vec<E> {
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * d.out_hw();
    let (copg, plen, ohw) = (d.cout_per_group(), d.patch_len(), d.out_hw());
    let mut dx = vec![E::ZERO; d.n * in_stride];
    for_each_chunk_mut(&mut dx, in_stride, |s, dxs| {
        let gys = &gy[s * out_stride..(s + 1) * out_stride];
        let mut dcol = vec![E::ZERO; plen * ohw];
        for g in 0..d.groups {
            dcol.iter_mut().for_each(|v| *v = E::ZERO);
            let w_g = &weight[g * copg * plen..(g + 1) * copg * plen];
            let gy_g = &gys[g * copg * ohw..(g + 1) * copg * ohw];
            matmul_atb_acc(w_g, gy_g, &mut dcol, plen, copg, ohw);
            col2im_add_group(&dcol, d, g, dxs);
        }
    });
    dx
}

/// Gradient w.r.t. the convolution weight. Per-sample partials are
/// reduced in batch order so the result is deterministic.
pub fn conv2d_backward_weight<E: Scalar>(x: &[E], gy: &[E], d: &Conv2dDims) -> Vec<E> {
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * d.out_hw();
    let (copg, plen, ohw) = (d.cout_per_group(), d.patch_len(), d.out_hw());
    let wlen = d.cout * plen;
    let partials = map_collect(d.n, |s| {
        let xs = &x[s * in_stride..(s + 1) * in_stride];
        let gys = &gy[s * out_stride..(s + 1) * out_stride];
        let mut dw = vec![E::ZERO; wlen];
        let mut col = vec![E::ZERO; plen * ohw];
        for g in 0..d.groups {
            im2col_group(xs, d, g, &mut col);
            let gy_g = &gys[g * copg * ohw..(g + 1) * copg * ohw];
            let dw_g = &mut dw[g * copg * plen..(g + 1) * copg * plen];
            matmul_abt_acc(gy_g, &col, dw_g, copg, ohw, plen);
        }
        dw
    });
    let mut dw = vec![E::ZERO; wlen];
    for part in partials {
        for (a, p) in dw.iter_mut().zip(part) {
            *a += p;
        }
    }
    dw
}

/// Tiled window of adaptive average pooling: `[start, end)` of cell `i`.
pub fn adaptive_window(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len + out_len - 1) / out_len;
    (start, end)
}

/// Adaptive average pooling forward. Parallel over (n, c) planes.
pub fn adaptive_avg_pool_forward<E: Scalar>(
    x: &[E],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut out = vec![E::ZERO; nc * oh * ow];
    for_each_chunk_mut(&mut out, oh * ow, |p, out_p| {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let mut acc = E::ZERO;
                for y in y0..y1 {
                    for xx in x0..x1 {
                        acc += plane[y * w + xx];
                    }
                }
                out_p[oy * ow + ox] = acc / E::from_usize((y1 - y0) * (x1 - x0));
            }
        }
    });
    out
}

pub fn adaptive_avg_pool_backward<E: Scalar>(
    gy: &[E],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut dx = vec![E::ZERO; nc * h * w];
    for_each_chunk_mut(&mut dx, h * w, |p, dxp| {
        let gp = &gy[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1) = adaptive_window(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_window(ox, w, ow);
                let share = gp[oy * ow + ox] / E::from_usize((y1 - y0) * (x1 - x0));
                for y in y0..y1 {
                    for xx in x0..x1 {
                        dxp[y * w + xx] += share;
                    }
                }
            }
        }
    });
    dx
}

/// Max pooling forward; returns per-plane argmax indices for backward.
/// Padded positions never win (windows are clipped to the input).
pub fn maxpool_forward<E: Scalar>(
    x: &[E],
    nc: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (Vec<E>, Vec<u32>, usize, usize) {
    let oh = (h + 2 * padding - k) / stride + 1;
    let ow = (w + 2 * padding - k) / stride + 1;
    let mut out = vec![E::ZERO; nc * oh * ow];
    let mut arg = vec![0u32; nc * oh * ow];
    // Interleave (value, index) work per plane without unsafe splitting.
    let pairs: Vec<(Vec<E>, Vec<u32>)> = map_collect(nc, |p| {
        let plane = &x[p * h * w..(p + 1) * h * w];
        let mut vals = vec![E::ZERO; oh * ow];
        let mut idxs = vec![0u32; oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best: Option<(E, usize)> = None;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let i = iy as usize * w + ix as usize;
                        let v = plane[i];
                        if best.map_or(true, |(bv, _)| v > bv) {
                            best = Some((v, i));
                        }
                    }
                }
                let (v, i) = best.expect("maxpool window entirely outside input");
                vals[oy * ow + ox] = v;
                idxs[oy * ow + ox] = i as u32;
            }
        }
        (vals, idxs)
    });
    for (p, (vals, idxs)) in pairs.into_iter().enumerate() {
        out[p * oh * ow..(p + 1) * oh * ow].copy_from_slice(&vals);
        arg[p * oh * ow..(p + 1) * oh * ow].copy_from_slice(&idxs);
    }
    (out, arg, oh, ow)
}

pub fn maxpool_backward<E: Scalar>(
    gy: &[E],
    arg: &[u32],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut dx = vec![E::ZERO; nc * h * w];
    for_each_chunk_mut(&mut dx, h * w, |p, dxp| {
        let g = &gy[p * oh * ow..(p + 1) * oh * ow];
        let a = &arg[p * oh * ow..(p + 1) * oh * ow];
        for (gi, &ai) in g.iter().zip(a) {
            dxp[ai as usize] += *gi;
        }
    });
    dx
}

/// Source coordinate for bilinear upsampling, half-pixel convention
/// (align_corners = false), clamped at the low edge.
fn bilinear_source(o: usize, in_len: usize, out_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_len - 1);
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, src - i0 as f64)
}

/// Bilinear upsampling forward. Parallel over (n, c) planes.
pub fn upsample_bilinear_forward<E: Scalar>(
    x: &[E],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut out = vec![E::ZERO; nc * oh * ow];
    for_each_chunk_mut(&mut out, oh * ow, |p, out_p| {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            let (y0, y1, ty) = bilinear_source(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, tx) = bilinear_source(ox, w, ow);
                let v00 = plane[y0 * w + x0].to_f64();
                let v01 = plane[y0 * w + x1].to_f64();
                let v10 = plane[y1 * w + x0].to_f64();
                let v11 = plane[y1 * w + x1].to_f64();
                let top = v00 * (1.0 - tx) + v01 * tx;
                let bot = v10 * (1.0 - tx) + v11 * tx;
                out_p[oy * ow + ox] = E::from_f64(top * (1.0 - ty) + bot * ty);
            }
        }
    });
    out
}

pub fn upsample_bilinear_backward<E: Scalar>(
    gy: &[E],
    nc: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<E> {
    let mut dx = vec![E::ZERO; nc * h * w];
    for_each_chunk_mut(&mut dx, h * w, |p, dxp| {
        let g = &gy[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            let (y0, y1, ty) = bilinear_source(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1, tx) = bilinear_source(ox, w, ow);
                let gv = g[oy * ow + ox].to_f64();
                dxp[y0 * w + x0] += E::from_f64(gv * (1.0 - ty) * (1.0 - tx));
                dxp[y0 * w + x1] += E::from_f64(gv * (1.0 - ty) * tx);
                dxp[y1 * w + x0] += E::from_f64(gv * ty * (1.0 - tx));
                dxp[y1 * w + x1] += E::from_f64(gv * ty * tx);
            }
        }
    });
    dx
}

/// Per-channel mean and biased variance over (N, H*W). Parallel over channels.
pub fn channel_moments<E: Scalar>(x: &[E], n: usize, c: usize, hw: usize) -> (Vec<E>, Vec<E>) {
    let count = E::from_usize(n * hw);
    let stats = map_collect(c, |ci| {
        let mut sum = E::ZERO;
        for ni in 0..n {
            let plane = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for &v in plane {
                sum += v;
            }
        }
        let mean = sum / count;
        let mut var = E::ZERO;
        for ni in 0..n {
            let plane = &x[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            for &v in plane {
                let d = v - mean;
                var += d * d;
            }
        }
        (mean, var / count)
    });
    stats.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Conv2dDims {
        Conv2dDims::new(input, weight, stride, padding, groups).unwrap()
    }

    #[test]
    fn conv_scalar_kernel_scales() {
        let d = dims(&[1, 1, 2, 2], &[1, 1, 1, 1], 1, 0, 1);
        let out = conv2d_forward(&[1.0f64, 2.0, 3.0, 4.0], &[2.0], &d);
        assert_eq!(out, vec![2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn conv_zero_input_zero_output() {
        let d = dims(&[1, 2, 3, 3], &[2, 2, 2, 2], 1, 1, 1);
        let out = conv2d_forward(&vec![0.0f32; 18], &vec![0.5; 16], &d);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_rejects_bad_channel_count() {
        assert!(Conv2dDims::new(&[1, 3, 4, 4], &[2, 2, 3, 3], 1, 1, 1).is_err());
    }

    #[test]
    fn conv_rejects_empty_output() {
        assert!(Conv2dDims::new(&[1, 1, 2, 2], &[1, 1, 3, 3], 1, 0, 1).is_err());
    }

    #[test]
    fn adaptive_pool_examples() {
        // 4x4 ones -> 2x2 ones
        let out = adaptive_avg_pool_forward(&vec![1.0f64; 16], 1, 4, 4, 2, 2);
        assert_eq!(out, vec![1.0; 4]);
        // 2x2 [[1,2],[3,4]] -> global mean 2.5
        let out = adaptive_avg_pool_forward(&[1.0f64, 2.0, 3.0, 4.0], 1, 2, 2, 1, 1);
        assert_eq!(out, vec![2.5]);
        // identity when sizes match
        let x = [0.5f64, -1.0, 2.0, 7.0];
        let out = adaptive_avg_pool_forward(&x, 1, 2, 2, 2, 2);
        assert_eq!(out, x.to_vec());
    }

    #[test]
    fn bilinear_half_pixel_example() {
        // [[0,1],[0,1]] to 2x4: each row becomes [0, 0.25, 0.75, 1].
        let out = upsample_bilinear_forward(&[0.0f64, 1.0, 0.0, 1.0], 1, 2, 2, 2, 4);
        let expect = [0.0, 0.25, 0.75, 1.0, 0.0, 0.25, 0.75, 1.0];
        for (o, e) in out.iter().zip(expect) {
            assert!((o - e).abs() < 1e-12, "{out:?}");
        }
    }

    #[test]
    fn bilinear_constant_stays_constant() {
        let out = upsample_bilinear_forward(&vec![3.25f32; 9], 1, 3, 3, 7, 5);
        assert!(out.iter().all(|&v| (v - 3.25).abs() < 1e-6));
        let out = upsample_bilinear_forward(&[4.0f32], 1, 1, 1, 3, 3);
        assert!(out.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn maxpool_picks_max_and_routes_grad() {
        let x = [1.0f64, 5.0, 2.0, 0.0, 3.0, -1.0, 4.0, 2.0, 2.5];
        let (out, arg, oh, ow) = maxpool_forward(&x, 1, 3, 3, 2, 1, 0);
        assert_eq!((oh, ow), (2, 2));
        assert_eq!(out, vec![5.0, 5.0, 4.0, 3.0]);
        let dx = maxpool_backward(&[1.0, 1.0, 1.0, 1.0], &arg, 1, 3, 3, 2, 2);
        assert_eq!(dx[1], 2.0); // the 5.0 wins twice
        assert_eq!(dx[6], 1.0);
        assert_eq!(dx[4], 1.0);
    }

    #[test]
    fn parallel_matches_sequential() {
        use crate::par::force_sequential;
        let d = dims(&[3, 4, 9, 9], &[6, 2, 3, 3], 2, 1, 2);
        let x: Vec<f32> = (0..3 * 4 * 81).map(|i| ((i * 37 % 11) as f32) - 5.0).collect();
        let w: Vec<f32> = (0..6 * 2 * 9).map(|i| ((i * 17 % 7) as f32) * 0.25 - 0.75).collect();
        let par = conv2d_forward(&x, &w, &d);
        force_sequential(true);
        let seq = conv2d_forward(&x, &w, &d);
        force_sequential(false);
        assert_eq!(par, seq);
    }
}

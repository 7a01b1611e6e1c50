//! Differentiable tensor operations.
//!
//! Every op validates shapes, computes its forward value through the raw
//! kernels, and (when any operand is tracked) records a tape node whose
//! backward closure produces one gradient buffer per tracked parent.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, Conv2dDims};
use crate::tensor::{common_tape, numel, Tape, Tensor};

pub(crate) fn emit<E: Scalar>(
    tape: Option<Tape<E>>,
    parents: Vec<usize>,
    back: Box<dyn Fn(&[E]) -> Vec<Vec<E>>>,
    data: Vec<E>,
    shape: Vec<usize>,
) -> Tensor<E> {
    match tape {
        Some(t) if !parents.is_empty() => {
            let idx = t.push_op(parents, data.len(), back);
            Tensor::tracked(data, shape, t, idx)
        }
        _ => Tensor::from_vec(data, &shape).expect("emit: shape/data agree"),
    }
}

fn check_same_shape<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>, op: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Elementwise sum.
pub fn add<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape(a, b, "add")?;
    let tape = common_tape(&[a, b])?;
    let data: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    let (an, bn) = (a.node_index(), b.node_index());
    let parents: Vec<usize> = [an, bn].into_iter().flatten().collect();
    let back = move |gy: &[E]| {
        let mut out = Vec::new();
        if an.is_some() {
            out.push(gy.to_vec());
        }
        if bn.is_some() {
            out.push(gy.to_vec());
        }
        out
    };
    Ok(emit(tape, parents, Box::new(back), data, a.shape().to_vec()))
}

/// Hadamard (elementwise) product.
pub fn mul<E: Scalar>(a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
    check_same_shape(a, b, "mul")?;
    let tape = common_tape(&[a, b])?;
    let data: Vec<E> = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    let (an, bn) = (a.node_index(), b.node_index());
    let parents: Vec<usize> = [an, bn].into_iter().flatten().collect();
    let (ad, bd) = (a.data_arc(), b.data_arc());
    let back = move |gy: &[E]| {
        let mut out = Vec::new();
        if an.is_some() {
            out.push(gy.iter().zip(bd.iter()).map(|(&g, &v)| g * v).collect());
        }
        if bn.is_some() {
            out.push(gy.iter().zip(ad.iter()).map(|(&g, &v)| g * v).collect());
        }
        out
    };
    Ok(emit(tape, parents, Box::new(back), data, a.shape().to_vec()))
}

/// Multiply by a compile-time constant (not a tape operand).
pub fn scale<E: Scalar>(x: &Tensor<E>, c: E) -> Tensor<E> {
    let data: Vec<E> = x.data().iter().map(|&v| v * c).collect();
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let back = move |gy: &[E]| vec![gy.iter().map(|&g| g * c).collect()];
    emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        data,
        x.shape().to_vec(),
    )
}

/// Sum of all elements (scalar output).
pub fn sum<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let total: E = x.data().iter().copied().sum();
    let n = x.numel();
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let back = move |gy: &[E]| vec![vec![gy[0]; n]];
    Ok(emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        vec![total],
        vec![1],
    ))
}

/// 2-D cross-correlation with zero padding (optionally grouped).
pub fn conv2d<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<E>> {
    let d = Conv2dDims::new(x.shape(), weight.shape(), stride, padding, groups)?;
    let tape = common_tape(&[x, weight])?;
    let data = kernels::conv2d_forward(x.data(), weight.data(), &d);
    let (xn, wn) = (x.node_index(), weight.node_index());
    let parents: Vec<usize> = [xn, wn].into_iter().flatten().collect();
    let (xd, wd) = (x.data_arc(), weight.data_arc());
    let back = move |gy: &[E]| {
        let mut out = Vec::new();
        if xn.is_some() {
            out.push(kernels::conv2d_backward_input(gy, &wd, &d));
        }
        if wn.is_some() {
            out.push(kernels::conv2d_backward_weight(&xd, gy, &d));
        }
        out
    };
    Ok(emit(tape, parents, Box::new(back), data, d.out_shape()))
}

/// Fully connected layer: `x [N,F] * w [K,F]^T + b [K]`.
pub fn linear<E: Scalar>(
    x: &Tensor<E>,
    weight: &Tensor<E>,
    bias: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let [n, f]: [usize; 2] = x
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("linear input must be N,F: {:?}", x.shape())))?;
    let [k, wf]: [usize; 2] = weight
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("linear weight must be K,F: {:?}", weight.shape())))?;
    if wf != f {
        return Err(Error::Shape(format!("linear: input F={f}, weight F={wf}")));
    }
    if let Some(b) = bias {
        if b.shape() != [k] {
            return Err(Error::Shape(format!("linear bias must be [{k}]")));
        }
    }
    let mut operands: Vec<&Tensor<E>> = vec![x, weight];
    if let Some(b) = bias {
        operands.push(b);
    }
    let tape = common_tape(&operands)?;

    let mut data = kernels::matmul_abt(x.data(), weight.data(), n, f, k);
    if let Some(b) = bias {
        for row in data.chunks_mut(k) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
    }
    let (xn, wn) = (x.node_index(), weight.node_index());
    let bn = bias.and_then(|b| b.node_index());
    let parents: Vec<usize> = [xn, wn, bn].into_iter().flatten().collect();
    let (xd, wd) = (x.data_arc(), weight.data_arc());
    let back = move |gy: &[E]| {
        let mut out = Vec::new();
        if xn.is_some() {
            out.push(kernels::matmul(gy, &wd, n, k, f));
        }
        if wn.is_some() {
            out.push(kernels::matmul_atb(gy, &xd, k, n, f));
        }
        if bn.is_some() {
            let mut db = vec![E::ZERO; k];
            for row in gy.chunks(k) {
                for (d, &g) in db.iter_mut().zip(row) {
                    *d += g;
                }
            }
            out.push(db);
        }
        out
    };
    Ok(emit(tape, parents, Box::new(back), data, vec![n, k]))
}

/// Batch-normalization mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and report updated running stats.
    TrainUpdate,
    /// Normalize with batch statistics without touching running stats
    /// (used by the masked second forward of a restricted-input step).
    TrainFrozen,
    /// Normalize with the stored running statistics.
    Eval,
}

/// Per-channel batch normalization over (N, C, H, W).
///
/// Returns the output and, in [`BnMode::TrainUpdate`], the new running
/// (mean, var) the caller should store.
#[allow(clippy::too_many_arguments)]
pub fn batchnorm2d<E: Scalar>(
    x: &Tensor<E>,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    running_mean: &[E],
    running_var: &[E],
    mode: BnMode,
    momentum: E,
    eps: E,
) -> Result<(Tensor<E>, Option<(Vec<E>, Vec<E>)>)> {
    let [n, c, h, w]: [usize; 4] = x
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("batchnorm input must be N,C,H,W: {:?}", x.shape())))?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Shape(format!(
            "batchnorm affine params must be [{c}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        )));
    }
    if running_mean.len() != c || running_var.len() != c {
        return Err(Error::config("batchnorm running stats length mismatch"));
    }
    let hw = h * w;
    let count = n * hw;
    if count == 0 {
        return Err(Error::config("batchnorm over an empty batch"));
    }

    let (mean, var, updated) = match mode {
        BnMode::Eval => (running_mean.to_vec(), running_var.to_vec(), None),
        BnMode::TrainUpdate | BnMode::TrainFrozen => {
            let (mean, var) = kernels::channel_moments(x.data(), n, c, hw);
            let updated = if mode == BnMode::TrainUpdate {
                // Running variance stores the unbiased estimate.
                let bessel = if count > 1 {
                    E::from_usize(count) / E::from_usize(count - 1)
                } else {
                    E::ONE
                };
                let new_mean: Vec<E> = running_mean
                    .iter()
                    .zip(&mean)
                    .map(|(&r, &b)| (E::ONE - momentum) * r + momentum * b)
                    .collect();
                let new_var: Vec<E> = running_var
                    .iter()
                    .zip(&var)
                    .map(|(&r, &b)| (E::ONE - momentum) * r + momentum * b * bessel)
                    .collect();
                Some((new_mean, new_var))
            } else {
                None
            };
            (mean, var, updated)
        }
    };

    let inv_std: Vec<E> = var.iter().map(|&v| E::ONE / (v + eps).sqrt()).collect();
    let mut xhat = vec![E::ZERO; x.numel()];
    let mut data = vec![E::ZERO; x.numel()];
    let (gd, bd) = (gamma.data(), beta.data());
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let (m, s, g, b) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
            for i in 0..hw {
                let xh = (x.data()[base + i] - m) * s;
                xhat[base + i] = xh;
                data[base + i] = g * xh + b;
            }
        }
    }

    let tape = common_tape(&[x, gamma, beta])?;
    let (xn, gn, bn) = (x.node_index(), gamma.node_index(), beta.node_index());
    let parents: Vec<usize> = [xn, gn, bn].into_iter().flatten().collect();
    let xhat = Arc::new(xhat);
    let gamma_d = gamma.data_arc();
    let inv_std_c = inv_std.clone();
    let batch_stats = mode != BnMode::Eval;
    let back = move |gy: &[E]| {
        let cnt = E::from_usize(count);
        let mut out = Vec::new();
        if xn.is_some() {
            let mut dx = vec![E::ZERO; gy.len()];
            if batch_stats {
                // dx = g*s * (gy - mean(gy) - xhat * mean(gy*xhat)) per channel
                for ci in 0..c {
                    let mut sum_gy = E::ZERO;
                    let mut sum_gy_xhat = E::ZERO;
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            sum_gy += gy[base + i];
                            sum_gy_xhat += gy[base + i] * xhat[base + i];
                        }
                    }
                    let m_gy = sum_gy / cnt;
                    let m_gy_xhat = sum_gy_xhat / cnt;
                    let gs = gamma_d[ci] * inv_std_c[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] =
                                gs * (gy[base + i] - m_gy - xhat[base + i] * m_gy_xhat);
                        }
                    }
                }
            } else {
                for ci in 0..c {
                    let gs = gamma_d[ci] * inv_std_c[ci];
                    for ni in 0..n {
                        let base = (ni * c + ci) * hw;
                        for i in 0..hw {
                            dx[base + i] = gy[base + i] * gs;
                        }
                    }
                }
            }
            out.push(dx);
        }
        if gn.is_some() {
            let mut dg = vec![E::ZERO; c];
            for ci in 0..c {
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        dg[ci] += gy[base + i] * xhat[base + i];
                    }
                }
            }
            out.push(dg);
        }
        if bn.is_some() {
            let mut db = vec![E::ZERO; c];
            for ci in 0..c {
                for ni in 0..n {
                    let base = (ni * c + ci) * hw;
                    for i in 0..hw {
                        db[ci] += gy[base + i];
                    }
                }
            }
            out.push(db);
        }
        out
    };
    Ok((
        emit(tape, parents, Box::new(back), data, x.shape().to_vec()),
        updated,
    ))
}

/// Bilinear upsampling, half-pixel convention (upsampling only).
pub fn upsample_bilinear<E: Scalar>(x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let [n, c, h, w]: [usize; 4] = x
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("upsample input must be N,C,H,W: {:?}", x.shape())))?;
    if oh == 0 || ow == 0 {
        return Err(Error::config("upsample target size must be positive"));
    }
    if oh < h || ow < w {
        return Err(Error::config(format!(
            "upsample target {oh}x{ow} smaller than input {h}x{w}"
        )));
    }
    let data = kernels::upsample_bilinear_forward(x.data(), n * c, h, w, oh, ow);
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let back = move |gy: &[E]| vec![kernels::upsample_bilinear_backward(gy, n * c, h, w, oh, ow)];
    Ok(emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        data,
        vec![n, c, oh, ow],
    ))
}

/// Adaptive average pooling (downsampling only; windows tile the input).
pub fn adaptive_avg_pool<E: Scalar>(x: &Tensor<E>, oh: usize, ow: usize) -> Result<Tensor<E>> {
    let [n, c, h, w]: [usize; 4] = x
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("pool input must be N,C,H,W: {:?}", x.shape())))?;
    if oh == 0 || ow == 0 {
        return Err(Error::config("pool target size must be positive"));
    }
    if oh > h || ow > w {
        return Err(Error::config(format!(
            "adaptive pool target {oh}x{ow} larger than input {h}x{w}"
        )));
    }
    let data = kernels::adaptive_avg_pool_forward(x.data(), n * c, h, w, oh, ow);
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let back = move |gy: &[E]| vec![kernels::adaptive_avg_pool_backward(gy, n * c, h, w, oh, ow)];
    Ok(emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        data,
        vec![n, c, oh, ow],
    ))
}

/// Global average pooling to shape [N, C].
pub fn global_avg_pool<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let pooled = adaptive_avg_pool(x, 1, 1)?;
    let n = x.shape()[0];
    let c = x.shape()[1];
    reshape(&pooled, &[n, c])
}

/// Max pooling with square kernel.
pub fn maxpool2d<E: Scalar>(
    x: &Tensor<E>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<E>> {
    let [n, c, h, w]: [usize; 4] = x
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("pool input must be N,C,H,W: {:?}", x.shape())))?;
    if k == 0 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k {
        return Err(Error::config("maxpool kernel/stride invalid for input"));
    }
    if padding >= k {
        return Err(Error::config("maxpool padding must be smaller than kernel"));
    }
    let (data, arg, oh, ow) = kernels::maxpool_forward(x.data(), n * c, h, w, k, stride, padding);
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let arg = Arc::new(arg);
    let back = move |gy: &[E]| vec![kernels::maxpool_backward(gy, &arg, n * c, h, w, oh, ow)];
    Ok(emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        data,
        vec![n, c, oh, ow],
    ))
}

/// Clamp to [-1, 1]; gradient passes strictly inside the interval.
pub fn hardtanh<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let one = E::ONE;
    let data: Vec<E> = x.data().iter().map(|&v| v.maxv(-one).minv(one)).collect();
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let xd = x.data_arc();
    let back = move |gy: &[E]| {
        vec![gy
            .iter()
            .zip(xd.iter())
            .map(|(&g, &v)| if v > -E::ONE && v < E::ONE { g } else { E::ZERO })
            .collect()]
    };
    emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        data,
        x.shape().to_vec(),
    )
}

/// PReLU with one shared learnable slope.
pub fn prelu<E: Scalar>(x: &Tensor<E>, slope: &Tensor<E>) -> Result<Tensor<E>> {
    if slope.numel() != 1 {
        return Err(Error::Shape("prelu slope must be a single element".into()));
    }
    let a = slope.data()[0];
    let data: Vec<E> = x
        .data()
        .iter()
        .map(|&v| if v >= E::ZERO { v } else { a * v })
        .collect();
    let tape = common_tape(&[x, slope])?;
    let (xn, sn) = (x.node_index(), slope.node_index());
    let parents: Vec<usize> = [xn, sn].into_iter().flatten().collect();
    let xd = x.data_arc();
    let back = move |gy: &[E]| {
        let mut out = Vec::new();
        if xn.is_some() {
            out.push(
                gy.iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| if v >= E::ZERO { g } else { g * a })
                    .collect(),
            );
        }
        if sn.is_some() {
            let mut da = E::ZERO;
            for (&g, &v) in gy.iter().zip(xd.iter()) {
                if v < E::ZERO {
                    da += g * v;
                }
            }
            out.push(vec![da]);
        }
        out
    };
    Ok(emit(tape, parents, Box::new(back), data, x.shape().to_vec()))
}

/// Concatenate along the channel axis of (N, C, H, W) tensors.
pub fn concat_channels<E: Scalar>(xs: &[&Tensor<E>]) -> Result<Tensor<E>> {
    if xs.is_empty() {
        return Err(Error::Contract("concat of zero tensors".into()));
    }
    let [n, _, h, w]: [usize; 4] = xs[0]
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("concat inputs must be N,C,H,W: {:?}", xs[0].shape())))?;
    let mut channels = Vec::with_capacity(xs.len());
    for x in xs {
        let s = x.shape();
        if s.len() != 4 || s[0] != n || s[2] != h || s[3] != w {
            return Err(Error::Shape(format!(
                "concat spatial/batch mismatch: {:?} vs {:?}",
                xs[0].shape(),
                s
            )));
        }
        channels.push(s[1]);
    }
    let c_total: usize = channels.iter().sum();
    let hw = h * w;
    let mut data = vec![E::ZERO; n * c_total * hw];
    for ni in 0..n {
        let mut c_off = 0;
        for (x, &ci) in xs.iter().zip(&channels) {
            let src = &x.data()[ni * ci * hw..(ni + 1) * ci * hw];
            data[(ni * c_total + c_off) * hw..(ni * c_total + c_off + ci) * hw]
                .copy_from_slice(src);
            c_off += ci;
        }
    }
    let tape = common_tape(xs)?;
    let node_ids: Vec<Option<usize>> = xs.iter().map(|x| x.node_index()).collect();
    let parents: Vec<usize> = node_ids.iter().flatten().copied().collect();
    let chans = channels.clone();
    let back = move |gy: &[E]| {
        let mut out = Vec::new();
        let mut c_off = 0;
        for (&ci, id) in chans.iter().zip(&node_ids) {
            if id.is_some() {
                let mut g = vec![E::ZERO; n * ci * hw];
                for ni in 0..n {
                    let src = &gy[(ni * c_total + c_off) * hw..(ni * c_total + c_off + ci) * hw];
                    g[ni * ci * hw..(ni + 1) * ci * hw].copy_from_slice(src);
                }
                out.push(g);
            }
            c_off += ci;
        }
        out
    };
    Ok(emit(
        tape,
        parents,
        Box::new(back),
        data,
        vec![n, c_total, h, w],
    ))
}

/// Same data, new shape (element count preserved).
pub fn reshape<E: Scalar>(x: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
    if numel(shape) != x.numel() {
        return Err(Error::Shape(format!(
            "reshape {:?} -> {:?} changes element count",
            x.shape(),
            shape
        )));
    }
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let back = move |gy: &[E]| vec![gy.to_vec()];
    Ok(emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        x.data().to_vec(),
        shape.to_vec(),
    ))
}

/// Flatten to [N, rest].
pub fn flatten<E: Scalar>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let n = *x
        .shape()
        .first()
        .ok_or_else(|| Error::Shape("flatten of 0-d tensor".into()))?;
    reshape(x, &[n, x.numel() / n])
}

/// Mean softmax cross-entropy of logits [N, K] against integer targets,
/// stabilized by per-row max subtraction.
pub fn cross_entropy<E: Scalar>(logits: &Tensor<E>, targets: &[usize]) -> Result<Tensor<E>> {
    let [n, k]: [usize; 2] = logits
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("cross_entropy logits must be N,K: {:?}", logits.shape())))?;
    if targets.len() != n {
        return Err(Error::Shape(format!(
            "cross_entropy: {n} rows vs {} targets",
            targets.len()
        )));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Index(format!("target {bad} out of range 0..{k}")));
    }
    let mut probs = vec![E::ZERO; n * k];
    let mut loss = E::ZERO;
    for (i, &t) in targets.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().copied().fold(row[0], |a, b| a.maxv(b));
        let mut denom = E::ZERO;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            probs[i * k + j] = e;
            denom += e;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p = *p / denom;
        }
        loss += denom.ln() - (row[t] - max);
    }
    loss = loss / E::from_usize(n);

    let parents: Vec<usize> = logits.node_index().into_iter().collect();
    let probs = Arc::new(probs);
    let targets: Vec<usize> = targets.to_vec();
    let back = move |gy: &[E]| {
        let g = gy[0] / E::from_usize(n);
        let mut dl = vec![E::ZERO; n * k];
        for (i, &t) in targets.iter().enumerate() {
            for j in 0..k {
                let onehot = if j == t { E::ONE } else { E::ZERO };
                dl[i * k + j] = (probs[i * k + j] - onehot) * g;
            }
        }
        vec![dl]
    };
    Ok(emit(
        logits.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        vec![loss],
        vec![1],
    ))
}

/// Bi-Real-style piecewise-polynomial surrogate factor for the sign
/// gradient: 2+2x on [-1,0), 2-2x on [0,1), 0 elsewhere.
pub fn bireal_grad_factor<E: Scalar>(x: E) -> E {
    let two = E::from_f64(2.0);
    if x >= -E::ONE && x < E::ZERO {
        two + two * x
    } else if x >= E::ZERO && x < E::ONE {
        two - two * x
    } else {
        E::ZERO
    }
}

fn sign_value<E: Scalar>(v: E) -> E {
    if v >= E::ZERO {
        E::ONE
    } else {
        -E::ONE
    }
}

/// Binarization to {-1, +1} (0 maps to +1) with the Bi-Real surrogate
/// gradient — the activation-side sign.
pub fn sign_bireal<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = x.data().iter().map(|&v| sign_value(v)).collect();
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let xd = x.data_arc();
    let back = move |gy: &[E]| {
        vec![gy
            .iter()
            .zip(xd.iter())
            .map(|(&g, &v)| g * bireal_grad_factor(v))
            .collect()]
    };
    emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        data,
        x.shape().to_vec(),
    )
}

/// Binarization with the clipped straight-through gradient (passes where
/// |x| <= 1) — the latent-weight-side sign.
pub fn sign_ste_clip<E: Scalar>(x: &Tensor<E>) -> Tensor<E> {
    let data: Vec<E> = x.data().iter().map(|&v| sign_value(v)).collect();
    let parents: Vec<usize> = x.node_index().into_iter().collect();
    let xd = x.data_arc();
    let back = move |gy: &[E]| {
        vec![gy
            .iter()
            .zip(xd.iter())
            .map(|(&g, &v)| if v.abs() <= E::ONE { g } else { E::ZERO })
            .collect()]
    };
    emit(
        x.node().map(|(t, _)| t),
        parents,
        Box::new(back),
        data,
        x.shape().to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Param;

    const LN_10: f64 = 2.302585092994046;

    #[test]
    fn conv_scalar_kernel_example() {
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, 4.0], &[1, 1, 2, 2]).unwrap();
        let w = Tensor::from_vec(vec![2.0f64], &[1, 1, 1, 1]).unwrap();
        let y = conv2d(&x, &w, 1, 0, 1).unwrap();
        assert_eq!(y.data(), &[2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_k() {
        let logits = Tensor::from_vec(vec![0.25f64; 10], &[1, 10]).unwrap();
        let loss = cross_entropy(&logits, &[7]).unwrap();
        assert!((loss.item().unwrap() - LN_10).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_and_direct() {
        let logits = Tensor::from_vec(vec![100.0f64, 0.0, 0.0], &[1, 3]).unwrap();
        let loss = cross_entropy(&logits, &[0]).unwrap();
        assert!(loss.item().unwrap().abs() < 1e-12);

        let logits = Tensor::from_vec(vec![1.0f64, 2.0], &[1, 2]).unwrap();
        let loss = cross_entropy(&logits, &[1]).unwrap();
        assert!((loss.item().unwrap() - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let logits = Tensor::from_vec(vec![0.0f32; 4], &[2, 2]).unwrap();
        assert!(matches!(
            cross_entropy(&logits, &[0, 2]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let p = Param::new("x", vec![3.0f64, -1.0, 0.5], &[3]).unwrap();
        let x = p.tracked(&tape);
        sum(&x).unwrap().backward().unwrap();
        assert_eq!(p.grad(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic_is_2x() {
        let tape = Tape::new();
        let p = Param::new("x", vec![3.0f64, -1.0, 0.5], &[3]).unwrap();
        let x = p.tracked(&tape);
        let y = mul(&x, &x).unwrap();
        sum(&y).unwrap().backward().unwrap();
        assert_eq!(p.grad(), vec![6.0, -2.0, 1.0]);
    }

    #[test]
    fn hadamard_with_ones_is_identity() {
        let x = Tensor::from_vec(vec![1.5f32, -2.0, 0.0, 7.25], &[4]).unwrap();
        let ones = Tensor::full(&[4], 1.0f32);
        let y = mul(&x, &ones).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn concat_split_roundtrip() {
        let a = Tensor::from_vec((0..8).map(|i| i as f64).collect(), &[2, 1, 2, 2]).unwrap();
        let b = Tensor::from_vec((8..24).map(|i| i as f64).collect(), &[2, 2, 2, 2]).unwrap();
        let cat = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(cat.shape(), &[2, 3, 2, 2]);
        // channel slices reproduce the inputs exactly
        for ni in 0..2 {
            assert_eq!(&cat.data()[ni * 12..ni * 12 + 4], &a.data()[ni * 4..(ni + 1) * 4]);
            assert_eq!(&cat.data()[ni * 12 + 4..(ni + 1) * 12], &b.data()[ni * 8..(ni + 1) * 8]);
        }
    }

    #[test]
    fn bn_identity_statistics_is_identity() {
        let x = Tensor::from_vec(vec![0.5f64, -1.0, 2.0, 0.0, 1.0, -3.0, 0.25, 4.0], &[1, 2, 2, 2])
            .unwrap();
        let gamma = Tensor::full(&[2], 1.0f64);
        let beta = Tensor::zeros(&[2]);
        let (y, _) = batchnorm2d(
            &x,
            &gamma,
            &beta,
            &[0.0, 0.0],
            &[1.0, 1.0],
            BnMode::Eval,
            0.1,
            1e-15,
        )
        .unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn bn_constant_input_trains_to_beta() {
        let x = Tensor::full(&[2, 1, 2, 2], 7.0f64);
        let gamma = Tensor::full(&[1], 1.0f64);
        let beta = Tensor::zeros(&[1]);
        let (y, updated) = batchnorm2d(
            &x,
            &gamma,
            &beta,
            &[0.0],
            &[1.0],
            BnMode::TrainUpdate,
            0.1,
            1e-5,
        )
        .unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-9));
        let (rm, _rv) = updated.unwrap();
        assert!((rm[0] - 0.7).abs() < 1e-12); // 0.9*0 + 0.1*7
    }

    #[test]
    fn bn_moments_match_affine_params() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<f64> = (0..4 * 8 * 5 * 5).map(|_| rng.random::<f64>() * 3.0 - 1.0).collect();
        let x = Tensor::from_vec(data, &[4, 8, 5, 5]).unwrap();
        let gamma = Tensor::full(&[8], 1.5f64);
        let beta = Tensor::full(&[8], -0.25f64);
        let (y, _) = batchnorm2d(
            &x,
            &gamma,
            &beta,
            &vec![0.0; 8],
            &vec![1.0; 8],
            BnMode::TrainFrozen,
            0.1,
            1e-10,
        )
        .unwrap();
        let (mean, var) = kernels::channel_moments(y.data(), 4, 8, 25);
        for ci in 0..8 {
            assert!((mean[ci] - -0.25).abs() < 1e-5);
            assert!((var[ci] - 1.5 * 1.5).abs() < 1e-5);
        }
    }

    #[test]
    fn sign_examples() {
        let x = Tensor::from_vec(vec![-2.0f64, 0.0, 5.0, -0.3], &[4]).unwrap();
        let y = sign_bireal(&x);
        assert_eq!(y.data(), &[-1.0, 1.0, 1.0, -1.0]);
    }

    #[test]
    fn bireal_surrogate_factors() {
        assert_eq!(bireal_grad_factor(-1.0f64), 0.0);
        assert_eq!(bireal_grad_factor(0.5f64), 1.0);
        assert_eq!(bireal_grad_factor(2.0f64), 0.0);
        assert_eq!(bireal_grad_factor(-0.5f64), 1.0);
        assert_eq!(bireal_grad_factor(0.0f64), 2.0);
    }

    #[test]
    fn sign_is_idempotent() {
        let x = Tensor::from_vec(vec![-2.0f32, 0.0, 5.0, -0.3, 0.7], &[5]).unwrap();
        let s1 = sign_bireal(&x);
        let s2 = sign_bireal(&s1);
        assert_eq!(s1.data(), s2.data());
    }

    #[test]
    fn backward_visits_each_node_once() {
        let tape = Tape::new();
        let p = Param::new("x", vec![1.0f64, 2.0], &[2]).unwrap();
        let x = p.tracked(&tape);
        let y = mul(&x, &x).unwrap();
        let z = add(&y, &x).unwrap();
        let loss = sum(&z).unwrap();
        let report = loss.backward().unwrap();
        assert_eq!(report.nodes_visited, report.tape_len);
        assert_eq!(report.nodes_visited, 4);
    }

    #[test]
    fn upsample_rejects_downscale() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(upsample_bilinear::<f32>(&x, 2, 2).is_err());
    }
}

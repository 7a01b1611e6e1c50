//! Binarization semantics and the exact bitpacked XNOR+popcount
//! convolution engine.
//!
//! The packed kernel is integer-exact against a dense convolution over
//! sign values in which zero-padded positions contribute 0 (neither +1
//! nor -1): padded lanes are cleared in both the operand words and the
//! lane mask, and each output element is `2*popcount(xnor & mask) -
//! popcount(mask)`. Bit convention: bit = 1 means +1 (sign(0) = +1).
//!
//! Gradients: activations flow through the Bi-Real piecewise-polynomial
//! surrogate, latent weights through a clipped straight-through estimator
//! (passes where |w| <= 1).

use std::cell::RefCell;
use std::sync::Arc;

use crate::counters::OpCounters;
use crate::error::{Error, Result};
use crate::par::{for_each_chunk_mut, map_collect};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, Conv2dDims};
use crate::tensor::ops::{bireal_grad_factor, emit};
use crate::tensor::{common_tape, Param, Tensor};

const WORD_BITS: usize = 64;

/// Bit-packed {-1, +1} tensor: one bit per element of the last axis,
/// with a per-row validity mask covering tail bits and (for convolution
/// patches) zero-padded positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBitTensor {
    logical_shape: Vec<usize>,
    rows: usize,
    row_len: usize,
    words_per_row: usize,
    words: Vec<u64>,
    lane_mask: Vec<u64>,
}

impl PackedBitTensor {
    /// Pack sign bits of `data` along the last axis of `shape`.
    /// Bit i set <=> element i >= 0.
    pub fn pack<E: Scalar>(data: &[E], shape: &[usize]) -> Result<Self> {
        let row_len = *shape
            .last()
            .ok_or_else(|| Error::Shape("pack of 0-d tensor".into()))?;
        let rows: usize = shape[..shape.len() - 1].iter().product();
        if rows * row_len != data.len() {
            return Err(Error::Shape(format!(
                "pack: shape {shape:?} does not match {} elements",
                data.len()
            )));
        }
        let words_per_row = row_len.div_ceil(WORD_BITS).max(1);
        let mut words = vec![0u64; rows * words_per_row];
        let mut lane_mask = vec![0u64; rows * words_per_row];
        for r in 0..rows {
            let src = &data[r * row_len..(r + 1) * row_len];
            let wbase = r * words_per_row;
            for (i, &v) in src.iter().enumerate() {
                let (wi, bi) = (i / WORD_BITS, i % WORD_BITS);
                lane_mask[wbase + wi] |= 1u64 << bi;
                if v >= E::ZERO {
                    words[wbase + wi] |= 1u64 << bi;
                }
            }
        }
        Ok(PackedBitTensor {
            logical_shape: shape.to_vec(),
            rows,
            row_len,
            words_per_row,
            words,
            lane_mask,
        })
    }

    pub fn logical_shape(&self) -> &[usize] {
        &self.logical_shape
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn row_len(&self) -> usize {
        self.row_len
    }

    pub fn words_per_row(&self) -> usize {
        self.words_per_row
    }

    pub fn row_words(&self, r: usize) -> &[u64] {
        &self.words[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    pub fn row_mask(&self, r: usize) -> &[u64] {
        &self.lane_mask[r * self.words_per_row..(r + 1) * self.words_per_row]
    }

    /// Reconstruct the sign tensor: +1 where the bit is set, -1 where it
    /// is a valid zero bit (invalid lanes do not correspond to elements).
    pub fn unpack<E: Scalar>(&self) -> Vec<E> {
        let mut out = vec![E::ZERO; self.rows * self.row_len];
        for r in 0..self.rows {
            let wbase = r * self.words_per_row;
            for i in 0..self.row_len {
                let (wi, bi) = (i / WORD_BITS, i % WORD_BITS);
                let bit = (self.words[wbase + wi] >> bi) & 1;
                out[r * self.row_len + i] = if bit == 1 { E::ONE } else { -E::ONE };
            }
        }
        out
    }

    /// Check the packing invariants (tests and debug assertions).
    pub fn invariants_hold(&self) -> bool {
        for r in 0..self.rows {
            for (w, m) in self.row_words(r).iter().zip(self.row_mask(r)) {
                if w & !m != 0 {
                    return false; // invalid lane bit set in words
                }
            }
            let valid: u32 = self.row_mask(r).iter().map(|m| m.count_ones()).sum();
            if (valid as usize) > self.row_len {
                return false;
            }
        }
        true
    }
}

/// Signed dot product of two packed rows restricted to the valid lanes of
/// `mask`: sum over valid i of sign_a[i] * sign_b[i].
#[inline]
fn packed_dot(a: &[u64], b: &[u64], mask: &[u64]) -> i64 {
    let mut agree = 0u32;
    let mut valid = 0u32;
    for ((&wa, &wb), &m) in a.iter().zip(b).zip(mask) {
        agree += (!(wa ^ wb) & m).count_ones();
        valid += m.count_ones();
    }
    2 * agree as i64 - valid as i64
}

/// Patch rows of one sample for the packed convolution: one row per
/// output position, one bit per (cin, ky, kx) tap; out-of-bounds taps are
/// masked out so padding contributes zero.
fn pack_patches<E: Scalar>(xs: &[E], d: &Conv2dDims) -> PackedBitTensor {
    let row_len = d.cin * d.kh * d.kw;
    let rows = d.out_hw();
    let words_per_row = row_len.div_ceil(WORD_BITS).max(1);
    let mut words = vec![0u64; rows * words_per_row];
    let mut lane_mask = vec![0u64; rows * words_per_row];
    for oy in 0..d.out_h {
        for ox in 0..d.out_w {
            let r = oy * d.out_w + ox;
            let wbase = r * words_per_row;
            let mut lane = 0usize;
            for c in 0..d.cin {
                let plane = &xs[c * d.h * d.w..(c + 1) * d.h * d.w];
                for ky in 0..d.kh {
                    let iy = (oy * d.stride + ky) as isize - d.padding as isize;
                    for kx in 0..d.kw {
                        let ix = (ox * d.stride + kx) as isize - d.padding as isize;
                        if iy >= 0 && iy < d.h as isize && ix >= 0 && ix < d.w as isize {
                            let (wi, bi) = (lane / WORD_BITS, lane % WORD_BITS);
                            lane_mask[wbase + wi] |= 1u64 << bi;
                            if plane[iy as usize * d.w + ix as usize] >= E::ZERO {
                                words[wbase + wi] |= 1u64 << bi;
                            }
                        }
                        lane += 1;
                    }
                }
            }
        }
    }
    PackedBitTensor {
        logical_shape: vec![rows, row_len],
        rows,
        row_len,
        words_per_row,
        words,
        lane_mask,
    }
}

/// Raw packed convolution forward (no tape). Parallel over batch items.
pub fn binary_conv2d_exec<E: Scalar>(x: &[E], weights: &PackedBitTensor, d: &Conv2dDims) -> Vec<E> {
    debug_assert_eq!(weights.rows, d.cout);
    debug_assert_eq!(weights.row_len, d.cin * d.kh * d.kw);
    debug_assert_eq!(d.groups, 1, "binary convolutions are ungrouped");
    let in_stride = d.cin * d.h * d.w;
    let out_stride = d.cout * d.out_hw();
    let ohw = d.out_hw();
    let mut out = vec![E::ZERO; d.n * out_stride];
    for_each_chunk_mut(&mut out, out_stride, |s, out_s| {
        let patches = pack_patches(&x[s * in_stride..(s + 1) * in_stride], d);
        for co in 0..d.cout {
            let wrow = weights.row_words(co);
            for p in 0..ohw {
                let dot = packed_dot(patches.row_words(p), wrow, patches.row_mask(p));
                out_s[co * ohw + p] = E::from_f64(dot as f64);
            }
        }
    });
    out
}

/// Optional real-valued scaling factors (off by default; the method works
/// without them, but they are kept for compatibility).
#[derive(Debug, Clone)]
pub struct ScalingFactors<E: Scalar> {
    /// Per-output-channel weight factor (mean |w| of the channel).
    pub alpha: Vec<E>,
    /// Per-layer activation factor.
    pub beta: E,
}

/// Binarized convolution layer with latent real-valued weights.
///
/// The packed sign-weight cache is refreshed lazily whenever the latent
/// weight version changes, so it always equals `pack(sign(weight))`.
pub struct BinaryConvLayer<E: Scalar> {
    pub weight: Param<E>,
    pub stride: usize,
    pub padding: usize,
    pub scaling_enabled: bool,
    pub beta: E,
    cache: RefCell<Option<(u64, Arc<PackedBitTensor>, Arc<Vec<E>>)>>,
}

impl<E: Scalar> BinaryConvLayer<E> {
    pub fn new(weight: Param<E>, stride: usize, padding: usize, scaling_enabled: bool) -> Self {
        weight.set_latent_unit_clip(true);
        BinaryConvLayer {
            weight,
            stride,
            padding,
            scaling_enabled,
            beta: E::ONE,
            cache: RefCell::new(None),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Packed sign weights and per-channel alpha factors for the current
    /// latent weight version.
    pub fn packed(&self) -> (Arc<PackedBitTensor>, Arc<Vec<E>>) {
        let version = self.weight.version();
        if let Some((v, p, a)) = self.cache.borrow().as_ref() {
            if *v == version {
                return (Arc::clone(p), Arc::clone(a));
            }
        }
        let shape = self.weight.shape().to_vec();
        let value = self.weight.value();
        let cout = shape[0];
        let flat = value.len() / cout;
        let packed =
            PackedBitTensor::pack(&value, &[cout, flat]).expect("weight packs along rows");
        let mut alpha = vec![E::ONE; cout];
        if self.scaling_enabled {
            for (c, a) in alpha.iter_mut().enumerate() {
                let row = &value[c * flat..(c + 1) * flat];
                let mean_abs: E = row.iter().map(|w| w.abs()).sum::<E>() / E::from_usize(flat);
                // keep factors strictly positive even for all-zero rows
                *a = mean_abs.maxv(E::from_f64(1e-12));
            }
        }
        let packed = Arc::new(packed);
        let alpha = Arc::new(alpha);
        *self.cache.borrow_mut() = Some((version, Arc::clone(&packed), Arc::clone(&alpha)));
        (packed, alpha)
    }
}

fn sign_buf<E: Scalar>(x: &[E]) -> Vec<E> {
    x.iter()
        .map(|&v| if v >= E::ZERO { E::ONE } else { -E::ONE })
        .collect()
}

/// Binarized convolution as a tape op: exact packed forward, surrogate /
/// straight-through backward. Pass `tape` during training so the latent
/// weight participates; `None` for inference.
pub fn binary_conv2d<E: Scalar>(
    x: &Tensor<E>,
    layer: &BinaryConvLayer<E>,
    tape: Option<&crate::tensor::Tape<E>>,
    counters: &OpCounters,
) -> Result<Tensor<E>> {
    let weight_shape = layer.weight.shape();
    let d = Conv2dDims::new(x.shape(), weight_shape, layer.stride, layer.padding, 1)?;
    OpCounters::bump(&counters.packed_conv);
    let (packed, alpha) = layer.packed();
    let mut data = binary_conv2d_exec(x.data(), &packed, &d);
    let scaled = layer.scaling_enabled;
    let beta = layer.beta;
    if scaled {
        let ohw = d.out_hw();
        for s in 0..d.n {
            for co in 0..d.cout {
                let f = alpha[co] * beta;
                for v in &mut data[(s * d.cout + co) * ohw..(s * d.cout + co + 1) * ohw] {
                    *v *= f;
                }
            }
        }
    }

    let w_leaf = layer.weight.tracked_or_const(tape);
    let tape = common_tape(&[x, &w_leaf])?;
    let (xn, wn) = (x.node_index(), w_leaf.node_index());
    let parents: Vec<usize> = [xn, wn].into_iter().flatten().collect();
    if parents.is_empty() {
        return Tensor::from_vec(data, &d.out_shape());
    }

    let xd = x.data_arc();
    let wd = w_leaf.data_arc();
    let alpha_b = Arc::clone(&alpha);
    let back = move |gy: &[E]| {
        // undo the optional scaling on the upstream gradient
        let gy_eff: Vec<E> = if scaled {
            let ohw = d.out_hw();
            let mut g = gy.to_vec();
            for s in 0..d.n {
                for co in 0..d.cout {
                    let f = alpha_b[co] * beta;
                    for v in &mut g[(s * d.cout + co) * ohw..(s * d.cout + co + 1) * ohw] {
                        *v *= f;
                    }
                }
            }
            g
        } else {
            gy.to_vec()
        };
        let sign_w = sign_buf(&wd);
        let mut out = Vec::new();
        if xn.is_some() {
            let d_sign = kernels::conv2d_backward_input(&gy_eff, &sign_w, &d);
            out.push(
                d_sign
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| g * bireal_grad_factor(v))
                    .collect(),
            );
        }
        if wn.is_some() {
            let sign_x = sign_buf(&xd);
            let dw_sign = kernels::conv2d_backward_weight(&sign_x, &gy_eff, &d);
            out.push(
                dw_sign
                    .iter()
                    .zip(wd.iter())
                    .map(|(&g, &v)| if v.abs() <= E::ONE { g } else { E::ZERO })
                    .collect(),
            );
        }
        out
    };
    Ok(emit(tape, parents, Box::new(back), data, d.out_shape()))
}

/// Binarized fully connected layer: 1x1-convolution semantics on
/// flattened features, same exactness contract as [`binary_conv2d`].
pub fn binary_linear<E: Scalar>(
    x: &Tensor<E>,
    weight: &Param<E>,
    tape: Option<&crate::tensor::Tape<E>>,
    counters: &OpCounters,
) -> Result<Tensor<E>> {
    let [n, f]: [usize; 2] = x
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("binary_linear input must be N,F: {:?}", x.shape())))?;
    let [k, wf]: [usize; 2] = weight
        .shape()
        .try_into()
        .map_err(|_| Error::Shape(format!("binary_linear weight must be K,F: {:?}", weight.shape())))?;
    if wf != f {
        return Err(Error::Shape(format!(
            "binary_linear: input F={f}, weight F={wf}"
        )));
    }
    OpCounters::bump(&counters.packed_conv);
    let wv = weight.value();
    let packed_w = PackedBitTensor::pack(&wv, &[k, f])?;
    let xdata = x.data();
    let out = {
        let rows = map_collect(n, |i| {
            let row = &xdata[i * f..(i + 1) * f];
            let packed_x = PackedBitTensor::pack(row, &[1, f]).expect("row packs");
            let mut out_row = vec![E::ZERO; k];
            for (ki, o) in out_row.iter_mut().enumerate() {
                let dot = packed_dot(
                    packed_x.row_words(0),
                    packed_w.row_words(ki),
                    packed_x.row_mask(0),
                );
                *o = E::from_f64(dot as f64);
            }
            out_row
        });
        rows.concat()
    };

    let w_leaf = weight.tracked_or_const(tape);
    let tape = common_tape(&[x, &w_leaf])?;
    let (xn, wn) = (x.node_index(), w_leaf.node_index());
    let parents: Vec<usize> = [xn, wn].into_iter().flatten().collect();
    if parents.is_empty() {
        return Tensor::from_vec(out, &[n, k]);
    }
    let xd = x.data_arc();
    let wd = w_leaf.data_arc();
    let back = move |gy: &[E]| {
        let mut grads = Vec::new();
        if xn.is_some() {
            let sign_w = sign_buf(&wd);
            let d_sign = kernels::matmul(gy, &sign_w, n, k, f);
            grads.push(
                d_sign
                    .iter()
                    .zip(xd.iter())
                    .map(|(&g, &v)| g * bireal_grad_factor(v))
                    .collect(),
            );
        }
        if wn.is_some() {
            let sign_x = sign_buf(&xd);
            let dw_sign = kernels::matmul_atb(gy, &sign_x, k, n, f);
            grads.push(
                dw_sign
                    .iter()
                    .zip(wd.iter())
                    .map(|(&g, &v)| if v.abs() <= E::ONE { g } else { E::ZERO })
                    .collect(),
            );
        }
        grads
    };
    Ok(emit(tape, parents, Box::new(back), out, vec![n, k]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn counters() -> OpCounters {
        OpCounters::default()
    }

    #[test]
    fn pack_follows_sign_rule() {
        let p = PackedBitTensor::pack(&[1.5f32, -0.2, 0.0], &[3]).unwrap();
        assert_eq!(p.row_words(0)[0], 0b101);
        assert_eq!(p.row_mask(0)[0], 0b111);
        assert!(p.invariants_hold());
    }

    #[test]
    fn pack_long_row_masks_tail() {
        let p = PackedBitTensor::pack(&vec![-1.0f64; 70], &[70]).unwrap();
        assert_eq!(p.words_per_row(), 2);
        assert_eq!(p.row_words(0), &[0, 0]);
        assert_eq!(p.row_mask(0)[0], u64::MAX);
        assert_eq!(p.row_mask(0)[1], (1u64 << 6) - 1);
        assert!(p.invariants_hold());
    }

    #[test]
    fn unpack_pack_is_sign() {
        use rand::prelude::*;
        use rand_chacha::ChaCha8Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(1..200);
            let data: Vec<f32> = (0..n).map(|_| rng.random::<f32>() * 4.0 - 2.0).collect();
            let p = PackedBitTensor::pack(&data, &[n]).unwrap();
            let un: Vec<f32> = p.unpack();
            for (u, v) in un.iter().zip(&data) {
                let s = if *v >= 0.0 { 1.0 } else { -1.0 };
                assert_eq!(*u, s);
            }
        }
    }

    #[test]
    fn single_element_conv() {
        let x = Tensor::from_vec(vec![-0.5f32], &[1, 1, 1, 1]).unwrap();
        let w = Param::new("w", vec![0.7f32], &[1, 1, 1, 1]).unwrap();
        let layer = BinaryConvLayer::new(w, 1, 0, false);
        let y = binary_conv2d(&x, &layer, None, &counters()).unwrap();
        assert_eq!(y.data(), &[-1.0]);
    }

    #[test]
    fn all_agree_popcount() {
        let x = Tensor::from_vec(vec![1.0f32; 9], &[1, 1, 3, 3]).unwrap();
        let w = Param::new("w", vec![1.0f32; 9], &[1, 1, 3, 3]).unwrap();
        let layer = BinaryConvLayer::new(w, 1, 0, false);
        let y = binary_conv2d(&x, &layer, None, &counters()).unwrap();
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn binary_linear_identity_and_balanced() {
        let c = counters();
        let v: Vec<f32> = (0..16).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
        let x = Tensor::from_vec(v.clone(), &[1, 16]).unwrap();
        let w = Param::new("w", v, &[1, 16]).unwrap();
        let y = binary_linear(&x, &w, None, &c).unwrap();
        assert_eq!(y.data(), &[16.0]);

        // half agree, half disagree -> 0
        let a: Vec<f32> = (0..16).map(|i| if i < 8 { 1.0 } else { -1.0 }).collect();
        let b: Vec<f32> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let x = Tensor::from_vec(a, &[1, 16]).unwrap();
        let w = Param::new("w", b, &[1, 16]).unwrap();
        let y = binary_linear(&x, &w, None, &c).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn surrogate_zero_outside_unit_interval() {
        let tape = Tape::new();
        let xp = Param::new("x", vec![-2.0f64, -1.0, -0.5, 0.5, 1.0, 3.0], &[1, 6]).unwrap();
        let x = xp.tracked(&tape);
        let w = Param::new("w", vec![1.0f64; 6], &[1, 6]).unwrap();
        let y = binary_linear(&x, &w, Some(&tape), &counters()).unwrap();
        crate::tensor::ops::sum(&y).unwrap().backward().unwrap();
        let g = xp.grad();
        assert_eq!(g[0], 0.0);
        assert_eq!(g[1], 0.0); // factor 2+2x = 0 at x = -1
        assert_eq!(g[2], 1.0);
        assert_eq!(g[3], 1.0);
        assert_eq!(g[4], 0.0);
        assert_eq!(g[5], 0.0);
    }

    #[test]
    fn scaling_multiplies_output() {
        let x = Tensor::from_vec(vec![1.0f32; 4], &[1, 1, 2, 2]).unwrap();
        let w = Param::new("w", vec![0.5f32, -0.25, 0.75, 0.5], &[1, 1, 2, 2]).unwrap();
        let layer = BinaryConvLayer::new(w, 1, 0, true);
        let y = binary_conv2d(&x, &layer, None, &counters()).unwrap();
        // raw dot = 1+(-1)+1+1 = 2, alpha = mean|w| = 0.5
        assert!((y.data()[0] - 1.0).abs() < 1e-6);
    }
}

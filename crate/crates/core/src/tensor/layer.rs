//! Layer kinds, their forward/backward kernels, and the backward tape.
//!
//! All activation tensors are `[T, C, H, W]` (or `[T, F]` after pooling),
//! where `T` is the temporal axis: frames before aggregation, clusters after.

use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        size: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Linear {
        in_features: usize,
        out_features: usize,
    },
    /// Shift `channels / fold_div` channels one step forward in time and the
    /// same number one step backward, zero-filled at the clip boundaries.
    TemporalShift {
        fold_div: usize,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad(format!("conv2d channels must be positive: {self:?}"));
                }
                if kernel == 0 || stride == 0 {
                    return bad(format!("conv2d kernel/stride must be positive: {self:?}"));
                }
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return bad(format!("maxpool size/stride must be positive: {self:?}"));
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if in_features == 0 || out_features == 0 {
                    return bad(format!("linear features must be positive: {self:?}"));
                }
            }
            LayerSpec::TemporalShift { fold_div } => {
                if fold_div < 2 {
                    return bad(format!("temporal-shift fold_div must be >= 2: {self:?}"));
                }
            }
            LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
        }
        Ok(())
    }

    /// Stable tag used by the checkpoint format.
    pub fn kind_tag(&self) -> u8 {
        match self {
            LayerSpec::Conv2d { .. } => 0,
            LayerSpec::Relu => 1,
            LayerSpec::MaxPool2d { .. } => 2,
            LayerSpec::GlobalAvgPool => 3,
            LayerSpec::Linear { .. } => 4,
            LayerSpec::TemporalShift { .. } => 5,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Relu => "relu",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
            LayerSpec::GlobalAvgPool => "global-avg-pool",
            LayerSpec::Linear { .. } => "linear",
            LayerSpec::TemporalShift { .. } => "temporal-shift",
        }
    }

    /// Shapes of this layer's parameter tensors (weight, bias), if any.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => vec![],
        }
    }

    /// Output shape for a given input shape, or a shape error.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let mismatch = |expected: Vec<usize>| Error::ShapeMismatch {
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                let [t, c, h, w] = four_d(input)?;
                if c != in_channels {
                    return Err(mismatch(vec![t, in_channels, h, w]));
                }
                let oh = conv_out(h, kernel, stride, padding)
                    .ok_or_else(|| mismatch(vec![t, c, kernel, kernel]))?;
                let ow = conv_out(w, kernel, stride, padding)
                    .ok_or_else(|| mismatch(vec![t, c, kernel, kernel]))?;
                Ok(vec![t, out_channels, oh, ow])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool2d { size, stride } => {
                let [t, c, h, w] = four_d(input)?;
                if h < size || w < size {
                    return Err(mismatch(vec![t, c, size, size]));
                }
                Ok(vec![t, c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            LayerSpec::GlobalAvgPool => {
                let [t, c, _, _] = four_d(input)?;
                Ok(vec![t, c])
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                if input.len() != 2 || input[1] != in_features {
                    return Err(mismatch(vec![
                        input.first().copied().unwrap_or(1),
                        in_features,
                    ]));
                }
                Ok(vec![input[0], out_features])
            }
            LayerSpec::TemporalShift { .. } => {
                four_d(input)?;
                Ok(input.to_vec())
            }
        }
    }

    /// Multiply-accumulate count for one frame of the given input shape.
    pub fn macs_per_frame(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        Ok(match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => (out[1] * out[2] * out[3] * in_channels * kernel * kernel) as u64,
            LayerSpec::Linear {
                in_features,
                out_features,
            } => (in_features * out_features) as u64,
            _ => 0,
        })
    }
}

fn four_d(shape: &[usize]) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0, 0, 0],
            actual: shape.to_vec(),
        });
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = extent + 2 * padding;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Forward intermediates recorded for the backward pass.
#[derive(Debug, Clone)]
pub enum TapeEntry<S: Scalar> {
    Conv2d {
        input: Tensor<S>,
    },
    Relu {
        input: Tensor<S>,
    },
    MaxPool2d {
        input_shape: Vec<usize>,
        argmax: Vec<u32>,
    },
    GlobalAvgPool {
        input_shape: Vec<usize>,
    },
    Linear {
        input: Tensor<S>,
    },
    TemporalShift {
        input_shape: Vec<usize>,
    },
}

impl<S: Scalar> TapeEntry<S> {
    /// Temporal extent of the stored intermediate.
    pub fn frames(&self) -> usize {
        match self {
            TapeEntry::Conv2d { input }
            | TapeEntry::Relu { input }
            | TapeEntry::Linear { input } => input.leading_dim(),
            TapeEntry::MaxPool2d { input_shape, .. }
            | TapeEntry::GlobalAvgPool { input_shape }
            | TapeEntry::TemporalShift { input_shape } => input_shape.first().copied().unwrap_or(0),
        }
    }
}

/// Ordered record of forward intermediates; consumed exactly once by backward.
#[derive(Debug, Default)]
pub struct Tape<S: Scalar> {
    pub(crate) entries: Vec<(usize, TapeEntry<S>)>,
    pub(crate) consumed: bool,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            entries: Vec::new(),
            consumed: false,
        }
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Largest temporal extent among stored intermediates. This is the
    /// per-video memory proxy: N for a full pass, g after aggregation.
    pub fn peak_stored_frames(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, e)| e.frames())
            .max()
            .unwrap_or(0)
    }

    /// Sum of temporal extents over all stored intermediates.
    pub fn stored_frame_slices(&self) -> usize {
        self.entries.iter().map(|(_, e)| e.frames()).sum()
    }
}

// ---------------------------------------------------------------------------
// Forward kernels
// ---------------------------------------------------------------------------

pub(crate) fn conv2d_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
    stride: usize,
    padding: usize,
    out_shape: &[usize],
) -> Tensor<S> {
    let [t_len, in_c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (out_c, oh, ow) = (out_shape[1], out_shape[2], out_shape[3]);
    let kernel = weight.shape()[2];
    let mut out = Tensor::zeros(out_shape);

    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();
    let out_data = out.data_mut();

    let in_frame_stride = in_c * h * w;
    let out_frame_stride = out_c * oh * ow;

    for t in 0..t_len {
        let in_frame = &in_data[t * in_frame_stride..(t + 1) * in_frame_stride];
        let out_frame = &mut out_data[t * out_frame_stride..(t + 1) * out_frame_stride];
        for oc in 0..out_c {
            let out_plane = &mut out_frame[oc * oh * ow..(oc + 1) * oh * ow];
            let b = b_data[oc];
            for v in out_plane.iter_mut() {
                *v = b;
            }
            for ic in 0..in_c {
                let in_plane = &in_frame[ic * h * w..(ic + 1) * h * w];
                let w_base = (oc * in_c + ic) * kernel * kernel;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let wv = w_data[w_base + ky * kernel + kx];
                        accumulate_window(
                            out_plane, in_plane, wv, oh, ow, h, w, ky, kx, stride, padding,
                        );
                    }
                }
            }
        }
    }
    out
}

/// out[oy, ox] += wv * in[oy*stride + ky - pad, ox*stride + kx - pad]
/// over the in-bounds (oy, ox) range. The stride-1 inner loop is contiguous.
#[inline]
#[allow(clippy::too_many_arguments)]
fn accumulate_window<S: Scalar>(
    out_plane: &mut [S],
    in_plane: &[S],
    wv: S,
    oh: usize,
    ow: usize,
    h: usize,
    w: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    padding: usize,
) {
    let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
    let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, padding);
    for oy in oy_lo..oy_hi {
        let iy = oy * stride + ky - padding;
        let out_row = &mut out_plane[oy * ow + ox_lo..oy * ow + ox_hi];
        if stride == 1 {
            let ix0 = ox_lo + kx - padding;
            let in_row = &in_plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
            for (o, i) in out_row.iter_mut().zip(in_row.iter()) {
                *o += wv * *i;
            }
        } else {
            for (d, o) in out_row.iter_mut().enumerate() {
                let ix = (ox_lo + d) * stride + kx - padding;
                *o += wv * in_plane[iy * w + ix];
            }
        }
    }
}

/// Output index range where `o*stride + k - padding` lands inside `[0, extent)`.
fn valid_range(
    out_extent: usize,
    extent: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> (usize, usize) {
    let lo = padding.saturating_sub(k).div_ceil(stride);
    // largest o with o*stride + k - padding <= extent - 1
    let hi = if extent + padding > k {
        (((extent + padding - k - 1) / stride) + 1).min(out_extent)
    } else {
        0
    };
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight: &Tensor<S>,
    stride: usize,
    padding: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let [t_len, in_c, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (out_c, oh, ow) = (
        grad_out.shape()[1],
        grad_out.shape()[2],
        grad_out.shape()[3],
    );
    let kernel = weight.shape()[2];

    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[out_c]);

    let go_data = grad_out.data();
    let in_data = input.data();
    let w_data = weight.data();

    let in_frame_stride = in_c * h * w;
    let out_frame_stride = out_c * oh * ow;

    for t in 0..t_len {
        let go_frame = &go_data[t * out_frame_stride..(t + 1) * out_frame_stride];
        let in_frame = &in_data[t * in_frame_stride..(t + 1) * in_frame_stride];
        let gi_frame = &mut grad_in.data_mut()[t * in_frame_stride..(t + 1) * in_frame_stride];
        for oc in 0..out_c {
            let go_plane = &go_frame[oc * oh * ow..(oc + 1) * oh * ow];
            let mut b_acc = S::ZERO;
            for v in go_plane.iter() {
                b_acc += *v;
            }
            grad_b.data_mut()[oc] += b_acc;

            for ic in 0..in_c {
                let in_plane = &in_frame[ic * h * w..(ic + 1) * h * w];
                let gi_plane = &mut gi_frame[ic * h * w..(ic + 1) * h * w];
                let w_base = (oc * in_c + ic) * kernel * kernel;
                for ky in 0..kernel {
                    for kx in 0..kernel {
                        let (oy_lo, oy_hi) = valid_range(oh, h, ky, stride, padding);
                        let (ox_lo, ox_hi) = valid_range(ow, w, kx, stride, padding);
                        let mut w_acc = S::ZERO;
                        let wv = w_data[w_base + ky * kernel + kx];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * stride + ky - padding;
                            let go_row = &go_plane[oy * ow + ox_lo..oy * ow + ox_hi];
                            if stride == 1 {
                                let ix0 = ox_lo + kx - padding;
                                let span = ox_hi - ox_lo;
                                let in_row = &in_plane[iy * w + ix0..iy * w + ix0 + span];
                                let gi_row = &mut gi_plane[iy * w + ix0..iy * w + ix0 + span];
                                for ((g, i), gi) in
                                    go_row.iter().zip(in_row.iter()).zip(gi_row.iter_mut())
                                {
                                    w_acc += *g * *i;
                                    *gi += wv * *g;
                                }
                            } else {
                                for (d, g) in go_row.iter().enumerate() {
                                    let ix = (ox_lo + d) * stride + kx - padding;
                                    w_acc += *g * in_plane[iy * w + ix];
                                    gi_plane[iy * w + ix] += wv * *g;
                                }
                            }
                        }
                        grad_w.data_mut()[w_base + ky * kernel + kx] += w_acc;
                    }
                }
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

pub(crate) fn relu_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < S::ZERO {
            *v = S::ZERO;
        }
    }
    out
}

/// Gradient passes iff the forward input was strictly positive; the
/// subgradient at exactly 0 is 0, matching the binarization at-zero rule.
pub(crate) fn relu_backward<S: Scalar>(grad_out: &Tensor<S>, input: &Tensor<S>) -> Tensor<S> {
    let mut grad_in = grad_out.clone();
    for (g, x) in grad_in.data_mut().iter_mut().zip(input.data().iter()) {
        if x.partial_cmp(&S::ZERO) != Some(std::cmp::Ordering::Greater) {
            *g = S::ZERO;
        }
    }
    grad_in
}

pub(crate) fn maxpool_forward<S: Scalar>(
    input: &Tensor<S>,
    size: usize,
    stride: usize,
    out_shape: &[usize],
) -> (Tensor<S>, Vec<u32>) {
    let [t_len, c_len, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    let mut out = Tensor::zeros(out_shape);
    let mut argmax = vec![0u32; out.len()];
    let in_data = input.data();
    let out_data = out.data_mut();

    let mut oi = 0;
    for t in 0..t_len {
        for c in 0..c_len {
            let plane = &in_data[(t * c_len + c) * h * w..(t * c_len + c + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = S::from_f64(f64::NEG_INFINITY);
                    let mut best_idx = 0u32;
                    // scan order makes ties resolve to the first maximal element
                    for dy in 0..size {
                        for dx in 0..size {
                            let iy = oy * stride + dy;
                            let ix = ox * stride + dx;
                            let v = plane[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = (iy * w + ix) as u32;
                            }
                        }
                    }
                    out_data[oi] = best;
                    argmax[oi] = best_idx;
                    oi += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub(crate) fn maxpool_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input_shape: &[usize],
    argmax: &[u32],
) -> Tensor<S> {
    let [t_len, c_len, h, w] = [
        input_shape[0],
        input_shape[1],
        input_shape[2],
        input_shape[3],
    ];
    let per_plane = grad_out.len() / (t_len * c_len);
    let mut grad_in = Tensor::zeros(input_shape);
    let gi = grad_in.data_mut();
    for (pi, chunk) in grad_out.data().chunks_exact(per_plane).enumerate() {
        let base = pi * h * w;
        let am = &argmax[pi * per_plane..(pi + 1) * per_plane];
        for (g, idx) in chunk.iter().zip(am.iter()) {
            gi[base + *idx as usize] += *g;
        }
    }
    grad_in
}

pub(crate) fn gap_forward<S: Scalar>(input: &Tensor<S>) -> Tensor<S> {
    let [t_len, c_len, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let inv = S::from_f64(1.0 / (h * w) as f64);
    let mut out = Tensor::zeros(&[t_len, c_len]);
    for (o, plane) in out
        .data_mut()
        .iter_mut()
        .zip(input.data().chunks_exact(h * w))
    {
        let mut acc = S::ZERO;
        for v in plane {
            acc += *v;
        }
        *o = acc * inv;
    }
    out
}

pub(crate) fn gap_backward<S: Scalar>(grad_out: &Tensor<S>, input_shape: &[usize]) -> Tensor<S> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let inv = S::from_f64(1.0 / (h * w) as f64);
    let mut grad_in = Tensor::zeros(input_shape);
    for (g, plane) in grad_out
        .data()
        .iter()
        .zip(grad_in.data_mut().chunks_exact_mut(h * w))
    {
        let gv = *g * inv;
        for v in plane {
            *v = gv;
        }
    }
    grad_in
}

pub(crate) fn linear_forward<S: Scalar>(
    input: &Tensor<S>,
    weight: &Tensor<S>,
    bias: &Tensor<S>,
) -> Tensor<S> {
    let (t_len, in_f) = (input.shape()[0], input.shape()[1]);
    let out_f = weight.shape()[0];
    let mut out = Tensor::zeros(&[t_len, out_f]);
    for t in 0..t_len {
        let row = input.index_leading(t);
        let out_row = &mut out.data_mut()[t * out_f..(t + 1) * out_f];
        for (o, out_v) in out_row.iter_mut().enumerate() {
            let w_row = &weight.data()[o * in_f..(o + 1) * in_f];
            let mut acc = bias.data()[o];
            for (wv, xv) in w_row.iter().zip(row.iter()) {
                acc += *wv * *xv;
            }
            *out_v = acc;
        }
    }
    out
}

pub(crate) fn linear_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    input: &Tensor<S>,
    weight: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (t_len, in_f) = (input.shape()[0], input.shape()[1]);
    let out_f = weight.shape()[0];
    let mut grad_in = Tensor::zeros(input.shape());
    let mut grad_w = Tensor::zeros(weight.shape());
    let mut grad_b = Tensor::zeros(&[out_f]);
    for t in 0..t_len {
        let x_row = input.index_leading(t);
        let g_row = grad_out.index_leading(t);
        let gi_row = &mut grad_in.data_mut()[t * in_f..(t + 1) * in_f];
        for (o, g) in g_row.iter().enumerate() {
            grad_b.data_mut()[o] += *g;
            let w_row = &weight.data()[o * in_f..(o + 1) * in_f];
            let gw_row = &mut grad_w.data_mut()[o * in_f..(o + 1) * in_f];
            for i in 0..in_f {
                gw_row[i] += *g * x_row[i];
                gi_row[i] += *g * w_row[i];
            }
        }
    }
    (grad_in, grad_w, grad_b)
}

pub(crate) fn temporal_shift_forward<S: Scalar>(input: &Tensor<S>, fold_div: usize) -> Tensor<S> {
    shift_channels(input, fold_div, false)
}

/// Backward of a shift is the opposite shift applied to the gradient.
pub(crate) fn temporal_shift_backward<S: Scalar>(
    grad_out: &Tensor<S>,
    fold_div: usize,
) -> Tensor<S> {
    shift_channels(grad_out, fold_div, true)
}

fn shift_channels<S: Scalar>(input: &Tensor<S>, fold_div: usize, reverse: bool) -> Tensor<S> {
    let [t_len, c_len, h, w] = [
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    ];
    let fold = c_len / fold_div;
    let plane = h * w;
    let mut out = Tensor::zeros(input.shape());
    let src = input.data();
    let dst = out.data_mut();
    for t in 0..t_len {
        for c in 0..c_len {
            // group 0 shifts +1 in time, group 1 shifts -1, rest pass through
            let delta: isize = if c < fold {
                1
            } else if c < 2 * fold {
                -1
            } else {
                0
            };
            let delta = if reverse { -delta } else { delta };
            let ts = t as isize - delta;
            if ts < 0 || ts >= t_len as isize {
                continue;
            }
            let d_base = (t * c_len + c) * plane;
            let s_base = (ts as usize * c_len + c) * plane;
            dst[d_base..d_base + plane].copy_from_slice(&src[s_base..s_base + plane]);
        }
    }
    out
}

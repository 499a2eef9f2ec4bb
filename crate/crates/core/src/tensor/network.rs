//! Layer stacks with parameters, reverse-mode backward, and the
//! finite-difference gradient checker.

use rand::Rng;

use super::layer::{
    conv2d_backward, conv2d_forward, gap_backward, gap_forward, linear_backward, linear_forward,
    maxpool_backward, maxpool_forward, relu_backward, relu_forward, temporal_shift_backward,
    temporal_shift_forward,
};
use super::{LayerSpec, Scalar, Tape, TapeEntry, Tensor};
use crate::{Error, Result};

/// Central-difference step for the gradient checker.
pub const FD_STEP: f64 = 1e-5;

/// An ordered stack of layers with their parameter tensors.
#[derive(Debug, Clone)]
pub struct Network<S: Scalar> {
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor<S>>>,
}

/// Per-layer, per-parameter gradient tensors, mirroring [`Network`] layout.
#[derive(Debug, Clone)]
pub struct NetGrads<S: Scalar> {
    pub per_layer: Vec<Vec<Tensor<S>>>,
}

impl<S: Scalar> NetGrads<S> {
    pub fn zeros_like(net: &Network<S>) -> Self {
        NetGrads {
            per_layer: net
                .params
                .iter()
                .map(|ps| ps.iter().map(|p| Tensor::zeros(p.shape())).collect())
                .collect(),
        }
    }

    /// `self += scale * other`.
    pub fn axpy(&mut self, scale: S, other: &NetGrads<S>) {
        for (mine, theirs) in self.per_layer.iter_mut().zip(other.per_layer.iter()) {
            for (a, b) in mine.iter_mut().zip(theirs.iter()) {
                a.axpy(scale, b);
            }
        }
    }

    pub fn scale(&mut self, factor: S) {
        for ps in &mut self.per_layer {
            for p in ps {
                p.scale(factor);
            }
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for ps in &self.per_layer {
            for p in ps {
                out.extend(p.data().iter().map(|v| v.to_f64()));
            }
        }
        out
    }

    pub fn l2_distance(&self, other: &NetGrads<S>) -> f64 {
        let a = self.flatten();
        let b = other.flatten();
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    }
}

impl<S: Scalar> Network<S> {
    /// Builds the stack with zero-initialized parameters.
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        for layer in &layers {
            layer.validate()?;
        }
        let params = layers
            .iter()
            .map(|l| l.param_shapes().iter().map(|s| Tensor::zeros(s)).collect())
            .collect();
        Ok(Network { layers, params })
    }

    /// He-normal weight init, zero biases.
    pub fn init_random<R: Rng>(&mut self, rng: &mut R) {
        for (layer, params) in self.layers.iter().zip(self.params.iter_mut()) {
            let fan_in = match *layer {
                LayerSpec::Conv2d {
                    in_channels,
                    kernel,
                    ..
                } => in_channels * kernel * kernel,
                LayerSpec::Linear { in_features, .. } => in_features,
                _ => continue,
            };
            let std = (2.0 / fan_in as f64).sqrt();
            let weight = &mut params[0];
            for v in weight.data_mut() {
                *v = S::from_f64(gaussian(rng) * std);
            }
            // biases stay zero
        }
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Vec<Tensor<S>>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<Tensor<S>>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(|p| p.len()).sum()
    }

    /// Applies `update` as `param += scale * update` (used by the optimizer).
    pub fn apply_update(&mut self, scale: S, update: &NetGrads<S>) {
        for (ps, us) in self.params.iter_mut().zip(update.per_layer.iter()) {
            for (p, u) in ps.iter_mut().zip(us.iter()) {
                p.axpy(scale, u);
            }
        }
    }

    /// Forward pass recording intermediates on a tape for backward.
    pub fn forward(&self, input: &Tensor<S>) -> Result<(Tensor<S>, Tape<S>)> {
        let mut tape = Tape::new();
        let out = self.forward_inner(input, Some(&mut tape), &mut Vec::new(), &[])?;
        Ok((out, tape))
    }

    /// Forward pass without recording (inference).
    pub fn infer(&self, input: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_inner(input, None, &mut Vec::new(), &[])
    }

    /// Forward pass that additionally returns the outputs of the layers
    /// listed in `taps` (e.g. pre-activation conv outputs).
    pub fn forward_collect(
        &self,
        input: &Tensor<S>,
        taps: &[usize],
    ) -> Result<(Tensor<S>, Vec<Tensor<S>>)> {
        let mut collected = Vec::new();
        let out = self.forward_inner(input, None, &mut collected, taps)?;
        Ok((out, collected))
    }

    fn forward_inner(
        &self,
        input: &Tensor<S>,
        mut tape: Option<&mut Tape<S>>,
        collected: &mut Vec<Tensor<S>>,
        taps: &[usize],
    ) -> Result<Tensor<S>> {
        let mut current = input.clone();
        for (idx, layer) in self.layers.iter().enumerate() {
            let out_shape = layer.output_shape(current.shape())?;
            let next = match layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => {
                    let weight = &self.params[idx][0];
                    let bias = &self.params[idx][1];
                    let out = conv2d_forward(&current, weight, bias, *stride, *padding, &out_shape);
                    if let Some(t) = tape.as_deref_mut() {
                        t.entries.push((idx, TapeEntry::Conv2d { input: current }));
                    }
                    out
                }
                LayerSpec::Relu => {
                    let out = relu_forward(&current);
                    if let Some(t) = tape.as_deref_mut() {
                        t.entries.push((idx, TapeEntry::Relu { input: current }));
                    }
                    out
                }
                LayerSpec::MaxPool2d { size, stride } => {
                    let (out, argmax) = maxpool_forward(&current, *size, *stride, &out_shape);
                    if let Some(t) = tape.as_deref_mut() {
                        t.entries.push((
                            idx,
                            TapeEntry::MaxPool2d {
                                input_shape: current.shape().to_vec(),
                                argmax,
                            },
                        ));
                    }
                    out
                }
                LayerSpec::GlobalAvgPool => {
                    let out = gap_forward(&current);
                    if let Some(t) = tape.as_deref_mut() {
                        t.entries.push((
                            idx,
                            TapeEntry::GlobalAvgPool {
                                input_shape: current.shape().to_vec(),
                            },
                        ));
                    }
                    out
                }
                LayerSpec::Linear { .. } => {
                    let weight = &self.params[idx][0];
                    let bias = &self.params[idx][1];
                    let out = linear_forward(&current, weight, bias);
                    if let Some(t) = tape.as_deref_mut() {
                        t.entries.push((idx, TapeEntry::Linear { input: current }));
                    }
                    out
                }
                LayerSpec::TemporalShift { fold_div } => {
                    let out = temporal_shift_forward(&current, *fold_div);
                    if let Some(t) = tape.as_deref_mut() {
                        t.entries.push((
                            idx,
                            TapeEntry::TemporalShift {
                                input_shape: current.shape().to_vec(),
                            },
                        ));
                    }
                    out
                }
            };
            if taps.contains(&idx) {
                collected.push(next.clone());
            }
            current = next;
        }
        Ok(current)
    }

    /// Reverse pass over a recorded tape. Consumes the tape; a second call
    /// on the same tape is rejected.
    pub fn backward(
        &self,
        tape: &mut Tape<S>,
        loss_grad: &Tensor<S>,
    ) -> Result<(NetGrads<S>, Tensor<S>)> {
        if tape.consumed {
            return Err(Error::TapeConsumed);
        }
        tape.consumed = true;

        let mut grads = NetGrads::zeros_like(self);
        let mut upstream = loss_grad.clone();
        while let Some((idx, entry)) = tape.entries.pop() {
            upstream = match entry {
                TapeEntry::Conv2d { input } => {
                    let (stride, padding) = match self.layers[idx] {
                        LayerSpec::Conv2d {
                            stride, padding, ..
                        } => (stride, padding),
                        _ => unreachable!("tape entry does not match layer"),
                    };
                    let weight = &self.params[idx][0];
                    let (gi, gw, gb) = conv2d_backward(&upstream, &input, weight, stride, padding);
                    grads.per_layer[idx][0].axpy(S::ONE, &gw);
                    grads.per_layer[idx][1].axpy(S::ONE, &gb);
                    gi
                }
                TapeEntry::Relu { input } => relu_backward(&upstream, &input),
                TapeEntry::MaxPool2d {
                    input_shape,
                    argmax,
                } => maxpool_backward(&upstream, &input_shape, &argmax),
                TapeEntry::GlobalAvgPool { input_shape } => gap_backward(&upstream, &input_shape),
                TapeEntry::Linear { input } => {
                    let weight = &self.params[idx][0];
                    let (gi, gw, gb) = linear_backward(&upstream, &input, weight);
                    grads.per_layer[idx][0].axpy(S::ONE, &gw);
                    grads.per_layer[idx][1].axpy(S::ONE, &gb);
                    gi
                }
                TapeEntry::TemporalShift { .. } => {
                    let fold_div = match self.layers[idx] {
                        LayerSpec::TemporalShift { fold_div } => fold_div,
                        _ => unreachable!("tape entry does not match layer"),
                    };
                    temporal_shift_backward(&upstream, fold_div)
                }
            };
        }
        Ok((grads, upstream))
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

// ---------------------------------------------------------------------------
// Cross-entropy over per-row logits
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the rows of a `[T, classes]` logits tensor, plus
/// the gradient w.r.t. the logits.
pub fn softmax_ce_rows<S: Scalar>(logits: &Tensor<S>, label: usize) -> Result<(f64, Tensor<S>)> {
    if logits.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            expected: vec![0, 0],
            actual: logits.shape().to_vec(),
        });
    }
    let (t_len, classes) = (logits.shape()[0], logits.shape()[1]);
    if label >= classes {
        return Err(Error::InvalidConfig(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let inv_t = 1.0 / t_len as f64;
    let mut loss = 0.0;
    for t in 0..t_len {
        let row = logits.index_leading(t);
        let probs = softmax_f64(row);
        loss -= probs[label].ln() * inv_t;
        let g_row = &mut grad.data_mut()[t * classes..(t + 1) * classes];
        for (c, g) in g_row.iter_mut().enumerate() {
            let delta = if c == label { 1.0 } else { 0.0 };
            *g = S::from_f64((probs[c] - delta) * inv_t);
        }
    }
    Ok((loss, grad))
}

/// Numerically stable softmax of one row, computed in f64.
pub(crate) fn softmax_f64<S: Scalar>(row: &[S]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FdParamReport {
    pub layer: usize,
    pub param: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Debug, Clone)]
pub struct FdReport {
    pub per_param: Vec<FdParamReport>,
    pub max_rel_err: f64,
    pub rtol: f64,
    pub pass: bool,
}

/// Checks analytic gradients against central finite differences of the
/// mean-CE loss. 64-bit only: f32 has no headroom below the tolerances.
pub fn finite_difference_check(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    label: usize,
    rtol: f64,
) -> Result<FdReport> {
    let (logits, mut tape) = net.forward(input)?;
    let (loss, loss_grad) = softmax_ce_rows(&logits, label)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            value: loss,
            index: 0,
        });
    }
    let (grads, _) = net.backward(&mut tape, &loss_grad)?;
    compare_grads_to_fd(net, input, label, &grads, rtol)
}

/// Compares the supplied analytic gradients against central differences.
/// Split out so a deliberately corrupted gradient can be fed in as a
/// negative control.
pub fn compare_grads_to_fd(
    net: &mut Network<f64>,
    input: &Tensor<f64>,
    label: usize,
    analytic: &NetGrads<f64>,
    rtol: f64,
) -> Result<FdReport> {
    let mut per_param = Vec::new();
    let mut overall = 0.0f64;
    for layer in 0..net.params().len() {
        for param in 0..net.params()[layer].len() {
            let n = net.params()[layer][param].len();
            let mut max_rel = 0.0f64;
            let mut max_abs = 0.0f64;
            for i in 0..n {
                let original = net.params()[layer][param].data()[i];
                net.params_mut()[layer][param].data_mut()[i] = original + FD_STEP;
                let up = eval_loss(net, input, label)?;
                net.params_mut()[layer][param].data_mut()[i] = original - FD_STEP;
                let down = eval_loss(net, input, label)?;
                net.params_mut()[layer][param].data_mut()[i] = original;
                if !up.is_finite() || !down.is_finite() {
                    return Err(Error::NonFinite {
                        value: if up.is_finite() { down } else { up },
                        index: i,
                    });
                }
                let fd = (up - down) / (2.0 * FD_STEP);
                let an = analytic.per_layer[layer][param].data()[i];
                let abs = (an - fd).abs();
                let rel = abs / an.abs().max(fd.abs()).max(1e-6);
                max_abs = max_abs.max(abs);
                max_rel = max_rel.max(rel);
            }
            overall = overall.max(max_rel);
            per_param.push(FdParamReport {
                layer,
                param,
                max_rel_err: max_rel,
                max_abs_err: max_abs,
            });
        }
    }
    Ok(FdReport {
        per_param,
        max_rel_err: overall,
        rtol,
        pass: overall <= rtol,
    })
}

fn eval_loss(net: &Network<f64>, input: &Tensor<f64>, label: usize) -> Result<f64> {
    let logits = net.infer(input)?;
    let (loss, _) = softmax_ce_rows(&logits, label)?;
    Ok(loss)
}

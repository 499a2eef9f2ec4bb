//! The clustered two-stage pipeline: block 1 runs on every frame, the
//! per-frame pre-ReLU maps are binarized and clustered along time, each
//! cluster is averaged into one map, and only those aggregates continue
//! through the remaining blocks. Gradients flow through the aggregation,
//! so the whole thing trains end to end.

use serde::{Deserialize, Serialize};

use crate::clustering::{
    cumulative_cluster, cumulative_profile, slope_cluster, uniform_cluster, ClusterAssignment,
};
use crate::signature::binarize;
use crate::tensor::{count_flops, FlopReport, LayerSpec, NetGrads, Network, Scalar, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusterMethod {
    Cumulative,
    Slope,
    Uniform,
    None,
}

impl ClusterMethod {
    pub fn name(self) -> &'static str {
        match self {
            ClusterMethod::Cumulative => "cumulative",
            ClusterMethod::Slope => "slope",
            ClusterMethod::Uniform => "uniform",
            ClusterMethod::None => "none",
        }
    }
}

impl std::str::FromStr for ClusterMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cumulative" => Ok(ClusterMethod::Cumulative),
            "slope" => Ok(ClusterMethod::Slope),
            "uniform" => Ok(ClusterMethod::Uniform),
            "none" => Ok(ClusterMethod::None),
            other => Err(Error::InvalidConfig(format!(
                "unknown clustering method {other:?} (cumulative|slope|uniform|none)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

fn default_classes() -> usize {
    4
}
fn default_frames() -> usize {
    32
}
fn default_clusters() -> usize {
    16
}
fn default_image_size() -> usize {
    32
}
fn default_stem_channels() -> usize {
    8
}
fn default_head_channels() -> usize {
    16
}
fn default_precision() -> Precision {
    Precision::F32
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_classes")]
    pub classes: usize,
    /// Nominal frames per video N; shorter clips are padded up to this.
    #[serde(default = "default_frames")]
    pub frames: usize,
    /// Cluster count g.
    #[serde(default = "default_clusters")]
    pub clusters: usize,
    pub method: ClusterMethod,
    /// Frame sub-sampling baseline: run only k evenly spaced frames, no
    /// clustering. Requires method = none.
    #[serde(default)]
    pub subsample: Option<usize>,
    #[serde(default)]
    pub temporal_shift: bool,
    #[serde(default = "default_image_size")]
    pub image_size: usize,
    #[serde(default = "default_stem_channels")]
    pub stem_channels: usize,
    #[serde(default = "default_head_channels")]
    pub head_channels: usize,
    #[serde(default = "default_precision")]
    pub precision: Precision,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            classes: default_classes(),
            frames: default_frames(),
            clusters: default_clusters(),
            method: ClusterMethod::Cumulative,
            subsample: None,
            temporal_shift: false,
            image_size: default_image_size(),
            stem_channels: default_stem_channels(),
            head_channels: default_head_channels(),
            precision: default_precision(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least 2 classes".into()));
        }
        if self.clusters < 1 || self.clusters > self.frames {
            return Err(Error::InvalidConfig(format!(
                "cluster count must satisfy 1 <= g <= frames, got g={} frames={}",
                self.clusters, self.frames
            )));
        }
        if let Some(k) = self.subsample {
            if k < 1 || k > self.frames {
                return Err(Error::InvalidConfig(format!(
                    "subsample count must satisfy 1 <= k <= frames, got {k}"
                )));
            }
            if self.method != ClusterMethod::None {
                return Err(Error::InvalidConfig(
                    "subsample is a no-clustering baseline; set method = none".into(),
                ));
            }
        }
        if self.image_size < 4 {
            return Err(Error::InvalidConfig("image size too small".into()));
        }
        Ok(())
    }

    /// Temporal slots entering the blocks after aggregation.
    pub fn head_slots(&self) -> usize {
        match self.method {
            ClusterMethod::None => self.subsample.unwrap_or(self.frames),
            _ => self.clusters,
        }
    }
}

/// Per-cluster mean of pre-ReLU block-1 maps, padded up to g slots.
#[derive(Debug, Clone)]
pub struct AggregatedBatch<S: Scalar> {
    /// `[g, C, H, W]`; slot k is the arithmetic mean of its cluster.
    pub activations: Tensor<S>,
    pub assignment: ClusterAssignment,
    /// Member count per slot; padded slots hold 0.
    pub cluster_sizes: Vec<usize>,
}

/// Everything forward produces that scoring and backward need.
pub struct PipelineForward<S: Scalar> {
    /// `[slots, classes]` logits, one row per temporal slot.
    pub logits: Tensor<S>,
    /// Frame-count share of each slot; sums to 1. Padded slots hold 0, so
    /// every real frame counts exactly once.
    pub slot_weights: Vec<f64>,
    pub assignment: Option<ClusterAssignment>,
    pub aggregated_sizes: Vec<usize>,
    pub frames_used: usize,
    pub stem_tape: Tape<S>,
    pub head_tape: Tape<S>,
}

impl<S: Scalar> PipelineForward<S> {
    /// Weighted temporal average of the per-slot logits.
    pub fn scores(&self) -> Vec<f64> {
        let classes = self.logits.shape()[1];
        let mut out = vec![0.0; classes];
        for (t, w) in self.slot_weights.iter().enumerate() {
            let row = self.logits.index_leading(t);
            for (o, v) in out.iter_mut().zip(row.iter()) {
                *o += w * v.to_f64();
            }
        }
        out
    }

    pub fn predicted(&self) -> usize {
        let scores = self.scores();
        let mut best = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[best] {
                best = i;
            }
        }
        best
    }

    /// Memory proxy: temporal extent of the intermediates stored for the
    /// blocks after aggregation.
    pub fn head_stored_frames(&self) -> usize {
        self.head_tape.peak_stored_frames()
    }
}

#[derive(Debug, Clone)]
pub struct PipelineGrads<S: Scalar> {
    pub stem: NetGrads<S>,
    pub head: NetGrads<S>,
}

impl<S: Scalar> PipelineGrads<S> {
    pub fn axpy(&mut self, scale: S, other: &PipelineGrads<S>) {
        self.stem.axpy(scale, &other.stem);
        self.head.axpy(scale, &other.head);
    }

    pub fn scale(&mut self, factor: S) {
        self.stem.scale(factor);
        self.head.scale(factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.stem.flatten();
        v.extend(self.head.flatten());
        v
    }
}

/// Block 1 plus the remaining blocks, with the aggregation seam between.
#[derive(Debug, Clone)]
pub struct Pipeline<S: Scalar> {
    pub config: PipelineConfig,
    pub stem: Network<S>,
    pub head: Network<S>,
}

impl<S: Scalar> Pipeline<S> {
    pub fn new(config: PipelineConfig) -> Result<Self> {
        config.validate()?;
        // the shift follows the convolution: it is linear, so the block-1
        // output stays a pre-ReLU map and aggregation-before-ReLU semantics
        // are preserved, while block-1 features gain temporal context
        let mut stem_layers = vec![LayerSpec::Conv2d {
            in_channels: 3,
            out_channels: config.stem_channels,
            kernel: 3,
            stride: 1,
            padding: 1,
        }];
        if config.temporal_shift {
            stem_layers.push(LayerSpec::TemporalShift { fold_div: 8 });
        }
        let mut head_layers = vec![LayerSpec::Relu, LayerSpec::MaxPool2d { size: 2, stride: 2 }];
        if config.temporal_shift {
            head_layers.push(LayerSpec::TemporalShift { fold_div: 8 });
        }
        head_layers.extend([
            LayerSpec::Conv2d {
                in_channels: config.stem_channels,
                out_channels: config.head_channels,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Linear {
                in_features: config.head_channels,
                out_features: config.classes,
            },
        ]);
        Ok(Pipeline {
            config,
            stem: Network::new(stem_layers)?,
            head: Network::new(head_layers)?,
        })
    }

    pub fn init_random(&mut self, seed: u64) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        self.stem.init_random(&mut rng);
        self.head.init_random(&mut rng);
    }

    /// Index of the first convolution in the head — the first block that
    /// sees aggregated activations.
    pub fn head_conv_index(&self) -> usize {
        self.head
            .layers()
            .iter()
            .position(|l| matches!(l, LayerSpec::Conv2d { .. }))
            .expect("head has a convolution")
    }

    /// Clusters a video's frames from its block-1 pre-ReLU maps.
    pub fn cluster(&self, preact: &Tensor<S>) -> Result<ClusterAssignment> {
        cluster_frames(preact, self.config.method, self.config.clusters)
    }

    /// Full pass per the configured method. With `record` the tapes hold
    /// what backward needs; without, they stay empty.
    pub fn forward(&self, frames: &Tensor<S>, record: bool) -> Result<PipelineForward<S>> {
        let frames = self.prepare_frames(frames)?;
        let frames_used = frames.shape()[0];

        let (preact, stem_tape) = if record {
            self.stem.forward(&frames)?
        } else {
            (self.stem.infer(&frames)?, Tape::new())
        };

        let (head_input, slot_weights, assignment, sizes) = match self.config.method {
            ClusterMethod::None => {
                let w = 1.0 / frames_used as f64;
                (preact, vec![w; frames_used], None, Vec::new())
            }
            _ => {
                let assignment = self.cluster(&preact)?;
                let agg = aggregate(&preact, &assignment, self.config.clusters)?;
                let total: usize = agg.cluster_sizes.iter().sum();
                let weights: Vec<f64> = agg
                    .cluster_sizes
                    .iter()
                    .map(|&s| s as f64 / total as f64)
                    .collect();
                (
                    agg.activations,
                    weights,
                    Some(agg.assignment),
                    agg.cluster_sizes,
                )
            }
        };

        let (logits, head_tape) = if record {
            self.head.forward(&head_input)?
        } else {
            (self.head.infer(&head_input)?, Tape::new())
        };

        Ok(PipelineForward {
            logits,
            slot_weights,
            assignment,
            aggregated_sizes: sizes,
            frames_used,
            stem_tape,
            head_tape,
        })
    }

    /// Cross-entropy of the forward result: per-slot losses weighted by
    /// frame share, so the full-frames path is exactly the mean per-frame
    /// loss.
    pub fn loss(&self, fwd: &PipelineForward<S>, label: usize) -> Result<f64> {
        let (loss, _) = weighted_ce(&fwd.logits, &fwd.slot_weights, label)?;
        Ok(loss)
    }

    /// Backward through head, aggregation, and stem. Consumes the tapes.
    pub fn backward(
        &self,
        fwd: &mut PipelineForward<S>,
        label: usize,
    ) -> Result<(f64, PipelineGrads<S>)> {
        let (loss, logit_grad) = weighted_ce(&fwd.logits, &fwd.slot_weights, label)?;
        let (head_grads, head_input_grad) = self.head.backward(&mut fwd.head_tape, &logit_grad)?;

        let stem_out_grad = match &fwd.assignment {
            None => head_input_grad,
            Some(assignment) => {
                spread_aggregate_grad(&head_input_grad, assignment, fwd.frames_used)?
            }
        };
        let (stem_grads, _) = self.stem.backward(&mut fwd.stem_tape, &stem_out_grad)?;
        Ok((
            loss,
            PipelineGrads {
                stem: stem_grads,
                head: head_grads,
            },
        ))
    }

    pub fn zero_grads(&self) -> PipelineGrads<S> {
        PipelineGrads {
            stem: NetGrads::zeros_like(&self.stem),
            head: NetGrads::zeros_like(&self.head),
        }
    }

    pub fn apply_update(&mut self, scale: S, update: &PipelineGrads<S>) {
        self.stem.apply_update(scale, &update.stem);
        self.head.apply_update(scale, &update.head);
    }

    /// Pads short clips with their last frame and applies the subsample
    /// baseline when configured.
    fn prepare_frames(&self, frames: &Tensor<S>) -> Result<Tensor<S>> {
        let mut current = if frames.shape()[0] < self.config.frames {
            pad_frames(frames, self.config.frames)?
        } else {
            frames.clone()
        };
        if let Some(k) = self.config.subsample {
            current = subsample_frames(&current, k)?;
        }
        Ok(current)
    }

    /// MAC accounting honoring the aggregation seam: block 1 on every
    /// frame, the remaining blocks on the head slots only.
    pub fn flop_report(&self) -> Result<(FlopReport, FlopReport, u64)> {
        let c = self.config.image_size;
        let frames = match self.config.method {
            ClusterMethod::None => self.config.subsample.unwrap_or(self.config.frames),
            _ => self.config.frames,
        };
        let stem = count_flops(&self.stem, &[3, c, c], frames as u64)?;
        let head = count_flops(
            &self.head,
            &[self.config.stem_channels, c, c],
            self.config.head_slots() as u64,
        )?;
        let total = stem.total + head.total;
        Ok((stem, head, total))
    }
}

/// Clusters frames of a `[T, C, H, W]` pre-ReLU activation tensor with the
/// given method.
pub fn cluster_frames<S: Scalar>(
    preact: &Tensor<S>,
    method: ClusterMethod,
    g: usize,
) -> Result<ClusterAssignment> {
    let frames = preact.shape()[0];
    match method {
        ClusterMethod::Uniform => uniform_cluster(frames, g),
        ClusterMethod::Cumulative | ClusterMethod::Slope => {
            let sigs = frame_signatures(preact)?;
            let profile = cumulative_profile(&sigs)?;
            match method {
                ClusterMethod::Cumulative => cumulative_cluster(&profile, g),
                _ => slope_cluster(&profile, g),
            }
        }
        ClusterMethod::None => Err(Error::InvalidConfig(
            "clustering disabled for this pipeline".into(),
        )),
    }
}

/// Per-frame signatures at each pre-ReLU convolution tap: the stem conv
/// (block 1) and the head conv (first block after the seam), with every
/// frame run through individually, no aggregation.
pub fn per_block_signatures<S: Scalar>(
    pipeline: &Pipeline<S>,
    frames: &Tensor<S>,
) -> Result<Vec<Vec<crate::signature::Signature>>> {
    let preact = pipeline.stem.infer(frames)?;
    let block1 = frame_signatures(&preact)?;
    let conv_idx = pipeline.head_conv_index();
    let (_, taps) = pipeline.head.forward_collect(&preact, &[conv_idx])?;
    let block2 = frame_signatures(&taps[0])?;
    Ok(vec![block1, block2])
}

/// Per-frame sign signatures of a `[T, C, H, W]` activation tensor.
pub fn frame_signatures<S: Scalar>(preact: &Tensor<S>) -> Result<Vec<crate::signature::Signature>> {
    let frames = preact.shape()[0];
    let mut sigs = Vec::with_capacity(frames);
    for t in 0..frames {
        let map = Tensor::from_vec(&preact.shape()[1..], preact.index_leading(t).to_vec())?;
        sigs.push(binarize(&map)?);
    }
    Ok(sigs)
}

/// Repeats the last frame until the clip reaches `target_len`. Truncation
/// is rejected; dropping frames is a different decision than padding.
pub fn pad_frames<S: Scalar>(frames: &Tensor<S>, target_len: usize) -> Result<Tensor<S>> {
    let n = frames.shape()[0];
    if n == 0 {
        return Err(Error::EmptyInput("cannot pad an empty clip"));
    }
    if target_len < n {
        return Err(Error::InvalidConfig(format!(
            "pad target {target_len} is shorter than the clip ({n} frames)"
        )));
    }
    if target_len == n {
        return Ok(frames.clone());
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = target_len;
    let mut out = Tensor::zeros(&shape);
    let stride = frames.len() / n;
    let last = frames.index_leading(n - 1).to_vec();
    let data = out.data_mut();
    data[..frames.len()].copy_from_slice(frames.data());
    for t in n..target_len {
        data[t * stride..(t + 1) * stride].copy_from_slice(&last);
    }
    Ok(out)
}

/// Takes the center frame of k equal temporal segments.
pub fn subsample_frames<S: Scalar>(frames: &Tensor<S>, k: usize) -> Result<Tensor<S>> {
    let n = frames.shape()[0];
    if k == 0 || k > n {
        return Err(Error::InvalidConfig(format!(
            "cannot pick {k} frames from a {n}-frame clip"
        )));
    }
    let mut shape = frames.shape().to_vec();
    shape[0] = k;
    let mut out = Tensor::zeros(&shape);
    let stride = frames.len() / n;
    for i in 0..k {
        let lo = i * n / k;
        let hi = (i + 1) * n / k;
        let pick = (lo + hi - 1) / 2;
        out.data_mut()[i * stride..(i + 1) * stride].copy_from_slice(frames.index_leading(pick));
    }
    Ok(out)
}

/// Arithmetic mean of each cluster's pre-ReLU maps. When fewer than g
/// clusters exist, the last aggregate is duplicated until g slots exist
/// (the analogue of padding a short clip with its last frame); duplicated
/// slots report size 0 so they carry no loss weight.
pub fn aggregate<S: Scalar>(
    preact: &Tensor<S>,
    assignment: &ClusterAssignment,
    g: usize,
) -> Result<AggregatedBatch<S>> {
    let frames = preact.shape()[0];
    if assignment.frames() != frames {
        return Err(Error::ShapeMismatch {
            expected: vec![assignment.frames()],
            actual: vec![frames],
        });
    }
    if g < 1 {
        return Err(Error::InvalidConfig(
            "need at least one cluster slot".into(),
        ));
    }
    let ranges = assignment.ranges();
    if ranges.len() > g {
        return Err(Error::InvalidConfig(format!(
            "assignment has {} clusters but only {g} slots",
            ranges.len()
        )));
    }
    let map_len = preact.len() / frames;
    let mut shape = preact.shape().to_vec();
    shape[0] = g;
    let mut out = Tensor::zeros(&shape);
    let mut sizes = vec![0usize; g];

    for (slot, range) in ranges.iter().enumerate() {
        let inv = S::from_f64(1.0 / range.len() as f64);
        sizes[slot] = range.len();
        let acc = &mut out.data_mut()[slot * map_len..(slot + 1) * map_len];
        for t in range.clone() {
            let src = &preact.data()[t * map_len..(t + 1) * map_len];
            for (a, v) in acc.iter_mut().zip(src.iter()) {
                *a += *v;
            }
        }
        for a in acc.iter_mut() {
            *a *= inv;
        }
    }
    // duplicate the last real aggregate into any remaining slots
    let last = ranges.len() - 1;
    for slot in ranges.len()..g {
        let src = out.index_leading(last).to_vec();
        out.data_mut()[slot * map_len..(slot + 1) * map_len].copy_from_slice(&src);
    }
    Ok(AggregatedBatch {
        activations: out,
        assignment: assignment.clone(),
        cluster_sizes: sizes,
    })
}

/// Backward of the aggregation seam: each member frame of cluster k gets
/// grad(slot k) / |cluster k|. Duplicated slots received zero loss weight,
/// so nothing needs to be spread from them.
fn spread_aggregate_grad<S: Scalar>(
    slot_grad: &Tensor<S>,
    assignment: &ClusterAssignment,
    frames: usize,
) -> Result<Tensor<S>> {
    let map_len = slot_grad.len() / slot_grad.shape()[0];
    let mut shape = slot_grad.shape().to_vec();
    shape[0] = frames;
    let mut out = Tensor::zeros(&shape);
    for (slot, range) in assignment.ranges().iter().enumerate() {
        let inv = S::from_f64(1.0 / range.len() as f64);
        let src = slot_grad.index_leading(slot).to_vec();
        for t in range.clone() {
            let dst = &mut out.data_mut()[t * map_len..(t + 1) * map_len];
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d += *s * inv;
            }
        }
    }
    Ok(out)
}

/// Weighted cross-entropy over logit rows plus its gradient: row t
/// contributes weight[t] * CE(row_t).
pub fn weighted_ce<S: Scalar>(
    logits: &Tensor<S>,
    weights: &[f64],
    label: usize,
) -> Result<(f64, Tensor<S>)> {
    let (t_len, classes) = (logits.shape()[0], logits.shape()[1]);
    if weights.len() != t_len {
        return Err(Error::ShapeMismatch {
            expected: vec![t_len],
            actual: vec![weights.len()],
        });
    }
    if label >= classes {
        return Err(Error::InvalidConfig(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (t, &w) in weights.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let row = logits.index_leading(t);
        let probs = softmax_f64_row(row);
        loss -= probs[label].ln() * w;
        let g_row = &mut grad.data_mut()[t * classes..(t + 1) * classes];
        for (c, g) in g_row.iter_mut().enumerate() {
            let delta = if c == label { 1.0 } else { 0.0 };
            *g = S::from_f64((probs[c] - delta) * w);
        }
    }
    Ok((loss, grad))
}

/// Numerically stable softmax of one logit row, in f64.
pub fn softmax_f64_row<S: Scalar>(row: &[S]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v.to_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

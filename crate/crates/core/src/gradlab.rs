//! Gradient-approximation lab: measures how far the single aggregated
//! gradient sits from the per-frame gradient sum, and checks the pairwise
//! elementwise error bound on a dedicated linear-softmax testbed.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::clustering::ClusterAssignment;
use crate::model::{
    aggregate, cluster_frames, softmax_f64_row, weighted_ce, ClusterMethod, Pipeline,
};
use crate::signature::{hamming, pearson};
use crate::tensor::Tensor;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Linear-softmax testbed
// ---------------------------------------------------------------------------

/// Features feed straight into per-class weights and a softmax over
/// ReLU-rectified projections. The pairwise error bound is derived in
/// exactly this setting, so it is checked here and nowhere else.
#[derive(Debug, Clone)]
pub struct Testbed {
    weights: Vec<f64>,
    classes: usize,
    dim: usize,
}

impl Testbed {
    pub fn new(classes: usize, dim: usize, weights: Vec<f64>) -> Result<Self> {
        if classes < 2 || dim < 1 {
            return Err(Error::InvalidConfig(
                "testbed needs >= 2 classes and >= 1 feature".into(),
            ));
        }
        if weights.len() != classes * dim {
            return Err(Error::ShapeMismatch {
                expected: vec![classes, dim],
                actual: vec![weights.len()],
            });
        }
        Ok(Testbed {
            weights,
            classes,
            dim,
        })
    }

    pub fn random(classes: usize, dim: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let scale = 1.0 / (dim as f64).sqrt();
        let weights = (0..classes * dim).map(|_| gaussian(rng) * scale).collect();
        Testbed::new(classes, dim, weights)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    /// Per-class projections x . w_c.
    pub fn projections(&self, x: &[f64]) -> Vec<f64> {
        (0..self.classes)
            .map(|c| {
                self.weights[c * self.dim..(c + 1) * self.dim]
                    .iter()
                    .zip(x.iter())
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }

    /// Softmax over ReLU-rectified projections.
    pub fn q(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = self.projections(x).iter().map(|&p| p.max(0.0)).collect();
        softmax_f64_row(&z)
    }

    /// Mean cross-entropy of the two frames.
    pub fn pair_loss(&self, x1: &[f64], x2: &[f64], label: usize) -> f64 {
        -0.5 * (self.q(x1)[label].ln() + self.q(x2)[label].ln())
    }

    /// Cross-entropy of the averaged pre-activation features.
    pub fn averaged_loss(&self, x1: &[f64], x2: &[f64], label: usize) -> f64 {
        let mid = mean_pair(x1, x2);
        -self.q(&mid)[label].ln()
    }

    /// The two-frame gradient formula: per class c and feature d,
    /// (x1[d](q_c(x1) - d_yc) + x2[d](q_c(x2) - d_yc)) / 2.
    pub fn grad_true_pair(&self, x1: &[f64], x2: &[f64], label: usize) -> Vec<f64> {
        let q1 = self.q(x1);
        let q2 = self.q(x2);
        let mut out = vec![0.0; self.classes * self.dim];
        for c in 0..self.classes {
            let delta = if c == label { 1.0 } else { 0.0 };
            let (a, b) = (q1[c] - delta, q2[c] - delta);
            for d in 0..self.dim {
                out[c * self.dim + d] = 0.5 * (x1[d] * a + x2[d] * b);
            }
        }
        out
    }

    /// The aggregated-activation gradient: mean(x) * (q_c(mean(x)) - d_yc).
    pub fn grad_approx_pair(&self, x1: &[f64], x2: &[f64], label: usize) -> Vec<f64> {
        let mid = mean_pair(x1, x2);
        let q = self.q(&mid);
        let mut out = vec![0.0; self.classes * self.dim];
        for c in 0..self.classes {
            let factor = q[c] - if c == label { 1.0 } else { 0.0 };
            for d in 0..self.dim {
                out[c * self.dim + d] = mid[d] * factor;
            }
        }
        out
    }

    /// True iff every per-class projection keeps its sign across the pair
    /// (zero counts as the non-positive side, as in binarization).
    pub fn sign_agreement(&self, x1: &[f64], x2: &[f64]) -> bool {
        self.projections(x1)
            .iter()
            .zip(self.projections(x2).iter())
            .all(|(a, b)| (*a > 0.0) == (*b > 0.0))
    }

    /// Elementwise comparison of |grad_true - grad_approx| against
    /// |(x1 - x2)(q_c(x1) - q_c(x2))| / 4.
    pub fn bound_check(&self, x1: &[f64], x2: &[f64], label: usize, eps: f64) -> BoundCheck {
        let q1 = self.q(x1);
        let q2 = self.q(x2);
        let g_true = self.grad_true_pair(x1, x2, label);
        let g_approx = self.grad_approx_pair(x1, x2, label);
        let mut lhs = vec![0.0; self.classes * self.dim];
        let mut rhs = vec![0.0; self.classes * self.dim];
        let mut max_excess = f64::NEG_INFINITY;
        for c in 0..self.classes {
            let dq = q1[c] - q2[c];
            for d in 0..self.dim {
                let i = c * self.dim + d;
                lhs[i] = (g_true[i] - g_approx[i]).abs();
                rhs[i] = 0.25 * ((x1[d] - x2[d]) * dq).abs();
                max_excess = max_excess.max(lhs[i] - rhs[i]);
            }
        }
        BoundCheck {
            sign_agreement: self.sign_agreement(x1, x2),
            holds: max_excess <= eps,
            max_excess,
            lhs,
            rhs,
        }
    }
}

/// One pair's elementwise bound comparison.
#[derive(Debug, Clone)]
pub struct BoundCheck {
    pub lhs: Vec<f64>,
    pub rhs: Vec<f64>,
    pub sign_agreement: bool,
    /// lhs <= rhs + eps everywhere. Asserted only for sign-agreeing pairs;
    /// recorded either way.
    pub holds: bool,
    pub max_excess: f64,
}

fn mean_pair(x1: &[f64], x2: &[f64]) -> Vec<f64> {
    x1.iter()
        .zip(x2.iter())
        .map(|(a, b)| 0.5 * (a + b))
        .collect()
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u1: f64 = rng.random();
        if u1 <= f64::MIN_POSITIVE {
            continue;
        }
        let u2: f64 = rng.random();
        return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
}

/// Draws x1 from a unit Gaussian, then x2 = x1 + delta with delta shrunk by
/// halving until every per-class projection keeps its sign. Pairs whose
/// delta cannot be tamed within the halving budget are redrawn.
pub fn sample_sign_agreeing_pair(
    testbed: &Testbed,
    rng: &mut ChaCha8Rng,
    delta_scale: f64,
) -> (Vec<f64>, Vec<f64>) {
    loop {
        let x1: Vec<f64> = (0..testbed.dim()).map(|_| gaussian(rng)).collect();
        let delta: Vec<f64> = (0..testbed.dim())
            .map(|_| gaussian(rng) * delta_scale)
            .collect();
        let mut shrink = 1.0;
        for _ in 0..40 {
            let x2: Vec<f64> = x1
                .iter()
                .zip(delta.iter())
                .map(|(x, d)| x + d * shrink)
                .collect();
            if testbed.sign_agreement(&x1, &x2) {
                return (x1, x2);
            }
            shrink *= 0.5;
        }
    }
}

/// Aggregate outcome of a bound sweep over freshly sampled pairs.
#[derive(Debug, Clone)]
pub struct BoundSweep {
    pub pairs: usize,
    pub holds: usize,
    pub max_excess: f64,
    pub eps: f64,
}

impl BoundSweep {
    pub fn all_hold(&self) -> bool {
        self.holds == self.pairs
    }
}

pub fn run_bound_sweep(
    testbed: &Testbed,
    pairs: usize,
    rng: &mut ChaCha8Rng,
    delta_scale: f64,
    eps: f64,
) -> BoundSweep {
    let mut holds = 0;
    let mut max_excess = f64::NEG_INFINITY;
    for i in 0..pairs {
        let (x1, x2) = sample_sign_agreeing_pair(testbed, rng, delta_scale);
        let label = i % testbed.classes();
        let check = testbed.bound_check(&x1, &x2, label, eps);
        debug_assert!(check.sign_agreement);
        if check.holds {
            holds += 1;
        }
        max_excess = max_excess.max(check.max_excess);
    }
    BoundSweep {
        pairs,
        holds,
        max_excess,
        eps,
    }
}

// ---------------------------------------------------------------------------
// Activation-distance vs gradient-distance scatter
// ---------------------------------------------------------------------------

/// One unordered frame pair: block-1 activation distances (Euclidean and
/// Hamming) against the Euclidean distance between block-1 parameter
/// gradients of the two frames.
#[derive(Debug, Clone)]
pub struct ScatterRow {
    pub pair_i: usize,
    pub pair_j: usize,
    pub euclid_act: f64,
    pub hamming_act: u64,
    pub euclid_grad: f64,
}

/// All N(N-1)/2 frame pairs of one video, one isolated backward pass per
/// frame, no aggregation anywhere. Per-frame gradients are the objects the
/// gradient sum is made of, so each frame runs the network on its own.
pub fn activation_gradient_scatter(
    pipeline: &Pipeline<f64>,
    frames: &Tensor<f64>,
    label: usize,
) -> Result<Vec<ScatterRow>> {
    let n = frames.shape()[0];
    let preact = pipeline.stem.infer(frames)?;
    let sigs = crate::model::frame_signatures(&preact)?;

    // block-1 parameter gradient of each frame on its own
    let mut frame_grads: Vec<Vec<f64>> = Vec::with_capacity(n);
    for t in 0..n {
        let one = single_frame(frames, t)?;
        let (stem_out, mut stem_tape) = pipeline.stem.forward(&one)?;
        let (logits, mut head_tape) = pipeline.head.forward(&stem_out)?;
        let (_, logit_grad) = weighted_ce(&logits, &[1.0], label)?;
        let (_, head_in_grad) = pipeline.head.backward(&mut head_tape, &logit_grad)?;
        let (stem_grads, _) = pipeline.stem.backward(&mut stem_tape, &head_in_grad)?;
        frame_grads.push(stem_grads.flatten());
    }

    let map_len = preact.len() / n;
    let mut rows = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let a = &preact.data()[i * map_len..(i + 1) * map_len];
            let b = &preact.data()[j * map_len..(j + 1) * map_len];
            let euclid_act = a
                .iter()
                .zip(b.iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            let hamming_act = hamming(&sigs[i], &sigs[j])?;
            let euclid_grad = frame_grads[i]
                .iter()
                .zip(frame_grads[j].iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt();
            rows.push(ScatterRow {
                pair_i: i,
                pair_j: j,
                euclid_act,
                hamming_act,
                euclid_grad,
            });
        }
    }
    Ok(rows)
}

/// Pearson correlation between activation and gradient Euclidean distance.
pub fn scatter_pearson(rows: &[ScatterRow]) -> Option<f64> {
    let a: Vec<f64> = rows.iter().map(|r| r.euclid_act).collect();
    let b: Vec<f64> = rows.iter().map(|r| r.euclid_grad).collect();
    pearson(&a, &b)
}

pub fn write_scatter_csv<W: Write>(out: &mut W, rows: &[ScatterRow]) -> std::io::Result<()> {
    writeln!(out, "pair_i,pair_j,euclid_act,hamming_act,euclid_grad")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{}",
            r.pair_i, r.pair_j, r.euclid_act, r.hamming_act, r.euclid_grad
        )?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Per-cluster gradient approximation error
// ---------------------------------------------------------------------------

/// Per-cluster distance between the summed true per-frame gradients and the
/// cluster-size-scaled aggregated-activation gradient, measured at the first
/// block after aggregation.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub method: ClusterMethod,
    pub requested_clusters: usize,
    pub per_cluster: Vec<f64>,
    pub cluster_sizes: Vec<usize>,
    pub mean: f64,
    pub max: f64,
}

pub fn cluster_gradient_report(
    pipeline: &Pipeline<f64>,
    frames: &Tensor<f64>,
    label: usize,
    method: ClusterMethod,
    g: usize,
) -> Result<GradientReport> {
    if method == ClusterMethod::None {
        return Err(Error::InvalidConfig(
            "gradient report needs a clustering method".into(),
        ));
    }
    let preact = pipeline.stem.infer(frames)?;
    let assignment = cluster_frames(&preact, method, g)?;
    let agg = aggregate(&preact, &assignment, g)?;
    let conv_idx = pipeline.head_conv_index();

    // ground truth: each frame's own gradient at the first block after the
    // seam; approximation: each aggregate slot's gradient, same footing
    let per_frame = head_iso_grads(pipeline, &preact, label, conv_idx)?;
    let per_slot = head_iso_grads(pipeline, &agg.activations, label, conv_idx)?;

    let mut per_cluster = Vec::new();
    let mut sizes = Vec::new();
    for (slot, range) in assignment.ranges().iter().enumerate() {
        let approx = &per_slot[slot];
        let scale = range.len() as f64;
        let mut dist = 0.0;
        for d in 0..approx.len() {
            let true_sum: f64 = range.clone().map(|t| per_frame[t][d]).sum();
            let diff = true_sum - scale * approx[d];
            dist += diff * diff;
        }
        per_cluster.push(dist.sqrt());
        sizes.push(range.len());
    }

    let mean = per_cluster.iter().sum::<f64>() / per_cluster.len() as f64;
    let max = per_cluster.iter().fold(0.0f64, |a, &b| a.max(b));
    Ok(GradientReport {
        method,
        requested_clusters: g,
        per_cluster,
        cluster_sizes: sizes,
        mean,
        max,
    })
}

pub fn write_report_csv<W: Write>(out: &mut W, reports: &[GradientReport]) -> std::io::Result<()> {
    writeln!(out, "cluster_id,method,distance")?;
    for report in reports {
        for (i, d) in report.per_cluster.iter().enumerate() {
            writeln!(out, "{},{},{}", i + 1, report.method.name(), d)?;
        }
    }
    Ok(())
}

/// Head-conv parameter gradients (weight and bias, flattened), one per
/// temporal row of `maps`, each row run through the remaining blocks on
/// its own.
fn head_iso_grads(
    pipeline: &Pipeline<f64>,
    maps: &Tensor<f64>,
    label: usize,
    conv_idx: usize,
) -> Result<Vec<Vec<f64>>> {
    let rows = maps.shape()[0];
    let mut out = Vec::with_capacity(rows);
    for t in 0..rows {
        let one = single_frame(maps, t)?;
        let (logits, mut tape) = pipeline.head.forward(&one)?;
        let (_, logit_grad) = weighted_ce(&logits, &[1.0], label)?;
        let (grads, _) = pipeline.head.backward(&mut tape, &logit_grad)?;
        let mut flat: Vec<f64> = grads.per_layer[conv_idx][0].data().to_vec();
        flat.extend_from_slice(grads.per_layer[conv_idx][1].data());
        out.push(flat);
    }
    Ok(out)
}

fn single_frame(frames: &Tensor<f64>, t: usize) -> Result<Tensor<f64>> {
    let mut shape = frames.shape().to_vec();
    shape[0] = 1;
    Tensor::from_vec(&shape, frames.index_leading(t).to_vec())
}

/// Convenience wrapper giving the report's assignment for export.
pub fn report_assignment(
    pipeline: &Pipeline<f64>,
    frames: &Tensor<f64>,
    method: ClusterMethod,
    g: usize,
) -> Result<ClusterAssignment> {
    let preact = pipeline.stem.infer(frames)?;
    cluster_frames(&preact, method, g)
}

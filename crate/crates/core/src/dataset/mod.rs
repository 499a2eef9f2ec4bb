//! Move4MNIST: synthetic moving-digit videos with per-frame relevance
//! ground truth. A digit drifts one pixel per frame along the labeled
//! direction over a static procedural background; every video carries one
//! consecutive distractor chunk (background-only, black, or a foreign
//! digit moving in a random direction) whose frames are marked irrelevant.

mod glyphs;
mod io;

pub use glyphs::{load_idx_images, load_idx_labels, GlyphBank, GLYPH_SIZE};
pub use io::{read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};
use crate::{Error, Result};

pub const CHANNELS: usize = 3;
/// Digits are stamped at half glyph resolution.
pub const DIGIT_SIZE: usize = GLYPH_SIZE / 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionLabel {
    MoveUp,
    MoveDown,
    MoveLeft,
    MoveRight,
}

impl ActionLabel {
    pub const ALL: [ActionLabel; 4] = [
        ActionLabel::MoveUp,
        ActionLabel::MoveDown,
        ActionLabel::MoveLeft,
        ActionLabel::MoveRight,
    ];

    pub fn index(self) -> usize {
        match self {
            ActionLabel::MoveUp => 0,
            ActionLabel::MoveDown => 1,
            ActionLabel::MoveLeft => 2,
            ActionLabel::MoveRight => 3,
        }
    }

    pub fn from_index(i: usize) -> Result<ActionLabel> {
        ActionLabel::ALL
            .get(i)
            .copied()
            .ok_or_else(|| Error::InvalidConfig(format!("label index {i} out of range")))
    }

    /// (dx, dy) in image coordinates; y grows downward.
    pub fn velocity(self) -> (i64, i64) {
        match self {
            ActionLabel::MoveUp => (0, -1),
            ActionLabel::MoveDown => (0, 1),
            ActionLabel::MoveLeft => (-1, 0),
            ActionLabel::MoveRight => (1, 0),
        }
    }
}

/// One synthetic video: N RGB frames, a motion label, and the per-frame
/// relevance ground truth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VideoSample {
    pub label: ActionLabel,
    pub relevance: Vec<bool>,
    /// `[N][3][H][W]`, 8-bit.
    pub pixels: Vec<u8>,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
}

impl VideoSample {
    pub fn frame(&self, t: usize) -> &[u8] {
        let stride = CHANNELS * self.height * self.width;
        &self.pixels[t * stride..(t + 1) * stride]
    }

    /// Pixels normalized to [-1, 1] as a `[N, 3, H, W]` tensor.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        let data = self
            .pixels
            .iter()
            .map(|&p| S::from_f64(p as f64 / 127.5 - 1.0))
            .collect();
        Tensor::from_vec(&[self.frames, CHANNELS, self.height, self.width], data)
            .expect("pixel buffer matches declared dims")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistractorConfig {
    pub background_prob: f64,
    pub black_prob: f64,
    pub foreign_digit_prob: f64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DistractorConfig {
    fn default() -> Self {
        DistractorConfig {
            background_prob: 1.0 / 3.0,
            black_prob: 1.0 / 3.0,
            foreign_digit_prob: 1.0 / 3.0,
            min_len: 4,
            max_len: 12,
        }
    }
}

impl DistractorConfig {
    pub fn total_prob(&self) -> f64 {
        self.background_prob + self.black_prob + self.foreign_digit_prob
    }

    /// All distractors off.
    pub fn none() -> Self {
        DistractorConfig {
            background_prob: 0.0,
            black_prob: 0.0,
            foreign_digit_prob: 0.0,
            ..DistractorConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub train_count: usize,
    pub test_count: usize,
    pub frames: usize,
    pub image_size: usize,
    pub distractor: DistractorConfig,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            train_count: 1800,
            test_count: 600,
            frames: 32,
            image_size: 32,
            distractor: DistractorConfig::default(),
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train_count == 0 || self.test_count == 0 {
            return Err(Error::InvalidConfig("split counts must be positive".into()));
        }
        if self.frames == 0 {
            return Err(Error::InvalidConfig("frame count must be positive".into()));
        }
        if self.image_size < DIGIT_SIZE {
            return Err(Error::InvalidConfig(format!(
                "image size {} cannot hold a {DIGIT_SIZE}px digit",
                self.image_size
            )));
        }
        let d = &self.distractor;
        for p in [d.background_prob, d.black_prob, d.foreign_digit_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!(
                    "probability {p} out of [0,1]"
                )));
            }
        }
        if d.total_prob() > 1.0 + 1e-12 {
            return Err(Error::InvalidConfig(
                "distractor probabilities sum above 1".into(),
            ));
        }
        if d.min_len == 0 || d.min_len > d.max_len {
            return Err(Error::InvalidConfig(
                "distractor length range is empty".into(),
            ));
        }
        if d.total_prob() > 0.0 && d.max_len >= self.frames {
            return Err(Error::InvalidConfig(format!(
                "distractor chunk ({} frames max) must be shorter than the video ({})",
                d.max_len, self.frames
            )));
        }
        Ok(())
    }
}

/// Both splits, deterministic in the spec seed: each video draws from its
/// own RNG stream derived from (seed, split, index).
pub fn generate(
    spec: &DatasetSpec,
    glyphs: &GlyphBank,
) -> Result<(Vec<VideoSample>, Vec<VideoSample>)> {
    spec.validate()?;
    if glyphs.available_digits().is_empty() {
        return Err(Error::InvalidConfig("glyph bank is empty".into()));
    }
    let train = generate_split(spec, glyphs, 0, spec.train_count);
    let test = generate_split(spec, glyphs, 1, spec.test_count);
    Ok((train, test))
}

fn generate_split(
    spec: &DatasetSpec,
    glyphs: &GlyphBank,
    split: u64,
    count: usize,
) -> Vec<VideoSample> {
    (0..count)
        .into_par_iter()
        .map(|index| {
            let stream = splitmix64(splitmix64(spec.seed ^ (split << 32)) ^ index as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(stream);
            render_video(spec, glyphs, ActionLabel::ALL[index % 4], &mut rng)
        })
        .collect()
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

#[derive(Clone, Copy, PartialEq)]
enum DistractorKind {
    Background,
    Black,
    ForeignDigit,
}

fn render_video(
    spec: &DatasetSpec,
    glyphs: &GlyphBank,
    label: ActionLabel,
    rng: &mut ChaCha8Rng,
) -> VideoSample {
    let (n, size) = (spec.frames, spec.image_size);
    let background = value_noise_background(size, rng);

    let digits = glyphs.available_digits();
    let target_digit = digits[rng.random_range(0..digits.len())];
    let target_glyph = downsample_glyph(glyphs.glyph(target_digit, rng.random_range(0..4096)));
    let start = (
        rng.random_range(0..size as i64),
        rng.random_range(0..size as i64),
    );
    let (dx, dy) = label.velocity();

    // one consecutive distractor chunk, kind drawn from the configured mix
    let d = &spec.distractor;
    let roll: f64 = rng.random();
    let chunk = if roll < d.total_prob() && d.max_len < n {
        let kind = if roll < d.background_prob {
            DistractorKind::Background
        } else if roll < d.background_prob + d.black_prob {
            DistractorKind::Black
        } else {
            DistractorKind::ForeignDigit
        };
        let len = rng.random_range(d.min_len..=d.max_len);
        let start = rng.random_range(0..=n - len);
        Some((kind, start..start + len))
    } else {
        None
    };

    // foreign digit setup is drawn unconditionally to keep the stream layout
    // fixed across distractor kinds
    let foreign_candidates: Vec<usize> = digits
        .iter()
        .copied()
        .filter(|&d| d != target_digit)
        .collect();
    let foreign_digit = if foreign_candidates.is_empty() {
        target_digit
    } else {
        foreign_candidates[rng.random_range(0..foreign_candidates.len())]
    };
    let foreign_glyph = downsample_glyph(glyphs.glyph(foreign_digit, rng.random_range(0..4096)));
    // the foreign digit sits still: a digit outside the target classes
    // carries no motion label and marks its frames irrelevant
    let foreign_pos = (
        rng.random_range(0..size as i64),
        rng.random_range(0..size as i64),
    );

    let frame_stride = CHANNELS * size * size;
    let mut pixels = vec![0u8; n * frame_stride];
    let mut relevance = vec![true; n];

    for t in 0..n {
        let frame = &mut pixels[t * frame_stride..(t + 1) * frame_stride];
        let in_chunk = chunk.as_ref().is_some_and(|(_, r)| r.contains(&t));
        if in_chunk {
            relevance[t] = false;
            match chunk.as_ref().unwrap().0 {
                DistractorKind::Black => { /* stays zero */ }
                DistractorKind::Background => frame.copy_from_slice(&background),
                DistractorKind::ForeignDigit => {
                    frame.copy_from_slice(&background);
                    stamp_digit(frame, size, &foreign_glyph, foreign_pos.0, foreign_pos.1);
                }
            }
        } else {
            frame.copy_from_slice(&background);
            let px = start.0 + t as i64 * dx;
            let py = start.1 + t as i64 * dy;
            stamp_digit(frame, size, &target_glyph, px, py);
        }
    }

    VideoSample {
        label,
        relevance,
        pixels,
        frames: n,
        height: size,
        width: size,
    }
}

/// Smooth seeded texture: a coarse random grid bilinearly upsampled, kept
/// dark so the digit dominates. Carries no label information.
fn value_noise_background(size: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    const GRID: usize = 5;
    let mut out = vec![0u8; CHANNELS * size * size];
    for c in 0..CHANNELS {
        let mut grid = [[0.0f64; GRID]; GRID];
        for row in grid.iter_mut() {
            for v in row.iter_mut() {
                *v = rng.random_range(10.0..110.0);
            }
        }
        let plane = &mut out[c * size * size..(c + 1) * size * size];
        let scale = (GRID - 1) as f64 / size as f64;
        for y in 0..size {
            let fy = y as f64 * scale;
            let (y0, ty) = (fy as usize, fy.fract());
            let y1 = (y0 + 1).min(GRID - 1);
            for x in 0..size {
                let fx = x as f64 * scale;
                let (x0, tx) = (fx as usize, fx.fract());
                let x1 = (x0 + 1).min(GRID - 1);
                let top = grid[y0][x0] * (1.0 - tx) + grid[y0][x1] * tx;
                let bot = grid[y1][x0] * (1.0 - tx) + grid[y1][x1] * tx;
                plane[y * size + x] = (top * (1.0 - ty) + bot * ty) as u8;
            }
        }
    }
    out
}

/// 2x2 mean pool from glyph resolution down to stamp resolution.
fn downsample_glyph(glyph: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; DIGIT_SIZE * DIGIT_SIZE];
    for y in 0..DIGIT_SIZE {
        for x in 0..DIGIT_SIZE {
            let sum: u32 = [
                glyph[(2 * y) * GLYPH_SIZE + 2 * x],
                glyph[(2 * y) * GLYPH_SIZE + 2 * x + 1],
                glyph[(2 * y + 1) * GLYPH_SIZE + 2 * x],
                glyph[(2 * y + 1) * GLYPH_SIZE + 2 * x + 1],
            ]
            .iter()
            .map(|&v| v as u32)
            .sum();
            out[y * DIGIT_SIZE + x] = (sum / 4) as u8;
        }
    }
    out
}

/// Alpha-blends the bright digit onto every channel, wrapping at borders.
fn stamp_digit(frame: &mut [u8], size: usize, digit: &[u8], px: i64, py: i64) {
    for gy in 0..DIGIT_SIZE {
        for gx in 0..DIGIT_SIZE {
            let a = digit[gy * DIGIT_SIZE + gx] as u32;
            if a == 0 {
                continue;
            }
            let y = (py + gy as i64).rem_euclid(size as i64) as usize;
            let x = (px + gx as i64).rem_euclid(size as i64) as usize;
            for c in 0..CHANNELS {
                let p = &mut frame[c * size * size + y * size + x];
                let bg = *p as u32;
                *p = (bg + (255 - bg) * a / 255) as u8;
            }
        }
    }
}

//! Full-video training via temporal clustering of frame activations.
//!
//! Instead of sub-sampling frames, every frame of a video is pushed through
//! the first network block; the per-frame pre-activation maps are binarized
//! into sign signatures, clustered along time by Hamming distance, averaged
//! per cluster, and only the aggregated maps continue through the remaining
//! blocks. The crate bundles the pieces needed to train and to verify the
//! gradient approximation this rests on:
//!
//! - [`tensor`]: a small dense-tensor engine with reverse-mode backward,
//!   finite-difference checking, MAC accounting, and checkpoint I/O
//! - [`signature`]: bit-packed sign signatures and exact Hamming distances
//! - [`clustering`]: cumulative, slope, and uniform temporal clustering
//! - [`model`]: the clustered two-stage pipeline
//! - [`gradlab`]: gradient-approximation error measurements and the
//!   pairwise error bound check
//! - [`dataset`]: the Move4MNIST synthetic video generator and file format
//! - [`trainer`]: seeded SGD training/evaluation with JSONL metrics

pub mod clustering;
pub mod dataset;
mod error;
pub mod gradlab;
pub mod model;
pub mod signature;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

//! Seeded SGD training and evaluation over the clustered or full pipeline,
//! with JSONL metrics, per-epoch checkpoints, and a run manifest.
//!
//! Determinism contract: given (config, seed, dataset), every metric field
//! except wall-clock time is bitwise reproducible, as are the checkpoints.
//! Per-video work may run on any number of threads; gradients are reduced
//! in ascending video-index order.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::VideoSample;

/// Per-video training result: loss, correctness, stored frames, gradients.
type VideoPass<S> = (f64, bool, usize, PipelineGrads<S>);
use crate::model::{Pipeline, PipelineConfig, PipelineGrads, Precision};
use crate::tensor::{load_checkpoint, save_checkpoint, Scalar};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    /// Evaluate on the test split every this many epochs; 0 = final epoch only.
    pub eval_every: usize,
    pub pipeline: PipelineConfig,
    pub out_dir: PathBuf,
}

impl TrainConfig {
    pub fn new(pipeline: PipelineConfig, out_dir: impl Into<PathBuf>) -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            learning_rate: 0.01,
            momentum: 0.9,
            seed: 0,
            eval_every: 5,
            pipeline,
            out_dir: out_dir.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pipeline.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig(
                "epochs and batch size must be positive".into(),
            ));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig("learning rate must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("momentum must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub split: String,
    pub top1: f64,
    pub mean_loss: f64,
    /// Wall clock, the one non-deterministic field.
    pub wall_secs: f64,
    /// Stored post-block-1 intermediates per video (g clustered, N full).
    pub peak_stored: usize,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub best_checkpoint: PathBuf,
    pub final_checkpoint: PathBuf,
    pub metrics_path: PathBuf,
    pub manifest_path: PathBuf,
    /// Test top-1 of the best checkpoint (train top-1 when never evaluated).
    pub best_top1: f64,
}

/// `git describe`-style build tag, falling back to the crate version.
pub fn build_tag() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| format!("v{}", env!("CARGO_PKG_VERSION")))
}

/// Dispatches on the configured precision.
pub fn train(
    config: &TrainConfig,
    train_set: &[VideoSample],
    test_set: &[VideoSample],
) -> Result<TrainOutcome> {
    match config.pipeline.precision {
        Precision::F32 => train_typed::<f32>(config, train_set, test_set),
        Precision::F64 => train_typed::<f64>(config, train_set, test_set),
    }
}

fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("checkpoint-epoch-{epoch:03}.fvck"))
}

pub fn train_typed<S: Scalar>(
    config: &TrainConfig,
    train_set: &[VideoSample],
    test_set: &[VideoSample],
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training split is empty"));
    }
    fs::create_dir_all(&config.out_dir)?;
    let metrics_path = config.out_dir.join("metrics.jsonl");
    let mut metrics_file = fs::File::create(&metrics_path)?;

    let manifest_path = config.out_dir.join("manifest.json");
    let manifest = serde_json::json!({
        "config": config,
        "seed": config.seed,
        "build_tag": build_tag(),
    });
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;

    let mut pipeline = Pipeline::<S>::new(config.pipeline.clone())?;
    pipeline.init_random(config.seed);
    let mut velocity = pipeline.zero_grads();
    let lr = S::from_f64(config.learning_rate);
    let momentum = S::from_f64(config.momentum);

    let mut records = Vec::new();
    let mut best_top1 = f64::NEG_INFINITY;
    let best_path = config.out_dir.join("best.fvck");
    let mut last_good: Option<PathBuf> = None;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64) << 20);
        for i in (1..order.len()).rev() {
            order.swap(i, rng.random_range(0..=i));
        }

        let mut epoch_loss = 0.0;
        let mut epoch_correct = 0usize;
        let mut peak_stored = 0usize;
        for batch in order.chunks(config.batch_size) {
            // per-video passes run in parallel; the reduction below is
            // sequential in ascending batch position for bitwise stability
            let results: Vec<Result<VideoPass<S>>> = batch
                .par_iter()
                .map(|&vi| {
                    let video = &train_set[vi];
                    let frames = video.to_tensor::<S>();
                    let mut fwd = pipeline.forward(&frames, true)?;
                    let stored = fwd.head_stored_frames();
                    let (loss, grads) = pipeline.backward(&mut fwd, video.label.index())?;
                    let correct = fwd.predicted() == video.label.index();
                    Ok((loss, correct, stored, grads))
                })
                .collect();

            let mut batch_grads: Option<PipelineGrads<S>> = None;
            let mut batch_loss = 0.0;
            for r in results {
                let (loss, correct, stored, grads) = r?;
                batch_loss += loss;
                epoch_correct += usize::from(correct);
                peak_stored = peak_stored.max(stored);
                match &mut batch_grads {
                    None => batch_grads = Some(grads),
                    Some(acc) => acc.axpy(S::ONE, &grads),
                }
            }
            epoch_loss += batch_loss;
            if !batch_loss.is_finite() {
                return Err(Error::TrainAborted {
                    reason: format!("non-finite batch loss at epoch {epoch}"),
                    last_good,
                });
            }
            let mut mean_grads = batch_grads.expect("non-empty batch");
            mean_grads.scale(S::from_f64(1.0 / batch.len() as f64));

            // classical momentum: v <- m v + g; w <- w - lr v
            velocity.scale(momentum);
            velocity.axpy(S::ONE, &mean_grads);
            pipeline.apply_update(-lr, &velocity);
        }

        let train_record = MetricsRecord {
            epoch,
            split: "train".into(),
            top1: epoch_correct as f64 / train_set.len() as f64,
            mean_loss: epoch_loss / train_set.len() as f64,
            wall_secs: started.elapsed().as_secs_f64(),
            peak_stored,
        };
        writeln!(metrics_file, "{}", serde_json::to_string(&train_record)?)?;
        records.push(train_record);

        let ck_path = checkpoint_path(&config.out_dir, epoch);
        save_checkpoint_pipeline(&pipeline, &ck_path)?;
        last_good = Some(ck_path.clone());

        let is_last = epoch == config.epochs;
        let due = config.eval_every > 0 && epoch % config.eval_every == 0;
        if (due || is_last) && !test_set.is_empty() {
            let eval = evaluate_pipeline(&pipeline, test_set, epoch)?;
            let improved = eval.top1 > best_top1;
            if improved {
                best_top1 = eval.top1;
                fs::copy(&ck_path, &best_path)?;
            }
            writeln!(metrics_file, "{}", serde_json::to_string(&eval)?)?;
            records.push(eval);
        }
    }

    let final_path = checkpoint_path(&config.out_dir, config.epochs);
    if best_top1 == f64::NEG_INFINITY {
        // never evaluated: best is the final checkpoint by train accuracy
        best_top1 = records
            .iter()
            .rev()
            .find(|r| r.split == "train")
            .map(|r| r.top1)
            .unwrap_or(0.0);
        fs::copy(&final_path, &best_path)?;
    }
    Ok(TrainOutcome {
        records,
        best_checkpoint: best_path,
        final_checkpoint: final_path,
        metrics_path,
        manifest_path,
        best_top1,
    })
}

fn save_checkpoint_pipeline<S: Scalar>(pipeline: &Pipeline<S>, path: &Path) -> Result<()> {
    // stem and head serialize as one stacked network file
    let mut layers = pipeline.stem.layers().to_vec();
    layers.extend_from_slice(pipeline.head.layers());
    let mut stacked = crate::tensor::Network::<S>::new(layers)?;
    let split = pipeline.stem.layers().len();
    for (i, params) in pipeline.stem.params().iter().enumerate() {
        stacked.params_mut()[i] = params.clone();
    }
    for (i, params) in pipeline.head.params().iter().enumerate() {
        stacked.params_mut()[split + i] = params.clone();
    }
    save_checkpoint(&stacked, path)
}

pub fn load_checkpoint_pipeline<S: Scalar>(pipeline: &mut Pipeline<S>, path: &Path) -> Result<()> {
    let mut layers = pipeline.stem.layers().to_vec();
    layers.extend_from_slice(pipeline.head.layers());
    let mut stacked = crate::tensor::Network::<S>::new(layers)?;
    load_checkpoint(&mut stacked, path)?;
    let split = pipeline.stem.layers().len();
    for i in 0..split {
        pipeline.stem.params_mut()[i] = stacked.params()[i].clone();
    }
    for i in 0..pipeline.head.params().len() {
        pipeline.head.params_mut()[i] = stacked.params()[split + i].clone();
    }
    Ok(())
}

/// Accuracy and mean loss over a split; parameters are never touched.
pub fn evaluate_pipeline<S: Scalar>(
    pipeline: &Pipeline<S>,
    dataset: &[VideoSample],
    epoch: usize,
) -> Result<MetricsRecord> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput("evaluation split is empty"));
    }
    let started = Instant::now();
    let results: Vec<Result<(f64, bool)>> = dataset
        .par_iter()
        .map(|video| {
            let frames = video.to_tensor::<S>();
            let fwd = pipeline.forward(&frames, false)?;
            let loss = pipeline.loss(&fwd, video.label.index())?;
            Ok((loss, fwd.predicted() == video.label.index()))
        })
        .collect();
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for r in results {
        let (loss, ok) = r?;
        loss_sum += loss;
        correct += usize::from(ok);
    }
    Ok(MetricsRecord {
        epoch,
        split: "test".into(),
        top1: correct as f64 / dataset.len() as f64,
        mean_loss: loss_sum / dataset.len() as f64,
        wall_secs: started.elapsed().as_secs_f64(),
        peak_stored: pipeline.config.head_slots(),
    })
}

/// Loads a checkpoint into a fresh pipeline built from `config` and
/// evaluates it.
pub fn evaluate_checkpoint(
    config: &PipelineConfig,
    checkpoint: &Path,
    dataset: &[VideoSample],
) -> Result<MetricsRecord> {
    match config.precision {
        Precision::F32 => {
            let mut p = Pipeline::<f32>::new(config.clone())?;
            load_checkpoint_pipeline(&mut p, checkpoint)?;
            evaluate_pipeline(&p, dataset, 0)
        }
        Precision::F64 => {
            let mut p = Pipeline::<f64>::new(config.clone())?;
            load_checkpoint_pipeline(&mut p, checkpoint)?;
            evaluate_pipeline(&p, dataset, 0)
        }
    }
}

// ---------------------------------------------------------------------------
// Ablation runs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub label: String,
    pub per_seed: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Rows sorted by mean top-1, best first.
    pub fn ranked(&self) -> Vec<&AblationRow> {
        let mut rows: Vec<&AblationRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| b.mean.partial_cmp(&a.mean).unwrap());
        rows
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

pub fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Trains every labeled variant across the shared seeds and summarizes the
/// best test top-1 per run.
pub fn ablation_matrix(
    base: &TrainConfig,
    variants: &[(String, PipelineConfig)],
    seeds: &[u64],
    train_set: &[VideoSample],
    test_set: &[VideoSample],
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::EmptyInput("ablation needs variants and seeds"));
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (label, pipeline_cfg) in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                pipeline: pipeline_cfg.clone(),
                out_dir: base.out_dir.join(format!("{label}-seed{seed}")),
                ..base.clone()
            };
            let outcome = train(&cfg, train_set, test_set)?;
            per_seed.push(outcome.best_top1);
        }
        let (mean, std) = mean_and_std(&per_seed);
        rows.push(AblationRow {
            label: label.clone(),
            per_seed,
            mean,
            std,
        });
    }
    Ok(AblationReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, DatasetSpec, DistractorConfig, GlyphBank};
    use crate::model::ClusterMethod;

    fn tiny_dataset(
        train: usize,
        test: usize,
        frames: usize,
    ) -> (Vec<VideoSample>, Vec<VideoSample>) {
        let spec = DatasetSpec {
            train_count: train,
            test_count: test,
            frames,
            image_size: 16,
            distractor: DistractorConfig {
                min_len: 2,
                max_len: 4,
                ..DistractorConfig::default()
            },
            seed: 7,
        };
        generate(&spec, &GlyphBank::procedural()).unwrap()
    }

    fn tiny_pipeline(frames: usize) -> PipelineConfig {
        PipelineConfig {
            frames,
            clusters: 4,
            method: ClusterMethod::Cumulative,
            image_size: 16,
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, test_set) = tiny_dataset(8, 4, 8);
        let mut cfg = TrainConfig::new(tiny_pipeline(8), dir.path().join("run"));
        cfg.epochs = 2;
        cfg.learning_rate = 0.0;
        cfg.eval_every = 0;
        train(&cfg, &train_set, &test_set).unwrap();

        let mut fresh = Pipeline::<f32>::new(cfg.pipeline.clone()).unwrap();
        fresh.init_random(cfg.seed);
        let mut loaded = Pipeline::<f32>::new(cfg.pipeline.clone()).unwrap();
        load_checkpoint_pipeline(&mut loaded, &checkpoint_path(&dir.path().join("run"), 2))
            .unwrap();
        for (a, b) in fresh
            .stem
            .params()
            .iter()
            .flatten()
            .chain(fresh.head.params().iter().flatten())
            .zip(
                loaded
                    .stem
                    .params()
                    .iter()
                    .flatten()
                    .chain(loaded.head.params().iter().flatten()),
            )
        {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn same_seed_reproduces_metrics_bitwise_except_wall_clock() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, test_set) = tiny_dataset(12, 4, 8);
        let mut cfg = TrainConfig::new(tiny_pipeline(8), dir.path().join("a"));
        cfg.epochs = 3;
        cfg.eval_every = 2;
        let a = train(&cfg, &train_set, &test_set).unwrap();
        cfg.out_dir = dir.path().join("b");
        let b = train(&cfg, &train_set, &test_set).unwrap();
        assert_eq!(a.records.len(), b.records.len());
        for (x, y) in a.records.iter().zip(b.records.iter()) {
            assert_eq!(x.epoch, y.epoch);
            assert_eq!(x.split, y.split);
            assert_eq!(x.top1, y.top1, "top1 must be bitwise reproducible");
            assert_eq!(x.mean_loss, y.mean_loss);
            assert_eq!(x.peak_stored, y.peak_stored);
        }
        // checkpoints byte-identical too
        let ck_a = std::fs::read(&a.final_checkpoint).unwrap();
        let ck_b = std::fs::read(&b.final_checkpoint).unwrap();
        assert_eq!(ck_a, ck_b);
    }

    #[test]
    fn overfits_a_tiny_subset() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, _) = tiny_dataset(8, 4, 8);
        let mut cfg = TrainConfig::new(tiny_pipeline(8), dir.path().join("overfit"));
        cfg.epochs = 200;
        cfg.eval_every = 0;
        cfg.batch_size = 4;
        // memorization check: stop as soon as the subset is fully learned
        let mut reached = false;
        for _ in 0..1 {
            let outcome = train(&cfg, &train_set, &[]).unwrap();
            reached = outcome
                .records
                .iter()
                .any(|r| r.split == "train" && r.top1 == 1.0);
        }
        assert!(
            reached,
            "8-video subset should be memorized within 200 epochs"
        );
    }

    #[test]
    fn untrained_accuracy_sits_at_chance() {
        let (_, test_set) = tiny_dataset(4, 600, 8);
        let mut p = Pipeline::<f32>::new(tiny_pipeline(8)).unwrap();
        p.init_random(3);
        let record = evaluate_pipeline(&p, &test_set, 0).unwrap();
        assert!(
            (record.top1 - 0.25).abs() <= 0.05,
            "untrained top-1 {} should be 0.25 +/- 0.05",
            record.top1
        );
        // evaluating twice gives identical records modulo wall clock
        let again = evaluate_pipeline(&p, &test_set, 0).unwrap();
        assert_eq!(record.top1, again.top1);
        assert_eq!(record.mean_loss, again.mean_loss);
    }

    #[test]
    fn diverging_run_aborts_preserving_last_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, _) = tiny_dataset(8, 4, 8);
        let mut cfg = TrainConfig::new(tiny_pipeline(8), dir.path().join("diverge"));
        cfg.epochs = 50;
        cfg.learning_rate = 1e9;
        cfg.eval_every = 0;
        match train(&cfg, &train_set, &[]) {
            Err(Error::TrainAborted { last_good, .. }) => {
                if let Some(path) = last_good {
                    assert!(path.exists(), "last good checkpoint must remain on disk");
                }
            }
            other => panic!("expected TrainAborted, got {other:?}"),
        }
    }

    #[test]
    fn train_loss_mostly_non_increasing_at_default_lr() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, _) = tiny_dataset(96, 4, 16);
        let mut cfg = TrainConfig::new(tiny_pipeline(16), dir.path().join("steady"));
        cfg.epochs = 12;
        cfg.eval_every = 0;
        let outcome = train(&cfg, &train_set, &[]).unwrap();
        let losses: Vec<f64> = outcome
            .records
            .iter()
            .filter(|r| r.split == "train")
            .map(|r| r.mean_loss)
            .collect();
        let transitions = losses.len() - 1;
        let non_increasing = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(
            non_increasing * 10 >= transitions * 9,
            "{non_increasing}/{transitions} non-increasing transitions"
        );
    }

    #[test]
    fn ablation_report_means_match_hand_recomputation() {
        let dir = tempfile::tempdir().unwrap();
        let (train_set, test_set) = tiny_dataset(12, 8, 8);
        let mut base = TrainConfig::new(tiny_pipeline(8), dir.path().join("ablate"));
        base.epochs = 2;
        base.eval_every = 0;
        let variants = vec![
            (
                "g2".to_string(),
                PipelineConfig {
                    clusters: 2,
                    ..tiny_pipeline(8)
                },
            ),
            (
                "g4".to_string(),
                PipelineConfig {
                    clusters: 4,
                    ..tiny_pipeline(8)
                },
            ),
        ];
        let report = ablation_matrix(&base, &variants, &[0, 1, 2], &train_set, &test_set).unwrap();
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.per_seed.len(), 3);
            let mean = row.per_seed.iter().sum::<f64>() / 3.0;
            let var = row
                .per_seed
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / 2.0;
            assert!((row.mean - mean).abs() < 1e-15);
            assert!((row.std - var.sqrt()).abs() < 1e-15);
        }
        // degenerate one-variant, one-seed report
        let single = ablation_matrix(&base, &variants[..1], &[0], &train_set, &test_set).unwrap();
        assert_eq!(single.rows.len(), 1);
        assert_eq!(single.rows[0].std, 0.0);
    }
}

//! Subcommand implementations.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fullvideo_core::clustering::write_assignment_csv;
use fullvideo_core::dataset::{
    generate, read_dataset, write_dataset, DatasetSpec, DistractorConfig, GlyphBank, VideoSample,
};
use fullvideo_core::gradlab::{
    activation_gradient_scatter, cluster_gradient_report, report_assignment, run_bound_sweep,
    scatter_pearson, write_report_csv, write_scatter_csv, Testbed,
};
use fullvideo_core::model::{frame_signatures, ClusterMethod, Pipeline, PipelineConfig, Precision};
use fullvideo_core::signature::{hamming, hamming_naive, write_signatures, Signature};
use fullvideo_core::tensor::Tensor;
use fullvideo_core::trainer::{
    evaluate_checkpoint, load_checkpoint_pipeline, train as run_train, TrainConfig,
};
use fullvideo_core::{Error, Result};

use crate::{
    resolve_out, write_manifest, BenchHammingArgs, ClusterArgs, EvalArgs, FlopsArgs, GenDataArgs,
    ScatterArgs, TrainArgs, VerifyGradArgs,
};

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    let spec = DatasetSpec {
        train_count: args.train_count,
        test_count: args.test_count,
        frames: args.frames,
        image_size: args.size,
        distractor: DistractorConfig {
            background_prob: args.bg_prob,
            black_prob: args.black_prob,
            foreign_digit_prob: args.foreign_prob,
            min_len: args.distractor_min,
            max_len: args.distractor_max,
        },
        seed: args.seed,
    };
    spec.validate()?;
    let glyphs =
        GlyphBank::load_or_procedural(args.idx_images.as_deref(), args.idx_labels.as_deref())?;
    let (train, test) = generate(&spec, &glyphs)?;
    fs::create_dir_all(&out)?;
    write_dataset(&train, &out.join("train.fvds"))?;
    write_dataset(&test, &out.join("test.fvds"))?;
    fs::write(out.join("spec.json"), serde_json::to_string_pretty(&spec)?)?;
    write_manifest(&out, Some(args.seed))?;
    println!(
        "wrote {} train + {} test videos ({} frames, {}x{}) to {}",
        train.len(),
        test.len(),
        spec.frames,
        spec.image_size,
        spec.image_size,
        out.display()
    );
    Ok(())
}

fn load_split(data: &Path, split: &str) -> Result<Vec<VideoSample>> {
    let file = match split {
        "train" => data.join("train.fvds"),
        "test" => data.join("test.fvds"),
        other => {
            return Err(Error::InvalidConfig(format!(
                "unknown split {other:?} (train|test)"
            )))
        }
    };
    read_dataset(&file)
}

fn parse_method(s: &str) -> Result<ClusterMethod> {
    s.parse()
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(Error::InvalidConfig(format!(
            "unknown precision {other:?} (f32|f64)"
        ))),
    }
}

/// Pipeline config from an optional JSON file, dataset dims, and flag
/// overrides, in that order of precedence (flags win).
fn pipeline_config(
    config_path: Option<&Path>,
    sample: &VideoSample,
    method: Option<&str>,
    clusters: Option<usize>,
    subsample: Option<usize>,
    temporal_shift: bool,
    precision: Option<&str>,
) -> Result<PipelineConfig> {
    let mut cfg = match config_path {
        Some(path) => serde_json::from_str::<PipelineConfig>(&fs::read_to_string(path)?)?,
        None => PipelineConfig::default(),
    };
    cfg.frames = sample.frames;
    cfg.image_size = sample.height;
    if let Some(m) = method {
        cfg.method = parse_method(m)?;
    }
    if let Some(g) = clusters {
        cfg.clusters = g;
    }
    if subsample.is_some() {
        cfg.subsample = subsample;
        cfg.method = ClusterMethod::None;
    }
    if temporal_shift {
        cfg.temporal_shift = true;
    }
    if let Some(p) = precision {
        cfg.precision = parse_precision(p)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    let train_set = load_split(&args.data, "train")?;
    let test_set = load_split(&args.data, "test")?;
    let pipeline = pipeline_config(
        args.config.as_deref(),
        &train_set[0],
        args.method.as_deref(),
        args.clusters,
        args.subsample,
        args.temporal_shift,
        args.precision.as_deref(),
    )?;
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch_size,
        learning_rate: args.lr,
        momentum: args.momentum,
        seed: args.seed,
        eval_every: args.eval_every,
        pipeline,
        out_dir: out.clone(),
    };
    cfg.validate()?;
    write_manifest(&out, Some(args.seed))?;
    let outcome = run_train(&cfg, &train_set, &test_set)?;
    for r in &outcome.records {
        println!(
            "epoch {:3} {:5} top1 {:.4} loss {:.4} stored {}",
            r.epoch, r.split, r.top1, r.mean_loss, r.peak_stored
        );
    }
    println!(
        "best top1 {:.4}; checkpoints in {}",
        outcome.best_top1,
        out.display()
    );
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    let split = load_split(&args.data, &args.split)?;
    let cfg = pipeline_config(
        None,
        &split[0],
        args.method.as_deref(),
        args.clusters,
        args.subsample,
        args.temporal_shift,
        args.precision.as_deref(),
    )?;
    let record = evaluate_checkpoint(&cfg, &args.checkpoint, &split)?;
    write_manifest(&out, None)?;
    let line = serde_json::to_string(&record)?;
    fs::write(out.join("eval.json"), &line)?;
    println!("{line}");
    Ok(())
}

pub fn verify_grad(args: VerifyGradArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut testbed = Testbed::random(args.classes, args.dim, &mut rng)?;
    for w in testbed.weights_mut() {
        *w *= args.weight_scale;
    }
    let started = Instant::now();
    let sweep = run_bound_sweep(&testbed, args.pairs, &mut rng, args.delta_scale, args.eps);
    let secs = started.elapsed().as_secs_f64();
    write_manifest(&out, Some(args.seed))?;
    let report = serde_json::json!({
        "pairs": sweep.pairs,
        "holds": sweep.holds,
        "hold_rate": sweep.holds as f64 / sweep.pairs as f64,
        "max_excess": sweep.max_excess,
        "eps": sweep.eps,
        "classes": args.classes,
        "dim": args.dim,
        "weight_scale": args.weight_scale,
        "delta_scale": args.delta_scale,
    });
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "bound held on {}/{} sign-agreeing pairs (max excess {:.3e}, eps {:.0e}) in {secs:.2}s",
        sweep.holds, sweep.pairs, sweep.max_excess, sweep.eps
    );
    if sweep.all_hold() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "bound violated on {} of {} pairs",
            sweep.pairs - sweep.holds,
            sweep.pairs
        )))
    }
}

pub fn scatter(args: ScatterArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    let split = load_split(&args.data, &args.split)?;
    if split.is_empty() {
        return Err(Error::EmptyInput("no videos in the requested split"));
    }
    let sample = &split[0];
    let cfg = PipelineConfig {
        frames: sample.frames,
        image_size: sample.height,
        clusters: 1,
        method: ClusterMethod::None,
        precision: Precision::F64,
        ..PipelineConfig::default()
    };
    let mut pipeline = Pipeline::<f64>::new(cfg)?;
    match &args.checkpoint {
        Some(path) => load_checkpoint_pipeline(&mut pipeline, path)?,
        None => pipeline.init_random(args.seed),
    }
    fs::create_dir_all(&out)?;
    write_manifest(&out, Some(args.seed))?;

    let mut summary = String::from("video_id,pearson\n");
    let mut reports = Vec::new();
    for (vid, video) in split.iter().take(args.videos).enumerate() {
        let frames: Tensor<f64> = video.to_tensor();
        let rows = activation_gradient_scatter(&pipeline, &frames, video.label.index())?;
        let mut file = fs::File::create(out.join(format!("scatter-video-{vid:03}.csv")))?;
        write_scatter_csv(&mut file, &rows)?;
        let rho = scatter_pearson(&rows);
        summary.push_str(&format!(
            "{vid},{}\n",
            rho.map_or("degenerate".to_string(), |r| format!("{r}"))
        ));
        if let Some(g) = args.gradient_report {
            for method in [
                ClusterMethod::Cumulative,
                ClusterMethod::Slope,
                ClusterMethod::Uniform,
            ] {
                reports.push(cluster_gradient_report(
                    &pipeline,
                    &frames,
                    video.label.index(),
                    method,
                    g,
                )?);
            }
        }
    }
    fs::write(out.join("pearson-summary.csv"), summary)?;
    if args.gradient_report.is_some() {
        let mut file = fs::File::create(out.join("report.csv"))?;
        write_report_csv(&mut file, &reports)?;
    }
    println!(
        "wrote scatter tables for {} videos to {}",
        args.videos.min(split.len()),
        out.display()
    );
    Ok(())
}

pub fn cluster(args: ClusterArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    let method = parse_method(&args.method)?;
    if method == ClusterMethod::None {
        return Err(Error::InvalidConfig(
            "cluster export needs a clustering method".into(),
        ));
    }
    let split = load_split(&args.data, &args.split)?;
    let sample = &split[0];
    let cfg = PipelineConfig {
        frames: sample.frames,
        image_size: sample.height,
        clusters: args.clusters,
        method,
        precision: Precision::F64,
        ..PipelineConfig::default()
    };
    fs::create_dir_all(&out)?;
    write_manifest(&out, None)?;

    let mut missing = Vec::new();
    let mut csv = fs::File::create(out.join("assignments.csv"))?;
    let mut wrote_header = false;
    for epoch in 1..=args.epochs {
        let ck = args
            .checkpoints
            .join(format!("checkpoint-epoch-{epoch:03}.fvck"));
        if !ck.exists() {
            missing.push(epoch);
            continue;
        }
        let mut pipeline = Pipeline::<f64>::new(cfg.clone())?;
        load_checkpoint_pipeline(&mut pipeline, &ck)?;
        for (vid, video) in split.iter().take(args.videos).enumerate() {
            let frames: Tensor<f64> = video.to_tensor();
            let assignment = report_assignment(&pipeline, &frames, method, args.clusters)?;
            write_assignment_csv(&mut csv, &[(epoch, vid, &assignment)], !wrote_header)?;
            wrote_header = true;
            if args.dump_signatures {
                let preact = pipeline.stem.infer(&frames)?;
                let sigs = frame_signatures(&preact)?;
                write_signatures(
                    &sigs,
                    &out.join(format!("signatures-epoch-{epoch:03}-video-{vid:03}.fvsg")),
                )?;
            }
        }
    }
    if !missing.is_empty() {
        eprintln!("missing checkpoints for epochs: {missing:?}");
    }
    if !wrote_header {
        return Err(Error::InvalidConfig(format!(
            "no checkpoints found under {}",
            args.checkpoints.display()
        )));
    }
    println!("wrote {}", out.join("assignments.csv").display());
    Ok(())
}

pub fn bench_hamming(args: BenchHammingArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    if args.bits == 0 || args.iters == 0 {
        return Err(Error::InvalidConfig(
            "bits and iters must be positive".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let a = random_signature(&mut rng, args.bits);
    let b = random_signature(&mut rng, args.bits);

    // exactness first: packed kernel against the naive bit loop
    let mut exact = true;
    for _ in 0..8 {
        let len = 1 + rng.random_range(0..2048);
        let x = random_signature(&mut rng, len);
        let y = random_signature(&mut rng, x.bit_len());
        if hamming(&x, &y)? != hamming_naive(&x, &y)? {
            exact = false;
        }
    }

    let started = Instant::now();
    let mut checksum = 0u64;
    for _ in 0..args.iters {
        checksum = checksum.wrapping_add(hamming(&a, &b)?);
    }
    let secs = started.elapsed().as_secs_f64();
    let gbits = (args.bits as f64 * args.iters as f64) / secs / 1e9;

    write_manifest(&out, Some(args.seed))?;
    let report = serde_json::json!({
        "bits": args.bits,
        "iters": args.iters,
        "seconds": secs,
        "gbits_per_sec": gbits,
        "exact_vs_naive": exact,
        "checksum": checksum,
    });
    fs::write(
        out.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    println!(
        "{} bits x {} iters in {secs:.3}s = {gbits:.2} Gbit/s; exact vs naive: {exact}",
        args.bits, args.iters
    );
    if exact {
        Ok(())
    } else {
        Err(Error::InvalidConfig(
            "packed kernel disagrees with the naive loop".into(),
        ))
    }
}

fn random_signature(rng: &mut ChaCha8Rng, bits: usize) -> Signature {
    Signature::from_bits((0..bits).map(|_| rng.random_bool(0.5))).expect("bits >= 1")
}

pub fn flops(args: FlopsArgs) -> Result<()> {
    let out = resolve_out(&args.out);
    let method = parse_method(&args.method)?;
    let cfg = PipelineConfig {
        frames: args.frames,
        image_size: args.size,
        clusters: args.clusters,
        method,
        subsample: args.subsample,
        ..PipelineConfig::default()
    };
    cfg.validate()?;
    let pipeline = Pipeline::<f32>::new(cfg.clone())?;
    let (stem, head, total) = pipeline.flop_report()?;

    let mut text = String::new();
    text.push_str(&format!("block 1 ({} frames):\n", stem.frames));
    for l in &stem.per_layer {
        text.push_str(&format!(
            "  layer {:2} {:16} {:>12} MACs/frame\n",
            l.index, l.kind, l.macs_per_frame
        ));
    }
    text.push_str(&format!("blocks 2+ ({} slots):\n", head.frames));
    for l in &head.per_layer {
        text.push_str(&format!(
            "  layer {:2} {:16} {:>12} MACs/frame\n",
            l.index, l.kind, l.macs_per_frame
        ));
    }
    text.push_str(&format!(
        "total = block1({}) + rest({}) = {} + {} = {} MACs\n",
        stem.frames, head.frames, stem.total, head.total, total
    ));
    print!("{text}");
    fs::create_dir_all(&out)?;
    write_manifest(&out, None)?;
    fs::write(out.join("report.txt"), text)?;
    let mut json = fs::File::create(out.join("report.json"))?;
    writeln!(
        json,
        "{}",
        serde_json::json!({
            "block1_total": stem.total,
            "rest_total": head.total,
            "total": total,
            "frames": stem.frames,
            "slots": head.frames,
        })
    )?;
    Ok(())
}

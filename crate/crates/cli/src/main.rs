//! Operator surface: one process per invocation, config file plus flag
//! overrides, machine-readable error records on stderr.
//!
//! Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.

use clap::{Args, Parser, Subcommand};
use std::path::{Path, PathBuf};

use wavhead_core::audio::Waveform;
use wavhead_core::config::Config;
use wavhead_core::data::{
    ingest_real_dataset, load_for_training, make_synthetic_dataset, split_speakers, Dataset,
};
use wavhead_core::error::{Error, Result};
use wavhead_core::latent::{fit_pca, sample_gaussian_codes, LatentCode, PcaBasis};
use wavhead_core::metrics::{
    bench_inference, compute_feature_stats, fid, lmd, psnr, read_landmarks, ssim,
};
use wavhead_core::models::{
    build_pair, build_toy_pair, load_generator_checkpoint, save_generator_checkpoint,
    save_stage1_checkpoint, Frame, PerceptualExtractor, TrajectoryModel, VideoClip,
};
use wavhead_core::pipeline::{write_trajectory, Pipeline};
use wavhead_core::training::{stage2_tune, write_loss_log, Stage1Trainer};

#[derive(Parser)]
#[command(
    name = "wavhead",
    about = "Speech-driven talking-head generation via latent-space trajectories",
    version
)]
struct Cli {
    /// Structured config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Load checkpoints and bases even when config fingerprints mismatch.
    #[arg(long, global = true)]
    force: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with ground-truth trajectories.
    SynthData(SynthArgs),
    /// Ingest a tree of aligned clips into the dataset archive layout.
    Ingest(IngestArgs),
    /// Fit the PCA basis over cached latents of the training split.
    FitPca(FitPcaArgs),
    /// Stage one: train the audio encoder and latent decoder.
    Train(TrainArgs),
    /// Stage two: tune the generator on one clip or image.
    Tune(TuneArgs),
    /// Generate a talking-head video from an identity image and audio.
    Generate(GenerateArgs),
    /// Compare a generated frame directory against ground truth.
    Evaluate(EvaluateArgs),
    /// Measure end-to-end inference throughput.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    speakers: usize,
    #[arg(long, default_value_t = 5)]
    clips: usize,
    #[arg(long, default_value_t = 50)]
    frames: usize,
    #[arg(long, default_value_t = 17)]
    seed: u64,
}

#[derive(Args)]
struct IngestArgs {
    #[arg(long)]
    src: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FitPcaArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Number of principal directions; 0 means min(512, samples - 1, dim).
    #[arg(long, default_value_t = 0)]
    k: usize,
    /// Fit on every clip rather than the training split only.
    #[arg(long)]
    all_speakers: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    basis: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override stage-one max steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Ablation: drop the latent L2 term.
    #[arg(long)]
    no_latent_loss: bool,
    /// Ablation: drop the perceptual term.
    #[arg(long)]
    no_lpips_loss: bool,
    /// Override the stage-one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Loss log path (defaults to <out>.log.jsonl).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Write the checkpoint every N steps as well as at the end.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: usize,
}

#[derive(Args)]
struct TuneArgs {
    /// Tune on a clip from a dataset archive (requires --data).
    #[arg(long)]
    clip: Option<String>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Tune on a single identity image.
    #[arg(long)]
    image: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    steps: Option<usize>,
    /// Subject id stored in the checkpoint (defaults to clip id/image stem).
    #[arg(long)]
    subject: Option<String>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    identity: PathBuf,
    #[arg(long)]
    audio: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    basis: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use the untuned base generator even when --tuned is given.
    #[arg(long)]
    stage1_only: bool,
    /// Per-subject tuned generator checkpoint.
    #[arg(long)]
    tuned: Option<PathBuf>,
    /// Also write the latent trajectory side-car.
    #[arg(long)]
    trajectory: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    /// JSON report path (defaults to <pred>/report.json).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 100)]
    frames: usize,
    /// Bench a trained checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    basis: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    let code = match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let record = serde_json::json!({
                "error": e.kind(),
                "message": e.to_string(),
            });
            eprintln!("{record}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn load_config(cli: &Cli) -> Result<Config> {
    match &cli.config {
        Some(path) => Config::load(path),
        None => Ok(Config::default()),
    }
}

/// Every command writes the merged effective config next to its output.
fn write_effective_config(cfg: &Config, out: &Path) -> Result<()> {
    let target = if out.extension().is_some() {
        out.with_extension("config.toml")
    } else {
        std::fs::create_dir_all(out)?;
        out.join("effective-config.toml")
    };
    cfg.save(&target)
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::SynthData(args) => synth_data(cli, args),
        Command::Ingest(args) => ingest(cli, args),
        Command::FitPca(args) => fit_pca_cmd(cli, args),
        Command::Train(args) => train(cli, args),
        Command::Tune(args) => tune(cli, args),
        Command::Generate(args) => generate(cli, args),
        Command::Evaluate(args) => evaluate(cli, args),
        Command::Bench(args) => bench(cli, args),
    }
}

fn synth_data(cli: &Cli, args: &SynthArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    std::fs::create_dir_all(&args.out)?;
    let report = make_synthetic_dataset(
        &args.out,
        args.speakers,
        args.clips,
        args.frames,
        args.seed,
        &cfg,
    )?;
    write_effective_config(&cfg, &args.out)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn ingest(cli: &Cli, args: &IngestArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let (_, encoder) = build_pair(&cfg)?;
    let (manifest, report) = ingest_real_dataset(&args.src, &args.out, &cfg, encoder.as_ref())?;
    write_effective_config(&cfg, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "ingested": report.ingested,
            "skipped": report.skipped,
            "clips": manifest.clips.len(),
        })
    );
    Ok(())
}

fn training_split(cfg: &Config, dataset: &Dataset) -> Result<Vec<wavhead_core::data::ClipRecord>> {
    if cfg.data.holdout_speakers == 0 {
        return Ok(dataset.manifest.clips.clone());
    }
    let (train, _) = split_speakers(
        &dataset.manifest.clips,
        cfg.data.holdout_speakers,
        cfg.data.split_seed,
    )?;
    Ok(train)
}

fn fit_pca_cmd(cli: &Cli, args: &FitPcaArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let dataset = Dataset::open(&args.data)?;
    let records = if args.all_speakers {
        dataset.manifest.clips.clone()
    } else {
        training_split(&cfg, &dataset)?
    };
    let mut codes: Vec<LatentCode> = Vec::new();
    for record in &records {
        codes.extend(dataset.load_latents(record)?);
    }
    let k = effective_k(if args.k != 0 { args.k } else { cfg.pca.k }, codes.len(), &cfg);
    let basis = fit_pca(&codes, k)?;
    basis.save(&args.out, &cfg.fingerprint())?;
    write_effective_config(&cfg, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "k": basis.k(),
            "samples": codes.len(),
            "dim": basis.dim(),
            "top_eigenvalue": basis.eigenvalues[0],
        })
    );
    Ok(())
}

/// Default k = min(512, samples - 1, flattened dimension).
fn effective_k(requested: usize, samples: usize, cfg: &Config) -> usize {
    if requested != 0 {
        requested
    } else {
        512.min(samples.saturating_sub(1)).min(cfg.latent_dim()).max(1)
    }
}

fn train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(steps) = args.steps {
        cfg.stage1.max_steps = steps;
    }
    if let Some(seed) = args.seed {
        cfg.stage1.seed = seed;
    }
    cfg.stage1.disable_latent_loss |= args.no_latent_loss;
    cfg.stage1.disable_lpips_loss |= args.no_lpips_loss;
    cfg.validate()?;

    let dataset = Dataset::open(&args.data)?;
    let records = training_split(&cfg, &dataset)?;
    let clips = load_for_training(&dataset, &records, &cfg)?;

    let basis = PcaBasis::load(&args.basis)?;
    if !cli.force {
        let stored = PcaBasis::stored_fingerprint(&args.basis)?;
        if stored != cfg.fingerprint() {
            return Err(Error::Config(format!(
                "basis fingerprint {stored} does not match config; pass --force to override"
            )));
        }
    }

    let (generator, _encoder) = build_pair(&cfg)?;
    let phi = PerceptualExtractor::new(&cfg.perceptual);
    let model = TrajectoryModel::new(&cfg, basis.k());
    let mut trainer = Stage1Trainer::new(
        model,
        generator.as_ref(),
        &phi,
        &basis,
        &clips,
        cfg.stage1.clone(),
    )?;

    let steps = cfg.stage1.max_steps;
    let mut log = Vec::with_capacity(steps);
    for step in 0..steps {
        let rec = trainer.step()?;
        if step == 0 || (step + 1) % 50 == 0 || step + 1 == steps {
            println!("{}", serde_json::to_string(&rec).expect("record serializes"));
        }
        if args.checkpoint_every > 0 && (step + 1) % args.checkpoint_every == 0 {
            save_stage1_checkpoint(&args.out, &trainer.model, &phi, &cfg, cfg.stage1.seed, step + 1)?;
        }
        log.push(rec);
    }
    save_stage1_checkpoint(&args.out, &trainer.model, &phi, &cfg, cfg.stage1.seed, steps)?;
    let log_path = args
        .log
        .clone()
        .unwrap_or_else(|| args.out.with_extension("log.jsonl"));
    write_loss_log(&log_path, &log)?;
    write_effective_config(&cfg, &args.out)?;
    Ok(())
}

fn tune(cli: &Cli, args: &TuneArgs) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let Some(steps) = args.steps {
        cfg.stage2.max_steps = steps;
    }
    if cfg.generator.kind != "toy" {
        return Err(Error::Unsupported(
            "stage-two tuning requires a generator with a gradient path; only the toy \
             generator provides one here"
                .into(),
        ));
    }

    let (clip, subject) = match (&args.clip, &args.image) {
        (Some(clip_id), _) => {
            let data = args
                .data
                .as_ref()
                .ok_or_else(|| Error::Config("--clip requires --data <dataset dir>".into()))?;
            let dataset = Dataset::open(data)?;
            let record = dataset.record(clip_id)?.clone();
            let frames = dataset.load_frames(&record)?;
            (
                VideoClip::new(frames, record.fps),
                args.subject.clone().unwrap_or_else(|| clip_id.clone()),
            )
        }
        (None, Some(image)) => {
            let frame = Frame::load_png(image)?;
            let subject = args.subject.clone().unwrap_or_else(|| {
                image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| "subject".into())
            });
            (VideoClip::new(vec![frame], cfg.audio.fps), subject)
        }
        (None, None) => {
            return Err(Error::Config("tune needs --clip <id> or --image <path>".into()))
        }
    };

    let (generator, encoder) = build_toy_pair(&cfg.generator);
    let phi = PerceptualExtractor::new(&cfg.perceptual);
    let (tuned, log) = stage2_tune(&clip, &generator, &encoder, &phi, &cfg.stage2)?;
    save_generator_checkpoint(&args.out, &tuned, &cfg, &subject, cfg.stage2.max_steps)?;
    write_loss_log(&args.out.with_extension("log.jsonl"), &log)?;
    write_effective_config(&cfg, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "subject": subject,
            "frames": clip.len(),
            "initial_loss": log.first().map(|r| r.total),
            "final_loss": log.last().map(|r| r.total),
        })
    );
    Ok(())
}

fn generate(cli: &Cli, args: &GenerateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let mut pipeline = Pipeline::from_files(&cfg, &args.checkpoint, &args.basis, cli.force)?;
    if let Some(tuned_path) = &args.tuned {
        let (tuned, _) = load_generator_checkpoint(tuned_path, &cfg, cli.force)?;
        pipeline.set_tuned_generator(Box::new(tuned));
    }

    let identity = Frame::load_png(&args.identity)?;
    let audio = Waveform::read_wav(&args.audio)?;
    if audio.sample_rate != cfg.audio.sample_rate {
        return Err(Error::Input(format!(
            "audio sample rate {} does not match configured {}; resample at ingestion",
            audio.sample_rate, cfg.audio.sample_rate
        )));
    }

    let out = if args.stage1_only {
        pipeline.generate_stage1_only(&identity, &audio)?
    } else {
        pipeline.generate(&identity, &audio)?
    };

    let frame_dir = args.out.join("frames");
    std::fs::create_dir_all(&frame_dir)?;
    for (i, frame) in out.clip.frames.iter().enumerate() {
        frame.save_png(&frame_dir.join(format!("{i:06}.png")))?;
    }
    if args.trajectory {
        write_trajectory(&args.out.join("trajectory.bin"), &out.trajectory)?;
    }
    write_effective_config(&cfg, &args.out)?;
    println!(
        "{}",
        serde_json::json!({
            "frames": out.clip.len(),
            "out": args.out.display().to_string(),
            "stage1_only": args.stage1_only,
        })
    );
    Ok(())
}

fn load_frame_dir(dir: &Path) -> Result<Vec<Frame>> {
    let search = if dir.join("frames").is_dir() {
        dir.join("frames")
    } else {
        dir.to_path_buf()
    };
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&search)
        .map_err(|e| Error::Data(format!("cannot list {}: {e}", search.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no PNG frames under {}", search.display())));
    }
    paths.iter().map(|p| Frame::load_png(p)).collect()
}

/// Map generator-range frames [-1, 1] to the [0, 1] evaluation domain.
fn to_unit(frame: &Frame) -> Frame {
    Frame::new(frame.data.mapv(|v| (v + 1.0) / 2.0))
}

fn find_landmarks(dir: &Path) -> Option<PathBuf> {
    let direct = dir.join("landmarks.txt");
    if direct.exists() {
        return Some(direct);
    }
    None
}

fn evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let pred = load_frame_dir(&args.pred)?;
    let gt = load_frame_dir(&args.gt)?;
    if pred.len() != gt.len() {
        return Err(Error::dimension(format!(
            "frame counts differ: pred {} vs gt {}",
            pred.len(),
            gt.len()
        )));
    }

    let mut psnr_sum = 0.0f64;
    let mut ssim_sum = 0.0f64;
    for (p, g) in pred.iter().zip(&gt) {
        psnr_sum += psnr(&to_unit(p), &to_unit(g), cfg.metrics.psnr_max)?;
        ssim_sum += ssim(&to_unit(p), &to_unit(g), &cfg.metrics)?;
    }
    let mean_psnr = psnr_sum / pred.len() as f64;
    let mean_ssim = ssim_sum / pred.len() as f64;

    let phi = PerceptualExtractor::new(&cfg.perceptual);
    let (stats_pred, _) =
        compute_feature_stats(&VideoClip::new(pred.clone(), cfg.audio.fps), &phi)?;
    let (stats_gt, _) = compute_feature_stats(&VideoClip::new(gt.clone(), cfg.audio.fps), &phi)?;
    let fid_value = fid(&stats_pred, &stats_gt)?;

    let lmd_value = match (find_landmarks(&args.pred), find_landmarks(&args.gt)) {
        (Some(p), Some(g)) => Some(lmd(&read_landmarks(&g)?, &read_landmarks(&p)?)?),
        _ => None,
    };

    let psnr_display = if mean_psnr.is_finite() {
        format!("{mean_psnr:.2}")
    } else {
        "inf".into()
    };
    println!("metric      value");
    println!("PSNR (up)   {psnr_display}");
    println!("SSIM (up)   {mean_ssim:.4}");
    println!("FID  (down) {fid_value:.6}");
    match lmd_value {
        Some(v) => println!("LMD  (down) {v:.4}"),
        None => println!("LMD  (down) n/a (no landmark files)"),
    }

    let report = serde_json::json!({
        "frames": pred.len(),
        "psnr_db": if mean_psnr.is_finite() { serde_json::json!(mean_psnr) } else { serde_json::json!("inf") },
        "ssim": mean_ssim,
        "fid": fid_value,
        "lmd": lmd_value,
        "fid_note": "features come from the seeded random-conv extractor; not comparable to Inception-based FID",
    });
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| args.pred.join("report.json"));
    std::fs::write(&out, serde_json::to_string_pretty(&report).expect("serializes"))?;
    write_effective_config(&cfg, &out)?;
    Ok(())
}

fn bench(cli: &Cli, args: &BenchArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let pipeline = match (&args.checkpoint, &args.basis) {
        (Some(ckpt), Some(basis)) => Pipeline::from_files(&cfg, ckpt, basis, cli.force)?,
        (None, None) => {
            // Self-contained: sample latents from the toy prior, fit a
            // small basis, and bench a fresh (untrained) model.
            let (generator, encoder) = build_pair(&cfg)?;
            let (l, c) = generator.latent_shape();
            let codes = sample_gaussian_codes(l, c, 64, 0.5, cfg.generator.seed ^ 0xbe);
            let k = 16.min(codes.len() - 1).min(cfg.latent_dim());
            let basis = fit_pca(&codes, k)?;
            let model = TrajectoryModel::new(&cfg, basis.k());
            let phi = PerceptualExtractor::new(&cfg.perceptual);
            Pipeline::new(cfg.clone(), model, phi, basis, generator, encoder)?
        }
        _ => {
            return Err(Error::Config(
                "bench needs both --checkpoint and --basis, or neither".into(),
            ))
        }
    };

    let (generator, _) = build_pair(&cfg)?;
    let identity = generator.synthesize(&LatentCode::zeros(
        cfg.generator.layers,
        cfg.generator.channels,
    ))?;

    let report = bench_inference(&pipeline, &identity, args.frames)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("serializes"));
    Ok(())
}

//! Command-line surface: dataset synthesis and conversion, training,
//! evaluation, the parallel-inference benchmark, and gradient checking.

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use pcseq_core::data::augment::AugmentConfig;
use pcseq_core::data::config::{metrics_line, RunConfig};
use pcseq_core::data::depth::{
    depth_to_points, read_pgm16, uniform_frame_indices, CameraIntrinsics, DepthFrame,
};
use pcseq_core::data::synth::{generate_dataset, SynthConfig};
use pcseq_core::data::{load_dataset, write_dataset, SequenceRecord};
use pcseq_core::geom::{normalize_sequence, presample, PointCloudSequence};
use pcseq_core::model::{count_parameters, init_parameters, init_parameters_dithered, ModelConfig};
use pcseq_core::runtime::{bench, BenchConfig, Precision};
use pcseq_core::tensor::{grad_check, load_checkpoint, save_checkpoint, Graph};
use pcseq_core::train::{evaluate, train, TrainOptions};
use std::fs;
use std::io::Write;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "pcseq", version, about)]
struct Cli {
    /// Master random seed; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Base configuration before `--config` and flags apply: `desk` is the
    /// reduced 4-class model, `full` the 60-class model.
    #[arg(long, global = true, default_value = "desk")]
    preset: Preset,
    /// Run configuration file (flat `key = value`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads for frame-parallel phases; overrides the config file.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, clap::ValueEnum)]
enum Preset {
    Desk,
    Full,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic 4-class action dataset.
    Synth(SynthArgs),
    /// Convert a directory of 16-bit depth PGMs into one sequence file.
    Convert(ConvertArgs),
    /// Train a model and write a checkpoint plus a metrics log.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Benchmark frame-parallel inference across worker counts.
    Bench(BenchArgs),
    /// Gradient-check the full network at a tiny configuration.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25)]
    train_per_class: usize,
    #[arg(long, default_value_t = 10)]
    test_per_class: usize,
    #[arg(long, default_value_t = 20)]
    frames: usize,
    #[arg(long, default_value_t = 512)]
    points: usize,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
}

#[derive(Args)]
struct ConvertArgs {
    /// Directory of `.pgm` depth frames (sorted by name).
    #[arg(long)]
    input: PathBuf,
    /// Output `.pcsq` path.
    #[arg(long)]
    output: PathBuf,
    /// Class label stored in the sequence file.
    #[arg(long)]
    label: usize,
    /// Camera intrinsics `fx,fy,cx,cy`.
    #[arg(long, value_parser = parse_intrinsics)]
    intrinsics: CameraIntrinsics,
    /// Frames kept after uniform temporal subsampling.
    #[arg(long, default_value_t = 20)]
    frames: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory (defaults to the config's `data_dir`).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint output path (defaults to the config's `checkpoint`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Metrics log path (defaults to the config's `metrics_log`).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Which split to score.
    #[arg(long, default_value = "test")]
    split: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Load parameters from a checkpoint instead of random initialization.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Comma-separated worker counts.
    #[arg(long, default_value = "1,2,4,8", value_delimiter = ',')]
    workers_list: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    #[arg(long, default_value = "f64")]
    precision: Precision,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
}

fn parse_intrinsics(s: &str) -> Result<CameraIntrinsics, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad number in {s:?}")))
        .collect::<Result<_, _>>()?;
    let [fx, fy, cx, cy] = parts.as_slice() else {
        return Err("intrinsics need exactly fx,fy,cx,cy".into());
    };
    if *fx <= 0.0 || *fy <= 0.0 {
        return Err("focal lengths must be positive".into());
    }
    Ok(CameraIntrinsics {
        fx: *fx,
        fy: *fy,
        cx: *cx,
        cy: *cy,
    })
}

fn load_run_config(cli: &Cli) -> Result<RunConfig> {
    let base = match cli.preset {
        Preset::Desk => RunConfig::default(),
        Preset::Full => RunConfig::full(),
    };
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            RunConfig::parse_with_base(&text, base)?
        }
        None => base,
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(workers) = cli.workers {
        cfg.workers = workers.max(1);
    }
    Ok(cfg)
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_run_config(&cli)?;
    match &cli.command {
        Command::Synth(args) => cmd_synth(&cfg, args),
        Command::Convert(args) => cmd_convert(&cfg, args),
        Command::Train(args) => cmd_train(&cfg, args),
        Command::Eval(args) => cmd_eval(&cfg, args),
        Command::Bench(args) => cmd_bench(&cfg, args),
        Command::Gradcheck(args) => cmd_gradcheck(&cfg, args),
    }
}

fn cmd_synth(cfg: &RunConfig, args: &SynthArgs) -> Result<()> {
    let synth = SynthConfig {
        frames: args.frames,
        points_per_frame: args.points,
        noise_sigma: args.noise,
        train_per_class: args.train_per_class,
        test_per_class: args.test_per_class,
        seed: cfg.seed,
    };
    let (train, test) = generate_dataset(&synth);
    write_dataset(&args.out, &train, &test)?;
    println!(
        "wrote {} train and {} test sequences to {}",
        train.len(),
        test.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_convert(cfg: &RunConfig, args: &ConvertArgs) -> Result<()> {
    let mut frames: Vec<PathBuf> = fs::read_dir(&args.input)
        .with_context(|| format!("reading {}", args.input.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
        .collect();
    if frames.is_empty() {
        bail!("no .pgm frames under {}", args.input.display());
    }
    frames.sort();
    let keep = uniform_frame_indices(frames.len(), args.frames);

    let mut clouds = Vec::with_capacity(keep.len());
    for &i in &keep {
        let (width, height, depth_mm) = read_pgm16(&frames[i])?;
        let frame = DepthFrame {
            width,
            height,
            depth_mm,
            intrinsics: args.intrinsics,
        };
        clouds.push(depth_to_points(&frame)?.points);
    }
    // Per-frame presample to the fixed point budget, then one normalization
    // across the whole sequence so motion survives.
    let sampled: Vec<Vec<_>> = clouds
        .iter()
        .enumerate()
        .map(|(t, points)| presample(points, cfg.seed.wrapping_add(t as u64)))
        .collect();
    let normalized = normalize_sequence(&PointCloudSequence::from_frames(sampled))?;
    let quantized = PointCloudSequence {
        frames: normalized
            .frames
            .into_iter()
            .map(|mut f| {
                for p in &mut f.points {
                    for c in p.iter_mut() {
                        *c = *c as f32 as f64;
                    }
                }
                f
            })
            .collect(),
    };
    let source_id = args
        .output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sequence".into());
    let record = SequenceRecord {
        sequence: quantized,
        label: args.label,
        source_id,
    };
    pcseq_core::data::write_sequence(&record, &args.output)?;
    println!(
        "converted {} depth frames into {}",
        frames.len(),
        args.output.display()
    );
    Ok(())
}

fn train_options(cfg: &RunConfig, epochs: Option<u32>) -> TrainOptions {
    TrainOptions {
        epochs: epochs.unwrap_or(cfg.epochs),
        batch_size: cfg.batch_size,
        base_lr: cfg.base_lr,
        lr_decay: cfg.lr_decay,
        lr_decay_period: cfg.lr_decay_period,
        workers: cfg.workers,
        seed: cfg.seed,
        augment: if cfg.augment.enabled {
            cfg.augment.clone()
        } else {
            AugmentConfig::disabled()
        },
    }
}

fn resolve(flag: &Option<PathBuf>, key: &Option<String>, what: &str) -> Result<PathBuf> {
    if let Some(p) = flag {
        return Ok(p.clone());
    }
    if let Some(p) = key {
        return Ok(PathBuf::from(p));
    }
    bail!("no {what} given on the command line or in the config")
}

fn cmd_train(cfg: &RunConfig, args: &TrainArgs) -> Result<()> {
    let data_dir = resolve(&args.data, &cfg.data_dir, "dataset directory")?;
    let ckpt = resolve(&args.out, &cfg.checkpoint, "checkpoint path")?;
    let (train_recs, test_recs) = load_dataset(&data_dir)?;
    for r in train_recs.iter().chain(&test_recs) {
        r.check_label(cfg.model.classes)?;
    }
    cfg.model.validate()?;
    println!(
        "training on {} sequences ({} parameters), evaluating on {}",
        train_recs.len(),
        count_parameters(&cfg.model),
        test_recs.len()
    );

    let mut log: Option<std::fs::File> = match (&args.metrics, &cfg.metrics_log) {
        (Some(p), _) => Some(fs::File::create(p)?),
        (None, Some(p)) => Some(fs::File::create(p)?),
        _ => None,
    };
    let opts = train_options(cfg, args.epochs);
    let (store, _history) = train(&train_recs, &test_recs, &cfg.model, &opts, |m| {
        let line = metrics_line(m.epoch, m.lr, m.train_loss, m.train_acc, m.eval_acc);
        println!("{line}");
        if let Some(f) = log.as_mut() {
            let _ = writeln!(f, "{line}");
        }
    })?;
    save_checkpoint(&store, &ckpt)?;
    println!("checkpoint written to {}", ckpt.display());
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<()> {
    let (train_recs, test_recs) = load_dataset(&args.data)?;
    let records = match args.split.as_str() {
        "train" => train_recs,
        "test" => test_recs,
        other => bail!("unknown split {other:?} (use train or test)"),
    };
    if records.is_empty() {
        bail!("split {:?} is empty", args.split);
    }
    let store = load_checkpoint(&args.checkpoint)?;
    let acc = evaluate(&records, &store, &cfg.model, cfg.workers)?;
    println!(
        "accuracy {:.4} over {} sequences ({} split)",
        acc,
        records.len(),
        args.split
    );
    Ok(())
}

fn cmd_bench(cfg: &RunConfig, args: &BenchArgs) -> Result<()> {
    let model = &cfg.model;
    model.validate()?;
    let store = match &args.checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => init_parameters(model, cfg.seed),
    };
    let snapshot = store.snapshot();

    // Deterministic random batch shaped like real input.
    let synth = SynthConfig {
        frames: model.frames,
        points_per_frame: model.embed.points_per_frame,
        train_per_class: args.batch.div_ceil(pcseq_core::data::synth::SYNTH_CLASSES),
        test_per_class: 0,
        seed: cfg.seed,
        ..SynthConfig::default()
    };
    let (records, _) = generate_dataset(&synth);
    let batch: Vec<PointCloudSequence> = records
        .into_iter()
        .take(args.batch)
        .map(|r| r.sequence)
        .collect();

    let bench_cfg = BenchConfig {
        worker_counts: args.workers_list.clone(),
        repetitions: args.reps,
        warmup: args.warmup,
        precision: args.precision,
    };
    let report = bench(&batch, &snapshot, model, &bench_cfg)?;
    print!("{report}");
    if !report.checksums_agree() {
        bail!("checksums diverged across worker counts");
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig, args: &GradcheckArgs) -> Result<()> {
    let model = ModelConfig::tiny();
    let params = init_parameters_dithered(&model, cfg.seed);
    let frames = tiny_frames(&model, cfg.seed);
    let report = grad_check(
        &params,
        |g: &mut Graph, p| {
            let logits =
                pcseq_core::model::forward_sequence(g, p, &model, &frames).expect("tiny forward");
            g.softmax_cross_entropy(logits, 1).expect("scalar loss")
        },
        args.tolerance,
    );
    println!("{report}");
    if !report.passed {
        bail!("gradient check failed");
    }
    Ok(())
}

fn tiny_frames(model: &ModelConfig, seed: u64) -> Vec<Vec<[f64; 3]>> {
    let synth = SynthConfig {
        frames: model.frames,
        points_per_frame: model.embed.points_per_frame,
        train_per_class: 1,
        test_per_class: 0,
        seed,
        ..SynthConfig::default()
    };
    let (records, _) = generate_dataset(&synth);
    records[0]
        .sequence
        .frames
        .iter()
        .map(|f| f.points.clone())
        .collect()
}

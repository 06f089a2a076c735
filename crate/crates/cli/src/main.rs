//! `f2f`: synthesize data, train the dual flows, generate, evaluate.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};

use flow2flow::checkpoint::Checkpoint;
use flow2flow::config::Config;
use flow2flow::data::io::ImageFormat;
use flow2flow::data::{
    load_dataset, load_directory, render_dataset, save_dataset, Dataset, Modality, RawBundle,
    Sample,
};
use flow2flow::generation::{
    expand_dataset, translate_samples, ExpansionPlan, ExpansionTarget, InterpolationSpec,
};
use flow2flow::model::{preprocess, Flow2Flow};
use flow2flow::reid::{self, FeatureSet, Split};
use flow2flow::trainer::{MetricsRow, TrainState, Trainer};
use flow2flow::verify::verify_model;
use flow2flow::{Error, ErrorClass, Result};

const METRICS_FILE: &str = "metrics.csv";
const CHECKPOINT_FILE: &str = "checkpoint.f2f";
const RAW_FILE: &str = "raw.json";

#[derive(Parser)]
#[command(
    name = "f2f",
    version,
    about = "Dual normalizing flows between visible and infrared images"
)]
struct Cli {
    /// JSON configuration; missing keys take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    overwrite: bool,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic two-modality dataset.
    Synth(SynthArgs),
    /// Train both flows and their adversaries.
    Train(TrainArgs),
    /// Expand a dataset with interpolated samples.
    Tse(TseArgs),
    /// Translate images into the other modality.
    Cmg(CmgArgs),
    /// Retrieval accuracy over expansion multiples and modes.
    Sweep(SweepArgs),
    /// Rank1 and mAP of infrared queries against a visible gallery.
    Eval(EvalArgs),
    /// Numerical self-checks of a model.
    Verify(VerifyArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Png,
    Ppm,
}

impl From<Format> for ImageFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Png => ImageFormat::Png,
            Format::Ppm => ImageFormat::Ppm,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Target {
    Visible,
    Infrared,
    Both,
}

impl From<Target> for ExpansionTarget {
    fn from(t: Target) -> Self {
        match t {
            Target::Visible => ExpansionTarget::Visible,
            Target::Infrared => ExpansionTarget::Infrared,
            Target::Both => ExpansionTarget::Both,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    V2r,
    R2v,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    ids: Option<u32>,
    /// Images per identity per modality.
    #[arg(long)]
    per: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long, value_enum, default_value = "png")]
    format: Format,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory for metrics and checkpoints.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    blocks: Option<usize>,
    /// Stop once this many iterations are complete.
    #[arg(long)]
    stop_after: Option<u64>,
    /// Continue from a checkpoint; its stored configuration is used.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also keep a numbered checkpoint every N iterations.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

#[derive(Args)]
struct TseArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    multiple: Option<f64>,
    #[arg(long, value_enum)]
    modality: Option<Target>,
    #[arg(long)]
    p: Option<u32>,
    #[arg(long)]
    q: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum, default_value = "png")]
    format: Format,
}

#[derive(Args)]
struct CmgArgs {
    /// Dataset directory, or a raw JSON bundle written by an earlier `cmg`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    direction: Direction,
    #[arg(long, value_enum, default_value = "png")]
    format: Format,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    /// CSV destination.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    /// Precomputed query and gallery features (JSON).
    #[arg(long, conflicts_with_all = ["data", "ckpt"])]
    features: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Model used to expand the training split when `--multiple` > 0.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    multiple: f64,
    #[arg(long, value_enum, default_value = "both")]
    modality: Target,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct VerifySource {
    /// Check a freshly initialized model.
    #[arg(long)]
    fresh: bool,
    #[arg(long)]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[command(flatten)]
    source: VerifySource,
    /// Number of probe images for the round trip.
    #[arg(long, default_value_t = 8)]
    probes: usize,
}

struct Ctx {
    config: Config,
    overwrite: bool,
    threads: usize,
}

fn exists_error(path: &Path) -> Error {
    Error::io(
        path,
        std::io::Error::new(
            std::io::ErrorKind::AlreadyExists,
            "output exists; pass --overwrite to replace it",
        ),
    )
}

impl Ctx {
    /// Refuse to write over an existing file or non-empty directory.
    fn guard(&self, path: &Path) -> Result<()> {
        if self.overwrite {
            return Ok(());
        }
        let occupied = if path.is_dir() {
            std::fs::read_dir(path)
                .map_err(|e| Error::io(path, e))?
                .next()
                .is_some()
        } else {
            path.exists()
        };
        if occupied {
            return Err(exists_error(path));
        }
        Ok(())
    }
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("F2F_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!(
                "F2F_THREADS must be a positive integer, got `{v}`"
            ))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
    }
}

fn read_dataset(dir: &Path) -> Result<Dataset> {
    if dir.join(flow2flow::data::manifest::MANIFEST_FILE).is_file() {
        return load_dataset(dir);
    }
    let loaded = load_directory(dir, None)?;
    if loaded.dataset.is_empty() {
        return Err(Error::Config(format!("{}: no images found", dir.display())));
    }
    Ok(loaded.dataset)
}

fn load_model(path: &Path) -> Result<(Checkpoint, Flow2Flow)> {
    let ck = Checkpoint::load(path)?;
    let model = ck.restore()?.model;
    Ok((ck, model))
}

fn check_shape(model: &Flow2Flow, dataset: &Dataset) -> Result<()> {
    let want = model.config.image_shape;
    if let Some(bad) = dataset.samples.iter().find(|s| s.image.shape() != want) {
        return Err(Error::Config(format!(
            "sample `{}` has shape {:?}, the model expects {want:?}",
            bad.name,
            bad.image.shape()
        )));
    }
    Ok(())
}

fn synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let mut spec = ctx.config.synth;
    spec.identities = a.ids.unwrap_or(spec.identities);
    spec.per_identity = a.per.unwrap_or(spec.per_identity);
    spec.seed = a.seed.unwrap_or(spec.seed);
    spec.height = a.height.unwrap_or(spec.height);
    spec.width = a.width.unwrap_or(spec.width);
    spec.validate()?;
    let out = a.out.unwrap_or_else(|| ctx.config.paths.data.clone());
    ctx.guard(&out)?;
    let dataset = render_dataset(&spec)?;
    save_dataset(&out, &dataset, a.format.into())?;
    println!("wrote {} images to {}", dataset.len(), out.display());
    Ok(())
}

/// Metric lines of an earlier run up to and including `iteration`.
fn metrics_prefix(path: &Path, iteration: u64) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut keep = Vec::new();
    for (k, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if k == 0 {
            if line != MetricsRow::HEADER {
                return Err(Error::Format(format!(
                    "{}: unexpected metrics header",
                    path.display()
                )));
            }
            continue;
        }
        let row = MetricsRow::parse_csv(&line)?;
        if row.iter <= iteration {
            keep.push(line);
        }
    }
    Ok(keep)
}

fn train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let data_dir = a.data.unwrap_or_else(|| ctx.config.paths.data.clone());
    let out = a.out.unwrap_or_else(|| ctx.config.paths.run.clone());
    let metrics_path = out.join(METRICS_FILE);
    let (config, state) = match &a.resume {
        Some(path) => {
            if a.seed.is_some() || a.epochs.is_some() || a.blocks.is_some() {
                return Err(Error::Config(
                    "--seed, --epochs and --blocks cannot change a resumed run".into(),
                ));
            }
            let ck = Checkpoint::load(path)?;
            let state = ck.restore()?;
            (ck.config, state)
        }
        None => {
            let mut config = ctx.config.train;
            config.seed = a.seed.unwrap_or(config.seed);
            config.epochs = a.epochs.unwrap_or(config.epochs);
            config.blocks = a.blocks.unwrap_or(config.blocks);
            config.validate()?;
            ctx.guard(&metrics_path)?;
            ctx.guard(&out.join(CHECKPOINT_FILE))?;
            let state = TrainState::new(&config)?;
            (config, state)
        }
    };
    let dataset = read_dataset(&data_dir)?;
    let kept = metrics_prefix(&metrics_path, state.iteration).unwrap_or_default();
    let mut trainer = Trainer::resume(config, &dataset, state)?;
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let file = File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut csv = BufWriter::new(file);
    let io = |e| Error::io(&metrics_path, e);
    writeln!(csv, "{}", MetricsRow::HEADER).map_err(io)?;
    for line in &kept {
        writeln!(csv, "{line}").map_err(io)?;
    }
    let stop = a.stop_after.unwrap_or(u64::MAX);
    let save = |trainer: &Trainer, path: &Path| {
        Checkpoint::capture(&trainer.config, &trainer.state)?.save(path)
    };
    let mut last = None;
    while !trainer.is_done() && trainer.state.iteration < stop {
        let rows = match trainer.run_iteration(&dataset) {
            Ok(rows) => rows,
            Err(e) => {
                csv.flush().map_err(io)?;
                return Err(e);
            }
        };
        for r in &rows {
            writeln!(csv, "{}", r.to_csv()).map_err(io)?;
        }
        last = Some(rows);
        let it = trainer.state.iteration;
        if a.checkpoint_every > 0 && it % a.checkpoint_every == 0 {
            save(&trainer, &out.join(format!("checkpoint-{it:06}.f2f")))?;
        }
        if it % 10 == 0 {
            info!("iteration {it}/{}", trainer.total_iterations());
        }
    }
    csv.flush().map_err(io)?;
    save(&trainer, &out.join(CHECKPOINT_FILE))?;
    print!(
        "trained {} of {} iterations",
        trainer.state.iteration,
        trainer.total_iterations()
    );
    if let Some([g, _, _]) = last {
        if let (Some(v), Some(r)) = (g.bpd_v, g.bpd_r) {
            print!("; bits/dim visible {v:.4} infrared {r:.4}");
        }
    }
    println!();
    Ok(())
}

fn tse(ctx: &Ctx, a: TseArgs) -> Result<()> {
    let t = ctx.config.tse;
    let spec = InterpolationSpec::new(
        a.p.unwrap_or(t.interpolation.p()),
        a.q.unwrap_or(t.interpolation.q()),
    )?;
    let plan = ExpansionPlan::new(
        a.multiple.unwrap_or(t.multiple),
        a.modality.map_or(t.target, Into::into),
    )?;
    ctx.guard(&a.out)?;
    let (_, model) = load_model(&a.ckpt)?;
    let dataset = read_dataset(&a.data.unwrap_or_else(|| ctx.config.paths.data.clone()))?;
    check_shape(&model, &dataset)?;
    let expanded = expand_dataset(&model, &dataset, plan, spec, a.seed.unwrap_or(t.seed))?;
    save_dataset(&a.out, &expanded.dataset, a.format.into())?;
    println!(
        "visible {} -> {}, infrared {} -> {}",
        dataset.count(Modality::Visible),
        expanded.dataset.count(Modality::Visible),
        dataset.count(Modality::Infrared),
        expanded.dataset.count(Modality::Infrared)
    );
    Ok(())
}

fn cmg(ctx: &Ctx, a: CmgArgs) -> Result<()> {
    ctx.guard(&a.out)?;
    let (_, model) = load_model(&a.ckpt)?;
    let dataset = if a.input.is_file() {
        let bytes = std::fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
        RawBundle::parse(&bytes)?.into_dataset()?
    } else {
        read_dataset(&a.input)?
    };
    let from = match a.direction {
        Direction::V2r => Modality::Visible,
        Direction::R2v => Modality::Infrared,
    };
    let sources: Vec<&Sample> = dataset
        .samples
        .iter()
        .filter(|s| s.modality == from)
        .collect();
    if sources.is_empty() {
        return Err(Error::Config(format!("input has no {from} images")));
    }
    let others = dataset.len() - sources.len();
    if others > 0 {
        warn!("ignoring {others} images that are not {from}");
    }
    check_shape(
        &model,
        &Dataset::new(sources.iter().map(|s| (*s).clone()).collect()),
    )?;
    let translated = translate_samples(&model, &sources)?;
    let saturated: usize = translated.iter().map(|t| t.saturated).sum();
    if saturated > 0 {
        warn!("{saturated} values were clamped in the inverse activation");
    }
    let quantized = Dataset::new(translated.iter().map(|t| t.sample.clone()).collect());
    save_dataset(&a.out, &quantized, a.format.into())?;
    let raw: Vec<Sample> = translated
        .iter()
        .map(|t| Sample {
            image: t.raw.clone(),
            ..t.sample.clone()
        })
        .collect();
    let raw_path = a.out.join(RAW_FILE);
    std::fs::write(&raw_path, RawBundle::from_samples(&raw).to_json())
        .map_err(|e| Error::io(&raw_path, e))?;
    println!(
        "translated {} images into {}",
        translated.len(),
        a.out.display()
    );
    Ok(())
}

fn sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    ctx.guard(&a.out)?;
    let (_, model) = load_model(&a.ckpt)?;
    let dataset = read_dataset(&a.data.unwrap_or_else(|| ctx.config.paths.data.clone()))?;
    check_shape(&model, &dataset)?;
    let config = ctx.config.eval.sweep(ctx.config.tse.interpolation);
    let result = reid::sweep(
        &model,
        &dataset,
        &config,
        a.seed.unwrap_or(ctx.config.eval.seed),
        ctx.threads,
    )?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(&a.out, result.to_csv()).map_err(|e| Error::io(&a.out, e))?;
    println!(
        "baseline rank1 {} map {}; {} rows written to {}",
        result.baseline.rank1,
        result.baseline.map,
        result.rows.len(),
        a.out.display()
    );
    Ok(())
}

fn eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let r = if let Some(path) = &a.features {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let set = FeatureSet::parse(&bytes)?;
        reid::evaluate(&set.query, &set.gallery)?
    } else {
        let dataset = read_dataset(
            &a.data
                .clone()
                .unwrap_or_else(|| ctx.config.paths.data.clone()),
        )?;
        let seed = a.seed.unwrap_or(ctx.config.eval.seed);
        let split = reid::split_dataset(&dataset, seed)?;
        let plan = ExpansionPlan::new(a.multiple, a.modality.into())?;
        let train = if plan.multiple > 0.0 {
            let ckpt = a
                .ckpt
                .as_ref()
                .ok_or_else(|| Error::Config("--multiple above zero needs --ckpt".into()))?;
            let (_, model) = load_model(ckpt)?;
            check_shape(&model, &dataset)?;
            expand_dataset(
                &model,
                &split.train,
                plan,
                ctx.config.tse.interpolation,
                seed.wrapping_add(2),
            )?
            .dataset
        } else {
            split.train.clone()
        };
        let split = Split { train, ..split };
        reid::baseline(&split, &ctx.config.eval.reid, seed.wrapping_add(1))?
    };
    println!(
        "rank1 {} map {} queries {} skipped {}",
        r.rank1, r.map, r.evaluated, r.skipped
    );
    Ok(())
}

fn verify(ctx: &Ctx, a: VerifyArgs) -> Result<()> {
    let model = match &a.source.ckpt {
        Some(path) => load_model(path)?.1,
        None => TrainState::new(&ctx.config.train)?.model,
    };
    if a.probes == 0 {
        return Err(Error::Config("--probes must be positive".into()));
    }
    let [_, h, w] = model.config.image_shape;
    let spec = flow2flow::data::SynthSpec {
        identities: (a.probes as u32).div_ceil(4).max(2),
        per_identity: 2,
        height: h,
        width: w,
        ..Default::default()
    };
    let images: Vec<_> = render_dataset(&spec)?
        .samples
        .into_iter()
        .take(a.probes)
        .map(|s| s.image)
        .collect();
    let probes = preprocess(&flow2flow::tensor::Tensor::stack(&images)?);
    let report = verify_model(&model, &probes)?;
    print!("{report}");
    if !report.passed() {
        return Err(Error::Numeric("verification failed".into()));
    }
    println!("all checks passed");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    let ctx = Ctx {
        config,
        overwrite: cli.overwrite,
        threads: threads_from_env()?,
    };
    match cli.command {
        Command::Synth(a) => synth(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Tse(a) => tse(&ctx, a),
        Command::Cmg(a) => cmg(&ctx, a),
        Command::Sweep(a) => sweep(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Verify(a) => verify(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Io => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}

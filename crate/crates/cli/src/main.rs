//! `cdse`: the command-line front end for the segmentation pipeline.
//!
//! One binary with subcommands for edge extraction, dataset synthesis,
//! training, evaluation, single-image prediction, ablation grids, and the
//! gradient-check suite. Every command finishes with one machine-parsable
//! summary line of `key=value` tokens ending in `OK` (exit 0) or `FAIL`
//! (exit 1 for runtime errors, 2 for usage or config errors, 3 for failed
//! verification).

mod config;

use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use cdse_core::data::{
    cache_edges, edge_tensor, generate_synthetic, gray_from_mask, image_tensor, load_checkpoint,
    load_dataset, EdgeGen, Manifest, SyntheticSpec,
};
use cdse_core::gradcheck;
use cdse_core::train::{ablate, evaluate, fusion_grid, operator_grid, train, TrainConfig};
use cdse_core::{Error, Result};

use config::AppConfig;

#[derive(Parser)]
#[command(
    name = "cdse",
    version,
    about = "Edge-guided lung CT segmentation: synthesize data, train, evaluate, predict"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an edge detector over one PGM image.
    Edges(EdgesArgs),
    /// Generate a synthetic PGM dataset with a manifest.
    Synth(SynthArgs),
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint against a manifest.
    Eval(EvalArgs),
    /// Predict a mask for one image.
    Predict(PredictArgs),
    /// Train every cell of an ablation grid and report a table.
    Ablate(AblateArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let label = cli.command.label();
    match run(cli.command) {
        Ok(summary) => println!("{summary} OK"),
        Err(e) => {
            eprintln!("error: {e}");
            println!("{label} FAIL");
            std::process::exit(exit_code(&e));
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Verification(_) => 3,
        _ => 1,
    }
}

impl Command {
    fn label(&self) -> &'static str {
        match self {
            Command::Edges(_) => "edges",
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Predict(_) => "predict",
            Command::Ablate(_) => "ablate",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

fn run(command: Command) -> Result<String> {
    match command {
        Command::Edges(args) => cmd_edges(args),
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Ablate(args) => cmd_ablate(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum OperatorArg {
    Canny,
    Sobel,
    Prewitt,
    Roberts,
}

#[derive(Args)]
struct EdgesArgs {
    /// Input PGM image.
    #[arg(long)]
    input: PathBuf,
    /// Edge detector to run.
    #[arg(long, value_enum, default_value_t = OperatorArg::Canny)]
    operator: OperatorArg,
    /// Gaussian sigma (canny only).
    #[arg(long)]
    sigma: Option<f64>,
    /// Gaussian kernel radius (canny only).
    #[arg(long)]
    radius: Option<usize>,
    /// Low hysteresis threshold as a fraction of the max magnitude (canny only).
    #[arg(long)]
    low: Option<f64>,
    /// High hysteresis threshold as a fraction of the max magnitude (canny only).
    #[arg(long)]
    high: Option<f64>,
    /// Threshold fraction of the max magnitude (sobel/prewitt/roberts only).
    #[arg(long)]
    tfrac: Option<f64>,
    /// Output PGM path for the edge map.
    #[arg(long)]
    out: PathBuf,
}

fn cmd_edges(args: EdgesArgs) -> Result<String> {
    use cdse_core::edge::{canny, threshold_detector, CannyParams, GaussianSpec, GradOperator, Thresholds};

    let img = cdse_core::data::read_pgm(&args.input)?;
    let mut summary = format!("edges input={}", args.input.display());
    let map = match args.operator {
        OperatorArg::Canny => {
            if args.tfrac.is_some() {
                return Err(Error::config("--tfrac applies to sobel/prewitt/roberts, not canny"));
            }
            let defaults = GaussianSpec::default();
            let params = CannyParams {
                gaussian: GaussianSpec {
                    sigma: args.sigma.unwrap_or(defaults.sigma),
                    radius: args.radius.unwrap_or(defaults.radius),
                },
                thresholds: Thresholds::Relative {
                    low_frac: args.low.unwrap_or(0.1),
                    high_frac: args.high.unwrap_or(0.2),
                },
            };
            params.validate()?;
            let (low, high) = match params.thresholds {
                Thresholds::Relative { low_frac, high_frac } => (low_frac, high_frac),
                Thresholds::Absolute { low, high } => (low, high),
            };
            write!(
                summary,
                " operator=canny sigma={} radius={} low={low} high={high}",
                params.gaussian.sigma, params.gaussian.radius
            )
            .unwrap();
            canny(&img, &params)?
        }
        other => {
            if args.sigma.is_some() || args.radius.is_some() || args.low.is_some() || args.high.is_some() {
                return Err(Error::config(
                    "--sigma/--radius/--low/--high apply to canny, not gradient operators",
                ));
            }
            let op = match other {
                OperatorArg::Sobel => GradOperator::Sobel,
                OperatorArg::Prewitt => GradOperator::Prewitt,
                OperatorArg::Roberts => GradOperator::Roberts,
                OperatorArg::Canny => unreachable!(),
            };
            let tfrac = args.tfrac.unwrap_or(0.2);
            write!(summary, " operator={} tfrac={tfrac}", op.name()).unwrap();
            threshold_detector(&img, op, tfrac)?
        }
    };
    cdse_core::data::write_pgm(&map.to_gray(), &args.out)?;
    write!(summary, " edge_pixels={} out={}", map.count(), args.out.display()).unwrap();
    Ok(summary)
}

#[derive(Args)]
struct SynthArgs {
    /// Directory for the generated images and manifest.
    #[arg(long)]
    out_dir: PathBuf,
    /// Number of image/mask pairs.
    #[arg(long, default_value_t = 8)]
    count: usize,
    /// Square image size in pixels (multiple of 16).
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_synth(args: SynthArgs) -> Result<String> {
    let spec = SyntheticSpec {
        count: args.count,
        size: args.size,
        seed: args.seed,
        ..SyntheticSpec::default()
    };
    let manifest = generate_synthetic(&spec, &args.out_dir)?;
    Ok(format!(
        "synth out_dir={} count={} size={} seed={} images={} manifest={}",
        args.out_dir.display(),
        args.count,
        args.size,
        args.seed,
        manifest.len(),
        args.out_dir.join("manifest.tsv").display()
    ))
}

#[derive(Args)]
struct DataSourceArgs {
    /// Manifest file listing images, masks, and optional edge maps.
    #[arg(long, conflicts_with = "data_dir")]
    manifest: Option<PathBuf>,
    /// Dataset directory containing manifest.tsv (as written by synth).
    #[arg(long)]
    data_dir: Option<PathBuf>,
}

impl DataSourceArgs {
    fn load(&self) -> Result<Manifest> {
        match (&self.manifest, &self.data_dir) {
            (Some(path), None) => Manifest::load(path),
            (None, Some(dir)) => Manifest::load(&dir.join("manifest.tsv")),
            _ => Err(Error::config("give exactly one of --manifest or --data-dir")),
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataSourceArgs,
    /// Config file (sections [model], [train], [canny], [data]).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Where the best checkpoint is written.
    #[arg(long, default_value = "cdse.ckpt")]
    out_ckpt: PathBuf,
    /// Optional JSONL training log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

/// Split a manifest, refresh the edge cache for both halves, and load them.
fn prepare_sets(
    manifest: &Manifest,
    app: &AppConfig,
    edge_gen: &EdgeGen,
) -> Result<(cdse_core::data::DataSet<f32>, cdse_core::data::DataSet<f32>)> {
    let (train_m, test_m) = manifest.split(app.data.train_fraction, app.data.split_seed)?;
    let (train_m, train_stats) = cache_edges(&train_m, edge_gen)?;
    let (test_m, test_stats) = cache_edges(&test_m, edge_gen)?;
    log::info!(
        "edge cache: train {}+{} hits+misses, test {}+{}",
        train_stats.hits,
        train_stats.misses,
        test_stats.hits,
        test_stats.misses
    );
    Ok((load_dataset(&train_m, edge_gen)?, load_dataset(&test_m, edge_gen)?))
}

fn cmd_train(args: TrainArgs) -> Result<String> {
    let app = AppConfig::load(args.config.as_deref())?;
    let mut cfg = app.resolved_train()?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    cfg.validate()?;

    let manifest = args.data.load()?;
    let (train_set, test_set) = prepare_sets(&manifest, &app, &cfg.edge_gen)?;
    let (train_images, test_images) = (train_set.len(), test_set.len());
    let outcome = train(&train_set, &test_set, &cfg)?;

    std::fs::write(&args.out_ckpt, &outcome.best_checkpoint)
        .map_err(|e| Error::io(args.out_ckpt.display().to_string(), e))?;
    if let Some(path) = &args.log {
        outcome.log.save(path)?;
    }
    Ok(format!(
        "train train_images={train_images} test_images={test_images} epochs={} best_epoch={} best_dsc={:.4} ckpt={}",
        cfg.epochs,
        outcome.best_epoch,
        outcome.best_dsc,
        args.out_ckpt.display()
    ))
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest of images and reference masks to score.
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    ckpt: PathBuf,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Config file; only the [canny] and [data] sections matter here.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_eval(args: EvalArgs) -> Result<String> {
    let app = AppConfig::load(args.config.as_deref())?;
    let edge_gen = app.data.edge_gen(app.canny.to_params())?;
    let manifest = Manifest::load(&args.manifest)?;
    let set = load_dataset::<f32>(&manifest, &edge_gen)?;
    let mut model = load_checkpoint(&args.ckpt)?;
    let report = evaluate(&mut model, &set)?;
    if let Some(path) = &args.report {
        let json = serde_json::to_string_pretty(&report).expect("reports serialize");
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let m = report.micro;
    Ok(format!(
        "eval images={} accuracy={:.4} precision={:.4} recall={:.4} dsc={:.4}",
        set.len(),
        m.accuracy,
        m.precision,
        m.recall,
        m.dsc
    ))
}

#[derive(Args)]
struct PredictArgs {
    /// Input PGM image.
    #[arg(long)]
    image: PathBuf,
    /// Checkpoint to predict with.
    #[arg(long)]
    ckpt: PathBuf,
    /// Output PGM mask path.
    #[arg(long)]
    out_mask: PathBuf,
    /// Probability cutoff; pixels strictly above it become mask.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Config file; only the [canny] and [data] sections matter here.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_predict(args: PredictArgs) -> Result<String> {
    if !(0.0..=1.0).contains(&args.threshold) {
        return Err(Error::config(format!("threshold {} must lie in [0, 1]", args.threshold)));
    }
    let app = AppConfig::load(args.config.as_deref())?;
    let edge_gen = app.data.edge_gen(app.canny.to_params())?;
    let img = cdse_core::data::read_pgm(&args.image)?;
    let edge = edge_gen.generate(&img)?;
    let mut model = load_checkpoint(&args.ckpt)?;
    let mask = model.predict(
        &image_tensor::<f32>(&img),
        Some(&edge_tensor(&edge)),
        args.threshold,
    )?;
    let positive = mask.data.iter().filter(|v| **v > 0.5).count();
    cdse_core::data::write_pgm(&gray_from_mask(&mask)?, &args.out_mask)?;
    Ok(format!(
        "predict image={} threshold={} positive_pixels={positive} out={}",
        args.image.display(),
        args.threshold,
        args.out_mask.display()
    ))
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, ValueEnum)]
enum AxisArg {
    /// Compare the three channel-fusion variants.
    Fusion,
    /// Compare the four edge detectors.
    Operator,
}

#[derive(Args)]
struct AblateArgs {
    /// Which grid to run.
    #[arg(long, value_enum)]
    axis: AxisArg,
    #[command(flatten)]
    data: DataSourceArgs,
    /// Config file supplying the base settings for every cell.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Optional JSON report path.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured epoch count.
    #[arg(long)]
    epochs: Option<usize>,
}

fn cmd_ablate(args: AblateArgs) -> Result<String> {
    let app = AppConfig::load(args.config.as_deref())?;
    let mut base: TrainConfig = app.resolved_train()?;
    if let Some(seed) = args.seed {
        base.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        base.epochs = epochs;
    }
    base.validate()?;

    let cells = match args.axis {
        AxisArg::Fusion => fusion_grid(&base),
        AxisArg::Operator => operator_grid(&base),
    };
    let manifest = args.data.load()?;
    let (train_m, test_m) = manifest.split(app.data.train_fraction, app.data.split_seed)?;
    let table = ablate(&cells, &train_m, &test_m)?;

    print!("{}", table.to_text());
    if let Some(path) = &args.report {
        std::fs::write(path, table.to_json())
            .map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    let axis = match args.axis {
        AxisArg::Fusion => "fusion",
        AxisArg::Operator => "operator",
    };
    Ok(format!("ablate axis={axis} cells={} failed={failed}", table.rows.len()))
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the sampled inputs and parameters.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<String> {
    let reports = gradcheck::run_all(args.seed)?;
    let mut worst = 0.0f64;
    let mut failures = 0;
    for report in &reports {
        println!("{report}");
        worst = worst.max(report.max_rel_err);
        if !report.passed() {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(Error::Verification(format!(
            "{failures} of {} gradient checks failed",
            reports.len()
        )));
    }
    Ok(format!("gradcheck seed={} checks={} max_rel_err={:.3e}", args.seed, reports.len(), worst))
}

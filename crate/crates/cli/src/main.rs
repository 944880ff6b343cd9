//! Command-line workflow for the deraining pipeline: synthesize a toy
//! dataset, train (with ablation presets), derain images, evaluate, run the
//! whole ablation table, and time inference.
//!
//! Configuration resolves in three layers: built-in defaults, then a config
//! file (`--config`, falling back to the `DERAIN_CONFIG` environment
//! variable), then `--set key=value` overrides. Every run prints its fully
//! resolved configuration and writes it to `<out_dir>/resolved.cfg`.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use derain_core::config::{apply_assignment, load_config, resolved_lines, RunConfig};
use derain_core::eval::{
    benchmark_inference, compare_runs, evaluate_dataset, write_report, EvalError, EvalRun,
};
use derain_core::image::{load_image, save_image, MIN_SIDE};
use derain_core::model::checkpoint::{load_bundle, load_checkpoint};
use derain_core::synth::{make_toy_dataset, FogParams, StreakParams};
use derain_core::train::{resume, train, AblationPreset, TrainOutcome};

#[derive(Parser)]
#[command(
    name = "derain",
    version,
    about = "Depth-guided single-image deraining workflow",
    max_term_width = 100
)]
struct Cli {
    /// Config file path; defaults to $DERAIN_CONFIG when set.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one resolved config key, e.g. --set lr=1e-3. Repeatable;
    /// applies after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Log more (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a paired (rainy, clear, depth) toy dataset.
    Synthesize(SynthesizeArgs),
    /// Train a model per the resolved configuration.
    Train(TrainArgs),
    /// Derain one image or every PNG in a directory.
    Infer(InferArgs),
    /// Score a checkpoint over a dataset and write the report.
    Evaluate(EvaluateArgs),
    /// Train several presets on one dataset and write a comparison table.
    Ablate(AblateArgs),
    /// Time the forward pass on a fixed random input.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SynthesizeArgs {
    /// Number of image triples.
    #[arg(long)]
    n: usize,
    /// Square image side in pixels.
    #[arg(long)]
    size: usize,
    /// Generation seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Dataset directory to create.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Streak density multiplier.
    #[arg(long)]
    density: Option<f32>,
    /// Streak length in pixels.
    #[arg(long)]
    length: Option<f32>,
    /// Streak angle in degrees from vertical.
    #[arg(long)]
    angle: Option<f32>,
    /// Streak brightness.
    #[arg(long)]
    intensity: Option<f32>,
    /// Fog attenuation coefficient.
    #[arg(long)]
    beta: Option<f32>,
    /// Fog brightness ceiling in [0, 1].
    #[arg(long)]
    f0: Option<f32>,
}

#[derive(Args)]
struct TrainArgs {
    /// Ablation preset (Full, A, B, C, D, E); shorthand for --set preset=X.
    #[arg(long)]
    preset: Option<String>,
    /// Resume a run from this checkpoint instead of starting fresh. The
    /// checkpoint's own embedded configuration governs the continuation.
    #[arg(long, value_name = "CHECKPOINT")]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    /// Trained checkpoint to run.
    #[arg(long, value_name = "CHECKPOINT")]
    checkpoint: PathBuf,
    /// One PNG file or a directory of PNGs.
    #[arg(long, value_name = "PATH")]
    input: PathBuf,
    /// Output directory; file names are preserved.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Trained checkpoint to score.
    #[arg(long, value_name = "CHECKPOINT")]
    checkpoint: PathBuf,
    /// Dataset root with manifest.csv.
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Report CSV path; a full-precision .json sidecar lands next to it.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Comma-separated presets to train and compare.
    #[arg(long, default_value = "Full,A,B,C,D,E")]
    presets: String,
    /// Run directory; each preset trains under <out>/<preset>.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Trained checkpoint to time.
    #[arg(long, value_name = "CHECKPOINT")]
    checkpoint: PathBuf,
    /// Input side length; must match the checkpoint resolution. Defaults to
    /// the checkpoint's own training resolution.
    #[arg(long)]
    size: Option<usize>,
    /// Untimed warmup passes.
    #[arg(long, default_value_t = 3)]
    warmup: usize,
    /// Timed passes (at least 10).
    #[arg(long, default_value_t = 10)]
    iters: usize,
}

enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn usage(e: impl std::fmt::Display) -> Self {
        Failure::Usage(e.to_string())
    }

    fn runtime(e: impl std::fmt::Display) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<derain_core::config::ConfigError> for Failure {
    fn from(e: derain_core::config::ConfigError) -> Self {
        Failure::Usage(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };

    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("usage error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = resolve_config(&cli)?;
    match cli.command {
        Command::Synthesize(args) => {
            echo_config(&cfg);
            cmd_synthesize(args)
        }
        Command::Train(args) => cmd_train(args, cfg),
        Command::Infer(args) => {
            echo_config(&cfg);
            cmd_infer(args)
        }
        Command::Evaluate(args) => {
            echo_config(&cfg);
            cmd_evaluate(args)
        }
        Command::Ablate(args) => cmd_ablate(args, cfg),
        Command::Bench(args) => {
            echo_config(&cfg);
            cmd_bench(args)
        }
    }
}

/// Defaults, then the config file (flag or environment), then --set pairs.
fn resolve_config(cli: &Cli) -> Result<RunConfig, Failure> {
    let file = cli
        .config
        .clone()
        .or_else(|| std::env::var_os("DERAIN_CONFIG").map(PathBuf::from));
    let mut cfg = match file {
        Some(path) => load_config(&path)?,
        None => RunConfig::default(),
    };
    for pair in &cli.overrides {
        apply_assignment(&mut cfg, pair, 0)
            .map_err(|e| Failure::Usage(format!("--set {pair}: {e}")))?;
    }
    Ok(cfg)
}

/// Every run states the configuration it resolved to.
fn echo_config(cfg: &RunConfig) {
    print!("resolved configuration:\n{}", resolved_lines(cfg));
}

/// Training runs also record the resolved config in their run directory.
fn persist_config(cfg: &RunConfig) -> Result<(), Failure> {
    std::fs::create_dir_all(&cfg.train.out_dir).map_err(Failure::runtime)?;
    std::fs::write(cfg.train.out_dir.join("resolved.cfg"), resolved_lines(cfg))
        .map_err(Failure::runtime)?;
    Ok(())
}

fn cmd_synthesize(args: SynthesizeArgs) -> Result<(), Failure> {
    if args.n == 0 {
        return Err(Failure::Usage("--n must be at least 1".into()));
    }
    if args.size < MIN_SIDE {
        return Err(Failure::Usage(format!(
            "--size {} is below the {MIN_SIDE}-pixel minimum",
            args.size
        )));
    }
    let mut streak = StreakParams::toy_default();
    if let Some(v) = args.density {
        streak.density = v;
    }
    if let Some(v) = args.length {
        streak.length = v;
    }
    if let Some(v) = args.angle {
        streak.angle_deg = v;
    }
    if let Some(v) = args.intensity {
        streak.intensity = v;
    }
    let mut fog = FogParams::toy_default();
    if let Some(v) = args.beta {
        fog.beta = v;
    }
    if let Some(v) = args.f0 {
        fog.f0 = v;
    }

    let entries =
        make_toy_dataset(args.n, args.size, args.size, &streak, &fog, args.seed, &args.out)
            .map_err(Failure::runtime)?;
    println!("wrote {} triples under {}", entries.len(), args.out.display());
    Ok(())
}

fn cmd_train(args: TrainArgs, mut cfg: RunConfig) -> Result<(), Failure> {
    if let Some(path) = args.resume {
        let state = load_checkpoint(&path).map_err(Failure::runtime)?;
        echo_config(&RunConfig {
            train: state.train_cfg.clone(),
            ablation: state.bundle.ablation,
            weights: state.weights.clone(),
        });
        drop(state);
        let outcome = resume(&path).map_err(Failure::runtime)?;
        report_training(&outcome);
        return Ok(());
    }
    if let Some(name) = &args.preset {
        let preset: AblationPreset = name.parse().map_err(Failure::usage)?;
        cfg.ablation = derain_core::train::apply_ablation(preset);
    }
    cfg.train.validate().map_err(Failure::usage)?;
    echo_config(&cfg);
    persist_config(&cfg)?;
    let outcome = train(&cfg.train, cfg.ablation, &cfg.weights).map_err(Failure::runtime)?;
    report_training(&outcome);
    Ok(())
}

fn report_training(outcome: &TrainOutcome) {
    println!(
        "trained {} steps, final loss {:.6}; checkpoint {}  log {}",
        outcome.steps,
        outcome.final_loss,
        outcome.final_checkpoint.display(),
        outcome.log_path.display()
    );
}

fn cmd_infer(args: InferArgs) -> Result<(), Failure> {
    let bundle = load_bundle(&args.checkpoint).map_err(Failure::runtime)?;
    let inputs: Vec<PathBuf> = if args.input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&args.input)
            .map_err(Failure::runtime)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Failure::Runtime(format!("no PNGs under {}", args.input.display())));
        }
        files
    } else {
        vec![args.input.clone()]
    };

    std::fs::create_dir_all(&args.out).map_err(Failure::runtime)?;
    for path in &inputs {
        let rainy = load_image(path).map_err(Failure::runtime)?;
        let derained = bundle.infer(&rainy).map_err(Failure::runtime)?;
        let name = path.file_name().expect("inputs are files");
        save_image(&derained, args.out.join(name)).map_err(Failure::runtime)?;
    }
    println!("derained {} image(s) into {}", inputs.len(), args.out.display());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<(), Failure> {
    let run = evaluate_dataset(&args.checkpoint, &args.dataset).map_err(Failure::runtime)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(Failure::runtime)?;
    }
    write_report(&run, &args.out).map_err(Failure::runtime)?;
    let r = &run.report;
    println!(
        "{} images  psnr ave {:.5} max {:.5} min {:.5}  ssim ave {:.5} max {:.5} min {:.5}",
        r.count, r.psnr.ave, r.psnr.max, r.psnr.min, r.ssim.ave, r.ssim.max, r.ssim.min
    );
    println!("report {}", args.out.display());
    Ok(())
}

fn cmd_ablate(args: AblateArgs, base: RunConfig) -> Result<(), Failure> {
    let presets: Vec<AblationPreset> = args
        .presets
        .split(',')
        .map(|p| p.trim().parse::<AblationPreset>().map_err(Failure::usage))
        .collect::<Result<_, _>>()?;
    if presets.is_empty() {
        return Err(Failure::Usage("--presets needs at least one preset".into()));
    }
    base.train.validate().map_err(Failure::usage)?;

    let mut runs: Vec<EvalRun> = Vec::with_capacity(presets.len());
    let mut labels = Vec::with_capacity(presets.len());
    for preset in &presets {
        let mut cfg = base.clone();
        cfg.ablation = derain_core::train::apply_ablation(*preset);
        cfg.train.out_dir = args.out.join(preset.name());
        echo_config(&cfg);
        persist_config(&cfg)?;
        let outcome = train(&cfg.train, cfg.ablation, &cfg.weights).map_err(Failure::runtime)?;
        println!("[{}] final loss {:.6}", preset.name(), outcome.final_loss);
        let run = evaluate_dataset(&outcome.final_checkpoint, &cfg.train.dataset_root)
            .map_err(Failure::runtime)?;
        write_report(&run, &cfg.train.out_dir.join("report.csv")).map_err(Failure::runtime)?;
        runs.push(run);
        labels.push(preset.name().to_string());
    }

    let table = compare_runs(&runs, &labels).map_err(Failure::runtime)?;
    std::fs::write(args.out.join("comparison.csv"), table.to_csv()).map_err(Failure::runtime)?;
    let text = table.to_text();
    std::fs::write(args.out.join("comparison.txt"), &text).map_err(Failure::runtime)?;
    print!("{text}");
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let size = match args.size {
        Some(s) => s,
        None => {
            let bundle = load_bundle(&args.checkpoint).map_err(Failure::runtime)?;
            bundle.derain_cfg.input_h
        }
    };
    let report = benchmark_inference(&args.checkpoint, size, args.warmup, args.iters)
        .map_err(|e| match e {
            EvalError::TooFewIters(_) | EvalError::BadBenchSize { .. } => Failure::usage(e),
            other => Failure::runtime(other),
        })?;
    print!("{}", report.to_text());
    Ok(())
}

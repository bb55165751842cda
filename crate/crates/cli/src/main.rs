use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use idat_core::analysis::{
    build_reports, compare_reports, WeightReport, DEFAULT_BINS, DEFAULT_TAU,
};
use idat_core::data::{encode, generate_synthetic, load_dataset, Split, SyntheticSpec};
use idat_core::distill::evaluate;
use idat_core::experiment::{run_experiment, ExperimentConfig};
use idat_core::model::{checkpoint, Model};
use idat_core::presets::preset;
use idat_core::sweep::{run_sweep, sweep_cells, SWEEP_SUMMARY_FILE};
use idat_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "idat",
    version,
    about = "Adapter tuning with a small jointly trained teacher"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pretrain backbones, inject adapters and train student (and teacher).
    Train(TrainArgs),
    /// Top-1 accuracy of a checkpoint on an IDDS dataset.
    Eval(EvalArgs),
    /// Adapter weight histograms and dispersion statistics.
    Analyze(AnalyzeArgs),
    /// Write a synthetic IDDS dataset.
    GenData(GenDataArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Experiment config (TOML).
    #[arg(long, conflicts_with = "preset", required_unless_present = "preset")]
    config: Option<PathBuf>,
    /// Built-in config, e.g. idat-P-kl or baseline-par.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run a named sweep (kl-grid) around the config.
    #[arg(long)]
    sweep: Option<String>,
    /// Parallel runs for a sweep.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    jobs: u64,
}

#[derive(Args, Debug)]
struct EvalArgs {
    checkpoint: PathBuf,
    dataset: PathBuf,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    batch_size: u64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(required = true)]
    checkpoints: Vec<PathBuf>,
    #[arg(long, default_value = "analysis")]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_BINS as u64, value_parser = clap::value_parser!(u64).range(1..))]
    bins: u64,
    /// Near-zero threshold.
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 100)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 32)]
    image_size: usize,
    #[arg(long, default_value_t = 3)]
    channels: usize,
    #[arg(long, default_value_t = 0.05)]
    noise: f32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value = "train")]
    split: SplitArg,
}

fn init_logging() -> Result<()> {
    let level = match std::env::var("IDAT_LOG").as_deref() {
        Err(_) | Ok("info") => log::LevelFilter::Info,
        Ok("quiet") => log::LevelFilter::Off,
        Ok("debug") => log::LevelFilter::Debug,
        Ok(other) => {
            return Err(Error::Usage(format!(
                "IDAT_LOG must be quiet, info or debug, got {other:?}"
            )));
        }
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(name)) => preset(name)?,
        (None, None) => {
            return Err(Error::Usage(
                "one of --config or --preset is required".into(),
            ))
        }
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(out) = args.out {
        cfg.out_dir = out;
    }
    cfg.validate()?;
    if let Some(name) = &args.sweep {
        let cells = sweep_cells(name, &cfg)?;
        let summary_path = cfg.out_dir.join(SWEEP_SUMMARY_FILE);
        run_sweep(&cells, args.jobs as usize, &summary_path)?;
        println!("{}", summary_path.display());
        return Ok(());
    }
    let outcome = run_experiment(&cfg)?;
    let json = serde_json::to_string_pretty(&outcome.summary)
        .map_err(|e| Error::Internal(e.to_string()))?;
    println!("{json}");
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&args.checkpoint)?;
    let data = load_dataset(&args.dataset, Split::Test, Some(model.config().image_size))?;
    let acc = evaluate(&model, &data, args.batch_size as usize)?;
    println!("{acc}");
    Ok(())
}

/// File stems, prefixed with the parent directory's name when stems repeat.
fn labels(paths: &[PathBuf]) -> Vec<String> {
    let stem = |p: &Path| {
        p.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "model".into())
    };
    let stems: Vec<String> = paths.iter().map(|p| stem(p)).collect();
    paths
        .iter()
        .zip(&stems)
        .enumerate()
        .map(|(i, (p, s))| {
            if stems.iter().filter(|t| *t == s).count() == 1 {
                return s.clone();
            }
            match p.parent().and_then(|d| d.file_name()) {
                Some(dir) => format!("{}_{s}", dir.to_string_lossy()),
                None => format!("{s}_{i}"),
            }
        })
        .collect()
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    let models: Vec<Model> = args
        .checkpoints
        .iter()
        .map(checkpoint::load)
        .collect::<Result<_>>()?;
    for (m, p) in models.iter().zip(&args.checkpoints) {
        if m.adapter_spec().is_none() {
            return Err(Error::Usage(format!(
                "{}: no adapter parameters found",
                p.display()
            )));
        }
    }
    let labels = labels(&args.checkpoints);
    let named: Vec<(&str, &Model)> = labels.iter().map(String::as_str).zip(&models).collect();
    let reports: Vec<WeightReport> = build_reports(&named, args.bins as usize, args.tau)?;
    for r in &reports {
        let (csv, stats) = r.export(&args.out)?;
        log::info!("wrote {} and {}", csv.display(), stats.display());
    }
    for i in 0..reports.len() {
        for j in i + 1..reports.len() {
            let cmp = compare_reports(&reports[i], &reports[j])?;
            let path = args.out.join(format!(
                "{}__vs__{}__comparison.csv",
                cmp.label_a, cmp.label_b
            ));
            std::fs::write(&path, cmp.csv()).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            println!("# {} vs {}", cmp.label_a, cmp.label_b);
            print!("{}", cmp.csv());
        }
    }
    Ok(())
}

fn cmd_gen_data(args: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_classes: args.classes,
        samples_per_class: args.samples_per_class,
        image_size: args.image_size,
        channels: args.channels,
        noise: args.noise,
        seed: args.seed,
    };
    spec.validate("gen-data")?;
    let split = match args.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let ds = generate_synthetic(&spec, split)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    std::fs::write(&args.out, encode(&ds)).map_err(|e| Error::Io {
        path: args.out.clone(),
        source: e,
    })?;
    println!("{}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::GenData(a) => cmd_gen_data(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = init_logging().and_then(|()| run(cli));
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 2 } else { 3 })
        }
    }
}

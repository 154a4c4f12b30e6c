use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::{error, info, warn};

use mcfilter::cfe::CfeConfig;
use mcfilter::debugger::DebugConfig;
use mcfilter::detector::{DetectionConfig, LocalFilters, Metric, ThresholdSource};
use mcfilter::model::Cnn;
use mcfilter::pipeline::{
    self, AccumulateConfig, BootstrapConfig, DebugCommandConfig, DetectConfig, ExtractConfig,
    PipelineConfig, ReportConfig, RunManifest,
};
use mcfilter::{Error, Scalar};

#[derive(Parser, Debug)]
#[command(
    name = "mcfilter",
    version,
    about = "Audit and debug CNN classifiers through their minimum-correct filters"
)]
struct Cli {
    /// Floating-point precision used for every computation.
    #[arg(long, value_enum, default_value_t = Precision::F64, global = true)]
    precision: Precision,

    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the desk shapes dataset and train the base classifier.
    Bootstrap(BootstrapArgs),
    /// Predict a labeled image directory and extract MC filter sets.
    Extract(ExtractArgs),
    /// Accumulate per-class filter profiles from an extraction.
    Accumulate(AccumulateArgs),
    /// Calibrate per-class thresholds and flag likely misclassifications.
    Detect(DetectArgs),
    /// Retrain the classifier with the filter-alignment loss.
    Debug(DebugArgs),
    /// Class recall changes and saliency overlays for two classifiers.
    Report(ReportArgs),
    /// Run every stage end to end into one directory.
    Pipeline(PipelineArgs),
    /// Re-run a pipeline manifest and compare artifact checksums.
    Replay(ReplayArgs),
}

#[derive(Args, Debug)]
struct BootstrapArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with bootstrap settings; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
}

#[derive(Args, Debug)]
struct ExtractArgs {
    /// Class-per-subdirectory image directory.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Confidence gate τ; only recorded as a skip reason here.
    #[arg(long, default_value_t = 0.90)]
    tau: f64,
    /// Activation threshold t of the stored binary maps.
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    /// L1 weight of the relaxed mask search.
    #[arg(long, default_value_t = 2.0)]
    sparsity: f64,
    #[arg(long, default_value_t = 300)]
    max_iterations: usize,
    /// Only extract MC sets for confident, correct predictions.
    #[arg(long)]
    qualifying_only: bool,
}

#[derive(Args, Debug)]
struct AccumulateArgs {
    /// Directory written by `extract` on training data.
    #[arg(long)]
    extract: PathBuf,
    /// Classifier, read for its label count.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.90)]
    tau: f64,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum ThresholdArg {
    PerClass,
    Global,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum LocalArg {
    McFilters,
    ActivationMap,
}

#[derive(Args, Debug)]
struct DetectArgs {
    /// `extract` output for the calibration (training) images.
    #[arg(long)]
    train: PathBuf,
    /// `extract` output for the images to audit.
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// avg_recall, avg_f1 or recall_floor.
    #[arg(long, default_value = "avg_recall")]
    metric: String,
    /// Emit the three standard rows instead of a single metric.
    #[arg(long)]
    table: bool,
    /// Trust predictions more confident than this; 0 disables skipping.
    #[arg(long, default_value_t = 0.90)]
    skip: f64,
    #[arg(long, default_value_t = 0.15)]
    freq: f64,
    #[arg(long, default_value_t = 0.3)]
    recall_floor: f64,
    #[arg(long, value_enum, default_value_t = ThresholdArg::PerClass)]
    threshold: ThresholdArg,
    #[arg(long, value_enum, default_value_t = LocalArg::McFilters)]
    local: LocalArg,
    #[arg(long, default_value = "base")]
    model_name: String,
}

#[derive(Args, Debug)]
struct DebugArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    profiles: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// TOML file with debug settings; flags given explicitly override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sweep the standard λ grid and a plain fine-tuning baseline.
    #[arg(long)]
    grid: bool,
    #[arg(long, default_value_t = 0.001)]
    lambda1: f64,
    #[arg(long, default_value_t = 0.00005)]
    lambda2: f64,
    #[arg(long, default_value_t = 0.90)]
    tau: f64,
    #[arg(long, default_value_t = 0.5)]
    t: f64,
    #[arg(long, default_value_t = 0.15)]
    freq: f64,
    #[arg(long, default_value_t = 6)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 5e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    debugged: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    top_k: usize,
    #[arg(long, default_value_t = 6)]
    overlays: usize,
}

#[derive(Args, Debug)]
struct PipelineArgs {
    #[arg(long)]
    out: PathBuf,
    /// TOML file with a full pipeline config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single debug run with the default λ pair instead of the grid.
    #[arg(long)]
    no_grid: bool,
}

#[derive(Args, Debug)]
struct ReplayArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn explicit(matches: &ArgMatches, id: &str) -> bool {
    matches.value_source(id) == Some(ValueSource::CommandLine)
}

fn debug_config(args: &DebugArgs, m: &ArgMatches) -> mcfilter::Result<DebugConfig> {
    let mut cfg = match &args.config {
        Some(path) => DebugConfig::from_toml_file(path)?,
        None => DebugConfig::default(),
    };
    let from_file = args.config.is_some();
    let take = |id: &str| !from_file || explicit(m, id);
    if take("lambda1") {
        cfg.lambda1 = args.lambda1;
    }
    if take("lambda2") {
        cfg.lambda2 = args.lambda2;
    }
    if take("tau") {
        cfg.tau = args.tau;
    }
    if take("t") {
        cfg.t = args.t;
    }
    if take("freq") {
        cfg.freq_threshold = args.freq;
    }
    if take("epochs") {
        cfg.epochs = args.epochs;
    }
    if take("batch_size") {
        cfg.batch_size = args.batch_size;
    }
    if take("learning_rate") {
        cfg.learning_rate = args.learning_rate;
    }
    if take("seed") {
        cfg.seed = args.seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn detection_rows(args: &DetectArgs) -> mcfilter::Result<Vec<DetectionConfig>> {
    if args.table {
        return Ok(DetectionConfig::table_presets());
    }
    let metric: Metric = args.metric.parse()?;
    let row = DetectionConfig {
        skip_threshold: args.skip,
        freq_threshold: args.freq,
        metric,
        recall_floor_value: args.recall_floor,
        threshold_source: match args.threshold {
            ThresholdArg::PerClass => ThresholdSource::PerClass,
            ThresholdArg::Global => ThresholdSource::Global,
        },
        local_filters: match args.local {
            LocalArg::McFilters => LocalFilters::McFilters,
            LocalArg::ActivationMap => LocalFilters::ActivationMap,
        },
    };
    row.validate()?;
    Ok(vec![row])
}

fn announce(manifest: &RunManifest, out: &Path) {
    info!(
        "{}: {} artifacts written to {}",
        manifest.command,
        manifest.artifacts.len(),
        out.display()
    );
}

fn run<T: Scalar>(command: &Command, matches: &ArgMatches) -> anyhow::Result<bool> {
    let sub = matches
        .subcommand()
        .map(|(_, m)| m)
        .expect("subcommand is required");
    match command {
        Command::Bootstrap(a) => {
            let mut cfg: BootstrapConfig = match &a.config {
                Some(p) => pipeline::load_toml_config(p)?,
                None => BootstrapConfig::default(),
            };
            if let Some(v) = a.epochs {
                cfg.epochs = v;
            }
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            if let Some(v) = a.train_per_class {
                cfg.shapes.train_per_class = v;
            }
            if let Some(v) = a.test_per_class {
                cfg.shapes.test_per_class = v;
            }
            announce(&pipeline::bootstrap::<T>(&a.out, &cfg)?, &a.out);
        }
        Command::Extract(a) => {
            let cfg = ExtractConfig {
                cfe: CfeConfig {
                    sparsity_weight: a.sparsity,
                    max_iterations: a.max_iterations,
                    ..CfeConfig::default()
                },
                t: a.t,
                tau: a.tau,
                qualifying_only: a.qualifying_only,
            };
            announce(
                &pipeline::cmd_extract::<T>(&a.data, &a.model, &a.out, &cfg)?,
                &a.out,
            );
        }
        Command::Accumulate(a) => {
            let label_count = Cnn::<T>::load(&a.model)?.label_count();
            let cfg = AccumulateConfig {
                tau: a.tau,
                label_count,
            };
            announce(
                &pipeline::cmd_accumulate::<T>(&a.extract, &a.out, &cfg)?,
                &a.out,
            );
        }
        Command::Detect(a) => {
            let cfg = DetectConfig {
                model_name: a.model_name.clone(),
                rows: detection_rows(a)?,
            };
            let manifest = pipeline::cmd_detect::<T>(&a.train, &a.test, &a.profiles, &a.out, &cfg)?;
            let table =
                std::fs::read_to_string(a.out.join("table1.csv")).context("reading table1.csv")?;
            print!("{table}");
            announce(&manifest, &a.out);
        }
        Command::Debug(a) => {
            let cfg = DebugCommandConfig {
                debug: debug_config(a, sub)?,
                grid: a.grid,
            };
            let manifest =
                pipeline::cmd_debug::<T>(&a.model, &a.train, &a.test, &a.profiles, &a.out, &cfg)?;
            if a.grid {
                print!(
                    "{}",
                    std::fs::read_to_string(a.out.join("table2.csv"))
                        .context("reading table2.csv")?
                );
            }
            announce(&manifest, &a.out);
        }
        Command::Report(a) => {
            let cfg = ReportConfig {
                top_k: a.top_k,
                overlays: a.overlays,
                ..ReportConfig::default()
            };
            let manifest = pipeline::cmd_report::<T>(&a.base, &a.debugged, &a.test, &a.out, &cfg)?;
            print!(
                "{}",
                std::fs::read_to_string(a.out.join("table3.csv")).context("reading table3.csv")?
            );
            announce(&manifest, &a.out);
        }
        Command::Pipeline(a) => {
            let mut cfg: PipelineConfig = match &a.config {
                Some(p) => pipeline::load_toml_config(p)?,
                None => PipelineConfig::default(),
            };
            if a.no_grid {
                cfg.grid = false;
            }
            announce(&pipeline::run_pipeline::<T>(&a.out, &cfg)?, &a.out);
        }
        Command::Replay(a) => {
            let outcome = pipeline::replay_pipeline::<T>(&a.manifest, &a.out)?;
            if outcome.mismatched.is_empty() {
                println!(
                    "replay matched {} artifacts",
                    outcome.replayed.artifacts.len()
                );
            } else {
                for path in &outcome.mismatched {
                    warn!("checksum mismatch: {path}");
                }
                println!(
                    "replay mismatched {} of {} artifacts",
                    outcome.mismatched.len(),
                    outcome.original.artifacts.len()
                );
                return Ok(false);
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let result = match cli.precision {
        Precision::F32 => run::<f32>(&cli.command, &matches),
        Precision::F64 => run::<f64>(&cli.command, &matches),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            error!("{e:#}");
            let usage = e
                .downcast_ref::<Error>()
                .is_some_and(|e| matches!(e, Error::Usage(_)));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}

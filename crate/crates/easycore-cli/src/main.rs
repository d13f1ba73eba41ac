//! easycore: score sample hardness, select coresets, train, attack, analyze.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use easycore::error::Error;
use easycore_cli::commands::{self, AnalyzeInputs, AnalyzeKind};
use easycore_cli::config::{Config, SelectMethod, Split, TrainMode};
use easycore_cli::manifest::verify_manifest;

#[derive(Parser)]
#[command(
    name = "easycore",
    about = "Hardness scoring, coreset selection, and robustness experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the top-level seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Override train.epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override attack.epsilon.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Override select.fraction.
    #[arg(long)]
    fraction: Option<f64>,
    /// Override select.method (easycore | easycore_balanced | uniform).
    #[arg(long)]
    method: Option<String>,
    /// Override train.mode (standard | trades).
    #[arg(long)]
    mode: Option<String>,
    /// Re-hash the written manifest and confirm every digest matches.
    #[arg(long)]
    verify: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train a scoring model and write per-sample hardness scores.
    Score {
        #[command(flatten)]
        common: CommonArgs,
        /// Also write the dataset splits and their manifest.
        #[arg(long)]
        dump_data: bool,
    },
    /// Select a coreset from a score file.
    Select {
        #[command(flatten)]
        common: CommonArgs,
        /// Score CSV produced by `score`.
        #[arg(long)]
        scores: PathBuf,
    },
    /// Train on the full set or a selection.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Selection CSV produced by `select`.
        #[arg(long)]
        selection: Option<PathBuf>,
    },
    /// Attack a trained checkpoint and report accuracies.
    Attack {
        #[command(flatten)]
        common: CommonArgs,
        /// Model checkpoint produced by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Run one analysis (boundary | kappa | curve | lemma1 | histogram | project2d).
    Analyze {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        kind: AnalyzeKind,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[arg(long)]
        attack_csv: Option<PathBuf>,
        /// Bins for curve and histogram analyses.
        #[arg(long, default_value_t = 20)]
        bins: usize,
        /// Raster resolution per axis for the boundary analysis.
        #[arg(long, default_value_t = 400)]
        raster: usize,
        /// Explained-variance target for the kappa analysis.
        #[arg(long, default_value_t = 0.95)]
        target: f64,
        /// Split to analyze (train | test) where applicable.
        #[arg(long, default_value = "test")]
        split: String,
        /// Batch size for the lemma1 analysis.
        #[arg(long, default_value_t = 8)]
        lemma1_batch: usize,
        /// Number of batches for the lemma1 analysis.
        #[arg(long, default_value_t = 10)]
        lemma1_count: usize,
        /// Also write SVG renderings.
        #[arg(long)]
        svg: bool,
    },
}

fn parse_split(s: &str) -> Result<Split, Error> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        other => Err(Error::config(format!(
            "unknown split {other:?}; expected train or test"
        ))),
    }
}

fn load_config(common: &CommonArgs) -> Result<Config, Error> {
    let mut config = Config::load(&common.config)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out_dir) = &common.out_dir {
        config.out_dir = out_dir.clone();
    }
    if let Some(epochs) = common.epochs {
        config.train.epochs = epochs;
    }
    if let Some(epsilon) = common.epsilon {
        config.attack.epsilon = Some(epsilon);
    }
    if let Some(fraction) = common.fraction {
        config.select.fraction = fraction;
    }
    if let Some(method) = &common.method {
        config.select.method = match method.as_str() {
            "easycore" => SelectMethod::Easycore,
            "easycore_balanced" => SelectMethod::EasycoreBalanced,
            "uniform" => SelectMethod::Uniform,
            other => {
                return Err(Error::config(format!(
                    "unknown selection method {other:?}; expected easycore, \
                     easycore_balanced, or uniform"
                )))
            }
        };
    }
    if let Some(mode) = &common.mode {
        config.train.mode = match mode.as_str() {
            "standard" => TrainMode::Standard,
            "trades" => TrainMode::Trades,
            other => {
                return Err(Error::config(format!(
                    "unknown training mode {other:?}; expected standard or trades"
                )))
            }
        };
    }
    Ok(config)
}

fn configure_threads() {
    if let Ok(value) = std::env::var("EASYCORE_THREADS") {
        if let Ok(n) = value.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run() -> Result<(), Error> {
    configure_threads();
    let cli = Cli::parse();
    let (manifest, common) = match &cli.command {
        Command::Score { common, dump_data } => {
            let config = load_config(common)?;
            (commands::cmd_score(&config, *dump_data)?, common)
        }
        Command::Select { common, scores } => {
            let config = load_config(common)?;
            (commands::cmd_select(&config, scores)?, common)
        }
        Command::Train { common, selection } => {
            let config = load_config(common)?;
            (commands::cmd_train(&config, selection.as_deref())?, common)
        }
        Command::Attack { common, checkpoint } => {
            let config = load_config(common)?;
            (commands::cmd_attack(&config, checkpoint)?, common)
        }
        Command::Analyze {
            common,
            kind,
            checkpoint,
            scores,
            attack_csv,
            bins,
            raster,
            target,
            split,
            lemma1_batch,
            lemma1_count,
            svg,
        } => {
            let config = load_config(common)?;
            let split = parse_split(split)?;
            let inputs = AnalyzeInputs {
                checkpoint: checkpoint.clone(),
                scores: scores.clone(),
                attack_csv: attack_csv.clone(),
                bins: *bins,
                raster: *raster,
                variance_target: *target,
                split,
                lemma1_batch: *lemma1_batch,
                lemma1_count: *lemma1_count,
                svg: *svg,
            };
            (commands::cmd_analyze(&config, *kind, &inputs)?, common)
        }
    };
    let config = load_config(common)?;
    let manifest_path = config
        .out_dir
        .join(format!("{}.manifest.json", manifest.run_id));
    println!(
        "{}: wrote {} outputs, manifest {}",
        manifest.subcommand,
        manifest.outputs.len(),
        manifest_path.display()
    );
    if common.verify {
        verify_manifest(&manifest_path)?;
        println!("verify: manifest digests match");
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ Error::InvalidConfig { .. }) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(1)
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use affuse_core::data::folds::DEFAULT_FOLDS;
use affuse_core::data::manifest::Partition;
use affuse_core::ensemble::ClipOrder;
use affuse_core::fusion::ModelConfig;
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod config;

use config::{DimensionChoice, RunConfig};

#[derive(Parser)]
#[command(name = "affuse", version, about = "Audio-visual attentive fusion for valence/arousal regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Policy {
    Early,
    Late,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// JSON document overriding the generator settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Align, mask, pad and normalize every trial of a manifest.
    Prepare {
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Subject-independent folds over a prepared manifest.
    Folds {
        prepared: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FOLDS)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one fold; writes checkpoint-<dim>.afmd and history-<dim>.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        fold: usize,
        #[arg(long, value_enum)]
        dimension: Option<DimensionChoice>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-frame prediction traces, one `<trial>.csv` each.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        partition: PartitionArg,
        /// Window settings are read from here when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge matching traces from several directories.
    Merge {
        #[arg(long, value_enum)]
        policy: Policy,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        traces: Vec<PathBuf>,
    },
    /// CCC of every trace against the prepared labels, as CSV.
    Eval {
        traces: PathBuf,
        #[arg(long)]
        prepared: PathBuf,
        #[arg(long, value_enum)]
        dimension: DimensionChoice,
        /// Report file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every block and both model kinds.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        frames: usize,
        /// Coordinates sampled per full-model leaf (all when omitted).
        #[arg(long)]
        coords: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn emit(text: &str, out: Option<&PathBuf>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { out, spec, seed } => {
            let manifest = commands::synth(&out, spec.as_deref(), seed)?;
            println!("{}", manifest.display());
        }
        Command::Prepare { manifest, out } => commands::cmd_prepare(&manifest, &out)?,
        Command::Folds { prepared, folds, seed, out } => commands::cmd_folds(&prepared, folds, seed, &out)?,
        Command::Train { config, fold, dimension, seed, out } => {
            let mut config = RunConfig::load(&config)?;
            if let Some(d) = dimension {
                config.dimension = d;
            }
            if let Some(s) = seed {
                config.trainer.seed = s;
            }
            commands::train(&config, fold, &out)?;
        }
        Command::Predict { checkpoint, prepared, partition, config, out } => {
            let window = match config {
                Some(p) => RunConfig::load(&p)?.window,
                None => Default::default(),
            };
            let partitions = match partition {
                PartitionArg::Train => vec![Partition::Train],
                PartitionArg::Validation => vec![Partition::Validation],
                PartitionArg::Test => vec![Partition::Test],
                PartitionArg::All => vec![Partition::Train, Partition::Validation, Partition::Test],
            };
            commands::predict(&checkpoint, &prepared, &partitions, &window, &out)?;
        }
        Command::Merge { policy, out, traces } => {
            let order = match policy {
                Policy::Early => ClipOrder::EarlyClip,
                Policy::Late => ClipOrder::LateClip,
            };
            commands::cmd_merge(&traces, order, &out)?;
        }
        Command::Eval { traces, prepared, dimension, out } => {
            let dims = dimension.dimensions();
            let [dim] = dims.as_slice() else { anyhow::bail!("eval takes one dimension") };
            emit(&commands::eval(&traces, &prepared, *dim)?, out.as_ref())?;
        }
        Command::Gradcheck { config, frames, coords, seed, out } => {
            let model = match config {
                Some(p) => RunConfig::load(&p)?.model,
                None => ModelConfig::default(),
            };
            let (report, ok) = commands::gradcheck(&model, frames, seed, coords)?;
            emit(&report, out.as_ref())?;
            return Ok(ok);
        }
    }
    Ok(true)
}

fn init_threads() -> Result<()> {
    if let Ok(value) = std::env::var("AFFUSE_THREADS") {
        let n: usize = value.trim().parse().with_context(|| format!("AFFUSE_THREADS={value:?} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = init_threads().and_then(|_| run(cli));
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{}", serde_json::json!({ "error": "gradient check failed" }));
            ExitCode::from(1)
        }
        Err(err) => {
            let causes: Vec<String> = err.chain().map(|c| c.to_string()).collect();
            eprintln!("{}", serde_json::json!({ "error": causes.join(": ") }));
            ExitCode::from(2)
        }
    }
}

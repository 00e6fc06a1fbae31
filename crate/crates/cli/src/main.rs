//! riskgraph: end-to-end fraud-risk pipeline over transaction graphs.
//!
//! One subcommand per pipeline stage, explicit artifact files between
//! stages, and a single strictly-parsed TOML config. Exit codes: 0 on
//! success, 1 on usage or config errors, 2 on data/validation errors.

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use riskgraph_core::config::{load_config, RunConfig};
use riskgraph_core::model::Aggregation;
use riskgraph_core::train::TrainMode;
use riskgraph_core::{Error, Result};

mod commands;

// The tape allocates and frees many multi-megabyte tensors per epoch;
// glibc malloc spends a noticeable fraction of an epoch in mmap churn on
// that pattern.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser, Debug)]
#[command(
    name = "riskgraph",
    version,
    about = "Fraud risk scoring over shared-attribute transaction graphs"
)]
struct Cli {
    /// TOML run config; missing sections fall back to defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override every seed in the config (generator, training, sampling).
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// Override the artifact directory (paths.out_dir).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a labeled synthetic transaction dataset with fraud rings.
    Synth,

    /// Validate raw transaction/identity CSVs and write the merged table.
    Ingest {
        /// Transactions CSV (default: paths.transactions).
        #[arg(long, value_name = "PATH")]
        transactions: Option<PathBuf>,
        /// Identity CSV (default: paths.identity).
        #[arg(long, value_name = "PATH")]
        identity: Option<PathBuf>,
        /// Ingest without any identity table.
        #[arg(long)]
        no_identity: bool,
    },

    /// Fit preprocessing on the train split and write the feature matrix.
    Preprocess,

    /// Build the shared-attribute transaction graph and write its CSR dump.
    BuildGraph,

    /// Train the risk model; writes the checkpoint and a history log.
    Train {
        /// Training mode.
        #[arg(long, value_parser = ["full_batch", "sampled"])]
        mode: Option<String>,
        /// Neighborhood aggregation.
        #[arg(long, value_parser = ["attention", "degree_norm"])]
        aggregation: Option<String>,
        /// Classification threshold for reported metrics.
        #[arg(long, value_name = "TAU")]
        threshold: Option<f64>,
        /// Hide edges from later-time nodes during training and validation.
        #[arg(long)]
        strict_time_edges: bool,
    },

    /// Score a table with a checkpoint and report metrics per split.
    Evaluate {
        /// Checkpoint path (default: paths.checkpoint).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Table dump to evaluate (default: paths.table).
        #[arg(long, value_name = "PATH")]
        table: Option<PathBuf>,
        /// Classification threshold (default: the checkpoint's).
        #[arg(long, value_name = "TAU")]
        threshold: Option<f64>,
        /// Evaluate train/val splits on time-restricted graphs.
        #[arg(long)]
        strict_time_edges: bool,
    },

    /// Print a consolidated run report from the existing artifacts.
    Report,

    /// Write per-transaction risk scores for a table, in input order.
    Score {
        /// Checkpoint path (default: paths.checkpoint).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Table dump to score (default: paths.table).
        #[arg(long, value_name = "PATH")]
        table: Option<PathBuf>,
        /// Flagging threshold (default: the checkpoint's).
        #[arg(long, value_name = "TAU")]
        threshold: Option<f64>,
    },

    /// Train once per hyperparameter value and tabulate test AUROC.
    Sweep {
        /// Hyperparameter to sweep.
        #[arg(long, default_value = "hidden_dim", value_parser = ["hidden_dim", "dropout"])]
        param: String,
        /// Comma-separated values (defaults: 16,32,64,128,256 for
        /// hidden_dim; 0.0,0.1,0.2,0.3,0.4,0.5 for dropout).
        #[arg(long, value_name = "LIST", value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Run up to this many trainings concurrently; results and seeds
        /// are identical to a sequential run.
        #[arg(long, default_value_t = 1, value_name = "N")]
        parallel: usize,
    },
}

fn stage_name(cmd: &Command) -> &'static str {
    match cmd {
        Command::Synth => "synth",
        Command::Ingest { .. } => "ingest",
        Command::Preprocess => "preprocess",
        Command::BuildGraph => "build-graph",
        Command::Train { .. } => "train",
        Command::Evaluate { .. } => "evaluate",
        Command::Report => "report",
        Command::Score { .. } => "score",
        Command::Sweep { .. } => "sweep",
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_global_seed(seed);
    }
    if let Some(out) = cli.out {
        cfg.paths.out_dir = out;
    }

    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Ingest {
            transactions,
            identity,
            no_identity,
        } => commands::ingest(&cfg, transactions, identity, no_identity),
        Command::Preprocess => commands::preprocess(&cfg),
        Command::BuildGraph => commands::build_graph(&cfg),
        Command::Train {
            mode,
            aggregation,
            threshold,
            strict_time_edges,
        } => {
            if let Some(mode) = mode {
                cfg.train.mode = parse_mode(&mode)?;
            }
            if let Some(agg) = aggregation {
                cfg.model.aggregation = parse_aggregation(&agg)?;
            }
            if let Some(tau) = threshold {
                cfg.train.threshold = tau;
            }
            if strict_time_edges {
                cfg.train.strict_time_edges = true;
            }
            cfg.validate()?;
            commands::train(&cfg)
        }
        Command::Evaluate {
            checkpoint,
            table,
            threshold,
            strict_time_edges,
        } => commands::evaluate(&cfg, checkpoint, table, threshold, strict_time_edges),
        Command::Report => commands::report(&cfg),
        Command::Score {
            checkpoint,
            table,
            threshold,
        } => commands::score(&cfg, checkpoint, table, threshold),
        Command::Sweep {
            param,
            values,
            parallel,
        } => commands::sweep(&cfg, &param, values, parallel),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode> {
    match s {
        "full_batch" => Ok(TrainMode::FullBatch),
        "sampled" => Ok(TrainMode::Sampled),
        other => Err(Error::ConfigError(format!("unknown mode {other:?}"))),
    }
}

fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "attention" => Ok(Aggregation::Attention),
        "degree_norm" => Ok(Aggregation::DegreeNorm),
        other => Err(Error::ConfigError(format!("unknown aggregation {other:?}"))),
    }
}

fn main() {
    // `riskgraph report | head` should end quietly, not with a panic
    // trace: restore the default SIGPIPE disposition that Rust masks.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let stage = stage_name(&cli.command);
    if let Err(e) = run(cli) {
        eprintln!("riskgraph {stage}: {e}");
        let code = match e {
            Error::ConfigError(_) => 1,
            _ => 2,
        };
        std::process::exit(code);
    }
}

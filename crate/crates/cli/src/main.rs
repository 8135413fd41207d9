//! `fim`: Fisher layer scores, surgical fine-tuning, sweeps and rank stability.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fim_core::bench::RecordSchema;
use fim_core::bench::MetricKind;
use fim_core::fisher::SelectionEnd;

use config::Overrides;

/// Bad flags, unreadable or invalid configuration, missing inputs.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser)]
#[command(name = "fim", version, about = "Fisher-information layer ranking and surgical fine-tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct Common {
    /// JSON config with sections {model, train, probe, tasks, output}.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Probe seed; defaults to the resolved seed.
    #[arg(long, global = true)]
    probe_seed: Option<u64>,
    #[arg(long, global = true)]
    probe_size: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl Common {
    fn overrides(&self, epochs: Option<usize>) -> Overrides {
        Overrides {
            seed: self.seed,
            probe_seed: self.probe_seed,
            probe_size: self.probe_size,
            epochs,
            out: self.out.clone(),
        }
    }
}

#[derive(Args, Clone)]
pub struct DataArgs {
    /// JSON-lines dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "features", value_parser = parse_schema)]
    schema: RecordSchema,
}

#[derive(Args, Clone)]
pub struct Selection {
    /// Number of layers to select.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value = "top")]
    end: SelectionEnd,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate per-layer Fisher scores on a probe drawn from a dataset.
    Score {
        /// Model manifest; built from the config's `model` section when absent.
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        select: Selection,
        #[command(flatten)]
        common: Common,
    },
    /// Print the ranking and k-layer selection stored in a score file.
    Rank {
        #[arg(long)]
        scores: PathBuf,
        #[command(flatten)]
        select: Selection,
        #[command(flatten)]
        common: Common,
    },
    /// Fine-tune a model, training only the selected layers and the head.
    Finetune {
        #[arg(long)]
        model: Option<PathBuf>,
        #[command(flatten)]
        data: DataArgs,
        /// Separate evaluation file; otherwise an 80/20 seeded split.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Score file to select layers from; computed on the eval probe when absent.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        select: Selection,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_parser = parse_metric)]
        metric: Option<MetricKind>,
        #[command(flatten)]
        common: Common,
    },
    /// Run every configured task under each mask variant.
    Sweep {
        /// Comma-separated variants to keep, e.g. `top-1,full`.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<fim_core::surgery::MaskVariant>>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Rank layers at each checkpoint and measure drift from epoch 0.
    Stability {
        /// Directory holding `ckpt_epoch<N>.json` manifests.
        #[arg(long)]
        checkpoints: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        common: Common,
    },
    /// Regenerate CSV tables from a sweep or trajectory JSON file.
    Report {
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn parse_schema(s: &str) -> Result<RecordSchema, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown schema `{s}` (expected single-text, text-pair or features)"))
}

fn parse_metric(s: &str) -> Result<MetricKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown metric `{s}` (expected accuracy, matthews or pearson)"))
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.is::<UsageError>()
            || matches!(
                e.downcast_ref::<fim_core::Error>(),
                Some(fim_core::Error::Config(_) | fim_core::Error::Parse { .. })
            )
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Score { model, data, select, common } => commands::score(model, data, select, common),
        Command::Rank { scores, select, common } => commands::rank(scores, select, common),
        Command::Finetune {
            model,
            data,
            eval_data,
            scores,
            select,
            epochs,
            metric,
            common,
        } => commands::finetune(commands::FinetuneArgs {
            model,
            data,
            eval_data,
            scores,
            select,
            epochs,
            metric,
            common,
        }),
        Command::Sweep { only, epochs, common } => commands::sweep(only, epochs, common),
        Command::Stability { checkpoints, data, common } => commands::stability(checkpoints, data, common),
        Command::Report { input, common } => commands::report(input, common),
    };
    match result {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            if is_usage(&err) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

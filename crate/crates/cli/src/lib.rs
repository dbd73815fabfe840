//! Operator front end: dataset ingestion, training, evaluation, one-shot
//! recommendations and forecasts, reports, and the HTTP service.

pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod ingest;
pub mod report;

use std::path::PathBuf;

use chrono::NaiveDateTime;
use clap::{Parser, Subcommand};
use diets_core::model::{FeatureGroup, Task};
use diets_core::training::FinetuneMode;

use crate::commands::Part;
use crate::config::CliConfig;
pub use crate::error::{CliError, Result};
use crate::ingest::Adapter;

#[derive(Debug, Parser)]
#[command(name = "diets", version, about = "Meal-aware bolus insulin titration (research use only)")]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TaskArg {
    Titration,
    Glucose,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Titration => Task::Titration,
            TaskArg::Glucose => Task::GlucoseForecast,
        }
    }
}

fn parse_group(s: &str) -> std::result::Result<FeatureGroup, String> {
    s.parse()
}

fn parse_mode(s: &str) -> std::result::Result<FinetuneMode, String> {
    s.parse().map_err(|e: diets_core::training::TrainError| e.to_string())
}

fn parse_time(s: &str) -> std::result::Result<NaiveDateTime, String> {
    diets_core::pipeline::parse_timestamp(s).map_err(|e| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Convert a dataset into canonical per-patient CSVs.
    Ingest {
        /// Directory or single file to read.
        path: PathBuf,
        #[arg(long, value_enum)]
        adapter: Adapter,
    },
    /// Train a foundation model on the pooled dataset.
    Train {
        #[arg(long, value_enum, default_value = "titration")]
        task: TaskArg,
        #[arg(long, value_parser = parse_group)]
        group: Option<FeatureGroup>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Personalize a checkpoint on one patient.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        patient: String,
        #[arg(long, value_parser = parse_mode, default_value = "ft_dense")]
        mode: FinetuneMode,
        /// Use only the first N days of the patient's data.
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Autoregressive MAE of a checkpoint on a dataset part.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        patient: Option<String>,
        #[arg(long, value_enum, default_value = "test")]
        part: Part,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Train and evaluate one model per feature group.
    Ablate {
        #[arg(long, value_enum, default_value = "titration")]
        task: TaskArg,
        /// Comma-separated groups; all nine when omitted.
        #[arg(long, value_delimiter = ',', value_parser = parse_group)]
        groups: Vec<FeatureGroup>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Guarded bolus plan for a patient's next two hours.
    Recommend {
        #[arg(long)]
        patient: String,
        /// Target glucose, mg/dl.
        #[arg(long)]
        target: f64,
        #[arg(long)]
        meal: String,
        /// Titration checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        forecast_checkpoint: Option<PathBuf>,
        /// First future slot; defaults to just after the patient's data.
        #[arg(long, value_parser = parse_time)]
        at: Option<NaiveDateTime>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Glucose forecast for a request file (JSON).
    Forecast {
        #[arg(long)]
        request: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run the HTTP service.
    Serve,
    /// MAE table and plots from an evaluate run.
    Report {
        /// Directory holding eval.json; defaults to --out.
        #[arg(long)]
        eval: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<CliConfig> {
    let cfg = match &cli.config {
        Some(p) => CliConfig::load(p)?,
        None => CliConfig::default(),
    };
    Ok(cfg.with_overrides(cli.seed, cli.out.clone()))
}

fn with_dataset(mut cfg: CliConfig, dataset: &Option<PathBuf>) -> CliConfig {
    if dataset.is_some() {
        cfg.dataset = dataset.clone();
    }
    cfg
}

fn json<T: serde::Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map(|s| s + "\n").map_err(error::internal)
}

/// Runs one command and returns what it prints on success.
pub fn run(cli: &Cli) -> Result<String> {
    let cfg = config(cli)?;
    match &cli.command {
        Command::Ingest { path, adapter } => {
            let summary = ingest::ingest(path, *adapter, &cfg.out, cfg.window()?)?;
            Ok(summary.render())
        }
        Command::Train { task, group, dataset } => commands::train(&with_dataset(cfg, dataset), (*task).into(), *group),
        Command::Finetune {
            checkpoint,
            patient,
            mode,
            days,
            dataset,
        } => commands::finetune(&with_dataset(cfg, dataset), checkpoint, patient, *mode, *days),
        Command::Evaluate {
            checkpoint,
            patient,
            part,
            dataset,
        } => commands::evaluate_cmd(&with_dataset(cfg, dataset), checkpoint, patient.as_deref(), *part),
        Command::Ablate { task, groups, dataset } => commands::ablate(&with_dataset(cfg, dataset), (*task).into(), groups),
        Command::Recommend {
            patient,
            target,
            meal,
            checkpoint,
            forecast_checkpoint,
            at,
            dataset,
        } => {
            let cfg = with_dataset(cfg, dataset);
            let rec = commands::recommend(
                &cfg,
                &commands::RecommendArgs {
                    patient,
                    target_mg_dl: *target,
                    meal,
                    checkpoint: checkpoint.as_deref(),
                    forecast_checkpoint: forecast_checkpoint.as_deref(),
                    at: *at,
                },
            )?;
            json(&rec)
        }
        Command::Forecast { request, checkpoint } => json(&commands::forecast_cmd(&cfg, request, checkpoint.as_deref())?),
        Command::Serve => commands::serve(&cfg).map(|_| String::new()),
        Command::Report { eval } => {
            let dir = eval.clone().unwrap_or_else(|| cfg.out.clone());
            let files = report::report(&dir, &cfg.out.join("report"))?;
            let mut s = format!("table: {}\n", files.table.display());
            for p in files.plots {
                s.push_str(&format!("plot: {}\n", p.display()));
            }
            Ok(s)
        }
    }
}

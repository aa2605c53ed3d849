//! Command line front end: index building, batch runs, offline scoring,
//! and report rendering.
//!
//! Exit codes: 0 clean, 1 finished with failed samples, 2 configuration
//! or IO error.

mod commands;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "geoloc", version, about = "Reasoning-based image geo-localization runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Ablation {
    /// Skip the reasoning stage (empty reasoning text).
    Reasoner,
    /// Skip grounding, OCR, and all knowledge tools.
    Searcher,
    /// Use the untrained reasoner endpoint instead of the tuned one.
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Embed a guidebook corpus and write the retrieval index.
    BuildIndex {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        guidebook: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Run the full pipeline over a dataset and write records, report,
    /// and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output directory for records.jsonl, report.json, manifest.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        parallelism: usize,
        /// May be given multiple times.
        #[arg(long, value_enum)]
        ablate: Vec<Ablation>,
        #[arg(long)]
        force: bool,
    },
    /// Score a records file against a ground-truth dataset.
    Score {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        truth: PathBuf,
    },
    /// Mean ROUGE-1/2/L over {id, candidate, reference} pairs.
    ScoreReasoning {
        #[arg(long)]
        input: PathBuf,
    },
    /// Render the evaluation report for an existing records file.
    Report {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, value_enum, default_value_t = ReportFormat::Text)]
        format: ReportFormat,
    },
    /// Normalize a CSV manifest into the dataset JSONL schema.
    Ingest {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

/// What a successfully executed command reports back.
pub enum Outcome {
    Clean,
    /// Some samples failed; output was still written.
    Partial,
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::BuildIndex {
            config,
            guidebook,
            out,
            force,
        } => commands::build_index(&config, &guidebook, &out, force),
        Command::Run {
            config,
            dataset,
            out,
            parallelism,
            ablate,
            force,
        } => commands::run(&config, &dataset, &out, parallelism, &ablate, force),
        Command::Score { predictions, truth } => commands::score(&predictions, &truth),
        Command::ScoreReasoning { input } => commands::score_reasoning(&input),
        Command::Report { records, format } => commands::report(&records, format),
        Command::Ingest { csv, out, force } => commands::ingest(&csv, &out, force),
    };
    match result {
        Ok(Outcome::Clean) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

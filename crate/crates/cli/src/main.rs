//! `kuda`: synthesize data, train, evaluate and inspect from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod config;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kuda_core::pipeline::RunLog;
use kuda_core::KudaError;

use crate::commands::Context;
use crate::config::{Profile, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "kuda",
    version,
    about = "Multimodal sentiment regression with dynamic modality fusion"
)]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// JSON file merged over the profile defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory for every output file.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Verb {
    /// Generate a synthetic dataset (dataset.jsonl).
    Synth,
    /// Stage 1: train unimodal branches on unimodal labels (stage1.kuda).
    Pretrain,
    /// Stage 2: train the fusion model, pretraining first if needed (model.kuda).
    Train,
    /// Score the test split (metrics.json, attention.jsonl, features.jsonl).
    Eval,
    /// Dominant and noise modality statistics (stats.json).
    Stats,
    /// Per-sample predictions, ratios and attention (inspect.jsonl).
    Inspect,
    /// Finite-difference check of every differentiable op and the full model.
    Gradcheck,
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numerical(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<KudaError> for Failure {
    fn from(e: KudaError) -> Self {
        let msg = e.to_string();
        match e {
            KudaError::NonFinite(_) | KudaError::BlockNumerics { .. } => Failure::Numerical(msg),
            KudaError::Config(_)
            | KudaError::UnknownStrategy(_)
            | KudaError::HeadSplit { .. }
            | KudaError::TapMismatch { .. }
            | KudaError::RatioInTestMode => Failure::Usage(msg),
            _ => Failure::Data(msg),
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let cfg = RunConfig::resolve(cli.profile, cli.config.as_deref(), cli.seed)?;
    fs::create_dir_all(&cli.out)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", cli.out.display())))?;
    let mut text = serde_json::to_string_pretty(&cfg).expect("config serializes");
    text.push('\n');
    fs::write(cli.out.join(commands::CONFIG), text).map_err(KudaError::from)?;
    let log = RunLog::append_to(cli.out.join(commands::LOG))?;
    let mut ctx = Context {
        cfg,
        out: cli.out,
        log,
    };
    match cli.verb {
        Verb::Synth => commands::synth(&mut ctx),
        Verb::Pretrain => commands::pretrain(&mut ctx),
        Verb::Train => commands::train(&mut ctx),
        Verb::Eval => commands::eval(&mut ctx),
        Verb::Stats => commands::stats(&mut ctx),
        Verb::Inspect => commands::inspect(&mut ctx),
        Verb::Gradcheck => commands::gradcheck(&mut ctx),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}

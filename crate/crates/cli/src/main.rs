mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gapl::experiments::Module;
use gapl::Error;

#[derive(Parser, Debug)]
#[command(name = "gapl", version, about = "Generator-aware prototype learning at desk scale")]
pub struct Cli {
    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory receiving the resolved config and all artifacts.
    #[arg(long, global = true, default_value = "gapl-out")]
    pub out: PathBuf,
    /// JSON config file layered over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct From {
    /// Run directory holding upstream artifacts; without it they are
    /// recomputed from the config.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct EvalCorpus {
    /// Comma-separated family ids of the evaluation corpus.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<u32>>,
    #[arg(long)]
    pub n_per_class: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Writes the training and evaluation corpora as EMBX image sets.
    SynthData {
        #[arg(long, value_delimiter = ',')]
        families: Option<Vec<u32>>,
        #[arg(long)]
        n_per_class: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Scatter traces, Fisher ratios and accuracies over growing generator sets.
    AnalyzeHetero {
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<u32>>,
    },
    /// Prepares the frozen encoder and trains the stage-1 head.
    TrainStage1 {
        #[arg(long)]
        m_per_family: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Forgery embeddings of the prototype set and the prototype matrix.
    ExtractPrototypes {
        #[command(flatten)]
        from: From,
        #[arg(long)]
        n_prototypes: Option<usize>,
    },
    /// Trains the full model and writes its checkpoint and history.
    TrainStage2 {
        #[command(flatten)]
        from: From,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        /// Disable prototype mapping.
        #[arg(long)]
        no_pm: bool,
        /// Disable the low-rank adapters.
        #[arg(long)]
        no_lora: bool,
    },
    /// Scores an EMBX image set with a trained model.
    Predict {
        #[command(flatten)]
        from: From,
        #[arg(long)]
        input: PathBuf,
    },
    /// Per-generator accuracy/AP, robustness, attention and variance bounds.
    Eval {
        #[command(flatten)]
        from: From,
        #[command(flatten)]
        corpus: EvalCorpus,
    },
    /// Accuracy under JPEG and blur perturbations.
    Robustness {
        #[command(flatten)]
        from: From,
        #[command(flatten)]
        corpus: EvalCorpus,
    },
    /// Mean prototype attention per class and top images per prototype.
    AttnReport {
        #[command(flatten)]
        from: From,
        #[command(flatten)]
        corpus: EvalCorpus,
        #[arg(long)]
        top_j: Option<usize>,
    },
    /// Module ablation over the groups spanned by the grid axes.
    Ablate {
        #[arg(long, value_delimiter = ',', default_value = "pm,lora,pca")]
        grid: Vec<Module>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Gradient checks, oracles and invariants; prints a PASS/FAIL table.
    Verify,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::SynthData { .. } => "synth-data",
            Command::AnalyzeHetero { .. } => "analyze-hetero",
            Command::TrainStage1 { .. } => "train-stage1",
            Command::ExtractPrototypes { .. } => "extract-prototypes",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::Predict { .. } => "predict",
            Command::Eval { .. } => "eval",
            Command::Robustness { .. } => "robustness",
            Command::AttnReport { .. } => "attn-report",
            Command::Ablate { .. } => "ablate",
            Command::Verify => "verify",
        }
    }
}

/// Outcome of a subcommand that ran to completion but reports failure.
pub enum Outcome {
    Ok,
    ChecksFailed,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Format { .. } | Error::Line { .. } | Error::Io { .. } => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("gapl {}: {e}", cli.command.name());
            ExitCode::from(exit_code(&e))
        }
    }
}

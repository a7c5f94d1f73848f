//! `rtp`: synthesize corpora, train, evaluate and render rationales.
//!
//! Exit codes: 0 success, 1 usage or validation error, 2 numerical failure.

mod commands;
mod manifest;
mod render;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::{EvalKnobs, SynthKnobs, TrainKnobs};

#[derive(Parser)]
#[command(name = "rtp", version, about = "Self-rationalizing transformer classifier lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
#[allow(clippy::large_enum_variant)]
enum Command {
    /// Generate a planted-span corpus split into train/val/test files
    Synth(SynthArgs),
    /// Train a model and keep the best validation checkpoint
    Train(TrainArgs),
    /// Score a checkpoint (or external rationale scores) on an annotated corpus
    Eval(EvalArgs),
    /// Render one sample's rationale as a static HTML page
    Explain(ExplainArgs),
}

#[derive(Args)]
pub struct SynthArgs {
    /// Flat TOML file of settings; flags override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "data")]
    out: PathBuf,
    #[command(flatten)]
    knobs: SynthKnobs,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training corpus (JSON lines)
    #[arg(long)]
    train: PathBuf,
    /// Annotated validation corpus used for model selection
    #[arg(long)]
    val: PathBuf,
    /// Run name, used for the default output directory
    #[arg(long, default_value = "run")]
    name: String,
    /// Run directory [default: runs/<name>]
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    knobs: TrainKnobs,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Annotated corpus
    #[arg(long)]
    corpus: PathBuf,
    /// Evaluate these rationale scores instead of the model's own
    #[arg(long)]
    scores_in: Option<PathBuf>,
    /// Output directory for report.json
    #[arg(long, default_value = "eval")]
    out: PathBuf,
    #[command(flatten)]
    knobs: EvalKnobs,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Corpus holding the sample to explain
    #[arg(long, conflicts_with = "tokens")]
    corpus: Option<PathBuf>,
    /// Position of the sample in --corpus [default: 0]
    #[arg(long, conflicts_with = "sample_id")]
    index: Option<usize>,
    /// Id of the sample in --corpus
    #[arg(long)]
    sample_id: Option<String>,
    /// File of whitespace-separated token ids to explain instead of a corpus sample
    #[arg(long)]
    tokens: Option<PathBuf>,
    /// Class to highlight [default: most probable class]
    #[arg(long)]
    class: Option<usize>,
    /// One display string per token id, one per line
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value = "explain")]
    out: PathBuf,
    #[command(flatten)]
    knobs: EvalKnobs,
}

fn is_numerical(e: &anyhow::Error) -> bool {
    e.chain()
        .any(|c| matches!(c.downcast_ref::<rtp_core::Error>(), Some(rtp_core::Error::NonFinite { .. })))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Explain(a) => commands::explain(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_numerical(&e) { 2 } else { 1 })
        }
    }
}

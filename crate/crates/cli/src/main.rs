//! `partforge`: library building and captioning, pair augmentation,
//! training, evaluation, scoring and a self-check of the numerical core.

mod commands;
mod selfcheck;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "partforge", version, about = "Part-based text/shape retrieval with assembly augmentation")]
struct Cli {
    /// Upper bound on worker threads for every stage.
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Build or caption a component library.
    #[command(subcommand)]
    Library(LibraryCommand),
    /// Generate shape/caption pairs by assembling library parts.
    Augment(AugmentArgs),
    /// Train the encoders on online-augmented batches.
    Train(TrainArgs),
    /// Retrieval metrics of a checkpoint on a pairs directory.
    Eval(EvalArgs),
    /// Similarity between one shape and one caption.
    Score(ScoreArgs),
    /// Checks the transport solver, gradients and metrics against oracles.
    Selfcheck(SelfcheckArgs),
}

#[derive(Debug, Subcommand)]
enum LibraryCommand {
    /// Write a library directory: the synthetic desk-scale set, or a cleaned copy of `--from`.
    Build(BuildArgs),
    /// Replace template captions with captions from a multimodal chat endpoint.
    Caption(CaptionArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Points per synthetic part.
    #[arg(long, default_value_t = 512)]
    pub points: usize,
    /// Ingest an existing library instead of synthesizing one.
    #[arg(long, value_name = "DIR")]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CaptionArgs {
    #[arg(long)]
    pub library: PathBuf,
    /// Full URL of the chat completions route.
    #[arg(long)]
    pub endpoint: String,
    #[arg(long, default_value_t = 4)]
    pub concurrency: usize,
    #[arg(long, default_value = "llava")]
    pub model: String,
    /// Side of the rendered views in pixels.
    #[arg(long, default_value_t = 128)]
    pub resolution: usize,
    #[arg(long, default_value_t = 5)]
    pub max_retries: u32,
    /// Request timeout in seconds.
    #[arg(long, default_value_t = 60.0)]
    pub timeout: f64,
    /// Delay before the first retry in milliseconds; doubles on each retry.
    #[arg(long, default_value_t = 500)]
    pub backoff_ms: u64,
}

#[derive(Debug, Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub library: PathBuf,
    /// Schema to assemble; without it each pair draws a category at random.
    #[arg(long)]
    pub schema: Option<PathBuf>,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub no_inter: bool,
    #[arg(long)]
    pub no_intra: bool,
    /// Points per generated shape.
    #[arg(long, default_value_t = 256)]
    pub points: usize,
    /// Containment threshold for cover pairs.
    #[arg(long, default_value_t = 0.95)]
    pub theta: f64,
    /// Caption pattern with `{category}` and `{part_captions}` placeholders.
    #[arg(long)]
    pub template: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Library directory; the synthetic library is used when absent.
    #[arg(long)]
    pub library: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Pairs directory as written by `augment`.
    #[arg(long)]
    pub gallery: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// Point file, `x y z [label]` per line.
    #[arg(long)]
    pub shape: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelfcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let threads = cli.threads;
    match cli.command {
        Command::Library(LibraryCommand::Build(args)) => commands::library_build(&args, threads),
        Command::Library(LibraryCommand::Caption(args)) => commands::library_caption(&args, threads),
        Command::Augment(args) => commands::augment(&args, threads),
        Command::Train(args) => commands::train(&args, threads),
        Command::Eval(args) => commands::eval(&args, threads),
        Command::Score(args) => commands::score(&args, threads),
        Command::Selfcheck(args) => selfcheck::run(&args, threads),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            // core errors often embed their source already
            let mut line = e.to_string();
            for cause in e.chain().skip(1) {
                let c = cause.to_string();
                if !line.contains(&c) {
                    line.push_str(": ");
                    line.push_str(&c);
                }
            }
            eprintln!("error: {line}");
            ExitCode::FAILURE
        }
    }
}

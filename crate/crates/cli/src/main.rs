mod commands;
mod config;

use std::io::ErrorKind;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mocha_core::data::Shot;
use mocha_core::model::WindowMode;
use mocha_core::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "mocha", version, about = "Speech- and text-conditioned video latent generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset file.
    GenData(GenDataArgs),
    /// Train a model through the configured curriculum stages.
    Train(TrainArgs),
    /// Sample a video latent from a checkpoint.
    Sample(SampleArgs),
    /// Score a checkpoint's samples against a dataset.
    Eval(EvalArgs),
    /// Train and compare ablation variants.
    Ablate(AblateArgs),
    /// Parse and validate a structured prompt.
    ParsePrompt(ParsePromptArgs),
    /// Print the audio window of every latent frame.
    InspectWindow(InspectWindowArgs),
}

#[derive(Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, env = "MOCHA_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Fix the shot of every sample (mixed by default).
    #[arg(long)]
    pub shot: Option<Shot>,
    /// Fix the clip count of every sample (1 or 2 alternating by default).
    #[arg(long)]
    pub clips: Option<usize>,
    /// Fix the character count of every sample.
    #[arg(long)]
    pub characters: Option<usize>,
    /// JSON file with frame grid and audio rate.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, env = "MOCHA_SEED")]
    pub seed: Option<u64>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Prompt text in the structured template.
    #[arg(long, conflicts_with = "prompt_file")]
    pub prompt: Option<String>,
    #[arg(long)]
    pub prompt_file: Option<PathBuf>,
    /// Waveform stored as a serialized 1-D tensor.
    #[arg(long, conflicts_with_all = ["no_audio", "from_data"])]
    pub audio: Option<PathBuf>,
    #[arg(long, default_value_t = 2500)]
    pub sample_rate: u32,
    #[arg(long, default_value_t = 25.0)]
    pub frame_rate: f64,
    /// Sample without speech (zeroed audio condition).
    #[arg(long)]
    pub no_audio: bool,
    /// Take prompt and audio from a dataset record.
    #[arg(long)]
    pub from_data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub index: usize,
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, env = "MOCHA_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the per-frame mouth trace as CSV.
    #[arg(long)]
    pub csv: bool,
    /// Shot used to locate mouths for the CSV trace when no dataset record is given.
    #[arg(long, default_value = "close-up")]
    pub shot: Shot,
}

#[derive(Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// First record to score.
    #[arg(long, default_value_t = 0)]
    pub start: usize,
    /// Number of records to score (all remaining by default).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, env = "MOCHA_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Print a progress line every this many steps (0 disables).
    #[arg(long, default_value_t = 500)]
    pub progress: u64,
}

#[derive(Args)]
pub struct ParsePromptArgs {
    /// Prompt text; read from --file or standard input when absent.
    pub text: Option<String>,
    #[arg(long, conflicts_with = "text")]
    pub file: Option<PathBuf>,
}

#[derive(Args)]
pub struct InspectWindowArgs {
    #[arg(long)]
    pub r: usize,
    #[arg(long = "t")]
    pub t: usize,
    #[arg(long, default_value = "prose")]
    pub mode: WindowMode,
    /// Write the bounds CSV here instead of standard output.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Failure of a command: a library error or a failed direction check.
pub enum Failure {
    Lib(Error),
    Assertion(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Lib(e.into())
    }
}

fn report(f: &Failure) -> u8 {
    let (code, class, exit, msg) = match f {
        Failure::Lib(e) => {
            let (class, exit) = match e.class() {
                ErrorClass::Config => ("config", 2),
                ErrorClass::Data => ("data", 3),
                ErrorClass::Numeric => ("numeric", 4),
            };
            (e.code(), class, exit, e.to_string())
        }
        Failure::Assertion(m) => ("direction_check", "assertion", 5, m.clone()),
    };
    let msg = msg.replace('\n', " ");
    eprintln!("error code={code} class={class} exit={exit}: {msg}");
    exit
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
        Command::ParsePrompt(a) => commands::parse_prompt(a),
        Command::InspectWindow(a) => commands::inspect_window(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        // Downstream reader went away (`mocha ... | head`); nothing left to say.
        Err(Failure::Lib(Error::Io(e))) if e.kind() == ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(f) => ExitCode::from(report(&f)),
    }
}

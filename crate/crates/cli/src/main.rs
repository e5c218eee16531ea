//! `meshtok` command-line tool.
//!
//! Every command prints one JSON `CommandResult` on stdout and exits with
//! 0 (success), 1 (usage), 2 (validation) or 3 (runtime).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "meshtok", version, about = "Mesh tokenization and token-based mesh recovery")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    GenData {
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        count: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Tokenize the ground truth with this codec.
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        image_size: usize,
    },
    /// Train the codec or the predictor.
    Train {
        #[arg(long)]
        stage: StageArg,
        /// TOML training config; stage presets are used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Frozen codec (predictor stage).
        #[arg(long)]
        codec: Option<PathBuf>,
        #[arg(long)]
        ablation: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score a trained predictor.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// JSON report path; a CSV with the same stem is written beside it.
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Tokenize a mesh or decode a token file.
    #[command(subcommand)]
    Codec(CodecCommand),
    /// Edit meshes in token or latent space.
    #[command(subcommand)]
    Edit(EditCommand),
}

#[derive(Subcommand)]
enum CodecCommand {
    Encode {
        #[arg(long)]
        mesh: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    Decode {
        #[arg(long)]
        tokens: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EditCommand {
    /// Take the tokens at `--indices` from `b`, the rest from `a`.
    Swap {
        #[command(flatten)]
        pair: Pair,
        /// Comma-separated token indices; may be empty.
        #[arg(long, default_value = "", allow_hyphen_values = true)]
        indices: String,
    },
    /// Decode a blend of the two continuous latents.
    Interp {
        #[command(flatten)]
        pair: Pair,
        #[arg(long, conflicts_with = "frames")]
        t: Option<f64>,
        /// Write this many evenly spaced frames (endpoints included) into `--out`.
        #[arg(long, value_parser = clap::value_parser!(u64).range(2..))]
        frames: Option<u64>,
    },
}

/// Inputs are OBJ meshes (`.obj`) or token files.
#[derive(Args)]
struct Pair {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Codec,
    Predictor,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Serialize)]
pub struct CommandResult {
    pub exit_code: u8,
    pub artifacts: Vec<PathBuf>,
    pub summary: serde_json::Value,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { commands::EXIT_USAGE } else { 0 });
        }
    };
    let result = commands::run(cli.command).unwrap_or_else(|e| {
        eprintln!("error: {e}");
        CommandResult {
            exit_code: e.exit_code(),
            artifacts: Vec::new(),
            summary: serde_json::json!({ "error": e.to_string() }),
        }
    });
    println!("{}", serde_json::to_string(&result).expect("command result serializes"));
    ExitCode::from(result.exit_code)
}

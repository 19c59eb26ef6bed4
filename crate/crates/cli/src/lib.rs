//! The `kdlm` command: one subcommand per pipeline stage plus an
//! end-to-end `pipeline`.

pub mod commands;
pub mod config;
pub mod manifest;
pub mod pipeline;

use std::ffi::OsString;
use std::path::PathBuf;

use kdlm_core::Error as CoreError;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

pub const VERSION: &str = env!("KDLM_VERSION");

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

/// A bad flag, config key or config value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Exit code for an error: usage and config problems are 1, divergence
/// is 3, anything else 2.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<UsageError>().is_some() {
        return EXIT_USAGE;
    }
    match err.downcast_ref::<CoreError>() {
        Some(CoreError::Divergence { .. }) => EXIT_DIVERGENCE,
        Some(CoreError::Config(_) | CoreError::UnknownName { .. } | CoreError::Leakage(_)) => EXIT_USAGE,
        _ => EXIT_RUNTIME,
    }
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config file layered over the built-in defaults.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Overrides the top-level `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; nothing is written outside it.
    #[arg(long, value_name = "DIR")]
    pub out: PathBuf,
    /// Checkpoint to resume training from.
    #[arg(long, value_name = "CKPT")]
    pub resume: Option<PathBuf>,
    /// Overrides one config key, e.g. `--set student.train.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Parser)]
#[command(name = "kdlm", version = VERSION, about = "Train teacher ensembles and distill small language models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic agreement corpus with minimal pairs.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Clean raw corpus files and report their readability.
    Clean {
        #[command(flatten)]
        common: Common,
        /// Directory of raw files named `<source>.<ext>`.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Train the BPE tokenizer on the training split and tokenize both splits.
    Tokenize {
        #[command(flatten)]
        common: Common,
        /// Cleaned training files.
        #[arg(long, value_name = "DIR")]
        train: PathBuf,
        /// Cleaned dev files.
        #[arg(long, value_name = "DIR")]
        dev: PathBuf,
    },
    /// Show the readability curriculum over training sources.
    Curriculum {
        #[command(flatten)]
        common: Common,
        /// Cleaned training files.
        #[arg(long, value_name = "DIR")]
        input: PathBuf,
    },
    /// Pretrain one model with plain next-token cross-entropy.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Output directory of `tokenize`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// A teacher name from the config, or `student`.
        #[arg(long)]
        model: Option<String>,
    },
    /// Distill the student from teacher checkpoints.
    Distill {
        #[command(flatten)]
        common: Common,
        /// Output directory of `tokenize`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Teacher checkpoint; repeat for an ensemble. Replaces `distill.teachers`.
        #[arg(long, value_name = "CKPT")]
        teacher: Vec<PathBuf>,
    },
    /// Score minimal pairs with one or more checkpoints.
    EvalPairs {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT", required = true)]
        checkpoint: Vec<PathBuf>,
        /// Directory holding vocab.json, merges.txt and tokenizer.json.
        #[arg(long, value_name = "DIR")]
        tokenizer: PathBuf,
        /// Tab-separated `phenomenon good bad` file.
        #[arg(long, value_name = "FILE")]
        pairs: PathBuf,
        /// Also score the ensemble of all checkpoints.
        #[arg(long)]
        ensemble: bool,
    },
    /// Average surprisal of words over their contexts in a corpus.
    Surprisal {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        #[arg(long, value_name = "DIR")]
        tokenizer: PathBuf,
        /// Text file; each line is one context.
        #[arg(long, value_name = "FILE")]
        corpus: PathBuf,
        #[arg(long, required = true)]
        word: Vec<String>,
    },
    /// Gradient-ascent post-training of a finished checkpoint.
    Gap {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Output directory of `tokenize`.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Run clean, tokenize, teachers, distillation and evaluation end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Clean { .. } => "clean",
            Command::Tokenize { .. } => "tokenize",
            Command::Curriculum { .. } => "curriculum",
            Command::Pretrain { .. } => "pretrain",
            Command::Distill { .. } => "distill",
            Command::EvalPairs { .. } => "eval-pairs",
            Command::Surprisal { .. } => "surprisal",
            Command::Gap { .. } => "gap",
            Command::Pipeline { .. } => "pipeline",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Clean { common, .. }
            | Command::Tokenize { common, .. }
            | Command::Curriculum { common, .. }
            | Command::Pretrain { common, .. }
            | Command::Distill { common, .. }
            | Command::EvalPairs { common, .. }
            | Command::Surprisal { common, .. }
            | Command::Gap { common, .. }
            | Command::Pipeline { common } => common,
        }
    }
}

/// The clap command with the config-key reference attached to every
/// subcommand's long help.
pub fn command() -> clap::Command {
    let keys = config::config_help();
    let exit = "EXIT CODES: 0 success, 1 usage or config error, 2 runtime failure, 3 training diverged";
    Cli::command()
        .after_long_help(format!("{exit}\n\n{keys}"))
        .mut_subcommands(|s| s.after_long_help(format!("{exit}\n\n{keys}")))
}

pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match command().try_get_matches_from(args).and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::run(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

//! The `s2r` command line: config-driven pipeline stages over a work directory.

mod engine;
mod stages;
pub use engine::{Engine, GenerationRecord};
pub use stages::build_report;
pub mod workdir;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::training::{Mode, TrainError};

/// Exit status for a missing prerequisite artifact.
pub const EXIT_MISSING: u8 = 2;
/// Exit status for configuration and usage errors.
pub const EXIT_CONFIG: u8 = 1;
/// Exit status for failures while a stage runs (I/O, malformed data).
pub const EXIT_RUNTIME: u8 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self::Run(format!("{}: {e}", path.display()))
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            Self::Config(_) => EXIT_CONFIG,
            Self::Missing(_) => EXIT_MISSING,
            Self::Run(_) => EXIT_RUNTIME,
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        Self::Config(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Precondition(m) => Self::Missing(m),
            other => Self::Run(other.to_string()),
        }
    }
}

macro_rules! run_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Run(e.to_string())
            }
        }
    )*};
}

run_error!(
    crate::jsonl::JsonlError,
    crate::dataset::DatasetError,
    crate::training::CheckpointError,
    crate::ModelError,
    crate::eval::EvalError
);

#[derive(Debug, Parser)]
#[command(name = "s2r", version, about = "Retrieval-guided response generation through response skeletons")]
pub struct Cli {
    /// TOML run configuration
    #[arg(short, long, default_value = "s2r.toml")]
    pub config: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    SkeMle,
    ResMle,
    Joint,
    Critic,
    Cascade,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::SkeMle => Mode::SkeMle,
            ModeArg::ResMle => Mode::ResMle,
            ModeArg::Joint => Mode::Joint,
            ModeArg::Critic => Mode::Critic,
            ModeArg::Cascade => Mode::Cascade,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Tokenize the corpus, build the vocabulary and both retrieval indexes
    Index,
    /// Build training quadruples from response retrieval under the Jaccard band
    Quads,
    /// Label quadruples with proxy skeletons
    Skeletons,
    /// Train one component or integration
    Train {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// with res_mle: train the response-to-query model used for MMI reranking
        #[arg(long)]
        inverse: bool,
        /// override the configured epoch count
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate responses for the test queries
    Generate {
        /// JSON-lines queries (defaults to paths.test)
        #[arg(long)]
        input: Option<PathBuf>,
        /// checkpoint to use instead of the configured integration's default
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// rerank beam candidates with the inverse model
        #[arg(long)]
        mmi: bool,
    },
    /// Interactive loop: type a query, see the retrieved pair, skeleton and response
    Chat {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a generation file
    Eval {
        /// defaults to the workdir's generations.jsonl
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(&cli.config)?;
    let work = workdir::Workdir::open(&cfg.paths.workdir, cfg.hash())?;
    let st = stages::Stages { cfg: &cfg, work: &work };
    match cli.command {
        Command::Index => st.index(),
        Command::Quads => st.quads(),
        Command::Skeletons => st.skeletons(),
        Command::Train { mode, inverse, epochs } => st.train(mode.into(), inverse, epochs),
        Command::Generate { input, checkpoint, mmi } => st.generate(input, checkpoint, mmi),
        Command::Chat { checkpoint } => {
            let stdin = std::io::stdin();
            st.chat(checkpoint, &mut stdin.lock(), &mut std::io::stdout())
        }
        Command::Eval { input } => st.eval(input),
    }
}

/// Parses arguments, runs, and maps the outcome to the process exit status.
pub fn main_with_args<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

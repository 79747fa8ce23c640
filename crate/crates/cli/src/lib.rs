//! Command-line driver: `mimic {validate|train|evaluate|link|report}`.
//!
//! Machine-readable results go to stdout as JSON; failures go to stderr as a
//! single-line JSON object. Exit codes: 0 success, 1 runtime failure,
//! 2 usage or configuration error.

mod commands;
pub mod config;
mod report;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

pub use report::render_report;

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    usage: bool,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            usage: true,
        }
    }

    pub fn runtime(kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
            usage: false,
        }
    }

    pub fn exit_code(&self) -> i32 {
        if self.usage {
            2
        } else {
            1
        }
    }

    pub fn to_json(&self) -> String {
        json!({"error": self.kind, "message": self.message}).to_string()
    }
}

impl From<mimic_core::Error> for CliError {
    fn from(e: mimic_core::Error) -> Self {
        use mimic_core::Error as E;
        let (kind, usage) = match &e {
            E::Config(_) => ("config", true),
            E::InvalidArgument(_) => ("invalid_argument", true),
            E::Parse { .. } => ("parse", false),
            E::Ingest(_) => ("ingest", false),
            E::Encoding(_) => ("encoding", false),
            E::Shape(_) => ("shape", false),
            E::NonFinite(_) => ("non_finite", false),
            E::Cache(_) => ("cache", false),
            E::Checkpoint(_) => ("checkpoint", false),
            E::Io { .. } => ("io", false),
            E::Json { .. } => ("json", false),
        };
        Self {
            kind,
            message: e.to_string(),
            usage,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "mimic",
    version,
    about = "Multimodal entity linking: train, evaluate and query"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON run configuration; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training seed (overrides train.seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Entity JSONL file (overrides data.entities).
    #[arg(long)]
    pub entities: Option<PathBuf>,
    /// Mention JSONL file (overrides data.mentions).
    #[arg(long)]
    pub mentions: Option<PathBuf>,
    /// Directory image references resolve against (overrides data.image_root).
    #[arg(long)]
    pub image_root: Option<PathBuf>,
    /// Entity feature cache directory (overrides eval.cache_dir).
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Ingest the dataset and report counts and problems.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Train and print the selected checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: commands::TrainArgs,
    },
    /// Rank the whole knowledge base for one split and print metrics.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: commands::EvaluateArgs,
    },
    /// Link a single mention and print the top-k entities.
    Link {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: commands::LinkArgs,
    },
    /// Render training history and metrics as a markdown table.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        args: report::ReportArgs,
    },
}

/// What a successful command prints.
pub enum Output {
    Json(serde_json::Value),
    Text(String),
}

fn dispatch(cli: Cli) -> Result<Output, CliError> {
    match cli.command {
        Command::Validate { common } => commands::validate(&common).map(Output::Json),
        Command::Train { common, args } => commands::train(&common, &args).map(Output::Json),
        Command::Evaluate { common, args } => commands::evaluate(&common, &args).map(Output::Json),
        Command::Link { common, args } => commands::link(&common, &args).map(Output::Json),
        Command::Report { common: _, args } => report::report(&args).map(Output::Text),
    }
}

/// Parses `argv`, runs the subcommand and returns the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{e}");
                return 0;
            }
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            let _ = writeln!(stderr, "{}", CliError::usage(first).to_json());
            return 2;
        }
    };
    match dispatch(cli) {
        Ok(Output::Json(v)) => {
            let _ = writeln!(
                stdout,
                "{}",
                serde_json::to_string_pretty(&v).expect("json value serializes")
            );
            0
        }
        Ok(Output::Text(t)) => {
            let _ = write!(stdout, "{t}");
            0
        }
        Err(e) => {
            let _ = writeln!(stderr, "{}", e.to_json());
            e.exit_code()
        }
    }
}

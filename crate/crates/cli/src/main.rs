//! `emov2` command-line front end.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use emov2::backbone::BackboneConfig;
use emov2::window::WindowMode;
use emov2::Error;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VERIFY: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;

const LOG_ENV: &str = "EMOV2_LOG";
const LOG_LEVELS: [&str; 3] = ["error", "info", "debug"];

#[derive(Parser, Debug)]
#[command(name = "emov2", version, about = "EMOv2 / i2RMB backbones: cost reports, invariant checks, tensor I/O")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Built-in model: emov2-1m, emov2-2m, emov2-5m, emov2-20m, emov2-50m, toy
    #[arg(long, global = true, conflicts_with = "config")]
    pub preset: Option<String>,

    /// TOML model description
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Square input resolution (defaults to the model's own)
    #[arg(long, global = true)]
    pub res: Option<usize>,

    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Reject maps not divisible by the window (default)
    #[arg(long, global = true, conflicts_with = "pad_windows")]
    pub strict_windows: bool,

    /// Zero-pad maps up to a window multiple
    #[arg(long, global = true)]
    pub pad_windows: bool,

    /// Output file or directory, depending on the command
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for independent work items
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    /// Force one thread and fixed seeds everywhere
    #[arg(long, global = true)]
    pub deterministic: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Per-layer parameter/FLOP/MPL report as CSV
    Cost,
    /// Run an invariant suite: grads, partition, equivalence, cost, erf, all
    Check {
        #[arg(default_value = "all")]
        suite: String,
    },
    /// Classify an EMOT tensor [N,3,H,W] and write the logits
    Forward {
        /// Input tensor file
        #[arg(long)]
        input: PathBuf,
        /// EMOW checkpoint to load instead of a seeded initialization
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Train the toy model on the synthetic four-class set
    TrainToy {
        #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
        steps: u64,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 16)]
        batch: usize,
        #[arg(long, default_value_t = 256)]
        dataset: usize,
    },
    /// Center-pixel reachability maps (PGM) and coverage CSV for a layer stack
    Erf {
        /// Layers, e.g. "nb:4x4*2", "sp:4x4,dw:3", "nb:2x2+dw:5"
        #[arg(long)]
        stack: String,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
    },
    /// Write a seeded random EMOT tensor
    Tensor {
        /// Comma-separated shape, e.g. 1,3,224,224
        #[arg(long)]
        shape: String,
        #[arg(long, default_value = "f64")]
        dtype: String,
    },
    /// Checkpoint utilities
    Weights {
        #[command(subcommand)]
        action: WeightsAction,
    },
}

#[derive(Subcommand, Debug)]
pub enum WeightsAction {
    /// Save the seeded initialization of the model
    Save,
    /// Load a checkpoint into the model and report what was read
    Load { path: PathBuf },
}

/// Failure carrying its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn usage(message: impl Into<String>) -> Self {
        Failure { code: EXIT_USAGE, message: message.into() }
    }

    pub fn verify(message: impl Into<String>) -> Self {
        Failure { code: EXIT_VERIFY, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format(_) | Error::MissingTensor(_) | Error::UnexpectedTensor(_) => EXIT_IO,
            Error::NonFinite { .. } => EXIT_VERIFY,
            _ => EXIT_USAGE,
        };
        Failure { code, message: e.to_string() }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure { code: EXIT_IO, message: e.to_string() }
    }
}

pub type CmdResult = std::result::Result<(), Failure>;

impl Common {
    /// Exactly one of --preset/--config, with the window mode applied.
    pub fn model(&self) -> std::result::Result<BackboneConfig, Failure> {
        let mut config = match (&self.preset, &self.config) {
            (Some(name), None) => BackboneConfig::preset(name)?,
            (None, Some(path)) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| Failure { code: EXIT_IO, message: format!("{}: {e}", path.display()) })?;
                BackboneConfig::from_toml_str(&text).map_err(|e| Failure::usage(format!("{}: {e}", path.display())))?
            }
            _ => return Err(Failure::usage("exactly one of --preset or --config is required")),
        };
        if self.pad_windows {
            config.window_mode = WindowMode::Pad;
        } else if self.strict_windows {
            config.window_mode = WindowMode::Strict;
        }
        Ok(config)
    }

    pub fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.threads.max(1)
        }
    }
}

fn init_logging() -> CmdResult {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "error".into());
    if !LOG_LEVELS.contains(&level.as_str()) {
        return Err(Failure::usage(format!("{LOG_ENV} must be one of {LOG_LEVELS:?}, got `{level}`")));
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .target(env_logger::Target::Stderr)
        .init();
    Ok(())
}

fn run(cli: Cli) -> CmdResult {
    init_logging()?;
    log::info!("{:?}", cli.command);
    let c = &cli.common;
    match &cli.command {
        Command::Cost => commands::cost(c),
        Command::Check { suite } => commands::check(c, suite),
        Command::Forward { input, weights } => commands::forward(c, input, weights.as_deref()),
        Command::TrainToy { steps, lr, batch, dataset } => commands::train_toy(c, *steps as usize, *lr, *batch, *dataset),
        Command::Erf { stack, height, width } => commands::erf(c, stack, *height, *width),
        Command::Tensor { shape, dtype } => commands::tensor(c, shape, dtype),
        Command::Weights { action } => match action {
            WeightsAction::Save => commands::weights_save(c),
            WeightsAction::Load { path } => commands::weights_load(c, path),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

//! Command line driver: config parsing, run directories and one subcommand
//! per evaluation protocol.
//!
//! Exit codes: 0 success, 2 usage, 3 invalid configuration, 4 data or file
//! problems, 5 training or evaluation failures.

pub mod commands;
pub mod config;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use msn_core::Error;

pub use config::{parse_config, parse_config_str, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Config(_) => 3,
            CliError::Io(_) => 4,
            CliError::Core(e) => match e {
                Error::InvalidConfig { .. } | Error::Divisibility { .. } | Error::EmptySequence { .. } => 3,
                Error::DatasetWrite { .. }
                | Error::Io { .. }
                | Error::ManifestMissing(_)
                | Error::MalformedRow { .. }
                | Error::NonConsecutiveFrames { .. }
                | Error::LabelOutOfRange { .. }
                | Error::Decode { .. }
                | Error::Checkpoint(_) => 4,
                Error::NonFinite { .. }
                | Error::Domain(_)
                | Error::Dimension(_)
                | Error::Batching(_)
                | Error::EmptyBatch
                | Error::DegenerateSplit(_)
                | Error::TooSmall(_) => 5,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "msn", version, about = "Masked siamese network pretraining and downstream evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub options: Options,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Options {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Checkpoint to evaluate, or to resume from with `pretrain`.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Run directory; overrides `output_dir/run_name`.
    #[arg(long, global = true)]
    pub run: Option<PathBuf>,
    /// Overrides both the pretraining and the downstream seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run everything on one thread.
    #[arg(long, global = true)]
    pub strict_deterministic: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic phase dataset into the run directory.
    Synth,
    /// Self-supervised pretraining.
    Pretrain,
    /// Encode every frame with the target encoder and cache the features.
    Extract,
    /// Linear probe on frozen features.
    Probe,
    /// Train the encoder and a linear head end to end.
    Finetune,
    /// MS-TCN on frozen per-video features.
    Temporal,
    /// Linear probes on subsampled training videos.
    Lowshot,
    /// Pretrain and probe every setting of one ablation axis.
    Ablate {
        #[arg(long, value_enum)]
        axis: Axis,
    },
    /// Consolidated table of the results found in a run directory.
    Report,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Axis {
    Prototypes,
    Mask,
    Focal,
    Augmentation,
    Collapse,
    Epochs,
}

impl Axis {
    pub fn name(self) -> &'static str {
        match self {
            Axis::Prototypes => "prototypes",
            Axis::Mask => "mask",
            Axis::Focal => "focal",
            Axis::Augmentation => "augmentation",
            Axis::Collapse => "collapse",
            Axis::Epochs => "epochs",
        }
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    if cli.options.strict_deterministic {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .map_err(|e| CliError::Io(format!("thread pool: {e}")))?;
        pool.install(|| commands::execute(&cli.command, &cli.options))
    } else {
        commands::execute(&cli.command, &cli.options)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_subcommand_is_a_usage_error() {
        assert_eq!(dispatch(["msn", "train"]), 2);
        assert_eq!(dispatch(["msn"]), 2);
        assert_eq!(dispatch(["msn", "ablate", "--axis", "depth"]), 2);
        assert_eq!(dispatch(["msn", "--help"]), 0);
    }

    #[test]
    fn flags_parse_after_the_subcommand() {
        let cli = Cli::try_parse_from(["msn", "probe", "--config", "c.json", "--seed", "7", "--strict-deterministic"]).unwrap();
        assert!(matches!(cli.command, Command::Probe));
        assert_eq!(cli.options.seed, Some(7));
        assert!(cli.options.strict_deterministic);
        assert_eq!(cli.options.config.as_deref(), Some(std::path::Path::new("c.json")));
    }

    #[test]
    fn exit_codes_follow_error_categories() {
        assert_eq!(CliError::from(Error::Checkpoint("x".into())).exit_code(), 4);
        assert_eq!(CliError::from(Error::DegenerateSplit("x".into())).exit_code(), 5);
        assert_eq!(CliError::from(Error::Divisibility { size: 3, patch: 2 }).exit_code(), 3);
    }
}

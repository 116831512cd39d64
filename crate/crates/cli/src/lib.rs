//! Command-line driver: `stam <verb> --config run.conf`.
//!
//! Exit codes are 0 on success, 1 for bad input of any kind and 2 when an
//! internal invariant breaks.

pub mod commands;
pub mod config;
pub mod dataset;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "stam", version, about = "Crowd anomaly detection from short-term trajectory histograms")]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true, value_name = "N")]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate flow for every training and test sequence into `<seq>/flow/`.
    Flow,
    /// Train the temporal model on the training sequences.
    Train,
    /// Detect anomalies in the test sequences; writes masks and scores.
    Detect,
    /// Score detections against ground truth; writes metrics and event reports.
    Eval,
    /// Rerun detection for several K and tabulate equal error rates.
    Sweep {
        /// Comma-separated K values; defaults to the config's `k_list`.
        #[arg(long, value_delimiter = ',')]
        k: Option<Vec<usize>>,
    },
    /// Generate a synthetic dataset from a scene spec.
    Synth {
        scene: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the canonical form of the configuration.
    Config,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_INTERNAL: i32 = 2;

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match commands::execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &anyhow::Error) -> i32 {
    let internal = e
        .chain()
        .any(|c| c.downcast_ref::<stam_core::Error>().is_some_and(stam_core::Error::is_internal));
    if internal {
        EXIT_INTERNAL
    } else {
        EXIT_INPUT
    }
}

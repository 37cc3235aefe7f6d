//! Command-line front end: scenario generation, every pipeline stage on its
//! own, training and evaluation of the detector, and full mission runs.
//!
//! Every command writes a deterministic report body, a timing table that is
//! kept apart from the body, and (with `--out`) a manifest from which
//! `replay` repeats the run and checks the artifact hashes.

pub mod args;
mod commands;
pub mod report;
pub mod settings;

use std::ffi::OsString;
use std::path::Path;

use clap::Parser;
use thiserror::Error;

pub use args::{Cli, Command};
use report::{ArtifactRecord, Manifest, MANIFEST_FILE, REPORT_FILE, TIMING_FILE};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] panelbot_core::Error),
    #[error("{0}")]
    Mismatch(String),
}

impl CliError {
    /// 2 for usage and configuration problems, 1 for pipeline failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_usage() => 2,
            _ => 1,
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage-error",
            CliError::Core(e) => e.label(),
            CliError::Mismatch(_) => "replay-mismatch",
        }
    }
}

/// Result of one command.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub report: String,
    pub timing: String,
    /// Extra files (name, contents) written next to the report.
    pub artifacts: Vec<(String, Vec<u8>)>,
    pub manifest: Option<Manifest>,
    /// Set by `replay` when an artifact hash differs.
    pub mismatch: bool,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        i32::from(self.mismatch)
    }
}

/// Runs a parsed command; writes the outputs when the command has `--out`.
pub fn run(command: &Command) -> Result<Outcome, CliError> {
    let outcome = match command {
        Command::Replay(a) => commands::replay(a)?,
        _ => commands::execute(command)?,
    };
    let out = match command {
        Command::Replay(a) => a.out.as_deref(),
        _ => command.common().and_then(|c| c.out.as_deref()),
    };
    if let Some(dir) = out {
        write_outputs(dir, &outcome)?;
    }
    Ok(outcome)
}

fn write_outputs(dir: &Path, o: &Outcome) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Usage(format!("{}: {e}", dir.display()));
    std::fs::create_dir_all(dir).map_err(io)?;
    std::fs::write(dir.join(REPORT_FILE), &o.report).map_err(io)?;
    std::fs::write(dir.join(TIMING_FILE), &o.timing).map_err(io)?;
    for (name, bytes) in &o.artifacts {
        std::fs::write(dir.join(name), bytes).map_err(io)?;
    }
    if let Some(m) = &o.manifest {
        std::fs::write(dir.join(MANIFEST_FILE), m.to_json()).map_err(io)?;
    }
    Ok(())
}

pub(crate) fn artifact_records(report: &str, artifacts: &[(String, Vec<u8>)]) -> Vec<ArtifactRecord> {
    let mut v = vec![ArtifactRecord { name: REPORT_FILE.into(), sha256: report::sha256_hex(report.as_bytes()) }];
    v.extend(artifacts.iter().map(|(n, b)| ArtifactRecord { name: n.clone(), sha256: report::sha256_hex(b) }));
    v
}

/// Whole program: parse, run, print, and map the outcome to an exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if cli.verbose {
        let _ = env_logger::Builder::new().filter_level(log::LevelFilter::Debug).try_init();
    }
    match run(&cli.command) {
        Ok(o) => {
            print!("{}", o.report);
            print!("\n{}", o.timing);
            o.exit_code()
        }
        Err(e) => {
            eprintln!("error: {}: {e}", e.label());
            e.exit_code()
        }
    }
}

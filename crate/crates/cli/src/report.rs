//! Report bodies, timing tables and the run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use panelbot_core::stats::Summary;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::args::Command;
use crate::settings::Settings;
use crate::CliError;

pub const REPORT_FILE: &str = "report.txt";
pub const TIMING_FILE: &str = "timing.txt";
pub const MANIFEST_FILE: &str = "manifest.json";

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    Ok(sha256_hex(&bytes))
}

/// Plain-text report: a header of `key value` lines, then free sections.
#[derive(Clone, Debug, Default)]
pub struct Report {
    text: String,
}

impl Report {
    pub fn new(command: &str, seed: u64) -> Report {
        let mut r = Report::default();
        r.field("command", command);
        r.field("seed", seed);
        r
    }

    pub fn field(&mut self, key: &str, value: impl std::fmt::Display) {
        let _ = writeln!(self.text, "{key:<22} {value}");
    }

    pub fn section(&mut self, title: &str) {
        let _ = writeln!(self.text, "\n[{title}]");
    }

    pub fn line(&mut self, line: impl AsRef<str>) {
        self.text.push_str(line.as_ref());
        self.text.push('\n');
    }

    pub fn push_block(&mut self, block: &str) {
        self.text.push_str(block);
        if !block.ends_with('\n') {
            self.text.push('\n');
        }
    }

    pub fn into_string(self) -> String {
        self.text
    }
}

/// Average, median, max and min columns.
pub fn stats_cols(s: &Summary, precision: usize) -> String {
    format!("{:>10.p$} {:>10.p$} {:>10.p$} {:>10.p$}", s.average, s.median, s.max, s.min, p = precision)
}

pub const STATS_COLS_HEADER: &str = "   Average     Median    Maximum    Minimum";

/// Row of the form `label  avg  median  max  min`.
pub fn stats_row(label: &str, s: &Summary, precision: usize) -> String {
    format!("{label:<14} {}", stats_cols(s, precision))
}

pub fn stats_header(label: &str) -> String {
    format!("{label:<14} {STATS_COLS_HEADER}")
}

/// Wall-clock table over the repetitions of one pipeline stage.
pub fn timing_text(stage: &str, seconds: &[f64]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:<28} {:>9} {:>9} {:>9} {:>9} {:>14}", "timing (s)", "Average", "Median", "Maximum", "Minimum", "Std. deviation");
    if let Some(t) = Summary::of(seconds) {
        let _ = writeln!(
            s,
            "{:<28} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>14.4}",
            format!("{stage} ({} runs)", t.count),
            t.average,
            t.median,
            t.max,
            t.min,
            t.std_dev
        );
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub name: String,
    pub sha256: String,
}

/// Everything needed to repeat a run: the command with its flags (output
/// directory excluded), input hashes, the effective parameters and the
/// hashes of what the run wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: Command,
    pub seed: u64,
    pub inputs: Vec<InputRecord>,
    pub parameters: Settings,
    pub artifacts: Vec<ArtifactRecord>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Manifest, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("manifest {}: {e}", path.display())))
    }
}

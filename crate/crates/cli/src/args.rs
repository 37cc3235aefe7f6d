use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Parser, Debug)]
#[command(name = "panelbot", version, about = "Panel-finding, wrench and valve pipelines on a synthetic arena")]
pub struct Cli {
    /// Log pipeline progress to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Flags shared by every pipeline command.
#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Common {
    /// Scenario document (TOML) written by gen-scenario.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Directory for the report, manifest and artifacts.
    #[arg(long)]
    #[serde(skip)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub reps: usize,
    /// Parameter override, e.g. `mission.slip_probability=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CascadeArgs {
    #[command(flatten)]
    pub common: Common,
    /// Trained cascade (JSON) written by train.
    #[arg(long)]
    pub cascade: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValveArgs {
    #[command(flatten)]
    pub common: Common,
    /// Stem angles to evaluate, degrees; defaults to the scenario's.
    #[arg(long, value_delimiter = ',')]
    pub angles: Vec<f64>,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Hard negative mining rounds after the first training.
    #[arg(long, default_value_t = 0)]
    pub mining_rounds: usize,
    /// Share of the dataset used for training.
    #[arg(long, default_value_t = 0.7)]
    pub train_fraction: f64,
}

#[derive(Args, Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// Manifest written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for the re-run outputs.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Generate a random arena and panel scene.
    GenScenario(Common),
    /// Scan from the start pose and rank panel candidates.
    FindPanel(Common),
    /// Dock in front of the panel and report d, o and alpha.
    Dock(Common),
    /// Run the cascade detector on inspection frames.
    Detect(CascadeArgs),
    /// Wrench grasp point, grip center, orientation and target selection.
    WrenchPose(CascadeArgs),
    /// Valve stem angle from stereo renders.
    ValvePose(ValveArgs),
    /// Train a cascade on a synthetic dataset.
    Train(TrainArgs),
    /// Score a cascade on a labeled probe set.
    Evaluate(CascadeArgs),
    /// Closed-loop missions.
    RunMission(CascadeArgs),
    /// Re-run a manifest and compare artifact hashes.
    Replay(ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenScenario(_) => "gen-scenario",
            Command::FindPanel(_) => "find-panel",
            Command::Dock(_) => "dock",
            Command::Detect(_) => "detect",
            Command::WrenchPose(_) => "wrench-pose",
            Command::ValvePose(_) => "valve-pose",
            Command::Train(_) => "train",
            Command::Evaluate(_) => "evaluate",
            Command::RunMission(_) => "run-mission",
            Command::Replay(_) => "replay",
        }
    }

    pub fn common(&self) -> Option<&Common> {
        match self {
            Command::GenScenario(c) | Command::FindPanel(c) | Command::Dock(c) => Some(c),
            Command::Detect(a) | Command::WrenchPose(a) | Command::Evaluate(a) | Command::RunMission(a) => Some(&a.common),
            Command::ValvePose(a) => Some(&a.common),
            Command::Train(a) => Some(&a.common),
            Command::Replay(_) => None,
        }
    }

    pub fn common_mut(&mut self) -> Option<&mut Common> {
        match self {
            Command::GenScenario(c) | Command::FindPanel(c) | Command::Dock(c) => Some(c),
            Command::Detect(a) | Command::WrenchPose(a) | Command::Evaluate(a) | Command::RunMission(a) => {
                Some(&mut a.common)
            }
            Command::ValvePose(a) => Some(&mut a.common),
            Command::Train(a) => Some(&mut a.common),
            Command::Replay(_) => None,
        }
    }

    pub fn cascade_path(&self) -> Option<&PathBuf> {
        match self {
            Command::Detect(a) | Command::WrenchPose(a) | Command::Evaluate(a) | Command::RunMission(a) => a.cascade.as_ref(),
            _ => None,
        }
    }
}

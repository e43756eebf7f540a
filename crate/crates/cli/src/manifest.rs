//! Run manifests and replay.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::commands::{self, CliError, EvalArgs, GenArgs, TrainArgs};

pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const RUN_SCHEMA: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub command: String,
    /// Fully resolved arguments of the command.
    pub config: serde_json::Value,
    pub seed: u64,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub tool_version: String,
    /// Seconds since the Unix epoch; the only field a replay does not reproduce.
    pub timestamp: u64,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64, inputs: Vec<PathBuf>, outputs: Vec<PathBuf>) -> Result<Self, CliError> {
        Ok(Self {
            schema_version: RUN_SCHEMA,
            command: command.to_string(),
            config: serde_json::to_value(config).map_err(CliError::json)?,
            seed,
            inputs,
            outputs,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let path = dir.join(RUN_MANIFEST);
        let text = serde_json::to_string_pretty(self).map_err(CliError::json)?;
        fs::write(&path, text).map_err(CliError::io(&path))
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(CliError::io(path))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| CliError::Format(format!("{}: {e}", path.display())))?;
        if m.schema_version != RUN_SCHEMA {
            return Err(CliError::Format(format!(
                "{}: run manifest schema {} is not supported",
                path.display(),
                m.schema_version
            )));
        }
        Ok(m)
    }
}

fn config<T: serde::de::DeserializeOwned>(m: &RunManifest) -> Result<T, CliError> {
    serde_json::from_value(m.config.clone()).map_err(|e| CliError::Format(format!("run manifest config: {e}")))
}

/// Re-runs the recorded command, overwriting its outputs (or writing to `out`).
pub fn replay(path: &Path, out: Option<PathBuf>) -> Result<(), CliError> {
    let m = RunManifest::read(path)?;
    match m.command.as_str() {
        "gen" => {
            let mut args: GenArgs = config(&m)?;
            args.out = out.unwrap_or(args.out);
            args.force = true;
            commands::gen(args)
        }
        "train" => {
            let mut args: TrainArgs = config(&m)?;
            args.out = out.unwrap_or(args.out);
            args.force = true;
            commands::train(args)
        }
        "eval" => {
            let mut args: EvalArgs = config(&m)?;
            args.out = out.unwrap_or(args.out);
            args.force = true;
            commands::eval(args)
        }
        other => Err(CliError::Format(format!("unknown command {other:?} in run manifest"))),
    }
}

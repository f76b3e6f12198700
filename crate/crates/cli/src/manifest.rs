use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use topomap::fileio::{sha256_hex, write_atomic};

use crate::commands::CliError;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(topomap::Error::from)?;
        Ok(Self {
            path: path.to_path_buf(),
            sha256: sha256_hex(&bytes),
        })
    }
}

/// Record of one command invocation, enough to re-run it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_clock_seconds: f64,
}

pub struct Recorder {
    command: &'static str,
    config: serde_json::Value,
    started: Instant,
    inputs: Vec<Artifact>,
}

impl Recorder {
    pub fn start(command: &'static str, config: &impl Serialize) -> Result<Self, CliError> {
        Ok(Self {
            command,
            config: serde_json::to_value(config).map_err(topomap::Error::from)?,
            started: Instant::now(),
            inputs: Vec::new(),
        })
    }

    pub fn input(&mut self, path: &Path) -> Result<(), CliError> {
        self.inputs.push(Artifact::of(path)?);
        Ok(())
    }

    /// Extra resolved settings not visible in the flags.
    pub fn resolve(&mut self, key: &str, value: impl Serialize) -> Result<(), CliError> {
        let v = serde_json::to_value(value).map_err(topomap::Error::from)?;
        if let serde_json::Value::Object(map) = &mut self.config {
            map.insert(key.to_string(), v);
        }
        Ok(())
    }

    /// Hashes `outputs` and writes the manifest to `at`.
    pub fn finish(self, outputs: &[PathBuf], at: &Path) -> Result<RunManifest, CliError> {
        let manifest = RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command.to_string(),
            config: self.config,
            inputs: self.inputs,
            outputs: outputs.iter().map(|p| Artifact::of(p)).collect::<Result<_, _>>()?,
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(topomap::Error::from)?;
        write_atomic(at, &json)?;
        Ok(manifest)
    }
}

/// `<file>.run.json` next to a single output file.
pub fn beside(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".run.json");
    file.with_file_name(name)
}

pub const DIR_MANIFEST: &str = "run.json";

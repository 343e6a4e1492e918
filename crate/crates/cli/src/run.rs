use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use radiance_pose::Pose;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Value};

use crate::error::CliError;

/// Reads a JSON settings file, or the defaults when no file is given.
pub fn load_settings<S: DeserializeOwned + Default>(path: Option<&Path>) -> Result<S, CliError> {
    match path {
        None => Ok(S::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::load(p, e))?;
            serde_json::from_str(&text).map_err(|e| CliError::load(p, e))
        }
    }
}

pub fn read_pose(path: &Path) -> Result<Pose<f64>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::load(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::load(path, e))
}

pub fn to_json<V: Serialize>(value: &V) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

/// An output directory plus the bookkeeping for its `manifest.json`.
pub struct RunDir {
    pub dir: PathBuf,
    command: &'static str,
    seed: u64,
    threads: usize,
    config: Value,
    artifacts: Vec<String>,
    started: Instant,
}

impl RunDir {
    pub fn create(dir: &Path, command: &'static str, seed: u64, threads: usize, config: &impl Serialize) -> Result<Self, CliError> {
        fs::create_dir_all(dir).map_err(|e| CliError::load(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command,
            seed,
            threads,
            config: serde_json::to_value(config).expect("plain data serializes"),
            artifacts: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records `name` as an artifact that some other writer produced.
    pub fn record(&mut self, name: impl Into<String>) {
        self.artifacts.push(name.into());
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
        let path = self.path(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| CliError::load(parent, e))?;
        }
        fs::write(&path, contents).map_err(|e| CliError::Other(format!("writing {}: {e}", path.display())))?;
        self.record(name);
        Ok(())
    }

    pub fn finish(mut self, status: &str) -> Result<(), CliError> {
        let manifest = json!({
            "tool": env!("CARGO_PKG_NAME"),
            "version": env!("CARGO_PKG_VERSION"),
            "core_version": radiance_pose::VERSION,
            "command": self.command,
            "seed": self.seed,
            "threads": self.threads,
            "status": status,
            "config": self.config,
            "artifacts": self.artifacts,
            "wall_clock_s": self.started.elapsed().as_secs_f64(),
        });
        self.artifacts.clear();
        let path = self.path("manifest.json");
        fs::write(&path, to_json(&manifest)).map_err(|e| CliError::Other(format!("writing {}: {e}", path.display())))
    }
}

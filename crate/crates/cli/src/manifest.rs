//! Run manifests and checkpoints.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use gde_core::data::write_text;
use gde_core::{GdeError, ParamSet, Result};
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, Task};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NfeStats {
    pub scheme: String,
    pub total: usize,
    /// Field evaluations spent in each training epoch.
    pub per_epoch: Vec<usize>,
}

/// Everything needed to re-run and trace one command invocation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_path: Option<PathBuf>,
    /// The resolved configuration, defaults included.
    pub config: RunConfig,
    pub seeds: Vec<u64>,
    pub started_unix: u64,
    pub wall_clock_seconds: f64,
    pub nfe: Option<NfeStats>,
    pub metrics: serde_json::Value,
    pub checkpoints: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

pub struct Clock {
    started_unix: u64,
    start: Instant,
}

impl Clock {
    pub fn start() -> Self {
        Self {
            started_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_secs()),
            start: Instant::now(),
        }
    }
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, config: &RunConfig, seeds: Vec<u64>, clock: &Clock) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: config_path.map(Path::to_path_buf),
            config: config.clone(),
            seeds,
            started_unix: clock.started_unix,
            wall_clock_seconds: clock.start.elapsed().as_secs_f64(),
            nfe: None,
            metrics: serde_json::Value::Null,
            checkpoints: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub task: Task,
    pub model: String,
    pub seed: u64,
    pub params: serde_json::Value,
}

impl Checkpoint {
    pub fn new(task: Task, model: &str, seed: u64, params: &ParamSet) -> Result<Self> {
        Ok(Self {
            task,
            model: model.to_string(),
            seed,
            params: serde_json::from_str(&params.to_json()?)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_text(path, &serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GdeError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| GdeError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn params(&self) -> Result<ParamSet> {
        ParamSet::from_json(&self.params.to_string())
    }

    /// Errors unless the checkpoint was written for this task and model.
    pub fn check_matches(&self, task: Task, model: &str) -> Result<()> {
        if self.task != task || self.model != model {
            return Err(GdeError::Contract(format!(
                "checkpoint is for {:?}/{}, config asks for {:?}/{}",
                self.task, self.model, task, model
            )));
        }
        Ok(())
    }
}

//! Declarative run configuration, read from TOML.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use gde_core::eval::DEFAULT_HORIZONS;
use gde_core::particles::SimConfig;
use gde_core::tasks::forecast::{ForecastConfig, ForecastModelKind, SyntheticTrafficConfig};
use gde_core::tasks::node_class::{NodeClassConfig, NodeModelKind, SbmConfig};
use gde_core::tasks::particles::{ParticleModelKind, TrainConfig};
use gde_core::{GdeError, Result, SolverConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    NodeClass,
    Particles,
    Forecast,
}

/// A model resolved against its task.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelChoice {
    Node(NodeModelKind),
    Particle(ParticleModelKind),
    Forecast(ForecastModelKind),
}

impl ModelChoice {
    pub fn label(self) -> &'static str {
        match self {
            ModelChoice::Node(k) => k.label(),
            ModelChoice::Particle(k) => k.label(),
            ModelChoice::Forecast(k) => k.label(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory. Without it the data is generated: a rollout from
    /// `[sim]`, an SBM from `[sbm]`, or synthetic traffic from `[traffic]`.
    pub path: Option<PathBuf>,
    /// Bernoulli keep probability applied to forecasting sequences.
    pub keep_prob: f64,
    /// Leading fraction of a forecasting sequence used for training.
    pub train_fraction: f64,
    /// Seed for generated forecasting data and undersampling.
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            keep_prob: 1.0,
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub task: Option<Task>,
    pub model: Option<String>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_horizons")]
    pub horizons: Vec<usize>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub particles: TrainConfig,
    #[serde(default)]
    pub node_class: NodeClassConfig,
    #[serde(default)]
    pub sbm: SbmConfig,
    #[serde(default)]
    pub forecast: ForecastConfig,
    #[serde(default)]
    pub traffic: SyntheticTrafficConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

fn default_horizons() -> Vec<usize> {
    DEFAULT_HORIZONS.to_vec()
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: None,
            model: None,
            seeds: default_seeds(),
            horizons: default_horizons(),
            out: None,
            data: DataConfig::default(),
            sim: SimConfig::default(),
            solver: SolverConfig::default(),
            particles: TrainConfig::default(),
            node_class: NodeClassConfig::default(),
            sbm: SbmConfig::default(),
            forecast: ForecastConfig::default(),
            traffic: SyntheticTrafficConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| GdeError::Config(e.to_string()))
    }

    /// Reads `path`, resolving relative paths inside it against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| GdeError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut Option<PathBuf>| {
            if let Some(rel) = p.as_ref().filter(|p| p.is_relative()) {
                *p = Some(base.join(rel));
            }
        };
        resolve(&mut cfg.data.path);
        resolve(&mut cfg.out);
        Ok(cfg)
    }

    pub fn task(&self) -> Result<Task> {
        self.task.ok_or_else(|| GdeError::Config("missing 'task'".into()))
    }

    pub fn model_choice(&self) -> Result<ModelChoice> {
        let task = self.task()?;
        let name = self
            .model
            .as_deref()
            .ok_or_else(|| GdeError::Config("missing 'model'".into()))?;
        Ok(match task {
            Task::NodeClass => ModelChoice::Node(NodeModelKind::from_str(name)?),
            Task::Particles => ModelChoice::Particle(ParticleModelKind::from_str(name)?),
            Task::Forecast => ModelChoice::Forecast(ForecastModelKind::from_str(name)?),
        })
    }

    /// Checks that the task, model and numeric settings are consistent and
    /// that the dataset path exists.
    pub fn validate_run(&self) -> Result<ModelChoice> {
        let choice = self.model_choice()?;
        if self.seeds.is_empty() {
            return Err(GdeError::Config("'seeds' is empty".into()));
        }
        if self.horizons.contains(&0) {
            return Err(GdeError::Config("horizons must be at least 1".into()));
        }
        if !(self.data.keep_prob > 0.0 && self.data.keep_prob <= 1.0) {
            return Err(GdeError::Config(format!("data.keep_prob must lie in (0, 1], got {}", self.data.keep_prob)));
        }
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            return Err(GdeError::Config(format!(
                "data.train_fraction must lie in (0, 1), got {}",
                self.data.train_fraction
            )));
        }
        if let ModelChoice::Particle(_) = choice {
            self.sim.validate()?;
            self.solver.clone().on_interval(0.0, self.sim.dt).validate()?;
        }
        if let Some(p) = &self.data.path {
            if !p.is_dir() {
                return Err(GdeError::io(
                    p,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
                ));
            }
        }
        Ok(choice)
    }

    pub fn out_dir(&self, flag: Option<&Path>) -> Result<PathBuf> {
        flag.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .ok_or_else(|| GdeError::Config("no output directory: pass --out or set 'out'".into()))
    }
}

/// `3`, `0,2,5`, or an inclusive range `0..9`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || GdeError::Config(format!("invalid seed list '{s}'"));
    if let Some((a, b)) = s.split_once("..") {
        let a: u64 = a.trim().parse().map_err(|_| bad())?;
        let b: u64 = b.trim().trim_start_matches('=').parse().map_err(|_| bad())?;
        if b < a {
            return Err(bad());
        }
        return Ok((a..=b).collect());
    }
    s.split(',')
        .map(|x| x.trim().parse().map_err(|_| bad()))
        .collect()
}

pub fn parse_horizons(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse()
                .ok()
                .filter(|&h: &usize| h > 0)
                .ok_or_else(|| GdeError::Config(format!("invalid horizon '{x}'")))
        })
        .collect()
}

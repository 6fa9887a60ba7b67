//! One-step forecasting on graph sequences with GRU, GCGRU and GCDE-GRU.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{with_delta_feature, with_time_features, TemporalDataset};
use crate::error::{GdeError, Result};
use crate::graph::{Graph, GraphSequence};
use crate::hybrid::{forecast_counted, Forecaster, HybridForecaster, HybridModel, HybridSpec};
use crate::metrics::{mape, mape_abs, mse, rmse};
use crate::odeint::{Scheme, SolverConfig};
use crate::optim::{Adam, LrSchedule};
use crate::params::{Ctx, ParamSet};
use crate::tasks::minibatches;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForecastModelKind {
    Gru,
    Gcgru,
    GcdeGru,
}

impl ForecastModelKind {
    pub fn label(self) -> &'static str {
        match self {
            ForecastModelKind::Gru => "gru",
            ForecastModelKind::Gcgru => "gcgru",
            ForecastModelKind::GcdeGru => "gcde-gru",
        }
    }

    /// Discrete baselines see the gap to the previous sample as an extra input.
    pub fn uses_delta_feature(self) -> bool {
        !matches!(self, ForecastModelKind::GcdeGru)
    }
}

impl FromStr for ForecastModelKind {
    type Err = GdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gru" => Ok(Self::Gru),
            "gcgru" => Ok(Self::Gcgru),
            "gcde-gru" => Ok(Self::GcdeGru),
            other => Err(GdeError::Config(format!("unknown forecasting model '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecastConfig {
    /// Input graphs per prediction.
    pub window: usize,
    pub gcgru_hidden: usize,
    pub gru_hidden: usize,
    pub head_hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub schedule: LrSchedule,
    /// Period of the sine-encoded time channels.
    pub time_period: f64,
    /// Flow time per unit of timestamp difference.
    pub time_scale: f64,
    pub flow_steps: usize,
}

impl Default for ForecastConfig {
    fn default() -> Self {
        Self {
            window: 5,
            gcgru_hidden: 46,
            gru_hidden: 50,
            head_hidden: 46,
            epochs: 40,
            batch_size: 32,
            lr: 0.01,
            schedule: LrSchedule::Cosine { t0: 10 },
            time_period: 288.0,
            time_scale: 1.0,
            flow_steps: 1,
        }
    }
}

/// Input features a model of `kind` consumes: observations, the two time
/// channels, and the gap channel for the discrete baselines.
pub fn prepare_inputs(ds: &TemporalDataset, kind: ForecastModelKind, cfg: &ForecastConfig) -> Result<TemporalDataset> {
    let timed = with_time_features(ds, cfg.time_period)?;
    if kind.uses_delta_feature() {
        with_delta_feature(&timed)
    } else {
        Ok(timed)
    }
}

pub fn build_model(
    kind: ForecastModelKind,
    nodes: usize,
    input_dim: usize,
    target_channels: usize,
    cfg: &ForecastConfig,
    seed: u64,
) -> (HybridModel, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let spec = HybridSpec {
        nodes,
        input_dim,
        hidden_dim: if kind == ForecastModelKind::Gru {
            cfg.gru_hidden
        } else {
            cfg.gcgru_hidden
        },
        head_hidden: cfg.head_hidden,
        output_dim: target_channels,
        with_flow: kind == ForecastModelKind::GcdeGru,
        flatten: kind == ForecastModelKind::Gru,
    };
    let mut model = HybridModel::new(&mut params, &spec, SolverConfig::fixed(Scheme::Rk4, cfg.flow_steps.max(1)), &mut rng);
    model.time_scale = cfg.time_scale;
    (model, params)
}

/// Windows ending at `k` paired with the observation at `k + 1`.
pub fn sample_indices(len: usize, window: usize) -> Vec<usize> {
    if len <= window {
        return Vec::new();
    }
    (window - 1..len - 1).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ForecastEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub nfe: usize,
}

/// Minibatch Adam on one-step MSE over the target channels.
pub fn train_forecaster(
    model: &HybridModel,
    params: &mut ParamSet,
    ds: &TemporalDataset,
    cfg: &ForecastConfig,
    seed: u64,
) -> Result<Vec<ForecastEpoch>> {
    let samples = sample_indices(ds.seq.len(), cfg.window);
    if samples.is_empty() {
        return Err(GdeError::Contract(format!(
            "sequence of length {} is too short for window {}",
            ds.seq.len(),
            cfg.window
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf0ca);
    let mut adam = Adam::new(params, cfg.lr, 0.0);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        adam.lr = cfg.schedule.lr(cfg.lr, epoch);
        let (mut total, mut nfe) = (0.0, 0);
        for batch in minibatches(samples.len(), cfg.batch_size, &mut rng) {
            let tape = Tape::new();
            let ctx = Ctx::train(&tape, params, None);
            let mut loss = None;
            for &b in &batch {
                let k = samples[b];
                let window = ds.seq.slice(k + 1 - cfg.window, k + 1);
                let (pred, used) =
                    forecast_counted(&ctx, model, &window, ds.seq.timestamps[k + 1], &ds.seq.graphs[k + 1])?;
                nfe += used;
                let l = mse(pred, &ds.targets(k + 1))?;
                loss = Some(match loss {
                    None => l,
                    Some(acc) => l.add(&acc)?,
                });
            }
            let loss = loss.expect("non-empty batch").scale(1.0 / batch.len() as f64);
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(GdeError::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            adam.step(params, &ctx.param_grads(&grads))?;
            total += value * batch.len() as f64;
        }
        log.push(ForecastEpoch {
            epoch,
            loss: total / samples.len() as f64,
            lr: adam.lr,
            nfe,
        });
    }
    Ok(log)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForecastMetrics {
    pub mape: f64,
    pub mape_abs: f64,
    pub rmse: f64,
    pub predictions: usize,
}

/// Teacher-forced one-step predictions `(k, t_k, target, prediction)` for every window.
pub fn predict_all<F: Forecaster + ?Sized>(model: &F, ds: &TemporalDataset) -> Result<Vec<(usize, f64, Tensor, Tensor)>> {
    let w = model.window();
    sample_indices(ds.seq.len(), w)
        .into_iter()
        .map(|k| {
            let window = ds.seq.slice(k + 1 - w, k + 1);
            let pred = model.predict(&window, ds.seq.timestamps[k + 1], &ds.seq.graphs[k + 1])?;
            Ok((k + 1, ds.seq.timestamps[k + 1], ds.targets(k + 1), pred))
        })
        .collect()
}

pub fn eval_forecast<F: Forecaster + ?Sized>(model: &F, ds: &TemporalDataset) -> Result<ForecastMetrics> {
    let rows = predict_all(model, ds)?;
    let targets: Vec<Tensor> = rows.iter().map(|r| r.2.clone()).collect();
    let preds: Vec<Tensor> = rows.iter().map(|r| r.3.clone()).collect();
    Ok(ForecastMetrics {
        mape: mape(&targets, &preds)?,
        mape_abs: mape_abs(&targets, &preds)?,
        rmse: rmse(&targets, &preds)?,
        predictions: rows.len(),
    })
}

pub fn bind<'a>(model: &'a HybridModel, params: &'a ParamSet, cfg: &ForecastConfig, target_channels: usize) -> HybridForecaster<'a> {
    HybridForecaster {
        model,
        params,
        window: cfg.window,
        target_channels,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTrafficConfig {
    pub nodes: usize,
    pub steps: usize,
    /// Samples per period of the daily pattern.
    pub period: f64,
    pub noise: f64,
}

impl Default for SyntheticTrafficConfig {
    fn default() -> Self {
        Self {
            nodes: 12,
            steps: 400,
            period: 288.0,
            noise: 0.02,
        }
    }
}

/// Positive, periodic node signals on a ring with chords: each node
/// follows a phase-shifted daily profile that diffuses along the graph.
pub fn synthetic_traffic(cfg: &SyntheticTrafficConfig, seed: u64) -> Result<TemporalDataset> {
    let n = cfg.nodes;
    if n < 3 || cfg.steps < 2 {
        return Err(GdeError::Config("synthetic traffic needs at least 3 nodes and 2 steps".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..n / 3 {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        if a != b {
            edges.push((a, b));
        }
    }
    let graph = Graph::undirected(n, edges)?;
    let op = graph.normalize()?.into_op();
    let phase: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| GdeError::Config(format!("noise: {e}")))?;
    let mut x = Tensor::from_fn(n, 1, |i, _| 1.0 + 0.5 * phase[i].sin());
    let mut features = Vec::with_capacity(cfg.steps);
    for k in 0..cfg.steps {
        let t = k as f64;
        let drive = Tensor::from_fn(n, 1, |i, _| 1.0 + 0.5 * (2.0 * PI * t / cfg.period + phase[i]).sin());
        let mixed = op.apply(&x)?;
        x = Tensor::from_fn(n, 1, |i, _| {
            (0.6 * mixed.get(i, 0) + 0.4 * drive.get(i, 0) + normal.sample(&mut rng)).max(0.05)
        });
        features.push(x.clone());
    }
    Ok(TemporalDataset {
        seq: GraphSequence::new((0..cfg.steps).map(|k| k as f64).collect(), vec![graph; cfg.steps], features)?,
        target_channels: 1,
    })
}

/// Splits a sequence into a leading training part and the remainder.
pub fn split(ds: &TemporalDataset, train_fraction: f64) -> (TemporalDataset, TemporalDataset) {
    let cut = ((ds.seq.len() as f64 * train_fraction).round() as usize).clamp(1, ds.seq.len().saturating_sub(1).max(1));
    let part = |a: usize, b: usize| TemporalDataset {
        seq: ds.seq.slice(a, b),
        target_channels: ds.target_channels,
    };
    (part(0, cut), part(cut, ds.seq.len()))
}

//! Evaluation protocols and result reports.

use serde::{Deserialize, Serialize};

use crate::error::{GdeError, Result};
use crate::graph::Graph;
use crate::metrics::{mape, mape_abs, rmse};
use crate::tensor::Tensor;

/// Extrapolation horizons reported for the particle task.
pub const DEFAULT_HORIZONS: [usize; 7] = [1, 3, 5, 10, 15, 20, 50];

/// Batched one-step model: predicts the state following each `(state, graph)`.
pub trait StepPredictor {
    fn predict_batch(&self, states: &[Tensor], graphs: &[&Graph]) -> Result<Vec<Tensor>>;
}

/// Returns the nominal next state. Useful as an oracle.
pub struct Oracle<'a> {
    pub trajectory: &'a [Tensor],
}

impl StepPredictor for Oracle<'_> {
    fn predict_batch(&self, states: &[Tensor], _graphs: &[&Graph]) -> Result<Vec<Tensor>> {
        states
            .iter()
            .map(|s| {
                let k = self
                    .trajectory
                    .iter()
                    .position(|t| t == s)
                    .ok_or_else(|| GdeError::Contract("oracle queried off its trajectory".into()))?;
                self.trajectory
                    .get(k + 1)
                    .cloned()
                    .ok_or_else(|| GdeError::Contract("oracle queried past the end".into()))
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon: usize,
    pub windows: usize,
    pub predictions: usize,
    /// Relative-error formula with signed errors summed inside the norm,
    /// evaluated per reset window and averaged over windows.
    pub mape_window: f64,
    /// Same formula over all predictions of all windows at once.
    pub mape_concat: f64,
    /// Mean absolute relative error over all predictions.
    pub mape_abs: f64,
    pub rmse: f64,
}

/// Runs `h` self-fed predictions from every nominal state `0, h, 2h, …`,
/// then resets to the nominal trajectory, until the trajectory ends. The
/// last window is shorter when `h` does not divide the length.
///
/// Step `j` of a window starting at `k` uses the nominal graph `graphs[k + j − 1]`.
pub fn eval_extrapolation<P: StepPredictor + ?Sized>(
    model: &P,
    states: &[Tensor],
    graphs: &[Graph],
    horizons: &[usize],
) -> Result<Vec<HorizonMetrics>> {
    if states.len() < 2 || graphs.len() != states.len() {
        return Err(GdeError::Contract(format!(
            "extrapolation needs at least 2 states with one graph each, got {} states and {} graphs",
            states.len(),
            graphs.len()
        )));
    }
    let mut sorted = horizons.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let last = states.len() - 1;
    let mut out = Vec::with_capacity(sorted.len());
    for &h in &sorted {
        if h == 0 {
            return Err(GdeError::Contract("horizon must be at least 1".into()));
        }
        let starts: Vec<usize> = (0..last).step_by(h).collect();
        let mut current: Vec<Tensor> = starts.iter().map(|&k| states[k].clone()).collect();
        let mut preds: Vec<Vec<Tensor>> = vec![Vec::new(); starts.len()];
        for j in 1..=h {
            let active: Vec<usize> = (0..starts.len()).filter(|&w| starts[w] + j <= last).collect();
            if active.is_empty() {
                break;
            }
            let inputs: Vec<Tensor> = active.iter().map(|&w| current[w].clone()).collect();
            let gs: Vec<&Graph> = active.iter().map(|&w| &graphs[starts[w] + j - 1]).collect();
            let next = model.predict_batch(&inputs, &gs)?;
            for (&w, y) in active.iter().zip(next) {
                current[w] = y.clone();
                preds[w].push(y);
            }
        }
        let mut all_t = Vec::new();
        let mut all_p = Vec::new();
        let mut window_sum = 0.0;
        for (w, p) in preds.iter().enumerate() {
            let targets: Vec<Tensor> = (1..=p.len()).map(|j| states[starts[w] + j].clone()).collect();
            window_sum += mape(&targets, p)?;
            all_t.extend(targets);
            all_p.extend(p.iter().cloned());
        }
        out.push(HorizonMetrics {
            horizon: h,
            windows: starts.len(),
            predictions: all_p.len(),
            mape_window: window_sum / starts.len() as f64,
            mape_concat: mape(&all_t, &all_p)?,
            mape_abs: mape_abs(&all_t, &all_p)?,
            rmse: rmse(&all_t, &all_p)?,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub seed: u64,
    pub horizon: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub model: String,
    pub horizon: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub seeds: usize,
}

/// Per-seed metric rows with mean/std aggregates across seeds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn push(&mut self, model: &str, seed: u64, horizon: usize, metric: &str, value: f64) {
        self.rows.push(ReportRow {
            model: model.to_string(),
            seed,
            horizon,
            metric: metric.to_string(),
            value,
        });
    }

    pub fn push_horizons(&mut self, model: &str, seed: u64, metrics: &[HorizonMetrics]) {
        for m in metrics {
            self.push(model, seed, m.horizon, "mape", m.mape_window);
            self.push(model, seed, m.horizon, "mape_concat", m.mape_concat);
            self.push(model, seed, m.horizon, "mape_abs", m.mape_abs);
            self.push(model, seed, m.horizon, "rmse", m.rmse);
        }
    }

    /// Mean and sample standard deviation per `(model, horizon, metric)`,
    /// in first-appearance order of models and ascending horizons.
    pub fn aggregate(&self) -> Vec<AggregateRow> {
        let mut keys: Vec<(String, usize, String)> = Vec::new();
        for r in &self.rows {
            let key = (r.model.clone(), r.horizon, r.metric.clone());
            if !keys.contains(&key) {
                keys.push(key);
            }
        }
        let model_order: Vec<String> = keys.iter().fold(Vec::new(), |mut acc, k| {
            if !acc.contains(&k.0) {
                acc.push(k.0.clone());
            }
            acc
        });
        keys.sort_by_key(|k| (model_order.iter().position(|m| *m == k.0), k.1));
        keys.into_iter()
            .map(|(model, horizon, metric)| {
                let vals: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.model == model && r.horizon == horizon && r.metric == metric)
                    .map(|r| r.value)
                    .collect();
                let (mean, std) = mean_std(&vals);
                AggregateRow {
                    model,
                    horizon,
                    metric,
                    mean,
                    std,
                    seeds: vals.len(),
                }
            })
            .collect()
    }

    pub fn mean(&self, model: &str, horizon: usize, metric: &str) -> Option<f64> {
        self.aggregate()
            .into_iter()
            .find(|a| a.model == model && a.horizon == horizon && a.metric == metric)
            .map(|a| a.mean)
    }

    /// Per-seed rows followed by aggregate rows (`seed` column `mean`/`std`).
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| GdeError::Contract(format!("csv: {e}"));
        w.write_record(["model", "seed", "horizon", "metric", "value"]).map_err(io)?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.seed.to_string(),
                r.horizon.to_string(),
                r.metric.clone(),
                format!("{:?}", r.value),
            ])
            .map_err(io)?;
        }
        for a in self.aggregate() {
            for (tag, v) in [("mean", a.mean), ("std", a.std)] {
                w.write_record([
                    a.model.clone(),
                    tag.to_string(),
                    a.horizon.to_string(),
                    a.metric.clone(),
                    format!("{v:?}"),
                ])
                .map_err(io)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| GdeError::Contract(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            rows: &'a [ReportRow],
            aggregate: Vec<AggregateRow>,
        }
        Ok(serde_json::to_string_pretty(&Out {
            rows: &self.rows,
            aggregate: self.aggregate(),
        })?)
    }

    /// Markdown table of the aggregate mean ± std for one metric, horizons as columns.
    pub fn table(&self, metric: &str) -> String {
        let agg: Vec<AggregateRow> = self.aggregate().into_iter().filter(|a| a.metric == metric).collect();
        let mut horizons: Vec<usize> = agg.iter().map(|a| a.horizon).collect();
        horizons.sort_unstable();
        horizons.dedup();
        let mut models: Vec<&str> = Vec::new();
        for a in &agg {
            if !models.contains(&a.model.as_str()) {
                models.push(&a.model);
            }
        }
        let mut s = format!("| model | {} |\n", horizons.iter().map(|h| format!("{metric}_{h}")).collect::<Vec<_>>().join(" | "));
        s.push_str(&format!("|---|{}\n", "---|".repeat(horizons.len())));
        for m in models {
            let cells: Vec<String> = horizons
                .iter()
                .map(|h| {
                    agg.iter()
                        .find(|a| a.model == m && a.horizon == *h)
                        .map_or_else(|| "-".into(), |a| format!("{:.2} ± {:.2}", a.mean, a.std))
                })
                .collect();
            s.push_str(&format!("| {m} | {} |\n", cells.join(" | ")));
        }
        s
    }
}

pub fn mean_std(vals: &[f64]) -> (f64, f64) {
    if vals.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let std = if vals.len() > 1 {
        (vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

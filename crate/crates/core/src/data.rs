//! Dataset files, sequence transforms, and rollout serialization.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so every
//! save/load cycle reproduces values bit-exactly.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdeError, Result};
use crate::graph::{Graph, GraphSequence};
use crate::particles::{ParticleState, Rollout, SimConfig};
use crate::tensor::Tensor;

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| GdeError::io(path, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| GdeError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| GdeError::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> GdeError {
    GdeError::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

/// Non-empty, non-comment lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn fmt_row(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

/// Comma-separated matrix without a header.
pub fn parse_matrix(text: &str, path: &Path) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, l) in content_lines(text) {
        let row = l
            .split(',')
            .map(|f| {
                let f = f.trim();
                f.parse::<f64>()
                    .map_err(|_| parse_err(path, line, format!("'{f}' is not a number")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(parse_err(
                    path,
                    line,
                    format!("expected {} columns, found {}", first.len(), row.len()),
                ));
            }
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(parse_err(path, line, "non-finite value"));
        }
        rows.push(row);
    }
    let cols = rows.first().map_or(0, Vec::len);
    Tensor::new(rows.len(), cols, rows.concat())
}

pub fn format_matrix(t: &Tensor) -> String {
    let mut s = String::new();
    for i in 0..t.rows {
        s.push_str(&fmt_row(t.row(i)));
        s.push('\n');
    }
    s
}

pub fn read_matrix(path: &Path) -> Result<Tensor> {
    parse_matrix(&read(path)?, path)
}

pub fn write_matrix(path: &Path, t: &Tensor) -> Result<()> {
    write(path, &format_matrix(t))
}

/// Node classification data on a fixed graph.
#[derive(Clone, Debug, PartialEq)]
pub struct StaticDataset {
    pub graph: Graph,
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<bool>,
    pub val: Vec<bool>,
    pub test: Vec<bool>,
}

impl StaticDataset {
    pub fn n(&self) -> usize {
        self.features.rows
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n();
        let counts = [
            ("graph", self.graph.n()),
            ("labels", self.labels.len()),
            ("train mask", self.train.len()),
            ("val mask", self.val.len()),
            ("test mask", self.test.len()),
        ];
        for (what, c) in counts {
            if c != n {
                return Err(GdeError::Contract(format!("{n} feature rows but {c} {what} entries")));
            }
        }
        if let Some((i, &l)) = self.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(GdeError::Contract(format!(
                "label {l} of node {i} outside [0, {})",
                self.num_classes
            )));
        }
        for i in 0..n {
            if u8::from(self.train[i]) + u8::from(self.val[i]) + u8::from(self.test[i]) > 1 {
                return Err(GdeError::Contract(format!("node {i} is in more than one split")));
            }
        }
        Ok(())
    }

    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
    }
}

pub struct StaticPaths {
    pub features: PathBuf,
    pub edges: PathBuf,
    pub labels: PathBuf,
    pub masks: PathBuf,
}

impl StaticPaths {
    /// `features.csv`, `edges.txt`, `labels.csv`, `masks.csv` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            features: dir.join("features.csv"),
            edges: dir.join("edges.txt"),
            labels: dir.join("labels.csv"),
            masks: dir.join("masks.csv"),
        }
    }
}

pub fn load_static(paths: &StaticPaths) -> Result<StaticDataset> {
    let features = read_matrix(&paths.features)?;
    let n = features.rows;

    let label_text = read(&paths.labels)?;
    let mut labels = Vec::new();
    for (line, l) in content_lines(&label_text) {
        labels.push(
            l.parse::<usize>()
                .map_err(|_| parse_err(&paths.labels, line, format!("'{l}' is not a class index")))?,
        );
    }
    if labels.len() != n {
        return Err(parse_err(
            &paths.labels,
            0,
            format!("{} labels but {} feature rows in {}", labels.len(), n, paths.features.display()),
        ));
    }

    let mask_text = read(&paths.masks)?;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for (line, l) in content_lines(&mask_text) {
        let bits = l
            .split(',')
            .map(|f| match f.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(parse_err(&paths.masks, line, format!("mask entry '{other}' is not 0 or 1"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        if bits.len() != 3 {
            return Err(parse_err(&paths.masks, line, format!("expected 3 columns, found {}", bits.len())));
        }
        if bits.iter().filter(|&&b| b).count() > 1 {
            return Err(parse_err(&paths.masks, line, "node assigned to more than one split"));
        }
        train.push(bits[0]);
        val.push(bits[1]);
        test.push(bits[2]);
    }
    if train.len() != n {
        return Err(parse_err(
            &paths.masks,
            0,
            format!("{} mask rows but {} feature rows", train.len(), n),
        ));
    }

    let graph = Graph::parse_edge_list(&read(&paths.edges)?, n, false, &paths.edges)?;
    let num_classes = labels.iter().max().map_or(0, |m| m + 1);
    let ds = StaticDataset {
        graph,
        features,
        labels,
        num_classes,
        train,
        val,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_static(ds: &StaticDataset, paths: &StaticPaths) -> Result<()> {
    write_matrix(&paths.features, &ds.features)?;
    write(&paths.edges, &ds.graph.to_edge_list())?;
    let labels: String = ds.labels.iter().map(|l| format!("{l}\n")).collect();
    write(&paths.labels, &labels)?;
    let masks: String = (0..ds.n())
        .map(|i| {
            format!(
                "{},{},{}\n",
                u8::from(ds.train[i]),
                u8::from(ds.val[i]),
                u8::from(ds.test[i])
            )
        })
        .collect();
    write(&paths.masks, &masks)
}

/// Spatio-temporal data: leading `target_channels` feature columns are
/// observations to predict, the remaining columns are exogenous inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TemporalDataset {
    pub seq: GraphSequence,
    pub target_channels: usize,
}

impl TemporalDataset {
    pub fn targets(&self, k: usize) -> Tensor {
        self.seq.features[k].slice_cols(0, self.target_channels)
    }
}

#[derive(Serialize, Deserialize)]
struct SequenceMeta {
    timestamps: Vec<f64>,
    nodes: usize,
    target_channels: usize,
    directed: bool,
}

/// Writes `meta.json`, `t_<k>.csv` and `edges_<k>.txt` into `dir`.
pub fn save_sequence(ds: &TemporalDataset, dir: &Path) -> Result<()> {
    let seq = &ds.seq;
    let meta = SequenceMeta {
        timestamps: seq.timestamps.clone(),
        nodes: seq.graphs.first().map_or(0, Graph::n),
        target_channels: ds.target_channels,
        directed: seq.graphs.first().is_some_and(Graph::is_directed),
    };
    write(&dir.join("meta.json"), &serde_json::to_string_pretty(&meta)?)?;
    for k in 0..seq.len() {
        write_matrix(&dir.join(format!("t_{k}.csv")), &seq.features[k])?;
        write(&dir.join(format!("edges_{k}.txt")), &seq.graphs[k].to_edge_list())?;
    }
    Ok(())
}

pub fn load_sequence(dir: &Path) -> Result<TemporalDataset> {
    let meta_path = dir.join("meta.json");
    let meta: SequenceMeta = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| parse_err(&meta_path, e.line(), e.to_string()))?;
    let mut graphs = Vec::with_capacity(meta.timestamps.len());
    let mut features = Vec::with_capacity(meta.timestamps.len());
    for k in 0..meta.timestamps.len() {
        let fp = dir.join(format!("t_{k}.csv"));
        let x = read_matrix(&fp)?;
        if x.rows != meta.nodes {
            return Err(parse_err(&fp, 0, format!("{} rows but meta.json declares {} nodes", x.rows, meta.nodes)));
        }
        if x.cols < meta.target_channels {
            return Err(parse_err(
                &fp,
                0,
                format!("{} columns but {} target channels", x.cols, meta.target_channels),
            ));
        }
        let ep = dir.join(format!("edges_{k}.txt"));
        graphs.push(Graph::parse_edge_list(&read(&ep)?, meta.nodes, meta.directed, &ep)?);
        features.push(x);
    }
    Ok(TemporalDataset {
        seq: GraphSequence::new(meta.timestamps, graphs, features)?,
        target_channels: meta.target_channels,
    })
}

/// Keeps each timestep independently with probability `keep_prob`; the first
/// timestep is always kept and survivors keep their original timestamps.
pub fn undersample(ds: &TemporalDataset, keep_prob: f64, seed: u64) -> Result<TemporalDataset> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(GdeError::Config(format!("keep probability must lie in (0, 1], got {keep_prob}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let keep: Vec<usize> = (0..ds.seq.len())
        .filter(|&k| k == 0 || keep_prob >= 1.0 || rng.random::<f64>() < keep_prob)
        .collect();
    if keep.is_empty() {
        return Err(GdeError::Contract("undersampling removed every timestep".into()));
    }
    let seq = GraphSequence::new(
        keep.iter().map(|&k| ds.seq.timestamps[k]).collect(),
        keep.iter().map(|&k| ds.seq.graphs[k].clone()).collect(),
        keep.iter().map(|&k| ds.seq.features[k].clone()).collect(),
    )?;
    Ok(TemporalDataset {
        seq,
        target_channels: ds.target_channels,
    })
}

/// `(sin(2πt/period), cos(2πt/period))` per timestamp.
pub fn sine_time_features(timestamps: &[f64], period: f64) -> Result<Vec<[f64; 2]>> {
    if !(period > 0.0) {
        return Err(GdeError::Config(format!("time-feature period must be positive, got {period}")));
    }
    Ok(timestamps
        .iter()
        .map(|t| {
            let phase = 2.0 * PI * t / period;
            [phase.sin(), phase.cos()]
        })
        .collect())
}

fn append_columns(seq: &GraphSequence, extra: impl Fn(usize) -> Vec<f64>) -> Result<GraphSequence> {
    let features = seq
        .features
        .iter()
        .enumerate()
        .map(|(k, x)| {
            let e = extra(k);
            let cols = Tensor::from_fn(x.rows, e.len(), |_, j| e[j]);
            Tensor::concat_cols(&[x, &cols])
        })
        .collect::<Result<Vec<_>>>()?;
    GraphSequence::new(seq.timestamps.clone(), seq.graphs.clone(), features)
}

/// Appends the two sine-encoded time channels to every node.
pub fn with_time_features(ds: &TemporalDataset, period: f64) -> Result<TemporalDataset> {
    let tf = sine_time_features(&ds.seq.timestamps, period)?;
    Ok(TemporalDataset {
        seq: append_columns(&ds.seq, |k| tf[k].to_vec())?,
        target_channels: ds.target_channels,
    })
}

/// Appends the gap to the previous sample (zero for the first).
pub fn with_delta_feature(ds: &TemporalDataset) -> Result<TemporalDataset> {
    let ts = &ds.seq.timestamps;
    Ok(TemporalDataset {
        seq: append_columns(&ds.seq, |k| vec![if k == 0 { 0.0 } else { ts[k] - ts[k - 1] }])?,
        target_channels: ds.target_channels,
    })
}

/// Gaps between consecutive timestamps.
pub fn timestamp_gaps(timestamps: &[f64]) -> Vec<f64> {
    timestamps.windows(2).map(|w| w[1] - w[0]).collect()
}

#[derive(Serialize, Deserialize)]
struct RolloutMeta {
    sim: SimConfig,
    states: usize,
}

pub struct RolloutPaths {
    pub states: PathBuf,
    pub edges: PathBuf,
    pub meta: PathBuf,
}

impl RolloutPaths {
    /// `rollout.csv`, `edges.csv`, `rollout.json` inside `dir`.
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            states: dir.join("rollout.csv"),
            edges: dir.join("edges.csv"),
            meta: dir.join("rollout.json"),
        }
    }
}

/// States as `step,t,particle,x1,x2,v1,v2`, edges as `step,i,j`, and a JSON
/// sidecar echoing the simulation parameters and seed.
pub fn save_rollout(rollout: &Rollout, cfg: &SimConfig, paths: &RolloutPaths) -> Result<()> {
    let mut s = String::from("step,t,particle,x1,x2,v1,v2\n");
    for (k, st) in rollout.states.iter().enumerate() {
        for i in 0..st.n() {
            s.push_str(&format!(
                "{k},{:?},{i},{}\n",
                rollout.time(k),
                fmt_row(&[st.pos[i][0], st.pos[i][1], st.vel[i][0], st.vel[i][1]])
            ));
        }
    }
    write(&paths.states, &s)?;
    let mut e = String::from("step,i,j\n");
    for (k, g) in rollout.graphs.iter().enumerate() {
        for (i, j) in g.edges().filter(|(i, j)| i < j) {
            e.push_str(&format!("{k},{i},{j}\n"));
        }
    }
    write(&paths.edges, &e)?;
    let meta = RolloutMeta {
        sim: cfg.clone(),
        states: rollout.len(),
    };
    write(&paths.meta, &serde_json::to_string_pretty(&meta)?)
}

pub fn load_rollout(paths: &RolloutPaths) -> Result<(Rollout, SimConfig)> {
    let meta: RolloutMeta = serde_json::from_str(&read(&paths.meta)?)
        .map_err(|e| parse_err(&paths.meta, e.line(), e.to_string()))?;
    let n = meta.sim.n;
    let mut states = vec![
        ParticleState {
            pos: vec![[f64::NAN; 2]; n],
            vel: vec![[f64::NAN; 2]; n],
        };
        meta.states
    ];
    let text = read(&paths.states)?;
    let mut seen = 0usize;
    for (line, l) in content_lines(&text).skip(1) {
        let f: Vec<&str> = l.split(',').collect();
        if f.len() != 7 {
            return Err(parse_err(&paths.states, line, format!("expected 7 fields, found {}", f.len())));
        }
        let int = |s: &str| s.parse::<usize>().map_err(|_| parse_err(&paths.states, line, format!("'{s}' is not an index")));
        let num = |s: &str| s.parse::<f64>().map_err(|_| parse_err(&paths.states, line, format!("'{s}' is not a number")));
        let (k, i) = (int(f[0])?, int(f[2])?);
        if k >= meta.states || i >= n {
            return Err(parse_err(&paths.states, line, format!("step {k} / particle {i} out of range")));
        }
        states[k].pos[i] = [num(f[3])?, num(f[4])?];
        states[k].vel[i] = [num(f[5])?, num(f[6])?];
        seen += 1;
    }
    if seen != n * meta.states {
        return Err(parse_err(
            &paths.states,
            0,
            format!("{seen} state rows, expected {}", n * meta.states),
        ));
    }
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); meta.states];
    let text = read(&paths.edges)?;
    for (line, l) in content_lines(&text).skip(1) {
        let f = l
            .split(',')
            .map(|s| s.trim().parse::<usize>().map_err(|_| parse_err(&paths.edges, line, format!("'{s}' is not an index"))))
            .collect::<Result<Vec<usize>>>()?;
        if f.len() != 3 || f[0] >= meta.states {
            return Err(parse_err(&paths.edges, line, "expected step,i,j with a valid step"));
        }
        edges[f[0]].push((f[1], f[2]));
    }
    let graphs = edges
        .into_iter()
        .map(|e| Graph::undirected(n, e))
        .collect::<Result<Vec<_>>>()?;
    Ok((
        Rollout {
            states,
            graphs,
            dt: meta.sim.dt,
            horizon: meta.sim.horizon,
        },
        meta.sim,
    ))
}

/// Forecast rows `k,t_k,node,target,prediction`, one per node and channel
/// (channel index appended for multi-channel targets).
pub fn forecast_csv(rows: &[(usize, f64, Tensor, Tensor)]) -> String {
    let mut s = String::from("k,t_k,node,channel,target,prediction\n");
    for (k, t, target, pred) in rows {
        for i in 0..target.rows {
            for c in 0..target.cols {
                s.push_str(&format!("{k},{t:?},{i},{c},{:?},{:?}\n", target.get(i, c), pred.get(i, c)));
            }
        }
    }
    s
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write(path, text)
}

pub fn read_text(path: &Path) -> Result<String> {
    read(path)
}

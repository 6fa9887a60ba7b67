//! Implementations of the `gde` subcommands.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use gde_core::data::{
    forecast_csv, load_rollout, load_sequence, load_static, save_rollout, undersample, write_text, RolloutPaths,
    StaticDataset, StaticPaths, TemporalDataset,
};
use gde_core::eval::{eval_extrapolation, EvalReport, Oracle};
use gde_core::gradcheck::{corrupted_control, format_report, run_suite};
use gde_core::particles::{make_dataset, random_init, simulate, Rollout, SimConfig};
use gde_core::tasks::forecast::{
    bind, build_model, eval_forecast, predict_all, prepare_inputs, split, synthetic_traffic, train_forecaster,
    ForecastModelKind,
};
use gde_core::tasks::node_class::{
    eval_node_classification, sbm, train_node_classifier, NodeClassifier, NodeModelKind,
};
use gde_core::tasks::particles::{test_trajectory, train, ParticleModel};
use gde_core::{GdeError, ParamSet, Result};
use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::config::{ModelChoice, RunConfig, Task};
use crate::manifest::{Checkpoint, Clock, NfeStats, RunManifest};

/// Options shared by the config-driven commands, already parsed.
pub struct Invocation {
    pub config_path: PathBuf,
    pub config: RunConfig,
    pub out: PathBuf,
}

impl Invocation {
    pub fn new(config_path: &Path, seeds: Option<Vec<u64>>, horizons: Option<Vec<usize>>, out: Option<&Path>) -> Result<Self> {
        let mut config = RunConfig::load(config_path)?;
        if let Some(s) = seeds {
            config.seeds = s;
        }
        if let Some(h) = horizons {
            config.horizons = h;
        }
        let out = config.out_dir(out)?;
        Ok(Self {
            config_path: config_path.to_path_buf(),
            config,
            out,
        })
    }

    fn manifest(&self, command: &str, seeds: Vec<u64>, clock: &Clock) -> RunManifest {
        RunManifest::new(command, Some(&self.config_path), &self.config, seeds, clock)
    }
}

fn seed_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn rollout_for(sim: &SimConfig) -> Result<Rollout> {
    simulate(sim, random_init(sim.n, &mut seed_rng(sim.seed)))
}

pub fn simulate_cmd(inv: &Invocation, seeds_given: bool) -> Result<()> {
    let clock = Clock::start();
    let cfg = &inv.config;
    cfg.sim.validate()?;
    let seeds = if seeds_given { cfg.seeds.clone() } else { vec![cfg.sim.seed] };
    let mut outputs = Vec::new();
    let mut summary = serde_json::Map::new();
    for &seed in &seeds {
        let sim = SimConfig { seed, ..cfg.sim.clone() };
        let dir = if seeds_given { inv.out.join(format!("seed_{seed}")) } else { inv.out.clone() };
        let rollout = rollout_for(&sim)?;
        let edges: usize = rollout.graphs.iter().map(|g| g.num_edges()).sum();
        save_rollout(&rollout, &sim, &RolloutPaths::in_dir(&dir))?;
        info!("seed {seed}: {} states written to {}", rollout.len(), dir.display());
        summary.insert(
            seed.to_string(),
            json!({ "states": rollout.len(), "mean_edges": edges as f64 / rollout.len() as f64 }),
        );
        outputs.push(dir);
    }
    let mut m = inv.manifest("simulate", seeds, &clock);
    m.metrics = summary.into();
    m.outputs = outputs;
    m.write(&inv.out.join("manifest.json"))
}

/// Data shared by every seed of a run.
enum Data {
    Particles(Rollout),
    /// A loaded graph, or `None` to draw an SBM per seed.
    Node(Option<StaticDataset>),
    Forecast { train: TemporalDataset, test: TemporalDataset },
}

fn load_data(cfg: &RunConfig, choice: ModelChoice) -> Result<Data> {
    let path = cfg.data.path.as_deref();
    Ok(match choice {
        ModelChoice::Particle(_) => Data::Particles(match path {
            Some(p) => load_rollout(&RolloutPaths::in_dir(p))?.0,
            None => rollout_for(&cfg.sim)?,
        }),
        ModelChoice::Node(_) => Data::Node(path.map(|p| load_static(&StaticPaths::in_dir(p))).transpose()?),
        ModelChoice::Forecast(kind) => {
            let base = match path {
                Some(p) => load_sequence(p)?,
                None => synthetic_traffic(&cfg.traffic, cfg.data.seed)?,
            };
            let kept = if cfg.data.keep_prob < 1.0 {
                undersample(&base, cfg.data.keep_prob, cfg.data.seed)?
            } else {
                base
            };
            let (train, test) = split(&prepare_inputs(&kept, kind, &cfg.forecast)?, cfg.data.train_fraction);
            Data::Forecast { train, test }
        }
    })
}

fn node_data(data: &Option<StaticDataset>, cfg: &RunConfig, seed: u64) -> Result<StaticDataset> {
    match data {
        Some(ds) => Ok(ds.clone()),
        None => sbm(&cfg.sbm, seed),
    }
}

fn scheme_label(cfg: &RunConfig, choice: ModelChoice) -> String {
    match choice {
        ModelChoice::Particle(_) => format!("{:?}", cfg.solver.scheme).to_lowercase(),
        ModelChoice::Node(NodeModelKind::Gcn) | ModelChoice::Forecast(ForecastModelKind::Gru | ForecastModelKind::Gcgru) => {
            "none".into()
        }
        ModelChoice::Node(NodeModelKind::GcdeRk2) => "rk2".into(),
        ModelChoice::Node(NodeModelKind::GcdeRk4) | ModelChoice::Forecast(ForecastModelKind::GcdeGru) => "rk4".into(),
        ModelChoice::Node(NodeModelKind::GcdeDpr5) => "dopri5".into(),
    }
}

/// Runs `f` for every seed on all available cores, keeping seed order.
fn fan_out<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(seeds.len());
    if workers <= 1 {
        return seeds.iter().map(|&s| f(s)).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<T>>>> = Mutex::new((0..seeds.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= seeds.len() {
                    break;
                }
                let r = f(seeds[i]);
                slots.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect()
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| GdeError::Contract(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| GdeError::Contract(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

struct Trained {
    params: ParamSet,
    curve: String,
    nfe: Vec<usize>,
    summary: serde_json::Value,
}

fn train_seed(cfg: &RunConfig, choice: ModelChoice, data: &Data, seed: u64) -> Result<Trained> {
    match (choice, data) {
        (ModelChoice::Particle(kind), Data::Particles(rollout)) => {
            let n = rollout.states[0].n();
            let mut model = ParticleModel::new(kind, n, rollout.dt, cfg.solver.clone(), seed);
            let log = train(&mut model, &make_dataset(rollout).train, &cfg.particles, seed)?;
            Ok(Trained {
                curve: to_csv(&log)?,
                nfe: log.iter().map(|r| r.nfe).collect(),
                summary: json!({ "final_loss": log.last().map(|r| r.loss) }),
                params: model.params,
            })
        }
        (ModelChoice::Node(kind), Data::Node(ds)) => {
            let ds = node_data(ds, cfg, seed)?;
            let run = train_node_classifier(&ds, kind, &cfg.node_class, seed)?;
            Ok(Trained {
                curve: to_csv(&run.curve)?,
                nfe: run.curve.iter().map(|r| r.nfe).collect(),
                summary: json!({ "best_epoch": run.best_epoch, "val_acc": run.val_acc, "test_acc": run.test_acc }),
                params: run.model.params,
            })
        }
        (ModelChoice::Forecast(kind), Data::Forecast { train, .. }) => {
            let nodes = train.seq.graphs[0].n();
            let (model, mut params) =
                build_model(kind, nodes, train.seq.features[0].cols, train.target_channels, &cfg.forecast, seed);
            let log = train_forecaster(&model, &mut params, train, &cfg.forecast, seed)?;
            Ok(Trained {
                curve: to_csv(&log)?,
                nfe: log.iter().map(|r| r.nfe).collect(),
                summary: json!({ "final_loss": log.last().map(|r| r.loss) }),
                params,
            })
        }
        _ => unreachable!("data is loaded for the chosen model"),
    }
}

pub fn train_cmd(inv: &Invocation) -> Result<()> {
    let clock = Clock::start();
    let cfg = &inv.config;
    let choice = cfg.validate_run()?;
    let task = cfg.task()?;
    let data = load_data(cfg, choice)?;
    let scheme = scheme_label(cfg, choice);
    let label = choice.label();

    let trained = fan_out(&cfg.seeds, |seed| {
        let seed_clock = Clock::start();
        let t = train_seed(cfg, choice, &data, seed)?;
        let dir = inv.out.join(format!("seed_{seed}"));
        let ck_path = dir.join("checkpoint.json");
        Checkpoint::new(task, label, seed, &t.params)?.save(&ck_path)?;
        write_text(&dir.join("curve.csv"), &t.curve)?;
        let mut m = inv.manifest("train", vec![seed], &seed_clock);
        m.nfe = Some(NfeStats {
            scheme: scheme.clone(),
            total: t.nfe.iter().sum(),
            per_epoch: t.nfe.clone(),
        });
        m.metrics = t.summary.clone();
        m.checkpoints = vec![ck_path.clone()];
        m.outputs = vec![dir.join("curve.csv")];
        m.write(&dir.join("manifest.json"))?;
        info!("{label} seed {seed}: {}", t.summary);
        Ok((ck_path, t))
    })?;

    let mut m = inv.manifest("train", cfg.seeds.clone(), &clock);
    m.nfe = Some(NfeStats {
        scheme,
        total: trained.iter().map(|(_, t)| t.nfe.iter().sum::<usize>()).sum(),
        per_epoch: Vec::new(),
    });
    m.metrics = cfg
        .seeds
        .iter()
        .zip(&trained)
        .map(|(s, (_, t))| (s.to_string(), t.summary.clone()))
        .collect::<serde_json::Map<_, _>>()
        .into();
    m.checkpoints = trained.into_iter().map(|(p, _)| p).collect();
    m.write(&inv.out.join("manifest.json"))
}

/// Where `eval` gets its predictor from.
pub enum Source {
    Oracle,
    Checkpoints(Vec<PathBuf>),
}

impl Source {
    /// `oracle`, a checkpoint file, a seed directory, or a training output
    /// directory holding `seed_*` subdirectories.
    pub fn resolve(arg: &str, seeds: Option<&[u64]>) -> Result<Self> {
        if arg == "oracle" {
            return Ok(Source::Oracle);
        }
        let path = PathBuf::from(arg);
        if path.is_file() {
            return Ok(Source::Checkpoints(vec![path]));
        }
        if path.join("checkpoint.json").is_file() {
            return Ok(Source::Checkpoints(vec![path.join("checkpoint.json")]));
        }
        let entries = std::fs::read_dir(&path).map_err(|e| GdeError::io(&path, e))?;
        let mut found: Vec<(u64, PathBuf)> = entries
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                let seed = e.file_name().to_str()?.strip_prefix("seed_")?.parse().ok()?;
                let ck = e.path().join("checkpoint.json");
                ck.is_file().then_some((seed, ck))
            })
            .filter(|(s, _)| seeds.is_none_or(|list| list.contains(s)))
            .collect();
        found.sort();
        if found.is_empty() {
            return Err(GdeError::io(
                &path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoints found"),
            ));
        }
        Ok(Source::Checkpoints(found.into_iter().map(|(_, p)| p).collect()))
    }
}

struct Evaluated {
    rows: EvalReport,
    extra: Option<(PathBuf, String)>,
}

fn eval_checkpoint(inv: &Invocation, choice: ModelChoice, data: &Data, ck: &Checkpoint) -> Result<Evaluated> {
    let cfg = &inv.config;
    let params = ck.params()?;
    let (label, seed) = (choice.label(), ck.seed);
    let mut rows = EvalReport::default();
    let mut extra = None;
    match (choice, data) {
        (ModelChoice::Particle(kind), Data::Particles(rollout)) => {
            let mut model = ParticleModel::new(kind, rollout.states[0].n(), rollout.dt, cfg.solver.clone(), seed);
            model.load_params(&params)?;
            let (states, graphs) = test_trajectory(rollout);
            rows.push_horizons(label, seed, &eval_extrapolation(&model, &states, &graphs, &cfg.horizons)?);
        }
        (ModelChoice::Node(kind), Data::Node(ds)) => {
            let ds = node_data(ds, cfg, seed)?;
            let mut model = NodeClassifier::new(kind, ds.features.cols, ds.num_classes, &cfg.node_class, seed);
            model.params.load_values_from(&params)?;
            rows.push(label, seed, 0, "val_acc", eval_node_classification(&model, &ds, &ds.val)?);
            rows.push(label, seed, 0, "test_acc", eval_node_classification(&model, &ds, &ds.test)?);
        }
        (ModelChoice::Forecast(kind), Data::Forecast { test, .. }) => {
            let (model, mut bound) =
                build_model(kind, test.seq.graphs[0].n(), test.seq.features[0].cols, test.target_channels, &cfg.forecast, seed);
            bound.load_values_from(&params)?;
            let f = bind(&model, &bound, &cfg.forecast, test.target_channels);
            let m = eval_forecast(&f, test)?;
            rows.push(label, seed, 1, "mape", m.mape);
            rows.push(label, seed, 1, "mape_abs", m.mape_abs);
            rows.push(label, seed, 1, "rmse", m.rmse);
            extra = Some((
                inv.out.join(format!("predictions_seed_{seed}.csv")),
                forecast_csv(&predict_all(&f, test)?),
            ));
        }
        _ => unreachable!("data is loaded for the chosen model"),
    }
    Ok(Evaluated { rows, extra })
}

fn oracle_report(inv: &Invocation) -> Result<EvalReport> {
    let cfg = &inv.config;
    if cfg.task()? != Task::Particles {
        return Err(GdeError::Config("the oracle checkpoint is only defined for the particles task".into()));
    }
    let rollout = match cfg.data.path.as_deref() {
        Some(p) => load_rollout(&RolloutPaths::in_dir(p))?.0,
        None => {
            cfg.sim.validate()?;
            rollout_for(&cfg.sim)?
        }
    };
    let (states, graphs) = test_trajectory(&rollout);
    let mut report = EvalReport::default();
    report.push_horizons("oracle", cfg.sim.seed, &eval_extrapolation(&Oracle { trajectory: &states }, &states, &graphs, &cfg.horizons)?);
    Ok(report)
}

fn metric_names(report: &EvalReport) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for r in &report.rows {
        if !names.contains(&r.metric) {
            names.push(r.metric.clone());
        }
    }
    names
}

fn print_tables(report: &EvalReport) {
    for metric in metric_names(report) {
        println!("{}", report.table(&metric));
    }
}

pub fn eval_cmd(inv: &Invocation, source: &Source) -> Result<()> {
    let clock = Clock::start();
    let cfg = &inv.config;
    let (report, checkpoints, extras) = match source {
        Source::Oracle => (oracle_report(inv)?, Vec::new(), Vec::new()),
        Source::Checkpoints(paths) => {
            let choice = cfg.validate_run()?;
            let task = cfg.task()?;
            let cks = paths
                .iter()
                .map(|p| {
                    let ck = Checkpoint::load(p)?;
                    ck.check_matches(task, choice.label())?;
                    Ok(ck)
                })
                .collect::<Result<Vec<_>>>()?;
            let data = load_data(cfg, choice)?;
            let seeds: Vec<u64> = cks.iter().map(|c| c.seed).collect();
            let done = fan_out(&seeds, |seed| {
                let ck = cks.iter().find(|c| c.seed == seed).expect("checkpoint for seed");
                eval_checkpoint(inv, choice, &data, ck)
            })?;
            let mut report = EvalReport::default();
            let mut extras = Vec::new();
            for e in done {
                report.rows.extend(e.rows.rows);
                extras.extend(e.extra);
            }
            (report, paths.clone(), extras)
        }
    };
    print_tables(&report);
    let mut outputs = vec![inv.out.join("report.csv"), inv.out.join("report.json")];
    write_text(&outputs[0], &report.to_csv()?)?;
    write_text(&outputs[1], &report.to_json()?)?;
    for (path, text) in extras {
        write_text(&path, &text)?;
        outputs.push(path);
    }
    let mut seeds: Vec<u64> = report.rows.iter().map(|r| r.seed).collect();
    seeds.dedup();
    let mut m = inv.manifest("eval", seeds, &clock);
    m.metrics = serde_json::to_value(report.aggregate())?;
    m.checkpoints = checkpoints;
    m.outputs = outputs;
    m.write(&inv.out.join("manifest.json"))
}

/// Prints the gradient report; returns whether every check passed.
pub fn gradcheck_cmd(out: Option<&Path>, inject_fault: bool) -> Result<bool> {
    let mut results = run_suite()?;
    if inject_fault {
        results.push(corrupted_control()?);
    }
    print!("{}", format_report(&results));
    if let Some(dir) = out {
        write_text(&dir.join("gradcheck.json"), &serde_json::to_string_pretty(&results)?)?;
    }
    Ok(results.iter().all(|r| r.passed))
}

/// Merges `report.json` files (or directories holding one) and prints one
/// table per metric. `out` receives the merged per-seed and aggregate CSV.
pub fn report_cmd(inputs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    if inputs.is_empty() {
        return Err(GdeError::Config("report needs at least one report.json or eval directory".into()));
    }
    let mut merged = EvalReport::default();
    for input in inputs {
        let path = if input.is_dir() { input.join("report.json") } else { input.clone() };
        let text = std::fs::read_to_string(&path).map_err(|e| GdeError::io(&path, e))?;
        let r: EvalReport = serde_json::from_str(&text).map_err(|e| GdeError::Parse {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        merged.rows.extend(r.rows);
    }
    print_tables(&merged);
    if let Some(path) = out {
        write_text(path, &merged.to_csv()?)?;
    }
    Ok(())
}

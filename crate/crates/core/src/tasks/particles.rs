//! One-step models of the particle system: a static MLP, a Neural ODE on the
//! flattened state, a first-order GCDE, and a second-order GCDE.

use std::rc::Rc;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{GdeError, Result};
use crate::eval::{eval_extrapolation, HorizonMetrics, StepPredictor};
use crate::fields::{GcdeField, GcnMapField, GcnStack, Mlp, MlpField, SecondOrderField};
use crate::graph::{Graph, GraphOp};
use crate::metrics::mse;
use crate::odeint::{solve, SolverConfig};
use crate::optim::Adam;
use crate::params::{Ctx, ParamSet};
use crate::particles::{make_dataset, Rollout, Transition};
use crate::tasks::minibatches;
use crate::tensor::Tensor;

/// Columns per particle: position and velocity.
pub const STATE_DIM: usize = 4;
/// Extra zero channels per half of the second-order state.
pub const AUGMENT: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParticleModelKind {
    StaticBaseline,
    NodeBaseline,
    Gcde,
    Gcde2,
}

impl ParticleModelKind {
    pub const ALL: [ParticleModelKind; 4] = [
        ParticleModelKind::StaticBaseline,
        ParticleModelKind::NodeBaseline,
        ParticleModelKind::Gcde,
        ParticleModelKind::Gcde2,
    ];

    pub fn label(self) -> &'static str {
        match self {
            ParticleModelKind::StaticBaseline => "static",
            ParticleModelKind::NodeBaseline => "neural-ode",
            ParticleModelKind::Gcde => "gcde",
            ParticleModelKind::Gcde2 => "gcde-ii",
        }
    }
}

impl FromStr for ParticleModelKind {
    type Err = GdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "static" | "static-baseline" => Ok(Self::StaticBaseline),
            "neural-ode" | "node-baseline" => Ok(Self::NodeBaseline),
            "gcde" | "gcde-rk2" | "gcde-rk4" | "gcde-dpr5" => Ok(Self::Gcde),
            "gcde-ii" | "gcde2" => Ok(Self::Gcde2),
            other => Err(GdeError::Config(format!("unknown particle model '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Arch {
    Static(Mlp),
    NeuralOde(Mlp),
    Gcde(GcnStack),
    Gcde2(GcnStack),
}

/// A one-step predictor `x_t ↦ x_{t+dt}` with its parameters.
#[derive(Clone, Debug)]
pub struct ParticleModel {
    pub kind: ParticleModelKind,
    pub params: ParamSet,
    pub solver: SolverConfig,
    pub n: usize,
    pub dt: f64,
    arch: Arch,
}

impl ParticleModel {
    /// Flow-based models integrate over `[0, dt]` with `solver`.
    pub fn new(kind: ParticleModelKind, n: usize, dt: f64, solver: SolverConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let flat = STATE_DIM * n;
        let arch = match kind {
            ParticleModelKind::StaticBaseline => Arch::Static(Mlp::new(
                &mut params,
                "static",
                &[flat, 2 * flat, 2 * flat, flat],
                Activation::Softplus,
                &mut rng,
            )),
            ParticleModelKind::NodeBaseline => Arch::NeuralOde(Mlp::new(
                &mut params,
                "field",
                &[flat, 2 * flat, 2 * flat, flat],
                Activation::Softplus,
                &mut rng,
            )),
            ParticleModelKind::Gcde => Arch::Gcde(GcnStack::new(
                &mut params,
                "field",
                &[STATE_DIM, 16, 16, STATE_DIM],
                Activation::Softplus,
                Activation::None,
                0.0,
                &mut rng,
            )),
            ParticleModelKind::Gcde2 => {
                let width = STATE_DIM + 2 * AUGMENT;
                Arch::Gcde2(GcnStack::new(
                    &mut params,
                    "field",
                    &[width, 32, 32, width / 2],
                    Activation::Softplus,
                    Activation::None,
                    0.0,
                    &mut rng,
                ))
            }
        };
        Self {
            kind,
            params,
            solver: solver.on_interval(0.0, dt),
            n,
            dt,
            arch,
        }
    }

    pub fn load_params(&mut self, other: &ParamSet) -> Result<()> {
        self.params.load_values_from(other)
    }

    /// Stacked next-state predictions, `(B·n) × 4`, and the NFE spent.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, inputs: &[&Tensor], graphs: &[&Graph]) -> Result<(Var<'t>, usize)> {
        if inputs.len() != graphs.len() || inputs.is_empty() {
            return Err(GdeError::Contract(format!(
                "{} inputs for {} graphs",
                inputs.len(),
                graphs.len()
            )));
        }
        for x in inputs {
            if x.shape() != (self.n, STATE_DIM) {
                return Err(GdeError::shape("particle input", x.shape(), (self.n, STATE_DIM)));
            }
        }
        let b = inputs.len();
        let stacked = Tensor::concat_rows(inputs)?;
        match &self.arch {
            Arch::Static(mlp) => {
                let x = ctx.constant(stacked).reshape(b, self.n * STATE_DIM)?;
                Ok((mlp.forward(ctx, x)?.reshape(b * self.n, STATE_DIM)?, 0))
            }
            Arch::NeuralOde(mlp) => {
                let x = ctx.constant(stacked).reshape(b, self.n * STATE_DIM)?;
                let res = solve(&MlpField { mlp }, ctx, x, &self.solver)?;
                Ok((res.final_state.reshape(b * self.n, STATE_DIM)?, res.nfe))
            }
            Arch::Gcde(stack) => {
                let op = block_operator(graphs)?;
                let res = solve(&GcdeField { stack, op }, ctx, ctx.constant(stacked), &self.solver)?;
                Ok((res.final_state, res.nfe))
            }
            Arch::Gcde2(stack) => {
                let op = block_operator(graphs)?;
                let rows = stacked.rows;
                let pad = Tensor::zeros(rows, AUGMENT);
                let state = Tensor::concat_cols(&[
                    &stacked.slice_cols(0, 2),
                    &pad,
                    &stacked.slice_cols(2, 4),
                    &pad,
                ])?;
                let half = 2 + AUGMENT;
                let field = SecondOrderField::new(GcnMapField { stack, op }, half);
                let res = solve(&field, ctx, ctx.constant(state), &self.solver)?;
                let out = res.final_state;
                let next = Var::concat_cols(&[out.slice_cols(0, 2)?, out.slice_cols(half, half + 2)?])?;
                Ok((next, res.nfe))
            }
        }
    }
}

fn block_operator(graphs: &[&Graph]) -> Result<Rc<GraphOp>> {
    let blocks = graphs
        .iter()
        .map(|g| g.normalize().map(|a| a.matrix))
        .collect::<Result<Vec<_>>>()?;
    Ok(Rc::new(GraphOp::BlockDiag(blocks)))
}

impl StepPredictor for ParticleModel {
    fn predict_batch(&self, states: &[Tensor], graphs: &[&Graph]) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        let refs: Vec<&Tensor> = states.iter().collect();
        let (y, _) = self.forward(&ctx, &refs, graphs)?;
        let y = y.value();
        Ok((0..states.len())
            .map(|i| y.slice_rows(i * self.n, (i + 1) * self.n))
            .collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Transitions per Adam step; the default covers the whole training
    /// half of a default-length rollout.
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 1282,
            lr: 0.01,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub nfe: usize,
    pub lr: f64,
}

/// Mean squared one-step error in units of state change per unit time:
/// both prediction and target are measured as `(x_{t+dt} − x_t) / dt`.
pub fn rate_loss<'t>(pred: Var<'t>, inputs: &Tensor, targets: &Tensor, dt: f64) -> Result<Var<'t>> {
    let base = pred.tape().constant(inputs.clone());
    let rate = pred.sub(&base)?.scale(1.0 / dt);
    let target = targets.zip_map(inputs, |y, x| (y - x) / dt);
    mse(rate, &target)
}

/// Minibatch Adam on one-step transitions; returns the per-epoch log.
pub fn train(model: &mut ParticleModel, data: &[Transition], cfg: &TrainConfig, seed: u64) -> Result<Vec<EpochRecord>> {
    if data.is_empty() {
        return Err(GdeError::Contract("no training transitions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (mut total, mut nfe) = (0.0, 0);
        for batch in minibatches(data.len(), cfg.batch_size, &mut rng) {
            let inputs: Vec<&Tensor> = batch.iter().map(|&i| &data[i].input).collect();
            let graphs: Vec<&Graph> = batch.iter().map(|&i| &data[i].graph).collect();
            let x = Tensor::concat_rows(&inputs)?;
            let y = Tensor::concat_rows(&batch.iter().map(|&i| &data[i].target).collect::<Vec<_>>())?;
            let tape = Tape::new();
            let ctx = Ctx::train(&tape, &model.params, None);
            let (pred, used) = model.forward(&ctx, &inputs, &graphs)?;
            let loss = rate_loss(pred, &x, &y, model.dt)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(GdeError::NonFinite(format!("training loss at epoch {epoch}")));
            }
            let grads = tape.backward(loss)?;
            adam.step(&mut model.params, &ctx.param_grads(&grads))?;
            total += value * batch.len() as f64;
            nfe += used;
        }
        log.push(EpochRecord {
            epoch,
            loss: total / data.len() as f64,
            nfe,
            lr: cfg.lr,
        });
    }
    Ok(log)
}

/// Nominal states and graphs of the held-out second half of a rollout.
pub fn test_trajectory(rollout: &Rollout) -> (Vec<Tensor>, Vec<Graph>) {
    let split = make_dataset(rollout).split;
    (
        rollout.states[split..].iter().map(|s| s.to_features()).collect(),
        rollout.graphs[split..].to_vec(),
    )
}

/// Outcome of training one model on one seed and evaluating it on the test half.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub model: ParticleModel,
    pub log: Vec<EpochRecord>,
    pub metrics: Vec<HorizonMetrics>,
    pub train_seconds: f64,
}

/// Trains `kind` on the first half of `rollout` and evaluates extrapolation
/// on the second half at each horizon.
pub fn run_seed(
    kind: ParticleModelKind,
    rollout: &Rollout,
    n: usize,
    solver: &SolverConfig,
    cfg: &TrainConfig,
    horizons: &[usize],
    seed: u64,
) -> Result<SeedRun> {
    let data = make_dataset(rollout);
    let start = std::time::Instant::now();
    let mut model = ParticleModel::new(kind, n, rollout.dt, solver.clone(), seed);
    let log = train(&mut model, &data.train, cfg, seed)?;
    let train_seconds = start.elapsed().as_secs_f64();
    let (states, graphs) = test_trajectory(rollout);
    let metrics = eval_extrapolation(&model, &states, &graphs, horizons)?;
    Ok(SeedRun {
        model,
        log,
        metrics,
        train_seconds,
    })
}

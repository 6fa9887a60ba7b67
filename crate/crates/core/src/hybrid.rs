//! Autoregressive graph ODEs as hybrid systems: a GCN flow between arrival
//! times, a GCGRU jump at each arrival, and an output head.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::{GdeError, Result};
use crate::fields::{GcdeField, GcnLayer, GcnStack, Mlp, ScaledField};
use crate::graph::{Graph, GraphOp, GraphSequence};
use crate::odeint::{solve, SolverConfig};
use crate::params::{Ctx, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Graph-convolutional GRU cell.
#[derive(Clone, Debug)]
pub struct GcgruCell {
    pub theta_xz: ParamId,
    pub theta_hz: ParamId,
    pub theta_xr: ParamId,
    pub theta_hr: ParamId,
    pub theta_xh: ParamId,
    pub theta_hh: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GcgruCell {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut x = |tag: &str, rng: &mut R| {
            params.add(format!("{name}.theta_{tag}"), Tensor::glorot(input_dim, hidden_dim, rng))
        };
        let (theta_xz, theta_xr, theta_xh) = (x("xz", rng), x("xr", rng), x("xh", rng));
        let mut h = |tag: &str, rng: &mut R| {
            params.add(format!("{name}.theta_{tag}"), Tensor::glorot(hidden_dim, hidden_dim, rng))
        };
        let (theta_hz, theta_hr, theta_hh) = (h("hz", rng), h("hr", rng), h("hh", rng));
        Self {
            theta_xz,
            theta_hz,
            theta_xr,
            theta_hr,
            theta_xh,
            theta_hh,
            input_dim,
            hidden_dim,
        }
    }

    pub fn param_ids(&self) -> [ParamId; 6] {
        [
            self.theta_xz,
            self.theta_hz,
            self.theta_xr,
            self.theta_hr,
            self.theta_xh,
            self.theta_hh,
        ]
    }
}

/// Gates `Z`, `R` and the post-jump state of one GCGRU update.
pub struct JumpOutput<'t> {
    pub update_gate: Var<'t>,
    pub reset_gate: Var<'t>,
    pub state: Var<'t>,
}

/// `H⁺ = Z ⊙ H + (1 − Z) ⊙ tanh(L X Θ_xh + L (R ⊙ H) Θ_hh)`.
pub fn gcgru_jump<'t>(
    ctx: &Ctx<'t>,
    cell: &GcgruCell,
    h: Var<'t>,
    x: Var<'t>,
    op: &Rc<GraphOp>,
) -> Result<JumpOutput<'t>> {
    let (n, hd) = h.shape();
    if hd != cell.hidden_dim {
        return Err(GdeError::shape("gcgru state", h.shape(), (n, cell.hidden_dim)));
    }
    if x.shape() != (n, cell.input_dim) {
        return Err(GdeError::shape("gcgru input", x.shape(), (n, cell.input_dim)));
    }
    let lx = x.propagate(op)?;
    let lh = h.propagate(op)?;
    let p = |id| ctx.p(id);
    let z = lx.matmul(&p(cell.theta_xz))?.add(&lh.matmul(&p(cell.theta_hz))?)?.sigmoid();
    let r = lx.matmul(&p(cell.theta_xr))?.add(&lh.matmul(&p(cell.theta_hr))?)?.sigmoid();
    let candidate = lx
        .matmul(&p(cell.theta_xh))?
        .add(&r.hadamard(&h)?.propagate(op)?.matmul(&p(cell.theta_hh))?)?
        .tanh();
    let keep = z.hadamard(&h)?;
    let blend = z.scale(-1.0).add_scalar(1.0).hadamard(&candidate)?;
    Ok(JumpOutput {
        update_gate: z,
        reset_gate: r,
        state: keep.add(&blend)?,
    })
}

/// Flow `F`, jump `G`, and head `K` of a GCDE-GRU. Without a flow this is a
/// plain (GC)GRU sequence model.
#[derive(Clone, Debug)]
pub struct HybridModel {
    pub flow: Option<GcnStack>,
    pub cell: GcgruCell,
    pub head: Mlp,
    /// Flow time per unit of timestamp difference.
    pub time_scale: f64,
    /// Multiplies the flow field.
    pub flow_gain: f64,
    /// Treat the whole graph as one node with concatenated features (GRU baseline).
    pub flatten: bool,
    pub solver: SolverConfig,
}

#[derive(Clone, Debug)]
pub struct HybridSpec {
    pub nodes: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub head_hidden: usize,
    pub output_dim: usize,
    pub with_flow: bool,
    pub flatten: bool,
}

impl HybridModel {
    pub fn new<R: Rng + ?Sized>(params: &mut ParamSet, spec: &HybridSpec, solver: SolverConfig, rng: &mut R) -> Self {
        let (input_dim, output_dim) = if spec.flatten {
            (spec.input_dim * spec.nodes, spec.output_dim * spec.nodes)
        } else {
            (spec.input_dim, spec.output_dim)
        };
        let cell = GcgruCell::new(params, "jump", input_dim, spec.hidden_dim, rng);
        let flow = spec.with_flow.then(|| GcnStack {
            layers: vec![
                GcnLayer::new(params, "flow.0", spec.hidden_dim, spec.hidden_dim, Activation::Tanh, 0.0, true, rng),
                GcnLayer::new(params, "flow.1", spec.hidden_dim, spec.hidden_dim, Activation::None, 0.0, true, rng),
            ],
        });
        let head = Mlp::new(params, "head", &[spec.hidden_dim, spec.head_hidden, output_dim], Activation::Relu, rng);
        Self {
            flow,
            cell,
            head,
            time_scale: 1.0,
            flow_gain: 1.0,
            flatten: spec.flatten,
            solver,
        }
    }

    fn operator(&self, g: &Graph) -> Result<Rc<GraphOp>> {
        if self.flatten {
            Ok(Rc::new(GraphOp::Identity(1)))
        } else {
            Ok(Rc::new(g.normalize()?.into_op()))
        }
    }

    fn input<'t>(&self, ctx: &Ctx<'t>, x: &Tensor) -> Result<Var<'t>> {
        if self.flatten {
            ctx.constant(x.clone()).reshape(1, x.len())
        } else {
            Ok(ctx.constant(x.clone()))
        }
    }

    fn flow_segment<'t>(
        &self,
        ctx: &Ctx<'t>,
        h: Var<'t>,
        op: &Rc<GraphOp>,
        t0: f64,
        t1: f64,
        interval: usize,
    ) -> Result<Segment<'t>> {
        let Some(stack) = &self.flow else {
            return Ok(Segment {
                start: t0,
                end: t1,
                nfe: 0,
                end_state: h,
                samples: Vec::new(),
            });
        };
        let span = (t1 - t0) * self.time_scale;
        let cfg = self.solver.clone().on_interval(0.0, span);
        let field = ScaledField {
            inner: GcdeField {
                stack,
                op: Rc::clone(op),
            },
            factor: self.flow_gain,
        };
        let res = solve(&field, ctx, h, &cfg).map_err(|e| GdeError::Interval {
            interval,
            source: Box::new(e),
        })?;
        Ok(Segment {
            start: t0,
            end: t1,
            nfe: res.nfe,
            end_state: res.final_state,
            samples: res.trajectory,
        })
    }
}

/// One flow arc `[t_{k-1}, t_k]`.
pub struct Segment<'t> {
    pub start: f64,
    pub end: f64,
    pub nfe: usize,
    pub end_state: Var<'t>,
    pub samples: Vec<(f64, Tensor)>,
}

pub struct HybridTrajectory<'t> {
    /// `segments[k - 1]` spans `[t_{k-1}, t_k]`.
    pub segments: Vec<Segment<'t>>,
    /// State entering the jump at each arrival (zeros at the first).
    pub pre_jump: Vec<Var<'t>>,
    pub post_jump: Vec<Var<'t>>,
    pub outputs: Vec<Var<'t>>,
}

impl HybridTrajectory<'_> {
    pub fn nfe(&self) -> usize {
        self.segments.iter().map(|s| s.nfe).sum()
    }
}

/// Runs flow → jump → output over every arrival of `stream`, starting from a
/// zero hidden state that the first observation enters through a jump.
/// The flow on `[t_{k-1}, t_k]` uses the graph observed at `t_k`.
pub fn hybrid_forward<'t>(ctx: &Ctx<'t>, model: &HybridModel, stream: &GraphSequence) -> Result<HybridTrajectory<'t>> {
    let mut traj = HybridTrajectory {
        segments: Vec::new(),
        pre_jump: Vec::new(),
        post_jump: Vec::new(),
        outputs: Vec::new(),
    };
    if stream.is_empty() {
        return Err(GdeError::Contract("hybrid_forward on an empty stream".into()));
    }
    let rows = if model.flatten { 1 } else { stream.graphs[0].n() };
    let mut h = ctx.constant(Tensor::zeros(rows, model.cell.hidden_dim));
    let mut op_cache: Option<(&Graph, Rc<GraphOp>)> = None;
    for k in 0..stream.len() {
        let g = &stream.graphs[k];
        let op = match &op_cache {
            Some((prev, op)) if *prev == g => Rc::clone(op),
            _ => {
                let op = model.operator(g)?;
                op_cache = Some((g, Rc::clone(&op)));
                op
            }
        };
        if k > 0 {
            let seg = model.flow_segment(ctx, h, &op, stream.timestamps[k - 1], stream.timestamps[k], k)?;
            h = seg.end_state;
            traj.segments.push(seg);
        }
        traj.pre_jump.push(h);
        let x = model.input(ctx, &stream.features[k])?;
        h = gcgru_jump(ctx, &model.cell, h, x, &op)?.state;
        traj.post_jump.push(h);
        traj.outputs.push(model.head.forward(ctx, h)?);
    }
    Ok(traj)
}

/// Prediction of the node targets at `target_time`: run the window, flow
/// the last post-jump state forward to the target time, apply the head.
pub fn forecast<'t>(
    ctx: &Ctx<'t>,
    model: &HybridModel,
    window: &GraphSequence,
    target_time: f64,
    target_graph: &Graph,
) -> Result<Var<'t>> {
    Ok(forecast_counted(ctx, model, window, target_time, target_graph)?.0)
}

/// [`forecast`] together with the total NFE of its flows.
pub fn forecast_counted<'t>(
    ctx: &Ctx<'t>,
    model: &HybridModel,
    window: &GraphSequence,
    target_time: f64,
    target_graph: &Graph,
) -> Result<(Var<'t>, usize)> {
    let traj = hybrid_forward(ctx, model, window)?;
    let mut nfe = traj.nfe();
    let last = *traj.post_jump.last().expect("non-empty window");
    let t_last = *window.timestamps.last().expect("non-empty window");
    let h = if model.flow.is_some() {
        let op = model.operator(target_graph)?;
        let seg = model.flow_segment(ctx, last, &op, t_last, target_time, window.len())?;
        nfe += seg.nfe;
        seg.end_state
    } else {
        last
    };
    let y = model.head.forward(ctx, h)?;
    let y = if model.flatten {
        let n = target_graph.n();
        let (_, c) = y.shape();
        y.reshape(n, c / n)?
    } else {
        y
    };
    Ok((y, nfe))
}

/// Anything that predicts the next observation from a window of graphs.
pub trait Forecaster {
    fn window(&self) -> usize;
    /// Leading feature columns that are predicted; the rest are exogenous.
    fn target_channels(&self) -> usize;
    fn predict(&self, window: &GraphSequence, target_time: f64, target_graph: &Graph) -> Result<Tensor>;
}

/// Trained hybrid model bound to its parameters.
pub struct HybridForecaster<'a> {
    pub model: &'a HybridModel,
    pub params: &'a ParamSet,
    pub window: usize,
    pub target_channels: usize,
}

impl Forecaster for HybridForecaster<'_> {
    fn window(&self) -> usize {
        self.window
    }

    fn target_channels(&self) -> usize {
        self.target_channels
    }

    fn predict(&self, window: &GraphSequence, target_time: f64, target_graph: &Graph) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, self.params);
        let y = forecast(&ctx, self.model, window, target_time, target_graph)?;
        Ok((*y.value()).clone())
    }
}

/// Predicts the last observed target channels unchanged.
pub struct HoldLast {
    pub window: usize,
    pub target_channels: usize,
}

impl Forecaster for HoldLast {
    fn window(&self) -> usize {
        self.window
    }

    fn target_channels(&self) -> usize {
        self.target_channels
    }

    fn predict(&self, window: &GraphSequence, _t: f64, _g: &Graph) -> Result<Tensor> {
        let last = window.features.last().expect("non-empty window");
        Ok(last.slice_cols(0, self.target_channels))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RolloutPrediction {
    /// Stream index each prediction targets.
    pub indices: Vec<usize>,
    pub predictions: Vec<Tensor>,
    /// The requested horizon ran past the end of the stream.
    pub truncated: bool,
}

/// Autoregressive extrapolation from the window ending at `start`: each
/// prediction replaces the target channels of the next input while the
/// exogenous channels come from the stream.
pub fn rollout_predict<M: Forecaster + ?Sized>(
    model: &M,
    stream: &GraphSequence,
    start: usize,
    horizon: usize,
) -> Result<RolloutPrediction> {
    let w = model.window();
    if horizon == 0 {
        return Err(GdeError::Contract("horizon must be at least 1".into()));
    }
    if start + 1 < w || start >= stream.len() {
        return Err(GdeError::Contract(format!(
            "window of {w} ending at {start} does not fit a stream of length {}",
            stream.len()
        )));
    }
    let mut window = stream.slice(start + 1 - w, start + 1);
    let mut out = RolloutPrediction {
        indices: Vec::new(),
        predictions: Vec::new(),
        truncated: false,
    };
    for step in 1..=horizon {
        let i = start + step;
        if i >= stream.len() {
            out.truncated = true;
            break;
        }
        let pred = model.predict(&window, stream.timestamps[i], &stream.graphs[i])?;
        let nominal = &stream.features[i];
        let tc = model.target_channels();
        let fed = if nominal.cols > tc {
            Tensor::concat_cols(&[&pred, &nominal.slice_cols(tc, nominal.cols)])?
        } else {
            pred.clone()
        };
        window.timestamps.remove(0);
        window.graphs.remove(0);
        window.features.remove(0);
        window.timestamps.push(stream.timestamps[i]);
        window.graphs.push(stream.graphs[i].clone());
        window.features.push(fed);
        out.indices.push(i);
        out.predictions.push(pred);
    }
    Ok(out)
}

//! Semi-supervised node classification with GCNs and GCDEs, plus a
//! stochastic block model generator for synthetic benchmarks.

use std::rc::Rc;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Tape, Var};
use crate::data::StaticDataset;
use crate::error::{GdeError, Result};
use crate::fields::{GcdeField, GcnLayer, GcnStack};
use crate::graph::{Graph, GraphOp};
use crate::metrics::accuracy;
use crate::odeint::{solve, Scheme, SolverConfig};
use crate::optim::Adam;
use crate::params::{Ctx, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NodeModelKind {
    Gcn,
    GcdeRk2,
    GcdeRk4,
    GcdeDpr5,
}

impl NodeModelKind {
    pub fn label(self) -> &'static str {
        match self {
            NodeModelKind::Gcn => "gcn",
            NodeModelKind::GcdeRk2 => "gcde-rk2",
            NodeModelKind::GcdeRk4 => "gcde-rk4",
            NodeModelKind::GcdeDpr5 => "gcde-dpr5",
        }
    }
}

impl FromStr for NodeModelKind {
    type Err = GdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn" => Ok(Self::Gcn),
            "gcde-rk2" => Ok(Self::GcdeRk2),
            "gcde-rk4" | "gcde" => Ok(Self::GcdeRk4),
            "gcde-dpr5" | "gcde-dopri5" => Ok(Self::GcdeDpr5),
            other => Err(GdeError::Config(format!("unknown node classification model '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NodeClassConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Dropout on the inputs of the first and last GCN layers.
    pub input_dropout: f64,
    /// Dropout inside the vector field, fixed across the solver steps of a pass.
    pub field_dropout: f64,
    /// End of the integration interval `[0, s1]`.
    pub s1: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for NodeClassConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            epochs: 200,
            lr: 0.01,
            weight_decay: 5e-4,
            input_dropout: 0.5,
            field_dropout: 0.0,
            s1: 1.0,
            rtol: 1e-3,
            atol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NodeClassifier {
    pub kind: NodeModelKind,
    pub params: ParamSet,
    pub input: GcnLayer,
    pub field: Option<GcnStack>,
    pub output: GcnLayer,
    pub solver: SolverConfig,
}

impl NodeClassifier {
    /// GCN: `d→h (relu) → n_y`. GCDEs insert a flow `h→h (softplus) → h` between
    /// them; the adaptive variant uses a single softplus field layer.
    pub fn new(kind: NodeModelKind, in_dim: usize, classes: usize, cfg: &NodeClassConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let h = cfg.hidden;
        let input = GcnLayer::new(&mut params, "in", in_dim, h, Activation::Relu, cfg.input_dropout, true, &mut rng);
        let field = match kind {
            NodeModelKind::Gcn => None,
            NodeModelKind::GcdeDpr5 => Some(GcnStack::new(
                &mut params,
                "field",
                &[h, h],
                Activation::Softplus,
                Activation::Softplus,
                cfg.field_dropout,
                &mut rng,
            )),
            NodeModelKind::GcdeRk2 | NodeModelKind::GcdeRk4 => Some(GcnStack::new(
                &mut params,
                "field",
                &[h, h, h],
                Activation::Softplus,
                Activation::None,
                cfg.field_dropout,
                &mut rng,
            )),
        };
        let output = GcnLayer::new(&mut params, "out", h, classes, Activation::None, cfg.input_dropout, true, &mut rng);
        let solver = match kind {
            NodeModelKind::GcdeRk2 => SolverConfig::fixed(Scheme::Rk2, 1),
            NodeModelKind::GcdeDpr5 => SolverConfig::adaptive(cfg.rtol, cfg.atol),
            _ => SolverConfig::fixed(Scheme::Rk4, 1),
        }
        .on_interval(0.0, cfg.s1);
        Self {
            kind,
            params,
            input,
            field,
            output,
            solver,
        }
    }

    /// Class logits for every node and the NFE of the flow.
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, op: &Rc<GraphOp>, x: &Tensor) -> Result<(Var<'t>, usize)> {
        let mut h = self.input.forward(ctx, op, ctx.constant(x.clone()))?;
        let mut nfe = 0;
        if let Some(stack) = &self.field {
            let field = GcdeField {
                stack,
                op: Rc::clone(op),
            };
            let res = solve(&field, ctx, h, &self.solver)?;
            nfe = res.nfe;
            h = res.final_state;
        }
        Ok((self.output.forward(ctx, op, h)?, nfe))
    }

    pub fn logits(&self, op: &Rc<GraphOp>, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &self.params);
        Ok((*self.forward(&ctx, op, x)?.0.value()).clone())
    }
}

fn targets(ds: &StaticDataset, mask: &[bool]) -> Rc<Vec<(usize, usize)>> {
    Rc::new(StaticDataset::indices(mask).into_iter().map(|i| (i, ds.labels[i])).collect())
}

/// Argmax accuracy of `model` on the nodes selected by `mask`.
pub fn eval_node_classification(model: &NodeClassifier, ds: &StaticDataset, mask: &[bool]) -> Result<f64> {
    let op = Rc::new(ds.graph.normalize()?.into_op());
    accuracy(&model.logits(&op, &ds.features)?, &ds.labels, mask)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub nfe: usize,
}

#[derive(Clone, Debug)]
pub struct NodeClassRun {
    /// Parameters restored to the selected epoch.
    pub model: NodeClassifier,
    pub best_epoch: usize,
    pub val_acc: f64,
    pub test_acc: f64,
    pub curve: Vec<NodeEpoch>,
}

/// Full-batch Adam on the training mask. The returned model is the one
/// with the lowest validation loss among the second half of the epochs.
pub fn train_node_classifier(
    ds: &StaticDataset,
    kind: NodeModelKind,
    cfg: &NodeClassConfig,
    seed: u64,
) -> Result<NodeClassRun> {
    ds.validate()?;
    let mut model = NodeClassifier::new(kind, ds.features.cols, ds.num_classes, cfg, seed);
    let op = Rc::new(ds.graph.normalize()?.into_op());
    let train_t = targets(ds, &ds.train);
    let val_t = targets(ds, &ds.val);
    let mut adam = Adam::new(&model.params, cfg.lr, cfg.weight_decay);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let select_from = cfg.epochs / 2;
    let mut best: Option<(f64, usize, ParamSet)> = None;
    for epoch in 0..cfg.epochs {
        let tape = Tape::new();
        let ctx = Ctx::train(&tape, &model.params, Some(seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64)));
        let (logits, nfe) = model.forward(&ctx, &op, &ds.features)?;
        let loss = logits.cross_entropy(Rc::clone(&train_t))?;
        let train_loss = loss.value().item();
        if !train_loss.is_finite() {
            return Err(GdeError::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let grads = tape.backward(loss)?;
        adam.step(&mut model.params, &ctx.param_grads(&grads))?;

        let eval_tape = Tape::new();
        let ectx = Ctx::eval(&eval_tape, &model.params);
        let (vlogits, _) = model.forward(&ectx, &op, &ds.features)?;
        let val_loss = vlogits.cross_entropy(Rc::clone(&val_t))?.value().item();
        let val_acc = accuracy(&vlogits.value(), &ds.labels, &ds.val)?;
        curve.push(NodeEpoch {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            nfe,
        });
        if epoch >= select_from && best.as_ref().is_none_or(|(l, _, _)| val_loss < *l) {
            best = Some((val_loss, epoch, model.params.clone()));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, params)) => {
            model.params = params;
            epoch
        }
        None => cfg.epochs.saturating_sub(1),
    };
    Ok(NodeClassRun {
        val_acc: eval_node_classification(&model, ds, &ds.val)?,
        test_acc: eval_node_classification(&model, ds, &ds.test)?,
        model,
        best_epoch,
        curve,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SbmConfig {
    pub nodes: usize,
    pub blocks: usize,
    pub p_in: f64,
    pub p_out: f64,
    /// Standard deviation of the Gaussian noise added to one-hot features.
    pub noise: f64,
    pub train_per_class: usize,
    pub val: usize,
    pub test: usize,
}

impl Default for SbmConfig {
    fn default() -> Self {
        Self {
            nodes: 200,
            blocks: 2,
            p_in: 0.05,
            p_out: 0.005,
            noise: 0.5,
            train_per_class: 20,
            val: 60,
            test: 100,
        }
    }
}

/// Stochastic block model with noisy one-hot community features.
/// Nodes are assigned to blocks round-robin.
pub fn sbm(cfg: &SbmConfig, seed: u64) -> Result<StaticDataset> {
    if cfg.blocks == 0 || cfg.nodes < cfg.blocks {
        return Err(GdeError::Config("sbm needs at least one node per block".into()));
    }
    if cfg.blocks * cfg.train_per_class + cfg.val + cfg.test > cfg.nodes {
        return Err(GdeError::Config("sbm splits exceed the node count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels: Vec<usize> = (0..cfg.nodes).map(|i| i % cfg.blocks).collect();
    let mut edges = Vec::new();
    for i in 0..cfg.nodes {
        for j in (i + 1)..cfg.nodes {
            let p = if labels[i] == labels[j] { cfg.p_in } else { cfg.p_out };
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let normal = Normal::new(0.0, cfg.noise).map_err(|e| GdeError::Config(format!("sbm noise: {e}")))?;
    let features = Tensor::from_fn(cfg.nodes, cfg.blocks, |i, c| {
        f64::from(u8::from(labels[i] == c)) + normal.sample(&mut rng)
    });
    let mut order: Vec<usize> = (0..cfg.nodes).collect();
    order.shuffle(&mut rng);
    let mut train = vec![false; cfg.nodes];
    let mut per_class = vec![0usize; cfg.blocks];
    let mut rest = Vec::new();
    for &i in &order {
        if per_class[labels[i]] < cfg.train_per_class {
            per_class[labels[i]] += 1;
            train[i] = true;
        } else {
            rest.push(i);
        }
    }
    let mut val = vec![false; cfg.nodes];
    let mut test = vec![false; cfg.nodes];
    for &i in &rest[..cfg.val] {
        val[i] = true;
    }
    for &i in &rest[cfg.val..cfg.val + cfg.test] {
        test[i] = true;
    }
    let ds = StaticDataset {
        graph: Graph::undirected(cfg.nodes, edges)?,
        features,
        labels,
        num_classes: cfg.blocks,
        train,
        val,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sbm_splits_are_disjoint_and_sized() {
        let ds = sbm(&SbmConfig::default(), 0).unwrap();
        assert_eq!(StaticDataset::indices(&ds.train).len(), 40);
        assert_eq!(StaticDataset::indices(&ds.val).len(), 60);
        assert_eq!(StaticDataset::indices(&ds.test).len(), 100);
        let intra = ds.graph.edges().filter(|&(i, j)| ds.labels[i] == ds.labels[j]).count();
        assert!(intra * 2 > ds.graph.edges().count());
    }

    #[test]
    fn separable_features_linear_head_is_perfect() {
        let n = 30;
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let ds = StaticDataset {
            graph: Graph::empty(n),
            features: Tensor::from_fn(n, 3, |i, c| f64::from(u8::from(labels[i] == c))),
            labels,
            num_classes: 3,
            train: vec![true; n],
            val: vec![false; n],
            test: vec![false; n],
        };
        let logits = ds.features.clone();
        assert_eq!(accuracy(&logits, &ds.labels, &ds.train).unwrap(), 1.0);
    }

    #[test]
    fn constant_model_is_at_chance_on_balanced_data() {
        let ds = sbm(&SbmConfig::default(), 4).unwrap();
        let logits = Tensor::from_fn(ds.n(), 2, |_, c| if c == 0 { 1.0 } else { 0.0 });
        let acc = accuracy(&logits, &ds.labels, &vec![true; ds.n()]).unwrap();
        assert_eq!(acc, 0.5);
    }

    #[test]
    fn gcde_forward_nfe_and_shapes() {
        let ds = sbm(&SbmConfig::default(), 1).unwrap();
        let cfg = NodeClassConfig {
            hidden: 8,
            ..NodeClassConfig::default()
        };
        let op = Rc::new(ds.graph.normalize().unwrap().into_op());
        for (kind, nfe) in [(NodeModelKind::Gcn, 0), (NodeModelKind::GcdeRk2, 2), (NodeModelKind::GcdeRk4, 4)] {
            let m = NodeClassifier::new(kind, 2, 2, &cfg, 0);
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &m.params);
            let (y, used) = m.forward(&ctx, &op, &ds.features).unwrap();
            assert_eq!(y.shape(), (200, 2));
            assert_eq!(used, nfe);
        }
    }
}

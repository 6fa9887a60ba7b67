//! Vector fields `F_G(s, H, Θ)` and the layers they are built from.

mod attention;
mod layers;
mod message;
mod second_order;

use std::rc::Rc;

pub use attention::GadeField;
pub use layers::{GcnLayer, GcnStack, Head, Linear, Mlp};
pub use message::{GmdeField, Message, Update};
pub use second_order::SecondOrderField;

use crate::autodiff::Var;
use crate::error::{GdeError, Result};
use crate::graph::GraphOp;
use crate::params::Ctx;

/// Right-hand side of `dH/ds = F(s, H)`. Output shape must equal input shape.
pub trait VectorField {
    fn eval<'t>(&self, ctx: &Ctx<'t>, s: f64, h: Var<'t>) -> Result<Var<'t>>;
}

impl<F: VectorField + ?Sized> VectorField for &F {
    fn eval<'t>(&self, ctx: &Ctx<'t>, s: f64, h: Var<'t>) -> Result<Var<'t>> {
        (**self).eval(ctx, s, h)
    }
}

/// Field given by a closure over tape variables.
pub struct FnField<F>(F);

impl<F> FnField<F>
where
    F: for<'t> Fn(&Ctx<'t>, f64, Var<'t>) -> Result<Var<'t>>,
{
    pub fn new(f: F) -> Self {
        Self(f)
    }
}

impl<F> VectorField for FnField<F>
where
    F: for<'t> Fn(&Ctx<'t>, f64, Var<'t>) -> Result<Var<'t>>,
{
    fn eval<'t>(&self, ctx: &Ctx<'t>, s: f64, h: Var<'t>) -> Result<Var<'t>> {
        (self.0)(ctx, s, h)
    }
}

/// `F ≡ 0`.
pub struct ZeroField;

impl VectorField for ZeroField {
    fn eval<'t>(&self, _ctx: &Ctx<'t>, _s: f64, h: Var<'t>) -> Result<Var<'t>> {
        Ok(h.scale(0.0))
    }
}

/// `k · F(s, H)`.
pub struct ScaledField<F> {
    pub inner: F,
    pub factor: f64,
}

impl<F: VectorField> VectorField for ScaledField<F> {
    fn eval<'t>(&self, ctx: &Ctx<'t>, s: f64, h: Var<'t>) -> Result<Var<'t>> {
        Ok(self.inner.eval(ctx, s, h)?.scale(self.factor))
    }
}

/// Graph convolution field: a GCN stack evaluated on a fixed graph operator.
pub struct GcdeField<'a> {
    pub stack: &'a GcnStack,
    pub op: Rc<GraphOp>,
}

impl VectorField for GcdeField<'_> {
    fn eval<'t>(&self, ctx: &Ctx<'t>, _s: f64, h: Var<'t>) -> Result<Var<'t>> {
        gcde_field(ctx, self.stack, &self.op, h)
    }
}

/// Applies the configured GCN layers to `H`; input and output widths must match.
pub fn gcde_field<'t>(ctx: &Ctx<'t>, stack: &GcnStack, op: &Rc<GraphOp>, h: Var<'t>) -> Result<Var<'t>> {
    let (rows, width) = h.shape();
    if stack.in_dim() != width || stack.out_dim() != width {
        return Err(GdeError::shape(
            "gcde_field",
            (rows, width),
            (stack.in_dim(), stack.out_dim()),
        ));
    }
    stack.forward(ctx, op, h)
}

/// GCN stack whose output width may differ from its input, used as the
/// acceleration map of a second-order field.
pub struct GcnMapField<'a> {
    pub stack: &'a GcnStack,
    pub op: Rc<GraphOp>,
}

impl VectorField for GcnMapField<'_> {
    fn eval<'t>(&self, ctx: &Ctx<'t>, _s: f64, h: Var<'t>) -> Result<Var<'t>> {
        let (rows, width) = h.shape();
        if self.stack.in_dim() != width {
            return Err(GdeError::shape("gcn_map_field", (rows, width), (rows, self.stack.in_dim())));
        }
        self.stack.forward(ctx, &self.op, h)
    }
}

/// Graph-agnostic field on flattened states (Neural ODE baseline).
pub struct MlpField<'a> {
    pub mlp: &'a Mlp,
}

impl VectorField for MlpField<'_> {
    fn eval<'t>(&self, ctx: &Ctx<'t>, _s: f64, h: Var<'t>) -> Result<Var<'t>> {
        let (r, c) = h.shape();
        if self.mlp.in_dim() != c || self.mlp.out_dim() != c {
            return Err(GdeError::shape("mlp_field", (r, c), (self.mlp.in_dim(), self.mlp.out_dim())));
        }
        self.mlp.forward(ctx, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Tape};
    use crate::graph::Graph;
    use crate::params::ParamSet;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn single_layer(p: &mut ParamSet, width: usize, act: Activation) -> GcnStack {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        GcnStack {
            layers: vec![GcnLayer::new(p, "f", width, width, act, 0.0, false, &mut rng)],
        }
    }

    #[test]
    fn zero_weights_relu_give_zero_field() {
        let mut p = ParamSet::new();
        let stack = single_layer(&mut p, 3, Activation::Relu);
        *p.get_mut(stack.layers[0].weight) = Tensor::zeros(3, 3);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let op = Rc::new(Graph::complete(4).normalize().unwrap().into_op());
        let h = ctx.constant(Tensor::from_fn(4, 3, |i, j| i as f64 - j as f64));
        let f = gcde_field(&ctx, &stack, &op, h).unwrap();
        assert_eq!(*f.value(), Tensor::zeros(4, 3));
    }

    #[test]
    fn isolated_node_linear_field_is_h_theta() {
        let mut p = ParamSet::new();
        let stack = single_layer(&mut p, 2, Activation::None);
        let theta = p.get(stack.layers[0].weight).clone();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let op = Rc::new(Graph::empty(1).normalize().unwrap().into_op());
        let h = Tensor::from_rows(&[&[0.3, -1.2]]);
        let f = gcde_field(&ctx, &stack, &op, ctx.constant(h.clone())).unwrap();
        assert!(f.value().max_abs_diff(&h.matmul(&theta).unwrap()) < 1e-15);
    }

    #[test]
    fn two_node_complete_graph_identity_theta() {
        let mut p = ParamSet::new();
        let stack = single_layer(&mut p, 2, Activation::None);
        *p.get_mut(stack.layers[0].weight) = Tensor::eye(2);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let op = Rc::new(Graph::complete(2).normalize().unwrap().into_op());
        let f = gcde_field(&ctx, &stack, &op, ctx.constant(Tensor::eye(2))).unwrap();
        assert!(f.value().max_abs_diff(&Tensor::full(2, 2, 0.5)) < 1e-15);
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let mut p = ParamSet::new();
        let stack = single_layer(&mut p, 2, Activation::None);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let op = Rc::new(Graph::empty(2).normalize().unwrap().into_op());
        let err = gcde_field(&ctx, &stack, &op, ctx.constant(Tensor::zeros(2, 3))).unwrap_err();
        assert!(matches!(err, GdeError::Shape { .. }));
    }

    #[test]
    fn gcde_is_autonomous() {
        let mut p = ParamSet::new();
        let stack = single_layer(&mut p, 3, Activation::Softplus);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let op = Rc::new(Graph::undirected(3, [(0, 1)]).unwrap().normalize().unwrap().into_op());
        let field = GcdeField { stack: &stack, op };
        let h = ctx.constant(Tensor::from_fn(3, 3, |i, j| (i + 2 * j) as f64 * 0.1));
        let a = field.eval(&ctx, 0.0, h).unwrap().value();
        let b = field.eval(&ctx, 0.73, h).unwrap().value();
        assert_eq!(a, b);
    }
}

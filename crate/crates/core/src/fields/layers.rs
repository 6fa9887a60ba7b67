//! Parametrized building blocks: affine maps, MLPs, and GCN layers.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Activation, Var};
use crate::error::Result;
use crate::graph::GraphOp;
use crate::params::{Ctx, ParamId, ParamSet};
use crate::tensor::Tensor;

/// `act(X W + b)`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub act: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), Tensor::glorot(in_dim, out_dim, rng));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            act,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let mut y = x.matmul(&ctx.p(self.weight))?;
        if let Some(b) = self.bias {
            y = y.add_row(&ctx.p(b))?;
        }
        Ok(y.activate(self.act))
    }
}

/// Stack of affine layers applied row-wise.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden_act`, the last is linear.
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        hidden_act: Activation,
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { Activation::None } else { hidden_act };
                Linear::new(params, &format!("{name}.{i}"), widths[i], widths[i + 1], act, true, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for layer in &self.layers {
            x = layer.forward(ctx, x)?;
        }
        Ok(x)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Graph convolution `act(L (drop(H) W) + b)` with `L` the normalized adjacency.
#[derive(Clone, Debug)]
pub struct GcnLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub act: Activation,
    pub dropout: f64,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GcnLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        act: Activation,
        dropout: f64,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = params.add(format!("{name}.weight"), Tensor::glorot(in_dim, out_dim, rng));
        let bias = bias.then(|| params.add(format!("{name}.bias"), Tensor::zeros(1, out_dim)));
        Self {
            weight,
            bias,
            act,
            dropout,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, op: &Rc<GraphOp>, h: Var<'t>) -> Result<Var<'t>> {
        let (r, c) = h.shape();
        let h = match ctx.dropout_mask(self.weight, r, c, self.dropout) {
            Some(mask) => h.mul_const(mask)?,
            None => h,
        };
        let mut y = if self.in_dim < self.out_dim {
            h.propagate(op)?.matmul(&ctx.p(self.weight))?
        } else {
            h.matmul(&ctx.p(self.weight))?.propagate(op)?
        };
        if let Some(b) = self.bias {
            y = y.add_row(&ctx.p(b))?;
        }
        Ok(y.activate(self.act))
    }
}

#[derive(Clone, Debug)]
pub struct GcnStack {
    pub layers: Vec<GcnLayer>,
}

impl GcnStack {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden_act`, the last uses `out_act`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        widths: &[usize],
        hidden_act: Activation,
        out_act: Activation,
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { out_act } else { hidden_act };
                GcnLayer::new(params, &format!("{name}.{i}"), widths[i], widths[i + 1], act, dropout, true, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'t>(&self, ctx: &Ctx<'t>, op: &Rc<GraphOp>, mut h: Var<'t>) -> Result<Var<'t>> {
        for layer in &self.layers {
            h = layer.forward(ctx, op, h)?;
        }
        Ok(h)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim)
    }
}

/// Output map `Y = K(H)`.
#[derive(Clone, Debug)]
pub enum Head {
    Affine(Linear),
    Mlp(Mlp),
    Gcn(GcnLayer),
}

impl Head {
    pub fn forward<'t>(&self, ctx: &Ctx<'t>, op: Option<&Rc<GraphOp>>, h: Var<'t>) -> Result<Var<'t>> {
        match self {
            Head::Affine(l) => l.forward(ctx, h),
            Head::Mlp(m) => m.forward(ctx, h),
            Head::Gcn(g) => {
                let op = op.ok_or_else(|| {
                    crate::error::GdeError::Contract("GCN head needs a graph operator".into())
                })?;
                g.forward(ctx, op, h)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{softmax, Tape};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_head_passes_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let lin = Linear::new(&mut p, "k", 3, 3, Activation::None, false, &mut rng);
        *p.get_mut(lin.weight) = Tensor::eye(3);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let h = Tensor::from_fn(4, 3, |i, j| (i as f64) - 0.5 * j as f64);
        let y = Head::Affine(lin).forward(&ctx, None, ctx.constant(h.clone())).unwrap();
        assert_eq!(*y.value(), h);
    }

    #[test]
    fn zero_weights_give_bias_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let lin = Linear::new(&mut p, "k", 3, 2, Activation::None, true, &mut rng);
        *p.get_mut(lin.weight) = Tensor::zeros(3, 2);
        *p.get_mut(lin.bias.unwrap()) = Tensor::from_rows(&[&[1.5, -2.0]]);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let y = lin.forward(&ctx, ctx.constant(Tensor::uniform(5, 3, -1.0, 1.0, &mut rng))).unwrap();
        for i in 0..5 {
            assert_eq!(y.value().row(i), &[1.5, -2.0]);
        }
    }

    #[test]
    fn classification_head_rows_softmax_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        let lin = Linear::new(&mut p, "k", 4, 3, Activation::None, true, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let y = lin.forward(&ctx, ctx.constant(Tensor::uniform(6, 4, -1.0, 1.0, &mut rng))).unwrap();
        let y = y.value();
        for i in 0..6 {
            assert!((softmax(y.row(i)).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn glorot_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = Tensor::glorot(64, 64, &mut rng);
        let limit = (6.0f64 / 128.0).sqrt();
        assert!(w.max_abs() <= limit);
        assert!(w.max_abs() > 0.9 * limit);
    }
}

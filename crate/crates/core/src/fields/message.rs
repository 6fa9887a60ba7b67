//! Message-passing field: `dh_v/ds = g(Σ_{u ∈ N(v)} m(h_v, h_u))`.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::error::{GdeError, Result};
use crate::fields::{Linear, VectorField};
use crate::graph::Graph;
use crate::params::Ctx;

/// Message function `m(h_v, h_u)`.
#[derive(Clone, Debug)]
pub enum Message {
    /// `m(a, b) = b`
    Neighbor,
    /// `m(a, b) = a - b`
    Difference,
    /// `m(a, b) = act([a | b] W + c)`, `W: 2h x h`
    Learned(Linear),
}

/// Update function `g`.
#[derive(Clone, Debug)]
pub enum Update {
    Identity,
    Learned(Linear),
}

pub struct GmdeField {
    n: usize,
    /// receiving node `v` of each directed message
    dst: Rc<Vec<usize>>,
    /// sending node `u ∈ N(v)`
    src: Rc<Vec<usize>>,
    pub message: Message,
    pub update: Update,
}

impl GmdeField {
    pub fn new(graph: &Graph, message: Message, update: Update) -> Result<Self> {
        let mut dst = Vec::new();
        let mut src = Vec::new();
        for v in 0..graph.n() {
            for u in graph.neighbors(v)? {
                dst.push(v);
                src.push(u);
            }
        }
        Ok(Self {
            n: graph.n(),
            dst: Rc::new(dst),
            src: Rc::new(src),
            message,
            update,
        })
    }
}

impl VectorField for GmdeField {
    fn eval<'t>(&self, ctx: &Ctx<'t>, _s: f64, h: Var<'t>) -> Result<Var<'t>> {
        let (rows, width) = h.shape();
        if rows != self.n {
            return Err(GdeError::shape("gmde_field", (rows, width), (self.n, width)));
        }
        let hv = h.gather_rows(Rc::clone(&self.dst))?;
        let hu = h.gather_rows(Rc::clone(&self.src))?;
        let msg = match &self.message {
            Message::Neighbor => hu,
            Message::Difference => hv.sub(&hu)?,
            Message::Learned(lin) => lin.forward(ctx, Var::concat_cols(&[hv, hu])?)?,
        };
        let agg = msg.scatter_add_rows(Rc::clone(&self.dst), self.n)?;
        let out = match &self.update {
            Update::Identity => agg,
            Update::Learned(lin) => lin.forward(ctx, agg)?,
        };
        if out.shape() != (rows, width) {
            return Err(GdeError::shape("gmde_field", (rows, width), out.shape()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Activation, Tape};
    use crate::params::ParamSet;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn isolated_node_gets_update_of_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ParamSet::new();
        let g_fn = Linear::new(&mut p, "g", 2, 2, Activation::None, true, &mut rng);
        *p.get_mut(g_fn.bias.unwrap()) = Tensor::from_rows(&[&[0.25, -1.0]]);
        let field = GmdeField::new(&Graph::empty(1), Message::Neighbor, Update::Learned(g_fn)).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &p);
        let out = field.eval(&ctx, 0.0, ctx.constant(Tensor::from_rows(&[&[3.0, 4.0]]))).unwrap();
        assert_eq!(out.value().data, vec![0.25, -1.0]);
    }

    #[test]
    fn neighbor_message_swaps_on_path() {
        let g = Graph::undirected(2, [(0, 1)]).unwrap();
        let field = GmdeField::new(&g, Message::Neighbor, Update::Identity).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &ParamSet::new());
        let h = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let out = field.eval(&ctx, 0.0, ctx.constant(h)).unwrap();
        assert_eq!(*out.value(), Tensor::from_rows(&[&[3.0, 4.0], &[1.0, 2.0]]));
    }

    #[test]
    fn antisymmetric_message_vanishes_on_constant_features() {
        let g = Graph::undirected(4, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
        let field = GmdeField::new(&g, Message::Difference, Update::Identity).unwrap();
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &ParamSet::new());
        let h = Tensor::from_fn(4, 3, |_, j| j as f64 + 0.5);
        let out = field.eval(&ctx, 0.0, ctx.constant(h)).unwrap();
        assert_eq!(*out.value(), Tensor::zeros(4, 3));
    }
}

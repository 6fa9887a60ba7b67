//! Attention field: `dh_v/ds = σ(Σ_{u ∈ N(v) ∪ {v}} α_vu Θ h_u)`.
//!
//! Single-head scoring `e_vu = LeakyReLU_{0.2}(a_src · Θh_v + a_dst · Θh_u)`,
//! normalized with a softmax over the closed neighborhood of `v`.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Activation, Var};
use crate::error::{GdeError, Result};
use crate::fields::VectorField;
use crate::graph::Graph;
use crate::params::{Ctx, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const ATTENTION_SLOPE: f64 = 0.2;

pub struct GadeField {
    pub theta: ParamId,
    pub att_src: ParamId,
    pub att_dst: ParamId,
    pub act: Activation,
    mask: Rc<Tensor>,
}

impl GadeField {
    pub fn new<R: Rng + ?Sized>(
        params: &mut ParamSet,
        name: &str,
        graph: &Graph,
        width: usize,
        act: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        let theta = params.add(format!("{name}.theta"), Tensor::glorot(width, width, rng));
        let att_src = params.add(format!("{name}.att_src"), Tensor::glorot(width, 1, rng));
        let att_dst = params.add(format!("{name}.att_dst"), Tensor::glorot(width, 1, rng));
        Ok(Self {
            theta,
            att_src,
            att_dst,
            act,
            mask: Rc::new(closed_neighborhood_mask(graph)?),
        })
    }

    /// Attention coefficients `α` (rows sum to one) for the given features.
    pub fn coefficients<'t>(&self, ctx: &Ctx<'t>, h: Var<'t>) -> Result<Var<'t>> {
        let z = h.matmul(&ctx.p(self.theta))?;
        self.coefficients_from(ctx, z)
    }

    fn coefficients_from<'t>(&self, ctx: &Ctx<'t>, z: Var<'t>) -> Result<Var<'t>> {
        let e_src = z.matmul(&ctx.p(self.att_src))?;
        let e_dst = z.matmul(&ctx.p(self.att_dst))?.transpose();
        Var::outer_sum(&e_src, &e_dst)?
            .leaky_relu(ATTENTION_SLOPE)
            .masked_softmax_rows(Rc::clone(&self.mask))
    }
}

fn closed_neighborhood_mask(graph: &Graph) -> Result<Tensor> {
    let n = graph.n();
    let mut mask = Tensor::zeros(n, n);
    for v in 0..n {
        mask.set(v, v, 1.0);
        for u in graph.neighbors(v)? {
            mask.set(v, u, 1.0);
        }
    }
    Ok(mask)
}

impl VectorField for GadeField {
    fn eval<'t>(&self, ctx: &Ctx<'t>, _s: f64, h: Var<'t>) -> Result<Var<'t>> {
        let (rows, width) = h.shape();
        if rows != self.mask.rows {
            return Err(GdeError::shape("gade_field", (rows, width), self.mask.shape()));
        }
        let z = h.matmul(&ctx.p(self.theta))?;
        let alpha = self.coefficients_from(ctx, z)?;
        Ok(alpha.matmul(&z)?.activate(self.act))
    }
}

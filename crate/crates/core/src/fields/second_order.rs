//! Second-order fields: state `[H | dH/ds]`, derivative `[dH/ds | base(state)]`.

use crate::autodiff::Var;
use crate::error::{GdeError, Result};
use crate::fields::VectorField;
use crate::params::Ctx;

/// Wraps an acceleration field. The base consumes the full `2h`-wide state
/// and returns `h` columns.
pub struct SecondOrderField<F> {
    pub base: F,
    pub half: usize,
}

impl<F: VectorField> SecondOrderField<F> {
    pub fn new(base: F, half: usize) -> Self {
        Self { base, half }
    }
}

impl<F: VectorField> VectorField for SecondOrderField<F> {
    fn eval<'t>(&self, ctx: &Ctx<'t>, s: f64, h: Var<'t>) -> Result<Var<'t>> {
        let (rows, width) = h.shape();
        if width != 2 * self.half {
            return Err(GdeError::shape("second_order", (rows, width), (rows, 2 * self.half)));
        }
        let velocity = h.slice_cols(self.half, width)?;
        let accel = self.base.eval(ctx, s, h)?;
        if accel.shape() != (rows, self.half) {
            return Err(GdeError::shape("second_order base", accel.shape(), (rows, self.half)));
        }
        Var::concat_cols(&[velocity, accel])
    }
}

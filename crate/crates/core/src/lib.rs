//! Graph neural ordinary differential equations on a small dense
//! reverse-mode autodiff core.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod fields;
pub mod gradcheck;
pub mod graph;
pub mod hybrid;
pub mod metrics;
pub mod optim;
pub mod odeint;
pub mod params;
pub mod particles;
pub mod tasks;
pub mod tensor;

pub use autodiff::{Activation, Gradients, Tape, Var};
pub use error::{GdeError, Result};
pub use graph::{Graph, GraphOp, GraphSequence, NormalizedAdjacency};
pub use odeint::{solve, Scheme, SolveResult, SolverConfig};
pub use params::{Ctx, ParamId, ParamSet};
pub use tensor::Tensor;

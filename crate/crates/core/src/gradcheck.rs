//! Central finite-difference checks of reverse-mode gradients.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Activation, Tape, Var};
use crate::error::Result;
use crate::fields::{
    GadeField, GcdeField, GcnLayer, GcnMapField, GcnStack, GmdeField, Head, Linear, Message, Mlp, SecondOrderField,
    Update, VectorField,
};
use crate::graph::{Graph, GraphOp, GraphSequence};
use crate::hybrid::{gcgru_jump, hybrid_forward, GcgruCell, HybridModel, HybridSpec};
use crate::odeint::{solve, Scheme, SolverConfig};
use crate::params::{Ctx, ParamId, ParamSet};
use crate::tensor::Tensor;

/// Tolerance for single operations and fields.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Tolerance for gradients through full solver unrolls.
pub const UNROLL_TOLERANCE: f64 = 1e-3;
pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    /// Largest per-tensor relative error `max|a − n| / max(max|a|, max|n|)`.
    pub max_rel_error: f64,
    /// Parameter and flat index of the largest absolute discrepancy.
    pub worst_param: String,
    pub worst_index: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares tape gradients of `loss` against central differences for every
/// parameter in `params`. `tamper` may alter the analytic gradients before
/// comparison; it exists to demonstrate that a wrong derivative is caught.
pub fn check_with<L, T>(name: &str, params: &ParamSet, tolerance: f64, loss: L, tamper: T) -> Result<CheckResult>
where
    L: for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>>,
    T: Fn(&mut [Tensor]),
{
    let tape = Tape::new();
    let ctx = Ctx::train(&tape, params, None);
    let l = loss(&ctx)?;
    let mut analytic = ctx.param_grads(&tape.backward(l)?);
    tamper(&mut analytic);

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, p);
        Ok(loss(&ctx)?.value().item())
    };

    let mut work = params.clone();
    let mut max_rel = 0.0f64;
    let mut worst = (String::new(), 0usize, -1.0f64);
    for (k, (id, pname, t)) in params.iter().enumerate() {
        let mut numeric = Tensor::zeros(t.rows, t.cols);
        for i in 0..t.len() {
            let orig = t.data[i];
            work.get_mut(id).data[i] = orig + FD_STEP;
            let up = eval(&work)?;
            work.get_mut(id).data[i] = orig - FD_STEP;
            let down = eval(&work)?;
            work.get_mut(id).data[i] = orig;
            numeric.data[i] = (up - down) / (2.0 * FD_STEP);
        }
        let a = &analytic[k];
        let scale = a.max_abs().max(numeric.max_abs()).max(1e-12);
        for i in 0..t.len() {
            let d = (a.data[i] - numeric.data[i]).abs();
            if d > worst.2 {
                worst = (pname.to_string(), i, d);
            }
            max_rel = max_rel.max(d / scale);
        }
    }
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: max_rel,
        worst_param: worst.0,
        worst_index: worst.1,
        tolerance,
        passed: max_rel < tolerance,
    })
}

pub fn check<L>(name: &str, params: &ParamSet, tolerance: f64, loss: L) -> Result<CheckResult>
where
    L: for<'t> Fn(&Ctx<'t>) -> Result<Var<'t>>,
{
    check_with(name, params, tolerance, loss, |_| {})
}

/// `Σ w ⊙ y` with a fixed random weight, so every output entry matters.
fn project<'t>(y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (r, c) = y.shape();
    let w = y.tape().constant(Tensor::uniform(r, c, -1.0, 1.0, &mut rng));
    Ok(y.hadamard(&w)?.sum())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn path3() -> Graph {
    Graph::undirected(3, [(0, 1), (1, 2)]).expect("valid graph")
}

fn norm_op(g: &Graph) -> Rc<GraphOp> {
    Rc::new(g.normalize().expect("undirected").into_op())
}

type OpFn = for<'t> fn(&Ctx<'t>, ParamId, ParamId) -> Result<Var<'t>>;

fn op_checks() -> Result<Vec<CheckResult>> {
    let mut r = rng(1);
    let mut p = ParamSet::new();
    let a = p.add("a", Tensor::uniform(3, 4, -1.5, 1.5, &mut r));
    let b = p.add("b", Tensor::uniform(3, 4, 0.2, 1.5, &mut r));
    let cases: Vec<(&str, OpFn)> = vec![
        ("matmul", |c, a, b| project(c.p(a).matmul(&c.p(b).transpose())?, 1)),
        ("add", |c, a, b| project(c.p(a).add(&c.p(b))?, 2)),
        ("sub", |c, a, b| project(c.p(a).sub(&c.p(b))?, 3)),
        ("hadamard", |c, a, b| project(c.p(a).hadamard(&c.p(b))?, 4)),
        ("scale", |c, a, _| project(c.p(a).scale(-2.5).add_scalar(0.3), 5)),
        ("add_row", |c, a, b| project(c.p(a).add_row(&c.p(b).slice_cols(0, 4)?.transpose().slice_cols(0, 1)?.transpose())?, 6)),
        ("mul_const", |c, a, _| project(c.p(a).mul_const(Rc::new(Tensor::full(3, 4, 0.7)))?, 7)),
        ("sigmoid", |c, a, _| project(c.p(a).sigmoid(), 8)),
        ("tanh", |c, a, _| project(c.p(a).tanh(), 9)),
        ("relu", |c, _, b| project(c.p(b).scale(-1.0).relu().add(&c.p(b).relu())?, 10)),
        ("softplus", |c, a, _| project(c.p(a).softplus(), 11)),
        ("leaky_relu", |c, _, b| project(c.p(b).leaky_relu(0.2).add(&c.p(b).scale(-1.0).leaky_relu(0.2))?, 12)),
        ("propagate", |c, a, _| project(c.p(a).propagate(&norm_op(&path3()))?, 13)),
        ("mean", |c, a, _| Ok(c.p(a).tanh().mean())),
        ("concat_slice", |c, a, b| project(Var::concat_cols(&[c.p(a), c.p(b)])?.slice_cols(2, 7)?, 14)),
        ("reshape", |c, a, _| project(c.p(a).reshape(2, 6)?.tanh(), 15)),
        ("outer_sum", |c, a, b| project(Var::outer_sum(&c.p(a).slice_cols(0, 1)?, &c.p(b).slice_cols(1, 2)?.transpose())?, 16)),
        ("masked_softmax", |c, a, _| {
            let mask = Tensor::from_rows(&[&[1.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 1.0, 1.0], &[0.0, 0.0, 1.0, 0.0]]);
            project(c.p(a).masked_softmax_rows(Rc::new(mask))?, 17)
        }),
        ("gather_scatter", |c, a, _| {
            let g = c.p(a).gather_rows(Rc::new(vec![2, 0, 0, 1]))?.tanh();
            project(g.scatter_add_rows(Rc::new(vec![1, 1, 2, 0]), 3)?, 18)
        }),
        ("cross_entropy", |c, a, _| c.p(a).cross_entropy(Rc::new(vec![(0, 1), (1, 3), (2, 0)]))),
    ];
    cases
        .into_iter()
        .map(|(name, f)| check(&format!("op/{name}"), &p, OP_TOLERANCE, move |c| f(c, a, b)))
        .collect()
}

fn field_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let g = path3();

    let mut r = rng(2);
    let mut p = ParamSet::new();
    let stack = GcnStack::new(&mut p, "f", &[3, 5, 3], Activation::Softplus, Activation::None, 0.0, &mut r);
    let h = p.add("h", Tensor::uniform(3, 3, -1.0, 1.0, &mut r));
    let op = norm_op(&g);
    out.push(check("field/gcde", &p, OP_TOLERANCE, |c| {
        let f = GcdeField { stack: &stack, op: Rc::clone(&op) };
        project(f.eval(c, 0.0, c.p(h))?, 20)
    })?);

    let mut r = rng(3);
    let mut p = ParamSet::new();
    let msg = Linear::new(&mut p, "m", 4, 2, Activation::Tanh, true, &mut r);
    let upd = Linear::new(&mut p, "u", 2, 2, Activation::Softplus, true, &mut r);
    let h = p.add("h", Tensor::uniform(3, 2, -1.0, 1.0, &mut r));
    let gmde = GmdeField::new(&g, Message::Learned(msg), Update::Learned(upd))?;
    out.push(check("field/gmde", &p, OP_TOLERANCE, |c| project(gmde.eval(c, 0.0, c.p(h))?, 21))?);

    let mut r = rng(4);
    let mut p = ParamSet::new();
    let gade = GadeField::new(&mut p, "a", &g, 3, Activation::Tanh, &mut r)?;
    let h = p.add("h", Tensor::uniform(3, 3, -1.0, 1.0, &mut r));
    out.push(check("field/gade", &p, OP_TOLERANCE, |c| project(gade.eval(c, 0.0, c.p(h))?, 22))?);

    let mut r = rng(5);
    let mut p = ParamSet::new();
    let base = GcnStack::new(&mut p, "b", &[4, 6, 2], Activation::Softplus, Activation::None, 0.0, &mut r);
    let h = p.add("h", Tensor::uniform(3, 4, -1.0, 1.0, &mut r));
    out.push(check("field/second_order", &p, OP_TOLERANCE, |c| {
        let f = SecondOrderField::new(GcnMapField { stack: &base, op: Rc::clone(&op) }, 2);
        project(f.eval(c, 0.0, c.p(h))?, 23)
    })?);

    let mut r = rng(6);
    let mut p = ParamSet::new();
    let cell = GcgruCell::new(&mut p, "g", 2, 3, &mut r);
    let h = p.add("h", Tensor::uniform(3, 3, -1.0, 1.0, &mut r));
    let x = p.add("x", Tensor::uniform(3, 2, -1.0, 1.0, &mut r));
    out.push(check("cell/gcgru", &p, OP_TOLERANCE, |c| {
        project(gcgru_jump(c, &cell, c.p(h), c.p(x), &op)?.state, 24)
    })?);

    let mut r = rng(7);
    let mut p = ParamSet::new();
    let mlp = Head::Mlp(Mlp::new(&mut p, "k", &[3, 4, 2], Activation::Tanh, &mut r));
    let gcn = Head::Gcn(GcnLayer::new(&mut p, "kg", 3, 2, Activation::None, 0.0, true, &mut r));
    let h = p.add("h", Tensor::uniform(3, 3, -1.0, 1.0, &mut r));
    out.push(check("head/mlp_gcn", &p, OP_TOLERANCE, |c| {
        let a = mlp.forward(c, None, c.p(h))?;
        let b = gcn.forward(c, Some(&op), c.p(h))?;
        a.add(&b)?.cross_entropy(Rc::new(vec![(0, 0), (1, 1), (2, 1)]))
    })?);
    Ok(out)
}

fn unroll_checks() -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let g = Graph::complete(2);
    let op = norm_op(&g);
    for (scheme, steps) in [(Scheme::Rk2, 3), (Scheme::Rk4, 2)] {
        let mut r = rng(8);
        let mut p = ParamSet::new();
        let stack = GcnStack::new(&mut p, "f", &[2, 4, 2], Activation::Softplus, Activation::None, 0.0, &mut r);
        let h = p.add("h0", Tensor::uniform(2, 2, -1.0, 1.0, &mut r));
        let cfg = SolverConfig::fixed(scheme, steps);
        out.push(check(&format!("unroll/{scheme:?}").to_lowercase(), &p, UNROLL_TOLERANCE, |c| {
            let f = GcdeField { stack: &stack, op: Rc::clone(&op) };
            project(solve(&f, c, c.p(h), &cfg)?.final_state, 30)
        })?);
    }

    let mut r = rng(9);
    let mut p = ParamSet::new();
    let spec = HybridSpec {
        nodes: 3,
        input_dim: 2,
        hidden_dim: 3,
        head_hidden: 4,
        output_dim: 1,
        with_flow: true,
        flatten: false,
    };
    let model = HybridModel::new(&mut p, &spec, SolverConfig::fixed(Scheme::Rk4, 1), &mut r);
    let g2 = Graph::undirected(3, [(0, 2)])?;
    let stream = GraphSequence::new(
        vec![0.0, 0.5, 1.25],
        vec![path3(), g2, path3()],
        (0..3).map(|_| Tensor::uniform(3, 2, -1.0, 1.0, &mut r)).collect(),
    )?;
    out.push(check("hybrid/3-jump", &p, UNROLL_TOLERANCE, |c| {
        let traj = hybrid_forward(c, &model, &stream)?;
        let mut total = project(traj.outputs[0], 40)?;
        for (k, y) in traj.outputs.iter().enumerate().skip(1) {
            total = total.add(&project(*y, 40 + k as u64)?)?;
        }
        Ok(total)
    })?);
    Ok(out)
}

/// Every op, field, cell, head, solver unroll and hybrid rollout.
pub fn run_suite() -> Result<Vec<CheckResult>> {
    let mut all = op_checks()?;
    all.extend(field_checks()?);
    all.extend(unroll_checks()?);
    Ok(all)
}

/// Check whose analytic gradient is deliberately scaled by 1.05 in one entry.
pub fn corrupted_control() -> Result<CheckResult> {
    let mut r = rng(10);
    let mut p = ParamSet::new();
    let a = p.add("a", Tensor::uniform(2, 3, -1.0, 1.0, &mut r));
    check_with(
        "control/corrupted",
        &p,
        OP_TOLERANCE,
        |c| project(c.p(a).tanh(), 50),
        |g| g[0].data[1] *= 1.05,
    )
}

pub fn format_report(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s.push_str(&format!(
            "{:<4} {:<24} max_rel={:.3e} tol={:.0e} worst={}[{}]\n",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.tolerance,
            r.worst_param,
            r.worst_index
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corrupted_derivative_is_detected() {
        let r = corrupted_control().unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst_param, "a");
        assert_eq!(r.worst_index, 1);
    }

    #[test]
    fn op_suite_passes() {
        for r in op_checks().unwrap() {
            assert!(r.passed, "{}", format_report(std::slice::from_ref(&r)));
        }
    }

    #[test]
    fn full_suite_passes() {
        let results = run_suite().unwrap();
        let report = format_report(&results);
        assert!(results.iter().all(|r| r.passed), "{report}");
    }
}

//! Randomized property suites shared by the property and acceptance targets.

#![allow(dead_code)]

pub mod criteria;

use std::rc::Rc;

use gde_core::fields::{GadeField, GcdeField, GcnStack, GmdeField, Linear, Message, ScaledField, Update, VectorField};
use gde_core::hybrid::{hybrid_forward, HybridModel, HybridSpec};
use gde_core::metrics::{mape, mape_abs, rmse};
use gde_core::optim::Adam;
use gde_core::particles::{adjacency, interacts, pair_force, ParticleState};
use gde_core::{Activation, Ctx, Graph, GraphSequence, ParamSet, Scheme, SolverConfig, Tape, Tensor};
use proptest::prelude::*;
use proptest::test_runner::{Config, TestCaseError, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TRIALS: u32 = 1000;

pub fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

fn fail(msg: String) -> TestCaseError {
    TestCaseError::fail(msg)
}

fn random_graph(n: usize, p: f64, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    Graph::undirected(n, edges).unwrap()
}

/// Row `i` of `h` moves to row `perm[i]`.
fn permute_rows(h: &Tensor, perm: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(h.rows, h.cols);
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(p).copy_from_slice(h.row(i));
    }
    out
}

fn eval_field<F: VectorField>(field: &F, params: &ParamSet, h: &Tensor) -> Result<Tensor, TestCaseError> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, params);
    let y = field
        .eval(&ctx, 0.0, ctx.constant(h.clone()))
        .map_err(|e| fail(e.to_string()))?;
    Ok((*y.value()).clone())
}

fn check_equivariant(name: &str, base: &Tensor, permuted: &Tensor, perm: &[usize]) -> Result<(), TestCaseError> {
    let diff = permute_rows(base, perm).max_abs_diff(permuted);
    if diff < 1e-10 {
        Ok(())
    } else {
        Err(fail(format!("{name}: |F(PH, Pg) - P F(H, g)| = {diff:e}")))
    }
}

/// GCDE, GMDE and GADE fields commute with node relabelling.
pub fn permutation_equivariance(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(2usize..9, 0.0f64..1.0, any::<u64>()), |(n, p, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(n, p, &mut rng);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let pg = g.permute(&perm).map_err(|e| fail(e.to_string()))?;
            let width = 3;
            let h = Tensor::uniform(n, width, -1.0, 1.0, &mut rng);
            let ph = permute_rows(&h, &perm);

            let mut params = ParamSet::new();
            let stack = GcnStack::new(
                &mut params,
                "f",
                &[width, 5, width],
                Activation::Softplus,
                Activation::None,
                0.0,
                &mut rng,
            );
            let op = |g: &Graph| Rc::new(g.normalize().unwrap().into_op());
            let a = eval_field(&GcdeField { stack: &stack, op: op(&g) }, &params, &h)?;
            let b = eval_field(&GcdeField { stack: &stack, op: op(&pg) }, &params, &ph)?;
            check_equivariant("gcde", &a, &b, &perm)?;

            let msg = Linear::new(&mut params, "m", 2 * width, width, Activation::Tanh, true, &mut rng);
            let upd = Linear::new(&mut params, "u", width, width, Activation::Softplus, true, &mut rng);
            let f1 = GmdeField::new(&g, Message::Learned(msg.clone()), Update::Learned(upd.clone()))
                .map_err(|e| fail(e.to_string()))?;
            let f2 = GmdeField::new(&pg, Message::Learned(msg), Update::Learned(upd)).map_err(|e| fail(e.to_string()))?;
            check_equivariant("gmde", &eval_field(&f1, &params, &h)?, &eval_field(&f2, &params, &ph)?, &perm)?;

            let mut p1 = ParamSet::new();
            let mut r1 = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let g1 = GadeField::new(&mut p1, "a", &g, width, Activation::Tanh, &mut r1).map_err(|e| fail(e.to_string()))?;
            let mut p2 = ParamSet::new();
            let mut r2 = ChaCha8Rng::seed_from_u64(seed ^ 1);
            let g2 = GadeField::new(&mut p2, "a", &pg, width, Activation::Tanh, &mut r2).map_err(|e| fail(e.to_string()))?;
            check_equivariant("gade", &eval_field(&g1, &p1, &h)?, &eval_field(&g2, &p2, &ph)?, &perm)
        })
        .map_err(|e| e.to_string())
}

fn vec2() -> impl Strategy<Value = [f64; 2]> {
    (-3.0f64..3.0, -3.0f64..3.0).prop_map(|(a, b)| [a, b])
}

/// `f_ij = −f_ji` to the last bit.
pub fn force_antisymmetry(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(vec2(), vec2(), vec2(), vec2(), 0.0f64..3.0, 0.0f64..3.0, 0.01f64..3.0),
            |(xi, xj, vi, vj, alpha, beta, r)| {
                let fij = pair_force(xi, xj, vi, vj, alpha, beta, r);
                let fji = pair_force(xj, xi, vj, vi, alpha, beta, r);
                match (fij, fji) {
                    (Some(a), Some(b)) => {
                        let dev = (a[0] + b[0]).abs().max((a[1] + b[1]).abs());
                        prop_assert!(dev < 1e-12, "deviation {dev:e}");
                    }
                    (None, None) => {}
                    _ => return Err(fail("singularity detected in one direction only".into())),
                }
                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

/// Interaction graphs are symmetric, loop-free, agree with the distance
/// threshold, and normalize to a symmetric operator.
pub fn adjacency_consistency(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(2usize..13, 0.05f64..3.0, any::<u64>()), |(n, r, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let state = ParticleState {
                pos: (0..n).map(|_| [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)]).collect(),
                vel: vec![[0.0, 0.0]; n],
            };
            let g = adjacency(&state, r);
            let a = g.adjacency();
            prop_assert!(a.max_abs_diff(&a.transpose()) == 0.0);
            for i in 0..n {
                prop_assert!(!g.has_edge(i, i));
                for j in 0..n {
                    if i != j {
                        prop_assert_eq!(g.has_edge(i, j), interacts(state.pos[i], state.pos[j], r));
                    }
                }
            }
            let m = g.normalize().map_err(|e| fail(e.to_string()))?.matrix;
            let asym = m.max_abs_diff(&m.transpose());
            prop_assert!(asym < 1e-12, "normalized asymmetry {asym:e}");
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn series(p: usize, t: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    (0..t)
        .map(|_| {
            Tensor::from_fn(1, p, |_, _| {
                let m: f64 = rng.random_range(0.1..5.0);
                if rng.random::<bool>() {
                    m
                } else {
                    -m
                }
            })
        })
        .collect()
}

/// Non-negativity, exact zero on perfect predictions, scale behaviour and
/// the ordering between the signed-sum and absolute MAPE variants.
pub fn metric_identities(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(1usize..6, 1usize..8, 0.1f64..10.0, any::<u64>()), |(p, t, c, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = series(p, t, &mut rng);
            let yh: Vec<Tensor> = y
                .iter()
                .map(|v| v.zip_map(&Tensor::uniform(v.rows, v.cols, -1.0, 1.0, &mut rng), |x, e| x + e))
                .collect();
            let ok = |r: gde_core::Result<f64>| r.map_err(|e| fail(e.to_string()));

            prop_assert_eq!(ok(rmse(&y, &y))?, 0.0);
            prop_assert_eq!(ok(mape(&y, &y))?, 0.0);
            prop_assert_eq!(ok(mape_abs(&y, &y))?, 0.0);

            let (m, ma, r) = (ok(mape(&y, &yh))?, ok(mape_abs(&y, &yh))?, ok(rmse(&y, &yh))?);
            prop_assert!(m >= 0.0 && ma >= 0.0 && r >= 0.0);
            prop_assert!(m <= ma * (1.0 + 1e-12), "mape {m} > mape_abs {ma}");
            let differs = y.iter().zip(&yh).any(|(a, b)| a != b);
            prop_assert_eq!(r > 0.0, differs);

            let ys: Vec<Tensor> = y.iter().map(|v| v.scale(c)).collect();
            let yhs: Vec<Tensor> = yh.iter().map(|v| v.scale(c)).collect();
            let rs = ok(rmse(&ys, &yhs))?;
            prop_assert!((rs - c * r).abs() <= 1e-9 * (1.0 + c * r));
            let ms = ok(mape(&ys, &yhs))?;
            prop_assert!((ms - m).abs() <= 1e-9 * (1.0 + m));
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// With `lr = 0` Adam never moves a parameter, whatever the gradients and decay.
pub fn adam_zero_lr(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(1usize..5, 0.0f64..1.0, 1usize..6, any::<u64>()), |(k, wd, steps, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut params = ParamSet::new();
            for i in 0..k {
                let (r, c) = (rng.random_range(1..4), rng.random_range(1..4));
                params.add(format!("p{i}"), Tensor::uniform(r, c, -5.0, 5.0, &mut rng));
            }
            let before = params.clone();
            let mut adam = Adam::new(&params, 0.0, wd);
            for _ in 0..steps {
                let grads: Vec<Tensor> = params
                    .iter()
                    .map(|(_, _, t)| Tensor::uniform(t.rows, t.cols, -100.0, 100.0, &mut rng))
                    .collect();
                adam.step(&mut params, &grads).map_err(|e| fail(e.to_string()))?;
            }
            for ((_, _, a), (_, _, b)) in params.iter().zip(before.iter()) {
                prop_assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

fn solve_value<F: VectorField>(field: &F, params: &ParamSet, h0: &Tensor, cfg: &SolverConfig) -> Result<Tensor, TestCaseError> {
    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, params);
    let res = gde_core::solve(field, &ctx, ctx.constant(h0.clone()), cfg).map_err(|e| fail(e.to_string()))?;
    Ok((*res.final_state.value()).clone())
}

/// Solving `F` on `[0, 1]` matches `F/2` on `[0, 2]`, for fixed-step and
/// adaptive schemes, and doubling every hybrid gap with a halved flow
/// leaves the hybrid outputs unchanged.
pub fn time_rescaling(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(2usize..6, 1usize..4, any::<u64>()), |(n, steps, seed)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(n, 0.5, &mut rng);
            let mut params = ParamSet::new();
            let stack = GcnStack::new(&mut params, "f", &[2, 4, 2], Activation::Tanh, Activation::None, 0.0, &mut rng);
            let op = Rc::new(g.normalize().unwrap().into_op());
            let h0 = Tensor::uniform(n, 2, -1.0, 1.0, &mut rng);
            let field = GcdeField { stack: &stack, op: Rc::clone(&op) };
            let half = ScaledField { inner: GcdeField { stack: &stack, op }, factor: 0.5 };

            for scheme in [Scheme::Rk2, Scheme::Rk4] {
                let a = solve_value(&field, &params, &h0, &SolverConfig::fixed(scheme, steps))?;
                let b = solve_value(&half, &params, &h0, &SolverConfig::fixed(scheme, steps).on_interval(0.0, 2.0))?;
                let d = a.max_abs_diff(&b);
                prop_assert!(d < 1e-12, "{scheme:?} rescaling deviation {d:e}");
            }
            let tol = 1e-8;
            let a = solve_value(&field, &params, &h0, &SolverConfig::adaptive(tol, tol))?;
            let b = solve_value(&half, &params, &h0, &SolverConfig::adaptive(tol, tol).on_interval(0.0, 2.0))?;
            let d = a.max_abs_diff(&b);
            prop_assert!(d < 1e-6, "dopri5 rescaling deviation {d:e}");

            let spec = HybridSpec {
                nodes: n,
                input_dim: 2,
                hidden_dim: 3,
                head_hidden: 4,
                output_dim: 1,
                with_flow: true,
                flatten: false,
            };
            let mut hp = ParamSet::new();
            let mut model = HybridModel::new(&mut hp, &spec, SolverConfig::fixed(Scheme::Rk4, steps), &mut rng);
            let times: Vec<f64> = (0..3).scan(0.0, |t, _| {
                *t += rng.random_range(0.1..1.0);
                Some(*t)
            }).collect();
            let xs: Vec<Tensor> = (0..3).map(|_| Tensor::uniform(n, 2, -1.0, 1.0, &mut rng)).collect();
            let graphs = vec![g.clone(), g.clone(), g];
            let s1 = GraphSequence::new(times.clone(), graphs.clone(), xs.clone()).map_err(|e| fail(e.to_string()))?;
            let s2 = GraphSequence::new(times.iter().map(|t| 2.0 * t).collect(), graphs, xs).map_err(|e| fail(e.to_string()))?;
            let run = |m: &HybridModel, s: &GraphSequence| -> Result<Vec<Tensor>, TestCaseError> {
                let tape = Tape::new();
                let ctx = Ctx::eval(&tape, &hp);
                let tr = hybrid_forward(&ctx, m, s).map_err(|e| fail(e.to_string()))?;
                Ok(tr.pre_jump.iter().map(|v| (*v.value()).clone()).collect())
            };
            let a = run(&model, &s1)?;
            model.flow_gain = 0.5;
            let b = run(&model, &s2)?;
            for (x, y) in a.iter().zip(&b) {
                let d = x.max_abs_diff(y);
                prop_assert!(d < 1e-12, "hybrid rescaling deviation {d:e}");
            }
            Ok(())
        })
        .map_err(|e| e.to_string())
}

/// Every criterion-level property suite with its name.
pub fn all_suites(cases: u32) -> Vec<(&'static str, Result<(), String>)> {
    vec![
        ("permutation equivariance (gcde/gmde/gade)", permutation_equivariance(cases)),
        ("force antisymmetry", force_antisymmetry(cases)),
        ("adjacency symmetry and threshold", adjacency_consistency(cases)),
        ("mape/rmse identities", metric_identities(cases)),
        ("adam zero-lr fixpoint", adam_zero_lr(cases)),
        ("time rescaling", time_rescaling(cases)),
    ]
}

mod common;

use std::rc::Rc;

use common::criteria::{convergence_slope, decay, solver_report, RK2_STEPS, RK4_STEPS};
use gde_core::fields::{GcdeField, GcnStack};
use gde_core::gradcheck::{check, UNROLL_TOLERANCE};
use gde_core::{solve, Activation, Graph, ParamSet, Scheme, SolverConfig, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn rk2_is_second_order() {
    let slope = convergence_slope(Scheme::Rk2, &RK2_STEPS);
    assert!((1.7..=2.3).contains(&slope), "slope {slope}");
}

#[test]
fn rk4_is_fourth_order() {
    let slope = convergence_slope(Scheme::Rk4, &RK4_STEPS);
    assert!((3.7..=4.3).contains(&slope), "slope {slope}");
}

#[test]
fn dopri5_meets_tolerance_on_decay() {
    let (h1, _, _) = decay(&SolverConfig::adaptive(1e-6, 1e-6));
    let err = (h1 - (-1.0f64).exp()).abs();
    assert!(err <= 1e-4, "error {err:e}");
}

#[test]
fn nfe_matches_instrumented_field() {
    let r = solver_report();
    assert!(r.nfe_exact, "{}", r.nfe_detail);
}

#[test]
fn tighter_tolerance_costs_more_evaluations() {
    let (_, loose, _) = decay(&SolverConfig::adaptive(1e-3, 1e-3));
    let (_, tight, _) = decay(&SolverConfig::adaptive(1e-9, 1e-9));
    assert!(tight > loose, "{tight} <= {loose}");
}

#[test]
fn fixed_step_gradients_on_two_node_gcde() {
    let op = Rc::new(Graph::complete(2).normalize().unwrap().into_op());
    for scheme in [Scheme::Rk2, Scheme::Rk4] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = ParamSet::new();
        let stack = GcnStack::new(&mut params, "f", &[3, 5, 3], Activation::Tanh, Activation::None, 0.0, &mut rng);
        let h0 = params.add("h0", Tensor::uniform(2, 3, -1.0, 1.0, &mut rng));
        let cfg = SolverConfig::fixed(scheme, 4);
        let r = check("unroll", &params, UNROLL_TOLERANCE, |c| {
            let f = GcdeField { stack: &stack, op: Rc::clone(&op) };
            let y = solve(&f, c, c.p(h0), &cfg)?.final_state;
            Ok(y.hadamard(&y)?.sum())
        })
        .unwrap();
        assert!(r.passed, "{scheme:?}: {:e}", r.max_rel_error);
    }
}

#[test]
fn invalid_interval_is_a_config_error() {
    let cfg = SolverConfig::fixed(Scheme::Rk4, 1).on_interval(1.0, 1.0);
    assert!(matches!(cfg.validate(), Err(gde_core::GdeError::Config(_))));
}

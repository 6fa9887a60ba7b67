//! Deterministic checks behind the solver, hybrid and data acceptance criteria.

use std::cell::Cell;
use std::rc::Rc;

use gde_core::data::{timestamp_gaps, undersample, TemporalDataset};
use gde_core::fields::FnField;
use gde_core::hybrid::{gcgru_jump, hybrid_forward, GcgruCell, HybridModel, HybridSpec};
use gde_core::tasks::forecast::{synthetic_traffic, SyntheticTrafficConfig};
use gde_core::{solve, Ctx, Graph, GraphSequence, ParamSet, Scheme, SolverConfig, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// `h(1)` for `ḣ = −h`, `h(0) = 1`, and the number of field calls made.
pub fn decay(cfg: &SolverConfig) -> (f64, usize, usize) {
    let calls = Cell::new(0usize);
    let field = FnField::new(|_ctx: &Ctx<'_>, _s, h| {
        calls.set(calls.get() + 1);
        Ok(h.scale(-1.0))
    });
    let tape = Tape::new();
    let params = ParamSet::new();
    let ctx = Ctx::eval(&tape, &params);
    let res = solve(&field, &ctx, ctx.constant(Tensor::scalar(1.0)), cfg).expect("decay solve");
    (res.final_state.value().item(), res.nfe, calls.get())
}

/// Least-squares slope of `log err` against `log steps`.
pub fn convergence_slope(scheme: Scheme, steps: &[usize]) -> f64 {
    let exact = (-1.0f64).exp();
    let pts: Vec<(f64, f64)> = steps
        .iter()
        .map(|&k| {
            let (h1, _, _) = decay(&SolverConfig::fixed(scheme, k));
            ((k as f64).ln(), (h1 - exact).abs().ln())
        })
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    -sxy / sxx
}

pub const RK2_STEPS: [usize; 5] = [8, 16, 32, 64, 128];
pub const RK4_STEPS: [usize; 5] = [4, 8, 16, 32, 64];

pub struct SolverReport {
    pub rk2_slope: f64,
    pub rk4_slope: f64,
    pub dopri_error: f64,
    pub nfe_exact: bool,
    pub nfe_detail: String,
}

pub fn solver_report() -> SolverReport {
    let rk2_slope = convergence_slope(Scheme::Rk2, &RK2_STEPS);
    let rk4_slope = convergence_slope(Scheme::Rk4, &RK4_STEPS);

    let mut cfg = SolverConfig::adaptive(1e-6, 1e-6);
    let (h1, _, _) = decay(&cfg);
    let dopri_error = (h1 - (-1.0f64).exp()).abs();

    let mut nfe_exact = true;
    let mut detail = Vec::new();
    for (scheme, k) in [(Scheme::Rk2, 1), (Scheme::Rk2, 7), (Scheme::Rk4, 1), (Scheme::Rk4, 5)] {
        let (_, nfe, calls) = decay(&SolverConfig::fixed(scheme, k));
        let ok = nfe == scheme.stages() * k && calls == nfe;
        nfe_exact &= ok;
        detail.push(format!("{scheme:?}x{k}: nfe={nfe} calls={calls}"));
    }
    for tol in [1e-3, 1e-6, 1e-9] {
        cfg.rtol = tol;
        cfg.atol = tol;
        let calls = Cell::new(0usize);
        let field = FnField::new(|_ctx: &Ctx<'_>, _s, h| {
            calls.set(calls.get() + 1);
            Ok(h.scale(-1.0))
        });
        let tape = Tape::new();
        let params = ParamSet::new();
        let ctx = Ctx::eval(&tape, &params);
        let res = solve(&field, &ctx, ctx.constant(Tensor::scalar(1.0)), &cfg).expect("decay solve");
        let expected = 1 + 6 * (res.accepted + res.rejected);
        let ok = res.nfe == expected && calls.get() == res.nfe;
        nfe_exact &= ok;
        detail.push(format!(
            "dopri5@{tol:e}: nfe={} calls={} accepted={} rejected={}",
            res.nfe,
            calls.get(),
            res.accepted,
            res.rejected
        ));
    }
    SolverReport {
        rk2_slope,
        rk4_slope,
        dopri_error,
        nfe_exact,
        nfe_detail: detail.join(", "),
    }
}

/// 20-step synthetic spatio-temporal stream on a fixed road-like graph.
pub fn synthetic_stream(steps: usize) -> GraphSequence {
    let data = synthetic_traffic(
        &SyntheticTrafficConfig {
            steps,
            ..SyntheticTrafficConfig::default()
        },
        3,
    )
    .expect("synthetic traffic");
    data.seq
}

/// Largest `|y_hybrid − y_discrete|` over all outputs when the flow field is
/// identically zero, with the discrete reference computed by a hand loop.
pub fn flow_off_deviation(steps: usize) -> (f64, usize) {
    let stream = synthetic_stream(steps);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = HybridSpec {
        nodes: stream.graphs[0].n(),
        input_dim: stream.features[0].cols,
        hidden_dim: 8,
        head_hidden: 8,
        output_dim: 1,
        with_flow: true,
        flatten: false,
    };
    let mut params = ParamSet::new();
    let model = HybridModel::new(&mut params, &spec, SolverConfig::fixed(Scheme::Rk4, 3), &mut rng);
    let flow_ids: Vec<_> = params
        .iter()
        .filter(|(_, name, _)| name.starts_with("flow."))
        .map(|(id, _, _)| id)
        .collect();
    for id in flow_ids {
        let t = params.get_mut(id);
        *t = Tensor::zeros(t.rows, t.cols);
    }

    let tape = Tape::new();
    let ctx = Ctx::eval(&tape, &params);
    let traj = hybrid_forward(&ctx, &model, &stream).expect("hybrid forward");

    let mut h = ctx.constant(Tensor::zeros(spec.nodes, spec.hidden_dim));
    let mut worst = 0.0f64;
    let mut mismatched = 0;
    for k in 0..stream.len() {
        let op = Rc::new(stream.graphs[k].normalize().unwrap().into_op());
        h = gcgru_jump(&ctx, &model.cell, h, ctx.constant(stream.features[k].clone()), &op)
            .unwrap()
            .state;
        let y = model.head.forward(&ctx, h).unwrap().value();
        let yh = traj.outputs[k].value();
        if *y != *yh {
            mismatched += 1;
        }
        worst = worst.max(y.max_abs_diff(&yh));
    }
    (worst, mismatched)
}

/// Largest `|H⁺ − H/2|` for an all-zero GCGRU cell over random states and inputs.
pub fn zero_cell_deviation(trials: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let cell = GcgruCell::new(&mut params, "g", 3, 5, &mut rng);
        for id in cell.param_ids() {
            let t = params.get_mut(id);
            *t = Tensor::zeros(t.rows, t.cols);
        }
        let n = 2 + (seed as usize % 6);
        let g = Graph::complete(n);
        let op = Rc::new(g.normalize().unwrap().into_op());
        let h = Tensor::uniform(n, 5, -10.0, 10.0, &mut rng);
        let x = Tensor::uniform(n, 3, -10.0, 10.0, &mut rng);
        let tape = Tape::new();
        let ctx = Ctx::eval(&tape, &params);
        let out = gcgru_jump(&ctx, &cell, ctx.constant(h.clone()), ctx.constant(x), &op).unwrap();
        worst = worst.max(out.state.value().max_abs_diff(&h.scale(0.5)));
    }
    worst
}

pub struct GapTest {
    pub keep_prob: f64,
    pub gaps: usize,
    pub mean_gap: f64,
    pub chi2: f64,
    pub dof: usize,
    pub p_value: f64,
    pub survivor_fraction: f64,
    pub survivor_z: f64,
}

/// Chi-square goodness of fit of undersampled timestamp gaps against
/// `geometric(p)` on `{1, 2, …}`, pooling the tail so every expected count is
/// at least five.
pub fn gap_chi_square(keep_prob: f64, trials: usize, seed: u64) -> GapTest {
    let len = trials + 1;
    let ds = TemporalDataset {
        seq: GraphSequence::new(
            (0..len).map(|k| k as f64).collect(),
            vec![Graph::empty(1); len],
            vec![Tensor::zeros(1, 1); len],
        )
        .unwrap(),
        target_channels: 1,
    };
    let kept = undersample(&ds, keep_prob, seed).unwrap();
    let gaps: Vec<usize> = timestamp_gaps(&kept.seq.timestamps)
        .iter()
        .map(|g| g.round() as usize)
        .collect();
    let total = gaps.len() as f64;
    let pmf = |g: usize| (1.0 - keep_prob).powi(g as i32 - 1) * keep_prob;

    let mut bins = Vec::new();
    let mut g = 1;
    let mut covered = 0.0;
    loop {
        let p = pmf(g);
        let tail = 1.0 - covered - p;
        if total * tail < 5.0 {
            bins.push((g, usize::MAX, 1.0 - covered));
            break;
        }
        bins.push((g, g, p));
        covered += p;
        g += 1;
    }
    let mut chi2 = 0.0;
    for &(lo, hi, p) in &bins {
        let observed = gaps.iter().filter(|&&x| x >= lo && x <= hi).count() as f64;
        let expected = total * p;
        chi2 += (observed - expected).powi(2) / expected;
    }
    let dof = bins.len() - 1;
    let p_value = ChiSquared::new(dof as f64).unwrap().sf(chi2);

    let survivors = (kept.seq.len() - 1) as f64;
    let sigma = (trials as f64 * keep_prob * (1.0 - keep_prob)).sqrt();
    GapTest {
        keep_prob,
        gaps: gaps.len(),
        mean_gap: gaps.iter().sum::<usize>() as f64 / total,
        chi2,
        dof,
        p_value,
        survivor_fraction: survivors / trials as f64,
        survivor_z: (survivors - trials as f64 * keep_prob) / sigma,
    }
}

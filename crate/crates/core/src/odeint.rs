//! Explicit Runge–Kutta integration of vector fields on the autodiff tape.
//!
//! Fixed-step midpoint (`rk2`) and classical `rk4`, plus adaptive
//! Dormand–Prince 5(4) with first-same-as-last reuse. Every stage is recorded
//! on the tape, so gradients reach the field parameters and the initial
//! state by ordinary backpropagation. Step sizes chosen by the controller are
//! treated as constants.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{GdeError, Result};
use crate::fields::VectorField;
use crate::params::Ctx;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Rk2,
    Rk4,
    Dopri5,
}

impl Scheme {
    /// Field evaluations per fixed step.
    pub fn stages(self) -> usize {
        match self {
            Scheme::Rk2 => 2,
            Scheme::Rk4 => 4,
            Scheme::Dopri5 => 6,
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = GdeError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rk2" => Ok(Scheme::Rk2),
            "rk4" => Ok(Scheme::Rk4),
            "dopri5" | "dpr5" => Ok(Scheme::Dopri5),
            other => Err(GdeError::Config(format!("unknown scheme '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub scheme: Scheme,
    pub s0: f64,
    pub s1: f64,
    pub steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub dt_min: f64,
    /// Keep the state after every accepted step.
    pub record_trajectory: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            scheme: Scheme::Rk4,
            s0: 0.0,
            s1: 1.0,
            steps: 1,
            rtol: 1e-3,
            atol: 1e-4,
            max_steps: 10_000,
            dt_min: 1e-12,
            record_trajectory: false,
        }
    }
}

impl SolverConfig {
    pub fn fixed(scheme: Scheme, steps: usize) -> Self {
        Self {
            scheme,
            steps,
            ..Self::default()
        }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self {
            scheme: Scheme::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn on_interval(mut self, s0: f64, s1: f64) -> Self {
        self.s0 = s0;
        self.s1 = s1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s1 > self.s0) {
            return Err(GdeError::Config(format!(
                "integration interval [{}, {}] must have s1 > s0",
                self.s0, self.s1
            )));
        }
        match self.scheme {
            Scheme::Rk2 | Scheme::Rk4 if self.steps == 0 => {
                Err(GdeError::Config("fixed-step solver needs steps >= 1".into()))
            }
            Scheme::Dopri5 if !(self.rtol > 0.0 && self.atol > 0.0) => {
                Err(GdeError::Config("rtol and atol must be positive".into()))
            }
            Scheme::Dopri5 if self.max_steps == 0 || !(self.dt_min > 0.0) => {
                Err(GdeError::Config("max_steps and dt_min must be positive".into()))
            }
            _ => Ok(()),
        }
    }
}

pub struct SolveResult<'t> {
    pub final_state: Var<'t>,
    pub nfe: usize,
    pub accepted: usize,
    pub rejected: usize,
    /// `(s, state)` after each accepted step, including the initial state.
    /// Empty unless `record_trajectory` was set.
    pub trajectory: Vec<(f64, Tensor)>,
}

impl SolveResult<'_> {
    /// State at `s`, linearly interpolated between recorded steps.
    pub fn sample(&self, s: f64) -> Option<Tensor> {
        let traj = &self.trajectory;
        let first = traj.first()?;
        if s <= first.0 {
            return Some(first.1.clone());
        }
        for w in traj.windows(2) {
            let (sa, a) = (&w[0].0, &w[0].1);
            let (sb, b) = (&w[1].0, &w[1].1);
            if s <= *sb {
                let t = (s - sa) / (sb - sa);
                return Some(a.zip_map(b, |x, y| x + t * (y - x)));
            }
        }
        traj.last().map(|(_, x)| x.clone())
    }
}

/// Outcome of one explicit step.
pub struct StepOutput<'t> {
    pub next: Var<'t>,
    /// Embedded error estimate (Dormand–Prince only).
    pub error: Option<Tensor>,
    pub nfe: usize,
    /// Field value at the new point (first-same-as-last reuse).
    pub last_derivative: Option<Var<'t>>,
}

/// `h + dt · Σ c_i k_i`, skipping zero coefficients.
fn lincomb<'t>(h: Var<'t>, dt: f64, terms: &[(f64, Var<'t>)]) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for &(c, k) in terms {
        if c == 0.0 {
            continue;
        }
        let term = k.scale(dt * c);
        acc = Some(match acc {
            None => term,
            Some(a) => a.add(&term)?,
        });
    }
    match acc {
        None => Ok(h),
        Some(a) => h.add(&a),
    }
}

fn eval_checked<'t, F: VectorField + ?Sized>(
    field: &F,
    ctx: &Ctx<'t>,
    s: f64,
    h: Var<'t>,
) -> Result<Var<'t>> {
    let out = field.eval(ctx, s, h)?;
    if out.shape() != h.shape() {
        return Err(GdeError::shape("vector field", h.shape(), out.shape()));
    }
    if !out.value().all_finite() {
        return Err(GdeError::NonFinite(format!("field evaluation at s={s}")));
    }
    Ok(out)
}

// Dormand–Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [&[f64]; 7] = [
    &[],
    &[1.0 / 5.0],
    &[3.0 / 40.0, 9.0 / 40.0],
    &[44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0],
    &[19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0],
    &[9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0],
    &[35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

/// One explicit step of `scheme` from `(s, h)` with step `dt`.
///
/// For Dormand–Prince, `k1` may carry the field value at `(s, h)` from the
/// previous accepted step; it is then not re-evaluated.
pub fn rk_step<'t, F: VectorField + ?Sized>(
    field: &F,
    ctx: &Ctx<'t>,
    s: f64,
    h: Var<'t>,
    dt: f64,
    scheme: Scheme,
    k1: Option<Var<'t>>,
) -> Result<StepOutput<'t>> {
    if !(dt > 0.0) {
        return Err(GdeError::Contract(format!("step size must be positive, got {dt}")));
    }
    let mut nfe = 0;
    let mut eval = |s: f64, x: Var<'t>| {
        nfe += 1;
        eval_checked(field, ctx, s, x)
    };
    let out = match scheme {
        Scheme::Rk2 => {
            let k1 = eval(s, h)?;
            let k2 = eval(s + 0.5 * dt, lincomb(h, dt, &[(0.5, k1)])?)?;
            (lincomb(h, dt, &[(1.0, k2)])?, None, None)
        }
        Scheme::Rk4 => {
            let k1 = eval(s, h)?;
            let k2 = eval(s + 0.5 * dt, lincomb(h, dt, &[(0.5, k1)])?)?;
            let k3 = eval(s + 0.5 * dt, lincomb(h, dt, &[(0.5, k2)])?)?;
            let k4 = eval(s + dt, lincomb(h, dt, &[(1.0, k3)])?)?;
            let next = lincomb(
                h,
                dt,
                &[(1.0 / 6.0, k1), (1.0 / 3.0, k2), (1.0 / 3.0, k3), (1.0 / 6.0, k4)],
            )?;
            (next, None, None)
        }
        Scheme::Dopri5 => {
            let mut ks: Vec<Var<'t>> = Vec::with_capacity(7);
            ks.push(match k1 {
                Some(k) => k,
                None => eval(s, h)?,
            });
            let mut next = h;
            for stage in 1..7 {
                let terms: Vec<(f64, Var<'t>)> =
                    DP_A[stage].iter().copied().zip(ks.iter().copied()).collect();
                let x = lincomb(h, dt, &terms)?;
                // the last stage row equals the 5th-order weights
                if stage == 6 {
                    next = x;
                }
                ks.push(eval(s + DP_C[stage] * dt, x)?);
            }
            let mut err = Tensor::zeros(h.shape().0, h.shape().1);
            for (i, k) in ks.iter().enumerate() {
                let c = DP_B5[i] - DP_B4[i];
                if c != 0.0 {
                    err.axpy(dt * c, &k.value());
                }
            }
            (next, Some(err), Some(ks[6]))
        }
    };
    let (next, error, last_derivative) = out;
    if !next.value().all_finite() {
        return Err(GdeError::NonFinite(format!("state after step at s={s}")));
    }
    Ok(StepOutput {
        next,
        error,
        nfe,
        last_derivative,
    })
}

/// RMS of the error scaled by `atol + rtol · max(|y0|, |y1|)`.
pub fn error_norm(err: &Tensor, y0: &Tensor, y1: &Tensor, rtol: f64, atol: f64) -> f64 {
    let n = err.len().max(1) as f64;
    let sq: f64 = err
        .data
        .iter()
        .zip(y0.data.iter().zip(&y1.data))
        .map(|(e, (a, b))| {
            let sc = atol + rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (sq / n).sqrt()
}

pub const SAFETY: f64 = 0.9;
pub const MIN_FACTOR: f64 = 0.2;
pub const MAX_FACTOR: f64 = 5.0;

/// Accepts iff the scaled error is at most one; proposes
/// `dt · clamp(0.9 · err^(-1/5), 0.2, 5)`.
pub fn adaptive_controller(scaled_error: f64, dt: f64, dt_min: f64) -> Result<(bool, f64)> {
    if !(dt > 0.0) {
        return Err(GdeError::Contract(format!("step size must be positive, got {dt}")));
    }
    if scaled_error.is_nan() {
        return Err(GdeError::NonFinite("error estimate".into()));
    }
    let accept = scaled_error <= 1.0;
    let factor = if scaled_error == 0.0 {
        MAX_FACTOR
    } else {
        (SAFETY * scaled_error.powf(-0.2)).clamp(MIN_FACTOR, MAX_FACTOR)
    };
    let dt_next = dt * factor;
    if dt_next < dt_min {
        return Err(GdeError::Divergence {
            nfe: 0,
            reason: format!("step size {dt_next:e} fell below dt_min {dt_min:e}"),
        });
    }
    Ok((accept, dt_next))
}

/// Integrates `dH/ds = F(s, H)` from `cfg.s0` to `cfg.s1` starting at `h0`.
pub fn solve<'t, F: VectorField + ?Sized>(
    field: &F,
    ctx: &Ctx<'t>,
    h0: Var<'t>,
    cfg: &SolverConfig,
) -> Result<SolveResult<'t>> {
    cfg.validate()?;
    let mut trajectory = Vec::new();
    if cfg.record_trajectory {
        trajectory.push((cfg.s0, (*h0.value()).clone()));
    }
    match cfg.scheme {
        Scheme::Rk2 | Scheme::Rk4 => {
            let dt = (cfg.s1 - cfg.s0) / cfg.steps as f64;
            let mut h = h0;
            let mut nfe = 0;
            for i in 0..cfg.steps {
                let s = cfg.s0 + i as f64 * dt;
                let step = rk_step(field, ctx, s, h, dt, cfg.scheme, None)?;
                nfe += step.nfe;
                h = step.next;
                if cfg.record_trajectory {
                    trajectory.push((s + dt, (*h.value()).clone()));
                }
            }
            Ok(SolveResult {
                final_state: h,
                nfe,
                accepted: cfg.steps,
                rejected: 0,
                trajectory,
            })
        }
        Scheme::Dopri5 => solve_adaptive(field, ctx, h0, cfg, trajectory),
    }
}

fn solve_adaptive<'t, F: VectorField + ?Sized>(
    field: &F,
    ctx: &Ctx<'t>,
    h0: Var<'t>,
    cfg: &SolverConfig,
    mut trajectory: Vec<(f64, Tensor)>,
) -> Result<SolveResult<'t>> {
    let span = cfg.s1 - cfg.s0;
    let end_tol = 1e-12 * span.abs().max(1.0);
    let mut s = cfg.s0;
    let mut h = h0;
    let mut dt = span / 100.0;
    let mut nfe = 1;
    let mut k1 = eval_checked(field, ctx, s, h)?;
    let (mut accepted, mut rejected) = (0usize, 0usize);

    while cfg.s1 - s > end_tol {
        if accepted + rejected >= cfg.max_steps {
            return Err(GdeError::Divergence {
                nfe,
                reason: format!("exceeded max_steps = {} at s = {s}", cfg.max_steps),
            });
        }
        let dt_try = dt.min(cfg.s1 - s);
        let step = match rk_step(field, ctx, s, h, dt_try, Scheme::Dopri5, Some(k1)) {
            Ok(step) => step,
            Err(GdeError::Divergence { reason, .. }) => return Err(GdeError::Divergence { nfe, reason }),
            Err(e) => return Err(e),
        };
        nfe += step.nfe;
        let err = step.error.as_ref().expect("dopri5 reports an error estimate");
        let scaled = error_norm(err, &h.value(), &step.next.value(), cfg.rtol, cfg.atol);
        let decision = adaptive_controller(scaled, dt_try, cfg.dt_min);
        let accept = scaled <= 1.0;
        if accept {
            accepted += 1;
            s += dt_try;
            h = step.next;
            k1 = step.last_derivative.expect("dopri5 returns last stage");
            if cfg.record_trajectory {
                trajectory.push((s, (*h.value()).clone()));
            }
        } else {
            rejected += 1;
        }
        match decision {
            Ok((_, next)) => dt = next,
            Err(_) if accept && cfg.s1 - s <= end_tol => break,
            Err(GdeError::Divergence { reason, .. }) => return Err(GdeError::Divergence { nfe, reason }),
            Err(e) => return Err(e),
        }
    }
    Ok(SolveResult {
        final_state: h,
        nfe,
        accepted,
        rejected,
        trajectory,
    })
}

//! Planar multi-agent system with viscoelastic pair interactions and a
//! distance-triggered, time-varying interaction graph.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GdeError, Result};
use crate::graph::{Graph, GraphSequence};
use crate::tensor::Tensor;

/// Pairs closer than this abort force evaluation.
pub const SINGULARITY_EPS: f64 = 1e-9;
/// Minimum initial pairwise distance accepted by [`random_init`].
pub const INIT_SEPARATION: f64 = 1e-3;

type Vec2 = [f64; 2];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub r: f64,
    pub dt: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 10,
            alpha: 1.0,
            beta: 1.0,
            r: 1.0,
            dt: 1.95e-3,
            horizon: 5.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("r", self.r),
            ("dt", self.dt),
            ("T", self.horizon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(GdeError::Config(format!("sim.{name} must be positive and finite, got {v}")));
            }
        }
        if self.n == 0 {
            return Err(GdeError::Config("sim.n must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of stored states, `⌊T/dt⌋ + 1`.
    pub fn num_states(&self) -> usize {
        (self.horizon / self.dt).floor() as usize + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleState {
    pub pos: Vec<Vec2>,
    pub vel: Vec<Vec2>,
}

impl ParticleState {
    pub fn n(&self) -> usize {
        self.pos.len()
    }

    /// Node features `[x1, x2, v1, v2]`, one row per particle.
    pub fn to_features(&self) -> Tensor {
        Tensor::from_fn(self.n(), 4, |i, j| match j {
            0 | 1 => self.pos[i][j],
            _ => self.vel[i][j - 2],
        })
    }

    pub fn from_features(t: &Tensor) -> Result<Self> {
        if t.cols != 4 {
            return Err(GdeError::shape("particle features", t.shape(), (t.rows, 4)));
        }
        Ok(Self {
            pos: (0..t.rows).map(|i| [t.get(i, 0), t.get(i, 1)]).collect(),
            vel: (0..t.rows).map(|i| [t.get(i, 2), t.get(i, 3)]).collect(),
        })
    }

    pub fn is_finite(&self) -> bool {
        self.pos.iter().chain(&self.vel).all(|p| p[0].is_finite() && p[1].is_finite())
    }
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(a: Vec2) -> f64 {
    a[0].hypot(a[1])
}

/// Spring-with-drag force on `i` from `j`.
pub fn pair_force(xi: Vec2, xj: Vec2, vi: Vec2, vj: Vec2, alpha: f64, beta: f64, r: f64) -> Option<Vec2> {
    let d = sub(xi, xj);
    let dist = norm(d);
    if dist < SINGULARITY_EPS {
        return None;
    }
    let dv = sub(vi, vj);
    let radial = (dv[0] * d[0] + dv[1] * d[1]) / dist;
    let mag = alpha * (dist - r) + beta * radial;
    Some([-mag * d[0] / dist, -mag * d[1] / dist])
}

/// True when `i` and `j` interact: `2‖x_i − x_j‖ ≤ r`.
pub fn interacts(xi: Vec2, xj: Vec2, r: f64) -> bool {
    2.0 * norm(sub(xi, xj)) <= r
}

/// `ẍ_i = −x_i − Σ_{j∈N_i} f_ij`.
pub fn acceleration(state: &ParticleState, cfg: &SimConfig) -> Result<Vec<Vec2>> {
    let n = state.n();
    let mut acc: Vec<Vec2> = state.pos.iter().map(|p| [-p[0], -p[1]]).collect();
    for i in 0..n {
        for j in (i + 1)..n {
            let (xi, xj) = (state.pos[i], state.pos[j]);
            if !interacts(xi, xj, cfg.r) {
                continue;
            }
            let f = pair_force(xi, xj, state.vel[i], state.vel[j], cfg.alpha, cfg.beta, cfg.r)
                .ok_or(GdeError::Singularity { i, j, step: None })?;
            acc[i][0] -= f[0];
            acc[i][1] -= f[1];
            acc[j][0] += f[0];
            acc[j][1] += f[1];
        }
    }
    Ok(acc)
}

/// Interaction graph `A_t^{(ij)} = 1 ⟺ 2‖x_i − x_j‖ ≤ r, i ≠ j`.
pub fn adjacency(state: &ParticleState, r: f64) -> Graph {
    let n = state.n();
    let edges = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
        .filter(|&(i, j)| interacts(state.pos[i], state.pos[j], r));
    Graph::undirected(n, edges).expect("indices in range")
}

fn advance(state: &ParticleState, dpos: &[Vec2], dvel: &[Vec2], h: f64) -> ParticleState {
    let step = |base: &[Vec2], d: &[Vec2]| {
        base.iter()
            .zip(d)
            .map(|(b, d)| [b[0] + h * d[0], b[1] + h * d[1]])
            .collect()
    };
    ParticleState {
        pos: step(&state.pos, dpos),
        vel: step(&state.vel, dvel),
    }
}

/// One classical RK4 step of `(ẋ, v̇) = (v, a(x, v))`.
pub fn rk4_step(state: &ParticleState, cfg: &SimConfig, dt: f64) -> Result<ParticleState> {
    let k1v = state.vel.clone();
    let k1a = acceleration(state, cfg)?;
    let s2 = advance(state, &k1v, &k1a, dt / 2.0);
    let k2a = acceleration(&s2, cfg)?;
    let s3 = advance(state, &s2.vel, &k2a, dt / 2.0);
    let k3a = acceleration(&s3, cfg)?;
    let s4 = advance(state, &s3.vel, &k3a, dt);
    let k4a = acceleration(&s4, cfg)?;
    let combine = |a: &[Vec2], b: &[Vec2], c: &[Vec2], d: &[Vec2]| -> Vec<Vec2> {
        (0..a.len())
            .map(|i| {
                [
                    (a[i][0] + 2.0 * b[i][0] + 2.0 * c[i][0] + d[i][0]) / 6.0,
                    (a[i][1] + 2.0 * b[i][1] + 2.0 * c[i][1] + d[i][1]) / 6.0,
                ]
            })
            .collect()
    };
    let dpos = combine(&k1v, &s2.vel, &s3.vel, &s4.vel);
    let dvel = combine(&k1a, &k2a, &k3a, &k4a);
    Ok(advance(state, &dpos, &dvel, dt))
}

/// Positions in `[−2, 2]²`, velocities in `[−0.5, 0.5]²`, resampled until
/// every pair is at least [`INIT_SEPARATION`] apart.
pub fn random_init<R: Rng + ?Sized>(n: usize, rng: &mut R) -> ParticleState {
    let mut pos: Vec<Vec2> = Vec::with_capacity(n);
    while pos.len() < n {
        let p = [rng.random_range(-2.0..=2.0), rng.random_range(-2.0..=2.0)];
        if pos.iter().all(|q| norm(sub(p, *q)) >= INIT_SEPARATION) {
            pos.push(p);
        }
    }
    let vel = (0..n)
        .map(|_| [rng.random_range(-0.5..=0.5), rng.random_range(-0.5..=0.5)])
        .collect();
    ParticleState { pos, vel }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    pub states: Vec<ParticleState>,
    pub graphs: Vec<Graph>,
    pub dt: f64,
    pub horizon: f64,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn to_sequence(&self) -> GraphSequence {
        GraphSequence::new(
            (0..self.len()).map(|k| self.time(k)).collect(),
            self.graphs.clone(),
            self.states.iter().map(ParticleState::to_features).collect(),
        )
        .expect("rollout is a valid sequence")
    }
}

/// Integrates `init` for `⌊T/dt⌋` RK4 steps, recording states and graphs.
pub fn simulate(cfg: &SimConfig, init: ParticleState) -> Result<Rollout> {
    cfg.validate()?;
    if init.n() != cfg.n {
        return Err(GdeError::Config(format!(
            "initial state has {} particles, config expects {}",
            init.n(),
            cfg.n
        )));
    }
    let len = cfg.num_states();
    let mut states = Vec::with_capacity(len);
    let mut graphs = Vec::with_capacity(len);
    graphs.push(adjacency(&init, cfg.r));
    states.push(init);
    for step in 1..len {
        let next = rk4_step(&states[step - 1], cfg, cfg.dt).map_err(|e| match e {
            GdeError::Singularity { i, j, .. } => GdeError::Singularity { i, j, step: Some(step) },
            e => e,
        })?;
        if !next.is_finite() {
            return Err(GdeError::NonFinite(format!("particle state at step {step}")));
        }
        graphs.push(adjacency(&next, cfg.r));
        states.push(next);
    }
    Ok(Rollout {
        states,
        graphs,
        dt: cfg.dt,
        horizon: cfg.horizon,
    })
}

/// One-step supervised pair `(x_t, A_t) → x_{t+dt}`.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub step: usize,
    pub input: Tensor,
    pub graph: Graph,
    pub target: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParticleDataset {
    pub train: Vec<Transition>,
    pub test: Vec<Transition>,
    /// First state index of the test half.
    pub split: usize,
}

/// Consecutive-state pairs, first half for training and second for testing.
pub fn make_dataset(rollout: &Rollout) -> ParticleDataset {
    let feats: Vec<Tensor> = rollout.states.iter().map(ParticleState::to_features).collect();
    let pairs: Vec<Transition> = (0..feats.len().saturating_sub(1))
        .map(|k| Transition {
            step: k,
            input: feats[k].clone(),
            graph: rollout.graphs[k].clone(),
            target: feats[k + 1].clone(),
        })
        .collect();
    let n_train = pairs.len() - pairs.len() / 2;
    let mut train = pairs;
    let test = train.split_off(n_train);
    ParticleDataset { train, test, split: n_train }
}

//! Built-in evaluator: a planar three-segment crawler with 1-D dynamics.
//!
//! Each segment is a cylinder of length `l_i` and radius `r_i`. Actuator `j`
//! applies an open-loop sinusoidal command; thrust is `G * sum_j u_j * l_j`
//! against linear drag and tanh-regularized Coulomb friction. Integration is
//! semi-implicit Euler. The reward expression is sampled after every step and
//! the episode return is `dt * sum_t r_t`.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::cem::{self, CemConfig};
use crate::model::{
    EvalStatus, EvaluationResult, ModelError, MorphologyCandidate, MorphologySchema, PairKey, ParamMap, ParamSpec,
    RewardCandidate, RewardDialect,
};
use crate::reward_lang::{self, Bound, EvalError, Expr};

pub const SCHEMA_NAME: &str = "crawler";
pub const SEGMENTS: usize = 3;
pub const LENGTH_BOUNDS: (f64, f64) = (0.05, 1.0);
pub const RADIUS_BOUNDS: (f64, f64) = (0.01, 0.2);

/// Variables a crawler reward may reference, in binding order.
pub const STATE_VARS: [&str; 9] = ["t", "x", "v", "dist", "speed", "ctrl", "u1", "u2", "u3"];

const STRUCTURE_TEMPLATE: &str = r#"<robot model="crawler">
  <option timestep="0.01" gravity="0 0 -9.81" density="1000"/>
  <body name="seg1">
    <geom type="capsule" length="{l1}" radius="{r1}"/>
    <body name="seg2">
      <joint name="hinge1" type="hinge" axis="0 1 0"/>
      <geom type="capsule" length="{l2}" radius="{r2}"/>
      <body name="seg3">
        <joint name="hinge2" type="hinge" axis="0 1 0"/>
        <geom type="capsule" length="{l3}" radius="{r3}"/>
      </body>
    </body>
  </body>
  <actuator>
    <motor name="u1" body="seg1" gear="20" ctrlrange="-1 1"/>
    <motor name="u2" body="seg2" gear="20" ctrlrange="-1 1"/>
    <motor name="u3" body="seg3" gear="20" ctrlrange="-1 1"/>
  </actuator>
</robot>
"#;

pub const TASK_DESCRIPTION: &str = "\
The crawler is a planar robot made of three cylindrical segments lying on flat \
ground. Each segment carries one actuator that pushes the body forward or \
backward with a force proportional to the command and the segment length. \
Heavier bodies suffer more drag and ground friction. The goal is to move as \
far as possible in the +x direction within 10 seconds while using as little \
material (body volume) as possible.";

pub const ENVIRONMENT_SOURCE: &str = r#"class CrawlerEnv:
    dt = 0.01          # seconds per step
    horizon = 1000     # steps per episode
    density = 1000.0   # kg/m^3
    gear = 20.0        # N per unit command per metre of segment
    drag = 0.8         # 1/s, applied as drag * mass * v
    friction = 0.1     # Coulomb coefficient, tanh-regularized
    gravity = 9.81

    def step(self, action):
        u = clip(action, -1.0, 1.0)
        thrust = gear * sum(u[j] * length[j] for j in range(3))
        acc = (thrust - drag * mass * v - friction * mass * gravity * tanh(v / 0.01)) / mass
        v = v + acc * dt
        x = x + v * dt
        t = t + dt
        obs = {
            "t": t,              # elapsed time (s)
            "x": x,              # position (m)
            "v": v,              # velocity (m/s)
            "dist": x - x0,      # displacement since reset (m)
            "speed": abs(v),     # (m/s)
            "ctrl": sum(u * u),  # squared command magnitude
            "u1": u[0], "u2": u[1], "u3": u[2],
        }
        return obs
"#;

pub const REWARD_FORMAT: &str = "\
Write the reward as a single arithmetic expression in a fenced code block. \
Allowed: numbers, the variables t, x, v, dist, speed, ctrl, u1, u2, u3, \
the operators + - * / and parentheses, and the functions abs(x), min(a, b), \
max(a, b), exp(x), tanh(x), sqrt(x), clamp(x, lo, hi). The expression is \
evaluated after every step and multiplied by dt.";

/// Design space of the crawler: `l1..l3` in metres, `r1..r3` in metres.
pub fn schema() -> MorphologySchema {
    let mut params = Vec::with_capacity(2 * SEGMENTS);
    for i in 1..=SEGMENTS {
        params.push(ParamSpec::new(&format!("l{i}"), LENGTH_BOUNDS.0, LENGTH_BOUNDS.1, "m"));
    }
    for i in 1..=SEGMENTS {
        params.push(ParamSpec::new(&format!("r{i}"), RADIUS_BOUNDS.0, RADIUS_BOUNDS.1, "m"));
    }
    MorphologySchema::new(SCHEMA_NAME, params, STRUCTURE_TEMPLATE).expect("built-in crawler schema is well formed")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrawlerMorphology {
    pub lengths: [f64; SEGMENTS],
    pub radii: [f64; SEGMENTS],
}

impl CrawlerMorphology {
    pub fn new(lengths: [f64; SEGMENTS], radii: [f64; SEGMENTS]) -> Result<Self, ModelError> {
        let check = |name: String, v: f64, (lo, hi): (f64, f64)| {
            if !v.is_finite() {
                Err(ModelError::NonFiniteValue(name))
            } else if v < lo || v > hi {
                Err(ModelError::InvalidBounds(name))
            } else {
                Ok(())
            }
        };
        for i in 0..SEGMENTS {
            check(format!("l{}", i + 1), lengths[i], LENGTH_BOUNDS)?;
            check(format!("r{}", i + 1), radii[i], RADIUS_BOUNDS)?;
        }
        Ok(CrawlerMorphology { lengths, radii })
    }

    /// Builds from a parameter map keyed `l1..l3`, `r1..r3`.
    pub fn from_params(values: &ParamMap) -> Result<Self, ModelError> {
        let get = |k: String| values.get(&k).copied().ok_or(ModelError::MissingParameter(k));
        let mut lengths = [0.0; SEGMENTS];
        let mut radii = [0.0; SEGMENTS];
        for i in 0..SEGMENTS {
            lengths[i] = get(format!("l{}", i + 1))?;
            radii[i] = get(format!("r{}", i + 1))?;
        }
        Self::new(lengths, radii)
    }

    /// Sum of cylinder volumes, `sum_i pi r_i^2 l_i` (m^3).
    pub fn volume(&self) -> f64 {
        self.radii.iter().zip(&self.lengths).map(|(r, l)| PI * r * r * l).sum()
    }

    pub fn mass(&self, density: f64) -> f64 {
        density * self.volume()
    }
}

/// Fixed physical constants of the crawler world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub horizon: f64,
    pub density: f64,
    pub gear: f64,
    pub drag: f64,
    pub friction: f64,
    pub gravity: f64,
    pub velocity_smoothing: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            dt: 0.01,
            horizon: 10.0,
            density: 1000.0,
            gear: 20.0,
            drag: 0.8,
            friction: 0.1,
            gravity: 9.81,
            velocity_smoothing: 0.01,
        }
    }
}

impl SimConfig {
    pub fn steps(&self) -> usize {
        libm::round(self.horizon / self.dt) as usize
    }
}

pub const AMPLITUDE_BOUNDS: (f64, f64) = (0.0, 1.0);
pub const FREQUENCY_BOUNDS: (f64, f64) = (0.1, 3.0);
pub const PHASE_BOUNDS: (f64, f64) = (0.0, 2.0 * PI);

/// Open-loop sinusoidal controller, one oscillator per actuator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerParams {
    pub amplitude: [f64; SEGMENTS],
    pub frequency: [f64; SEGMENTS],
    pub phase: [f64; SEGMENTS],
}

impl ControllerParams {
    pub const DIM: usize = 3 * SEGMENTS;

    pub fn idle() -> Self {
        ControllerParams {
            amplitude: [0.0; SEGMENTS],
            frequency: [1.0; SEGMENTS],
            phase: [0.0; SEGMENTS],
        }
    }

    /// Per-coordinate bounds of the flat vector form.
    pub fn bounds() -> [(f64, f64); Self::DIM] {
        let mut b = [(0.0, 0.0); Self::DIM];
        for j in 0..SEGMENTS {
            b[j] = AMPLITUDE_BOUNDS;
            b[SEGMENTS + j] = FREQUENCY_BOUNDS;
            b[2 * SEGMENTS + j] = PHASE_BOUNDS;
        }
        b
    }

    pub fn from_vector(x: &[f64; Self::DIM]) -> Self {
        let mut c = ControllerParams::idle();
        c.amplitude.copy_from_slice(&x[..SEGMENTS]);
        c.frequency.copy_from_slice(&x[SEGMENTS..2 * SEGMENTS]);
        c.phase.copy_from_slice(&x[2 * SEGMENTS..]);
        c
    }

    pub fn to_vector(&self) -> [f64; Self::DIM] {
        let mut x = [0.0; Self::DIM];
        x[..SEGMENTS].copy_from_slice(&self.amplitude);
        x[SEGMENTS..2 * SEGMENTS].copy_from_slice(&self.frequency);
        x[2 * SEGMENTS..].copy_from_slice(&self.phase);
        x
    }

    /// Actuator commands at time `t`, each clamped to [-1, 1].
    pub fn command(&self, t: f64) -> [f64; SEGMENTS] {
        let mut u = [0.0; SEGMENTS];
        for (j, uj) in u.iter_mut().enumerate() {
            let raw = self.amplitude[j] * libm::sin(2.0 * PI * self.frequency[j] * t + self.phase[j]);
            *uj = raw.clamp(-1.0, 1.0);
        }
        u
    }
}

/// Position and velocity of the crawler body.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrawlerState {
    pub x: f64,
    pub v: f64,
}

/// Integrates the body dynamics one step at a time.
#[derive(Debug, Clone)]
pub struct Dynamics {
    lengths: [f64; SEGMENTS],
    mass: f64,
    cfg: SimConfig,
}

impl Dynamics {
    pub fn new(m: &CrawlerMorphology, cfg: &SimConfig) -> Self {
        Dynamics {
            lengths: m.lengths,
            mass: m.mass(cfg.density),
            cfg: *cfg,
        }
    }

    pub fn mass(&self) -> f64 {
        self.mass
    }

    /// One semi-implicit Euler step under commands `u`.
    pub fn step(&self, s: CrawlerState, u: &[f64; SEGMENTS]) -> CrawlerState {
        let c = &self.cfg;
        let thrust: f64 = c.gear * u.iter().zip(&self.lengths).map(|(u, l)| u * l).sum::<f64>();
        let resist =
            c.drag * self.mass * s.v + c.friction * self.mass * c.gravity * libm::tanh(s.v / c.velocity_smoothing);
        let a = (thrust - resist) / self.mass;
        let v = s.v + a * c.dt;
        CrawlerState { x: s.x + v * c.dt, v }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("reward references `{0}`, which the crawler does not expose")]
    UnknownVariable(String),
    #[error("reward evaluation failed: {0}")]
    Reward(EvalError),
    #[error("simulation state became non-finite")]
    NonFinite,
}

/// A reward expression checked against [`STATE_VARS`] and compiled.
#[derive(Debug, Clone)]
pub struct CrawlerReward {
    bound: Bound,
}

impl CrawlerReward {
    pub fn new(ast: &Expr) -> Result<Self, SimError> {
        if let Some(v) = ast.free_vars().into_iter().find(|v| !STATE_VARS.contains(&v.as_str())) {
            return Err(SimError::UnknownVariable(v));
        }
        let bound = ast.bind(&STATE_VARS).map_err(SimError::Reward)?;
        Ok(CrawlerReward { bound })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rollout {
    /// `dt * sum_t r_t`.
    pub ret: f64,
    /// Net displacement `x(T) - x(0)`.
    pub fitness: f64,
}

/// Runs one episode from rest. Bit-identical for identical inputs.
pub fn simulate(
    m: &CrawlerMorphology,
    ctrl: &ControllerParams,
    reward: &CrawlerReward,
    cfg: &SimConfig,
) -> Result<Rollout, SimError> {
    let dyn_ = Dynamics::new(m, cfg);
    let mut s = CrawlerState { x: 0.0, v: 0.0 };
    let x0 = s.x;
    let mut reward_sum = 0.0;
    let mut vars = [0.0; STATE_VARS.len()];
    let mut stack = Vec::with_capacity(16);
    for k in 0..cfg.steps() {
        let u = ctrl.command(k as f64 * cfg.dt);
        s = dyn_.step(s, &u);
        if !(s.x.is_finite() && s.v.is_finite()) {
            return Err(SimError::NonFinite);
        }
        vars[0] = (k + 1) as f64 * cfg.dt;
        vars[1] = s.x;
        vars[2] = s.v;
        vars[3] = s.x - x0;
        vars[4] = libm::fabs(s.v);
        vars[5] = u.iter().map(|u| u * u).sum();
        vars[6..].copy_from_slice(&u);
        reward_sum += reward.bound.eval(&vars, &mut stack).map_err(SimError::Reward)?;
    }
    let ret = cfg.dt * reward_sum;
    if !ret.is_finite() {
        return Err(SimError::Reward(EvalError::NonFinite));
    }
    Ok(Rollout { ret, fitness: s.x - x0 })
}

/// Trains a controller for `reward` with CEM, re-simulates the best one and
/// reports fitness, volume and efficiency. Failures are encoded in the
/// returned status.
pub fn evaluate_builtin(
    morphology: &MorphologyCandidate,
    reward: &RewardCandidate,
    cem_cfg: &CemConfig,
    sim: &SimConfig,
) -> EvaluationResult {
    let pair = PairKey::new(&morphology.id, &reward.id);
    let seed = cem_cfg.seed;
    let fail = |status, detail: String| EvaluationResult::failed(pair.clone(), status, seed, Some(detail));
    if reward.dialect != RewardDialect::BuiltinDsl {
        return fail(
            EvalStatus::RuntimeError,
            "the built-in evaluator only runs builtin_dsl rewards".to_string(),
        );
    }
    let body = match CrawlerMorphology::from_params(&morphology.values) {
        Ok(b) => b,
        Err(e) => return fail(EvalStatus::RuntimeError, e.to_string()),
    };
    let ast = match reward_lang::parse(&reward.source) {
        Ok(a) => a,
        Err(e) => return fail(EvalStatus::RewardParseError, e.to_string()),
    };
    let program = match CrawlerReward::new(&ast) {
        Ok(p) => p,
        Err(e @ SimError::UnknownVariable(_)) => return fail(EvalStatus::RewardParseError, e.to_string()),
        Err(e) => return fail(EvalStatus::RuntimeError, e.to_string()),
    };
    let trained = match cem::train(&body, &program, cem_cfg, sim) {
        Ok(t) => t,
        Err(e) => return fail(EvalStatus::Nonfinite, e.to_string()),
    };
    match simulate(&body, &trained.best, &program, sim) {
        Ok(roll) => EvaluationResult::measured(pair, roll.fitness, body.volume(), Some(trained.best_return), seed),
        Err(SimError::NonFinite) | Err(SimError::Reward(EvalError::NonFinite)) => fail(
            EvalStatus::Nonfinite,
            "rollout of the trained controller diverged".to_string(),
        ),
        Err(e) => fail(EvalStatus::RuntimeError, e.to_string()),
    }
}

/// Actuator commands applied at every step of one episode.
pub fn command_trace(ctrl: &ControllerParams, cfg: &SimConfig) -> Vec<[f64; SEGMENTS]> {
    let mut out = vec![[0.0; SEGMENTS]; cfg.steps()];
    for (k, u) in out.iter_mut().enumerate() {
        *u = ctrl.command(k as f64 * cfg.dt);
    }
    out
}

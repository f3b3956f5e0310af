//! The Lorenz-63 system, its explicit-Euler integrator, trajectory generation
//! and the standardization statistics shared by every training setting.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub const DEFAULT_SIGMA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 8.0 / 3.0;

/// Mean and standard deviation of every initial-state component.
pub const INITIAL_STATE_MEAN: f64 = 15.0;
pub const INITIAL_STATE_STD: f64 = 30.0;

/// Floor applied to standardization deviations so constant components stay invertible.
pub const MIN_STD: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LorenzError {
    #[error("non-finite state at step {step}")]
    NonFiniteState { step: usize },
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("invalid trajectory spec: {0}")]
    InvalidSpec(String),
    #[error("standardization pilot set is empty")]
    EmptyPilot,
    #[error("malformed standardization file: {0}")]
    MalformedStats(String),
}

/// A point of the phase space (or a velocity in it).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct State {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl State {
    pub const ZERO: State = State {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn norm(&self) -> f64 {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }
}

impl Add for State {
    type Output = State;
    fn add(self, rhs: State) -> State {
        State::new(self.x + rhs.x, self.y + rhs.y, self.z + rhs.z)
    }
}

impl Sub for State {
    type Output = State;
    fn sub(self, rhs: State) -> State {
        State::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

impl Mul<f64> for State {
    type Output = State;
    fn mul(self, k: f64) -> State {
        State::new(self.x * k, self.y * k, self.z * k)
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.x, self.y, self.z)
    }
}

/// Anything that can provide the right-hand side of an autonomous ODE in three variables.
pub trait Dynamics {
    fn derivative(&self, s: State) -> State;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LorenzParams {
    pub rho: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl LorenzParams {
    /// Standard `sigma = 10`, `beta = 8/3` with the given `rho`.
    pub fn with_rho(rho: f64) -> Self {
        Self {
            rho,
            sigma: DEFAULT_SIGMA,
            beta: DEFAULT_BETA,
        }
    }

    pub fn new(rho: f64, sigma: f64, beta: f64) -> Result<Self, LorenzError> {
        let p = Self { rho, sigma, beta };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LorenzError> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(LorenzError::InvalidParams(format!("sigma must be > 0, got {}", self.sigma)));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(LorenzError::InvalidParams(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(LorenzError::InvalidParams(format!("rho must be >= 0, got {}", self.rho)));
        }
        Ok(())
    }

    /// The non-trivial equilibria `C±`, present for `rho > 1`.
    pub fn nontrivial_fixed_points(&self) -> Option<[State; 2]> {
        if self.rho <= 1.0 {
            return None;
        }
        let a = (self.beta * (self.rho - 1.0)).sqrt();
        Some([
            State::new(a, a, self.rho - 1.0),
            State::new(-a, -a, self.rho - 1.0),
        ])
    }
}

impl Default for LorenzParams {
    fn default() -> Self {
        Self::with_rho(28.0)
    }
}

impl Dynamics for LorenzParams {
    fn derivative(&self, s: State) -> State {
        lorenz_derivative(self, s)
    }
}

pub fn lorenz_derivative(p: &LorenzParams, s: State) -> State {
    State::new(
        p.sigma * (s.y - s.x),
        s.x * (p.rho - s.z) - s.y,
        s.x * s.y - p.beta * s.z,
    )
}

/// One explicit Euler step: `s + dt * f(s)`.
pub fn euler_step<D: Dynamics + ?Sized>(system: &D, s: State, dt: f64) -> State {
    advance(s, system.derivative(s), dt)
}

/// `s + dt * v`, the update shared by the simulator and by model rollouts.
#[inline]
pub fn advance(s: State, velocity: State, dt: f64) -> State {
    State::new(
        s.x + dt * velocity.x,
        s.y + dt * velocity.y,
        s.z + dt * velocity.z,
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectorySpec {
    pub params: LorenzParams,
    pub initial_state: State,
    pub dt: f64,
    pub n_steps: usize,
    /// Euler sub-steps of `dt / substeps` taken between two recorded states.
    /// `1` is the plain scheme `Y_{t+1} = Y_t + dt f(Y_t)`.
    pub substeps: u32,
}

impl TrajectorySpec {
    pub fn new(params: LorenzParams, initial_state: State, dt: f64, n_steps: usize) -> Self {
        Self {
            params,
            initial_state,
            dt,
            n_steps,
            substeps: 1,
        }
    }

    pub fn with_substeps(mut self, substeps: u32) -> Self {
        self.substeps = substeps;
        self
    }

    pub fn validate(&self) -> Result<(), LorenzError> {
        self.params.validate()?;
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(LorenzError::InvalidSpec(format!("dt must be > 0, got {}", self.dt)));
        }
        if self.n_steps < 2 {
            return Err(LorenzError::InvalidSpec(format!(
                "n_steps must be >= 2, got {}",
                self.n_steps
            )));
        }
        if self.substeps == 0 {
            return Err(LorenzError::InvalidSpec("substeps must be >= 1".into()));
        }
        if !self.initial_state.is_finite() {
            return Err(LorenzError::InvalidSpec("initial state must be finite".into()));
        }
        Ok(())
    }

    /// Advances one recorded step.
    pub fn step(&self, s: State) -> State {
        if self.substeps == 1 {
            return euler_step(&self.params, s, self.dt);
        }
        let h = self.dt / f64::from(self.substeps);
        (0..self.substeps).fold(s, |acc, _| euler_step(&self.params, acc, h))
    }

    /// Lazily yields the recorded states, stopping with an error on the first non-finite one.
    pub fn states(&self) -> TrajectoryIter<'_> {
        TrajectoryIter {
            spec: self,
            current: None,
            index: 0,
            failed: false,
        }
    }
}

/// Step-by-step trajectory generation; clients stream from this.
pub struct TrajectoryIter<'a> {
    spec: &'a TrajectorySpec,
    current: Option<State>,
    index: usize,
    failed: bool,
}

impl Iterator for TrajectoryIter<'_> {
    type Item = Result<State, LorenzError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.failed || self.index >= self.spec.n_steps {
            return None;
        }
        let next = match self.current {
            None => self.spec.initial_state,
            Some(s) => self.spec.step(s),
        };
        let step = self.index;
        self.index += 1;
        if !next.is_finite() {
            self.failed = true;
            return Some(Err(LorenzError::NonFiniteState { step }));
        }
        self.current = Some(next);
        Some(Ok(next))
    }
}

pub fn generate_trajectory(spec: &TrajectorySpec) -> Result<Vec<State>, LorenzError> {
    spec.validate()?;
    spec.states().collect()
}

pub fn sample_initial_state<R: Rng + ?Sized>(rng: &mut R) -> State {
    let normal = Normal::new(INITIAL_STATE_MEAN, INITIAL_STATE_STD).expect("valid normal");
    State::new(normal.sample(rng), normal.sample(rng), normal.sample(rng))
}

/// One training example: parameter, current state, and the Euler velocity
/// `(Y_{t+1} - Y_t) / dt` that leads to the next recorded state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub rho: f64,
    pub state: State,
    pub velocity: State,
}

impl Sample {
    pub fn from_pair(rho: f64, current: State, next: State, dt: f64) -> Self {
        Self {
            rho,
            state: current,
            velocity: State::new(
                (next.x - current.x) / dt,
                (next.y - current.y) / dt,
                (next.z - current.z) / dt,
            ),
        }
    }

    pub fn input(&self) -> [f64; 4] {
        [self.state.x, self.state.y, self.state.z, self.rho]
    }
}

/// Consecutive-pair samples of a recorded trajectory.
pub fn trajectory_samples(rho: f64, states: &[State], dt: f64) -> Vec<Sample> {
    states
        .windows(2)
        .map(|w| Sample::from_pair(rho, w[0], w[1], dt))
        .collect()
}

pub const STAT_NAMES: [&str; 7] = ["x", "y", "z", "rho", "vx", "vy", "vz"];

/// Affine rescaling of model inputs `(x, y, z, rho)` and targets `(vx, vy, vz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub input_mean: [f64; 4],
    pub input_std: [f64; 4],
    pub target_mean: [f64; 3],
    pub target_std: [f64; 3],
}

impl Standardization {
    /// No-op scaling.
    pub fn identity() -> Self {
        Self {
            input_mean: [0.0; 4],
            input_std: [1.0; 4],
            target_mean: [0.0; 3],
            target_std: [1.0; 3],
        }
    }

    /// Per-component mean and population standard deviation of the samples.
    pub fn from_samples(samples: &[Sample]) -> Result<Self, LorenzError> {
        if samples.is_empty() {
            return Err(LorenzError::EmptyPilot);
        }
        let n = samples.len() as f64;
        let columns = |s: &Sample| -> [f64; 7] {
            [
                s.state.x,
                s.state.y,
                s.state.z,
                s.rho,
                s.velocity.x,
                s.velocity.y,
                s.velocity.z,
            ]
        };
        let mut mean = [0.0; 7];
        for s in samples {
            for (m, v) in mean.iter_mut().zip(columns(s)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = [0.0; 7];
        for s in samples {
            for ((acc, v), m) in var.iter_mut().zip(columns(s)).zip(mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var.map(|v| (v / n).sqrt().max(MIN_STD));
        Ok(Self {
            input_mean: [mean[0], mean[1], mean[2], mean[3]],
            input_std: [std[0], std[1], std[2], std[3]],
            target_mean: [mean[4], mean[5], mean[6]],
            target_std: [std[4], std[5], std[6]],
        })
    }

    pub fn standardize_input(&self, state: State, rho: f64) -> [f64; 4] {
        let raw = [state.x, state.y, state.z, rho];
        std::array::from_fn(|i| (raw[i] - self.input_mean[i]) / self.input_std[i])
    }

    pub fn unstandardize_input(&self, z: [f64; 4]) -> (State, f64) {
        let raw: [f64; 4] = std::array::from_fn(|i| z[i] * self.input_std[i] + self.input_mean[i]);
        (State::new(raw[0], raw[1], raw[2]), raw[3])
    }

    pub fn standardize_target(&self, velocity: State) -> [f64; 3] {
        let raw = velocity.to_array();
        std::array::from_fn(|i| (raw[i] - self.target_mean[i]) / self.target_std[i])
    }

    pub fn unstandardize_target(&self, z: [f64; 3]) -> State {
        State::from_array(std::array::from_fn(|i| {
            z[i] * self.target_std[i] + self.target_mean[i]
        }))
    }

    fn rows(&self) -> [(f64, f64); 7] {
        [
            (self.input_mean[0], self.input_std[0]),
            (self.input_mean[1], self.input_std[1]),
            (self.input_mean[2], self.input_std[2]),
            (self.input_mean[3], self.input_std[3]),
            (self.target_mean[0], self.target_std[0]),
            (self.target_mean[1], self.target_std[1]),
            (self.target_mean[2], self.target_std[2]),
        ]
    }

    /// `name,mean,std` text, shortest round-trip decimal representation.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,mean,std\n");
        for (name, (mean, std)) in STAT_NAMES.iter().zip(self.rows()) {
            out.push_str(&format!("{name},{mean:?},{std:?}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, LorenzError> {
        let bad = |msg: String| LorenzError::MalformedStats(msg);
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        match lines.next() {
            Some("name,mean,std") => {}
            other => return Err(bad(format!("expected header `name,mean,std`, got {other:?}"))),
        }
        let mut values = [(0.0, 0.0); 7];
        for (i, name) in STAT_NAMES.iter().enumerate() {
            let line = lines
                .next()
                .ok_or_else(|| bad(format!("missing row `{name}`")))?;
            let mut fields = line.split(',');
            let (Some(n), Some(m), Some(s), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad(format!("row {line:?} must have exactly 3 fields")));
            };
            if n != *name {
                return Err(bad(format!("expected row `{name}`, got `{n}`")));
            }
            let mean: f64 = m.parse().map_err(|_| bad(format!("bad mean {m:?}")))?;
            let std: f64 = s.parse().map_err(|_| bad(format!("bad std {s:?}")))?;
            if !mean.is_finite() || !std.is_finite() || std <= 0.0 {
                return Err(bad(format!("row `{name}` needs finite mean and std > 0")));
            }
            values[i] = (mean, std);
        }
        if let Some(extra) = lines.next() {
            return Err(bad(format!("unexpected trailing row {extra:?}")));
        }
        Ok(Self {
            input_mean: std::array::from_fn(|i| values[i].0),
            input_std: std::array::from_fn(|i| values[i].1),
            target_mean: std::array::from_fn(|i| values[4 + i].0),
            target_std: std::array::from_fn(|i| values[4 + i].1),
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LorenzError> {
        let text = std::str::from_utf8(bytes)
            .map_err(|_| LorenzError::MalformedStats("not UTF-8".into()))?;
        Self::parse(text)
    }
}

/// A recorded trajectory together with what is needed to turn it into samples.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub rho: f64,
    pub dt: f64,
    pub states: Vec<State>,
}

impl Trajectory {
    pub fn generate(spec: &TrajectorySpec) -> Result<Self, LorenzError> {
        Ok(Self {
            rho: spec.params.rho,
            dt: spec.dt,
            states: generate_trajectory(spec)?,
        })
    }

    pub fn samples(&self) -> Vec<Sample> {
        trajectory_samples(self.rho, &self.states, self.dt)
    }
}

pub fn compute_standardization(pilot: &[Trajectory]) -> Result<Standardization, LorenzError> {
    let samples: Vec<Sample> = pilot.iter().flat_map(Trajectory::samples).collect();
    Standardization::from_samples(&samples)
}

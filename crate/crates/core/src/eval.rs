//! Autoregressive rollout of a velocity model and divergence metrics
//! against a reference trajectory.

use std::io;

use ndarray::Array2;

use crate::lorenz::{advance, lorenz_derivative, LorenzParams, Standardization, State, TrajectorySpec};
use crate::nn::{Mlp, NnError};

pub const DEFAULT_DIVERGENCE_FRACTION: f64 = 0.1;
pub const DEFAULT_BBOX_FACTOR: f64 = 1.5;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("rollout produced a non-finite state at step {step}")]
    NonFiniteState { step: usize, partial: Vec<State> },
    #[error("predicted length {predicted} != reference length {reference}")]
    LengthMismatch { predicted: usize, reference: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
}

/// Maps a state and parameter to the velocity used in one Euler update.
pub trait VelocityModel {
    fn velocity(&self, state: State, rho: f64) -> Result<State, EvalError>;
}

/// The true right-hand side; rollouts reproduce the simulator when `substeps == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExactDerivative {
    pub sigma: f64,
    pub beta: f64,
}

impl VelocityModel for ExactDerivative {
    fn velocity(&self, state: State, rho: f64) -> Result<State, EvalError> {
        let p = LorenzParams {
            rho,
            sigma: self.sigma,
            beta: self.beta,
        };
        Ok(lorenz_derivative(&p, state))
    }
}

/// A trained network wrapped with its standardization.
pub struct Surrogate<'a> {
    pub model: &'a Mlp,
    pub standardization: &'a Standardization,
}

impl VelocityModel for Surrogate<'_> {
    fn velocity(&self, state: State, rho: f64) -> Result<State, EvalError> {
        let input = self.standardization.standardize_input(state, rho);
        let x = Array2::from_shape_vec((1, 4), input.to_vec()).expect("1x4");
        let out = self.model.forward(x.view())?;
        Ok(self.standardization.unstandardize_target([out[[0, 0]], out[[0, 1]], out[[0, 2]]]))
    }
}

/// `n_steps` states starting at `initial`, each obtained from the previous one
/// by `s + dt * model.velocity(s, rho)`.
pub fn rollout<M: VelocityModel + ?Sized>(
    model: &M,
    rho: f64,
    initial: State,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<State>, EvalError> {
    let mut states = Vec::with_capacity(n_steps);
    if n_steps == 0 {
        return Ok(states);
    }
    states.push(initial);
    let mut s = initial;
    for step in 1..n_steps {
        s = advance(s, model.velocity(s, rho)?, dt);
        if !s.is_finite() {
            return Err(EvalError::NonFiniteState { step, partial: states });
        }
        states.push(s);
    }
    Ok(states)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceConfig {
    /// Divergence threshold as a fraction of the reference RMS norm.
    pub threshold_fraction: f64,
    /// Scale of the reference bounding box (about its centre) that counts as bounded.
    pub bbox_factor: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        Self {
            threshold_fraction: DEFAULT_DIVERGENCE_FRACTION,
            bbox_factor: DEFAULT_BBOX_FACTOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub predicted: Vec<State>,
    pub reference: Vec<State>,
    /// First step whose error exceeds the threshold, or the length if none does.
    pub valid_time: usize,
    pub max_pointwise_error: f64,
    pub bounded: bool,
    pub threshold: f64,
    /// Step at which the rollout blew up, if it did; later predicted states are NaN.
    pub blew_up_at: Option<usize>,
}

impl RolloutResult {
    pub fn write_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x_pred", "y_pred", "z_pred", "x_ref", "y_ref", "z_ref"])?;
        for (t, (p, r)) in self.predicted.iter().zip(&self.reference).enumerate() {
            w.write_record([
                t.to_string(),
                format!("{:?}", p.x),
                format!("{:?}", p.y),
                format!("{:?}", p.z),
                format!("{:?}", r.x),
                format!("{:?}", r.y),
                format!("{:?}", r.z),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn rms_norm(states: &[State]) -> f64 {
    if states.is_empty() {
        return 0.0;
    }
    (states.iter().map(|s| s.norm() * s.norm()).sum::<f64>() / states.len() as f64).sqrt()
}

/// Per-axis `(min, max)` of the states.
pub fn bounding_box(states: &[State]) -> [(f64, f64); 3] {
    let mut bb = [(f64::INFINITY, f64::NEG_INFINITY); 3];
    for s in states {
        for (axis, v) in s.to_array().into_iter().enumerate() {
            bb[axis].0 = bb[axis].0.min(v);
            bb[axis].1 = bb[axis].1.max(v);
        }
    }
    bb
}

pub fn divergence_metrics(
    predicted: Vec<State>,
    reference: Vec<State>,
    cfg: &DivergenceConfig,
) -> Result<RolloutResult, EvalError> {
    if predicted.len() != reference.len() {
        return Err(EvalError::LengthMismatch {
            predicted: predicted.len(),
            reference: reference.len(),
        });
    }
    let threshold = cfg.threshold_fraction * rms_norm(&reference);
    let errors: Vec<f64> = predicted.iter().zip(&reference).map(|(p, r)| (*p - *r).norm()).collect();
    // NaN errors count as divergence.
    let valid_time = errors.iter().position(|e| !(*e <= threshold)).unwrap_or(errors.len());
    let max_pointwise_error = errors[..valid_time].iter().copied().fold(0.0, f64::max);
    let boxes = bounding_box(&reference).map(|(lo, hi)| {
        let (mid, half) = ((lo + hi) / 2.0, (hi - lo) / 2.0 * cfg.bbox_factor);
        (mid - half, mid + half)
    });
    let bounded = predicted.iter().all(|p| {
        p.to_array()
            .iter()
            .zip(&boxes)
            .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    });
    Ok(RolloutResult {
        predicted,
        reference,
        valid_time,
        max_pointwise_error,
        bounded,
        threshold,
        blew_up_at: None,
    })
}

/// Rolls `model` out from the reference's initial state and scores it. A
/// blow-up is not an error here: the remaining predicted states are NaN and
/// the result is unbounded.
pub fn evaluate_rollout<M: VelocityModel + ?Sized>(
    model: &M,
    reference_spec: &TrajectorySpec,
    reference: Vec<State>,
    cfg: &DivergenceConfig,
) -> Result<RolloutResult, EvalError> {
    let n = reference.len();
    let (predicted, blew_up_at) = match rollout(
        model,
        reference_spec.params.rho,
        reference_spec.initial_state,
        reference_spec.dt,
        n,
    ) {
        Ok(p) => (p, None),
        Err(EvalError::NonFiniteState { step, mut partial }) => {
            partial.resize(n, State::new(f64::NAN, f64::NAN, f64::NAN));
            (partial, Some(step))
        }
        Err(e) => return Err(e),
    };
    let mut result = divergence_metrics(predicted, reference, cfg)?;
    result.blew_up_at = blew_up_at;
    Ok(result)
}

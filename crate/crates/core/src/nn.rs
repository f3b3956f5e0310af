//! A small multilayer perceptron written directly on top of `ndarray`:
//! affine layers with SiLU between hidden layers, mean-squared-error loss,
//! exact backpropagation and a bias-corrected Adam optimizer.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lorenz::{Sample, Standardization};

/// Input `(x, y, z, rho)`, three hidden layers of 512, output velocity.
pub const DEFAULT_LAYER_DIMS: [usize; 5] = [4, 512, 512, 512, 3];

const CHECKPOINT_MAGIC: &[u8; 8] = b"MLPCKPT1";
const MAX_CHECKPOINT_LAYERS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in layer {layer}")]
    NonFiniteGradient { layer: usize },
    #[error("invalid layer dims {0:?}")]
    InvalidDims(Vec<usize>),
    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
pub fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

#[inline]
pub fn silu_derivative(v: f64) -> f64 {
    let s = sigmoid(v);
    s * (1.0 + v * (1.0 - s))
}

/// One affine layer; `weight` is `fan_in x fan_out` so that `y = x W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn len(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Gradients, shaped like the parameters of the model they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weight.iter().chain(l.bias.iter()).copied())
        .collect()
}

/// Model inputs and targets, already standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self, NnError> {
        if inputs.nrows() != targets.nrows() {
            return Err(NnError::ShapeMismatch(format!(
                "{} input rows vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        Ok(Self { inputs, targets })
    }

    pub fn from_samples(samples: &[Sample], stats: &Standardization) -> Self {
        let n = samples.len();
        let mut inputs = Array2::zeros((n, 4));
        let mut targets = Array2::zeros((n, 3));
        for (i, s) in samples.iter().enumerate() {
            for (j, v) in stats.standardize_input(s.state, s.rho).into_iter().enumerate() {
                inputs[[i, j]] = v;
            }
            for (j, v) in stats.standardize_target(s.velocity).into_iter().enumerate() {
                targets[[i, j]] = v;
            }
        }
        Self { inputs, targets }
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Mean over all elements of the squared error, and its gradient with respect to `predictions`.
pub fn mse_loss(
    predictions: &Array2<f64>,
    targets: &Array2<f64>,
) -> Result<(f64, Array2<f64>), NnError> {
    if predictions.dim() != targets.dim() {
        return Err(NnError::ShapeMismatch(format!(
            "predictions {:?} vs targets {:?}",
            predictions.dim(),
            targets.dim()
        )));
    }
    let count = predictions.len() as f64;
    let diff = predictions - targets;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
    let grad = diff * (2.0 / count);
    Ok((loss, grad))
}

struct ForwardCache {
    /// Input of every layer (the batch itself for layer 0).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of every hidden layer.
    pre_activations: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl Mlp {
    fn check_dims(dims: &[usize]) -> Result<(), NnError> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(NnError::InvalidDims(dims.to_vec()));
        }
        Ok(())
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        Self::check_dims(dims)?;
        Ok(Self {
            layers: dims.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        })
    }

    /// Weights uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases zero.
    pub fn init<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self, NnError> {
        let mut model = Self::zeros(dims)?;
        for layer in &mut model.layers {
            let bound = 1.0 / (layer.weight.nrows() as f64).sqrt();
            layer
                .weight
                .mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        Ok(model)
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.layers[0].weight.nrows()];
        dims.extend(self.layers.iter().map(|l| l.weight.ncols()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::len).sum()
    }

    /// Parameters in checkpoint order: per layer, weights row-major then biases.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    fn locate(&self, mut index: usize) -> (usize, usize) {
        for (l, layer) in self.layers.iter().enumerate() {
            if index < layer.len() {
                return (l, index);
            }
            index -= layer.len();
        }
        panic!("parameter index out of range");
    }

    pub fn param(&self, index: usize) -> f64 {
        let (l, i) = self.locate(index);
        let layer = &self.layers[l];
        let nw = layer.weight.len();
        if i < nw {
            let cols = layer.weight.ncols();
            layer.weight[[i / cols, i % cols]]
        } else {
            layer.bias[i - nw]
        }
    }

    pub fn set_param(&mut self, index: usize, value: f64) {
        let (l, i) = self.locate(index);
        let layer = &mut self.layers[l];
        let nw = layer.weight.len();
        if i < nw {
            let cols = layer.weight.ncols();
            layer.weight[[i / cols, i % cols]] = value;
        } else {
            layer.bias[i - nw] = value;
        }
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<(), NnError> {
        if inputs.ncols() != self.input_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "input width {} but model expects {}",
                inputs.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, inputs: ArrayView2<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            layer_inputs.push(a);
            if l == last {
                return ForwardCache {
                    inputs: layer_inputs,
                    pre_activations: pre,
                    output: z,
                };
            }
            a = z.mapv(silu);
            pre.push(z);
        }
        unreachable!("model has at least one layer")
    }

    /// Affine layers with SiLU after every layer except the last.
    pub fn forward(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(&inputs)?;
        let last = self.layers.len() - 1;
        let mut a = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight);
            z += &layer.bias;
            if l < last {
                z.mapv_inplace(silu);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64, NnError> {
        let pred = self.forward(batch.inputs.view())?;
        Ok(mse_loss(&pred, &batch.targets)?.0)
    }

    /// Loss on `batch` and its exact gradient with respect to every parameter.
    pub fn backward(&self, batch: &Batch) -> Result<(f64, Gradients), NnError> {
        self.check_input(&batch.inputs.view())?;
        if batch.targets.ncols() != self.output_dim() {
            return Err(NnError::ShapeMismatch(format!(
                "target width {} but model outputs {}",
                batch.targets.ncols(),
                self.output_dim()
            )));
        }
        let cache = self.forward_cached(batch.inputs.view());
        let (loss, mut delta) = mse_loss(&cache.output, &batch.targets)?;
        let mut grads: Vec<Dense> = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let weight = cache.inputs[l].t().dot(&delta);
            let bias = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut upstream = delta.dot(&self.layers[l].weight.t());
                Zip::from(&mut upstream)
                    .and(&cache.pre_activations[l - 1])
                    .for_each(|g, &z| *g *= silu_derivative(z));
                delta = upstream;
            }
            grads.push(Dense { weight, bias });
        }
        grads.reverse();
        Ok((loss, Gradients { layers: grads }))
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    /// `MLPCKPT1`, layer count and dims as little-endian `u32`, then every
    /// parameter as little-endian `f64` in [`Mlp::flatten`] order.
    pub fn to_checkpoint(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(12 + 4 * dims.len() + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for layer in &self.layers {
            for v in layer.weight.iter().chain(layer.bias.iter()) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self, NnError> {
        let bad = |m: String| NnError::MalformedCheckpoint(m);
        let rest = bytes
            .strip_prefix(CHECKPOINT_MAGIC)
            .ok_or_else(|| bad("missing magic".into()))?;
        let read_u32 = |b: &[u8], at: usize| -> Result<u32, NnError> {
            b.get(at..at + 4)
                .map(|s| u32::from_le_bytes(s.try_into().expect("4 bytes")))
                .ok_or_else(|| bad("truncated header".into()))
        };
        let n_dims = read_u32(rest, 0)? as usize;
        if !(2..=MAX_CHECKPOINT_LAYERS + 1).contains(&n_dims) {
            return Err(bad(format!("implausible layer count {n_dims}")));
        }
        let dims = (0..n_dims)
            .map(|i| read_u32(rest, 4 + 4 * i).map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if dims.contains(&0) {
            return Err(bad(format!("zero-width layer in {dims:?}")));
        }
        let n_params = dims
            .windows(2)
            .try_fold(0usize, |acc, w| {
                w[0].checked_mul(w[1])?.checked_add(w[1])?.checked_add(acc)
            })
            .ok_or_else(|| bad("parameter count overflows".into()))?;
        let body = &rest[4 + 4 * n_dims..];
        if n_params.checked_mul(8) != Some(body.len()) {
            return Err(bad(format!(
                "{} parameter bytes for dims {dims:?}, expected {} parameters",
                body.len(),
                n_params
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        let mut model = Self::zeros(&dims)?;
        for layer in &mut model.layers {
            for v in layer.weight.iter_mut().chain(layer.bias.iter_mut()) {
                *v = values.next().expect("length checked");
            }
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam state: first and second moments shaped like the model, and the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Dense>,
    second: Vec<Dense>,
}

impl Adam {
    pub fn new(config: AdamConfig, model: &Mlp) -> Self {
        let zeros: Vec<Dense> = model
            .layers
            .iter()
            .map(|l| Dense::zeros(l.weight.nrows(), l.weight.ncols()))
            .collect();
        Self {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. Nothing is modified if a gradient is non-finite.
    pub fn step(&mut self, model: &mut Mlp, grads: &Gradients) -> Result<(), NnError> {
        if grads.layers.len() != model.layers.len()
            || grads.layers.iter().zip(&model.layers).any(|(g, p)| {
                g.weight.dim() != p.weight.dim() || g.bias.dim() != p.bias.dim()
            })
        {
            return Err(NnError::ShapeMismatch("gradients do not match the model".into()));
        }
        if let Some(layer) = grads
            .layers
            .iter()
            .position(|g| !g.weight.iter().chain(g.bias.iter()).all(|v| v.is_finite()))
        {
            return Err(NnError::NonFiniteGradient { layer });
        }
        self.step += 1;
        let AdamConfig {
            learning_rate,
            beta1,
            beta2,
            epsilon,
        } = self.config;
        let t = self.step as i32;
        let correction1 = 1.0 - beta1.powi(t);
        let correction2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / correction1;
            let v_hat = *v / correction2;
            *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
        };
        for (((p, g), m), v) in model
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(&mut p.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .and(&g.weight)
                .for_each(|p, m, v, &g| update(p, m, v, g));
            Zip::from(&mut p.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .and(&g.bias)
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
        Ok(())
    }
}

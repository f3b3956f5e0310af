//! Independent oracles shared by the integration tests and the acceptance target.
#![allow(dead_code)]

use std::collections::HashSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use streamtrain::buffer::{BufferConfig, DrawOutcome, MemoryBuffer, PolicyKind};
use streamtrain::lorenz::{LorenzParams, State, TrajectorySpec};
use streamtrain::nn::{Batch, Mlp};
use streamtrain::protocol::Message;

/// Forward pass with plain loops and its own SiLU.
pub fn scalar_forward(model: &Mlp, input: &[f64]) -> Vec<f64> {
    let layers = model.layers();
    let mut a = input.to_vec();
    for (l, layer) in layers.iter().enumerate() {
        let (fan_in, fan_out) = layer.weight.dim();
        assert_eq!(a.len(), fan_in);
        let mut z = vec![0.0; fan_out];
        for (j, zj) in z.iter_mut().enumerate() {
            let mut acc = layer.bias[j];
            for (i, ai) in a.iter().enumerate() {
                acc += ai * layer.weight[[i, j]];
            }
            *zj = if l + 1 < layers.len() { acc / (1.0 + (-acc).exp()) } else { acc };
        }
        a = z;
    }
    a
}

/// Mean squared error from the scalar forward pass.
pub fn scalar_loss(model: &Mlp, batch: &Batch) -> f64 {
    let mut sum = 0.0;
    for (x, t) in batch.inputs.outer_iter().zip(batch.targets.outer_iter()) {
        let y = scalar_forward(model, x.as_slice().unwrap());
        sum += y.iter().zip(t.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    sum / batch.targets.len() as f64
}

pub fn random_batch(rows: usize, in_dim: usize, out_dim: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array2::from_shape_fn((rows, in_dim), |_| rng.random_range(-2.0..2.0));
    let targets = Array2::from_shape_fn((rows, out_dim), |_| rng.random_range(-1.0..1.0));
    Batch::new(inputs, targets).unwrap()
}

#[derive(Debug, Clone, Copy)]
pub struct GradientCheck {
    pub parameters: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over parameters
    /// whose gradient is not negligibly small.
    pub max_relative_error: f64,
    /// Largest absolute error over the negligible ones.
    pub max_absolute_error_small: f64,
}

/// Backprop gradients against central finite differences of the scalar loss.
pub fn gradient_check(dims: &[usize], seed: u64) -> GradientCheck {
    let model = Mlp::init(dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let batch = random_batch(8, dims[0], *dims.last().unwrap(), seed + 1);
    let (_, grads) = model.backward(&batch).unwrap();
    let analytic = grads.flatten();
    let h = 1e-6;
    let mut probe = model.clone();
    let mut max_rel: f64 = 0.0;
    let mut max_abs_small: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let p = probe.param(i);
        probe.set_param(i, p + h);
        let up = scalar_loss(&probe, &batch);
        probe.set_param(i, p - h);
        let down = scalar_loss(&probe, &batch);
        probe.set_param(i, p);
        let numeric = (up - down) / (2.0 * h);
        let scale = a.abs().max(numeric.abs());
        if scale > 1e-7 {
            max_rel = max_rel.max((a - numeric).abs() / scale);
        } else {
            max_abs_small = max_abs_small.max((a - numeric).abs());
        }
    }
    GradientCheck {
        parameters: analytic.len(),
        max_relative_error: max_rel,
        max_absolute_error_small: max_abs_small,
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Op {
    Push(usize),
    Draw,
    Drain,
}

/// Replays `ops` against a buffer, pushing fresh ids, and checks every
/// buffer invariant after every operation.
pub fn check_buffer_interleaving(cfg: BufferConfig, kind: PolicyKind, seed: u64, ops: &[Op]) -> Result<(), String> {
    let mut buf: MemoryBuffer<u64> = MemoryBuffer::new(cfg, kind, seed).map_err(|e| e.to_string())?;
    let mut next_id = 0u64;
    let mut drawn: HashSet<u64> = HashSet::new();
    let mut last_fifo: Option<u64> = None;
    let mut draining = false;
    for (step, op) in ops.iter().enumerate() {
        let ctx = |m: String| format!("op {step} {op:?}: {m}");
        match *op {
            Op::Push(n) => {
                for _ in 0..n {
                    buf.push(next_id);
                    next_id += 1;
                }
            }
            Op::Drain => {
                buf.set_draining();
                draining = true;
            }
            Op::Draw => {
                let before = buf.len();
                match buf.draw_batch(cfg.batch_size) {
                    DrawOutcome::Batch(items) => {
                        if items.is_empty() {
                            return Err(ctx("empty batch".into()));
                        }
                        if !draining {
                            if items.len() != cfg.batch_size {
                                return Err(ctx(format!("short batch {}", items.len())));
                            }
                            if kind == PolicyKind::RandomEvictOnSelect {
                                if !buf.is_ready() {
                                    return Err(ctx("drew before ready".into()));
                                }
                                if buf.len() < cfg.min_threshold {
                                    return Err(ctx(format!("post-draw size {} < min", buf.len())));
                                }
                            }
                        }
                        if buf.len() != before - items.len() {
                            return Err(ctx("draw did not remove the batch".into()));
                        }
                        for id in &items {
                            if *id >= next_id {
                                return Err(ctx(format!("unknown id {id}")));
                            }
                            if !drawn.insert(*id) {
                                return Err(ctx(format!("id {id} drawn twice")));
                            }
                        }
                        if kind == PolicyKind::FifoPassThrough {
                            for id in items {
                                if last_fifo.is_some_and(|l| id <= l) {
                                    return Err(ctx("FIFO order broken".into()));
                                }
                                last_fifo = Some(id);
                            }
                        }
                    }
                    DrawOutcome::Blocked => {
                        if draining {
                            return Err(ctx("blocked while draining".into()));
                        }
                        let could = match kind {
                            PolicyKind::RandomEvictOnSelect => {
                                buf.is_ready() && before >= cfg.min_threshold + cfg.batch_size
                            }
                            PolicyKind::FifoPassThrough => before >= cfg.batch_size,
                        };
                        if could {
                            return Err(ctx("blocked although a draw was allowed".into()));
                        }
                    }
                    DrawOutcome::Exhausted => {
                        if !(draining && before == 0) {
                            return Err(ctx("exhausted while not draining-and-empty".into()));
                        }
                    }
                }
            }
        }
        if buf.len() > cfg.capacity {
            return Err(ctx(format!("size {} above capacity", buf.len())));
        }
        let m = buf.metrics();
        if m.total_pushed != next_id || m.total_pushed != m.size as u64 + m.total_drawn + m.total_evicted {
            return Err(ctx(format!("conservation broken: {m:?}")));
        }
        if m.total_drawn != drawn.len() as u64 {
            return Err(ctx("drawn count mismatch".into()));
        }
    }
    Ok(())
}

/// Largest z-score of per-item selection counts when a batch of `k` is drawn
/// from `n` freshly pushed items, over `trials` independently seeded buffers.
pub fn draw_uniformity_max_z(n: usize, k: usize, trials: usize, seed: u64) -> f64 {
    let cfg = BufferConfig {
        capacity: n,
        ready_threshold: n,
        min_threshold: n - k,
        batch_size: k,
    };
    let mut counts = vec![0u64; n];
    for t in 0..trials {
        let mut buf: MemoryBuffer<usize> =
            MemoryBuffer::new(cfg, PolicyKind::RandomEvictOnSelect, seed.wrapping_add(t as u64)).unwrap();
        for i in 0..n {
            buf.push(i);
        }
        match buf.draw_batch(k) {
            DrawOutcome::Batch(b) => b.into_iter().for_each(|i| counts[i] += 1),
            other => panic!("expected a batch, got {other:?}"),
        }
    }
    let p = k as f64 / n as f64;
    let mean = trials as f64 * p;
    let se = (trials as f64 * p * (1.0 - p)).sqrt();
    counts.iter().map(|&c| (c as f64 - mean).abs() / se).fold(0.0, f64::max)
}

/// Hello, one Step per state, Bye.
pub fn stream_messages(sim_id: u32, spec: &TrajectorySpec, states: &[State]) -> Vec<Message> {
    let mut msgs = vec![Message::Hello {
        sim_id,
        rho: spec.params.rho,
        dt: spec.dt,
        n_steps: states.len() as u32,
    }];
    msgs.extend(states.iter().enumerate().map(|(t, s)| Message::step(sim_id, t as u32, *s)));
    msgs.push(Message::Bye { sim_id });
    msgs
}

pub fn lorenz_spec(rho: f64, initial: State, n_steps: usize) -> TrajectorySpec {
    TrajectorySpec::new(LorenzParams::with_rho(rho), initial, 0.01, n_steps)
}

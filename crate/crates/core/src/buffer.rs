//! Memory buffer between simulation clients and the trainer.
//!
//! The buffer stores at most `capacity` items. A [`DataPolicy`] decides which
//! item is evicted when a push finds the buffer full and which items make up
//! a batch. Under the random policy, draws are gated by two thresholds: no
//! draw happens before the buffer has once held `ready_threshold` items, and
//! a draw must leave at least `min_threshold` items behind. Once the ensemble
//! is over the buffer is put in draining mode and the residue is handed out
//! regardless of thresholds.

use std::collections::VecDeque;
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lorenz::Sample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BufferError {
    #[error("invalid buffer configuration: {0}")]
    InvalidConfig(String),
    #[error("batch statistics of an empty batch")]
    EmptyBatch,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    pub capacity: usize,
    pub ready_threshold: usize,
    pub min_threshold: usize,
    pub batch_size: usize,
}

impl BufferConfig {
    /// Thresholds expressed in whole trajectories of `samples_per_trajectory` samples.
    pub fn from_trajectory_equivalents(
        samples_per_trajectory: usize,
        capacity: usize,
        ready: usize,
        min: usize,
        batch_size: usize,
    ) -> Self {
        Self {
            capacity: capacity * samples_per_trajectory,
            ready_threshold: ready * samples_per_trajectory,
            min_threshold: min * samples_per_trajectory,
            batch_size,
        }
    }

    pub fn validate(&self) -> Result<(), BufferError> {
        let err = |m: String| Err(BufferError::InvalidConfig(m));
        if self.batch_size == 0 {
            return err("batch_size must be >= 1".into());
        }
        if !(self.min_threshold <= self.ready_threshold && self.ready_threshold <= self.capacity) {
            return err(format!(
                "need min ({}) <= ready ({}) <= capacity ({})",
                self.min_threshold, self.ready_threshold, self.capacity
            ));
        }
        if self.ready_threshold < self.batch_size {
            return err(format!(
                "ready threshold {} below batch size {}",
                self.ready_threshold, self.batch_size
            ));
        }
        // Otherwise a gated draw could never succeed before draining.
        if self.min_threshold + self.batch_size > self.capacity {
            return err(format!(
                "min threshold {} + batch size {} exceeds capacity {}",
                self.min_threshold, self.batch_size, self.capacity
            ));
        }
        Ok(())
    }
}

/// Which data management policy a buffer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    /// Uniform random selection, selected items are erased; random victim when full.
    RandomEvictOnSelect,
    /// Arrival-order pass-through; the oldest item is dropped when full.
    FifoPassThrough,
}

impl PolicyKind {
    pub fn build<T: Send + 'static>(self) -> Box<dyn DataPolicy<T>> {
        match self {
            PolicyKind::RandomEvictOnSelect => Box::new(RandomEvictOnSelect::default()),
            PolicyKind::FifoPassThrough => Box::new(FifoPassThrough::default()),
        }
    }
}

/// Storage plus the eviction and selection rules of a buffer.
///
/// New policies (reservoir, importance sampling, ...) plug in here.
pub trait DataPolicy<T>: Send {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn insert(&mut self, item: T);
    /// Removes one item to make room in a full buffer.
    fn evict(&mut self, rng: &mut dyn RngCore) -> Option<T>;
    /// Removes and returns `n <= len()` items.
    fn select(&mut self, n: usize, rng: &mut dyn RngCore) -> Vec<T>;
    /// Whether the ready/min thresholds gate draws.
    fn gated(&self) -> bool;
}

#[derive(Debug)]
pub struct RandomEvictOnSelect<T> {
    items: Vec<T>,
}

impl<T> Default for RandomEvictOnSelect<T> {
    fn default() -> Self {
        Self { items: Vec::new() }
    }
}

impl<T: Send> DataPolicy<T> for RandomEvictOnSelect<T> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn insert(&mut self, item: T) {
        self.items.push(item);
    }

    fn evict(&mut self, rng: &mut dyn RngCore) -> Option<T> {
        if self.items.is_empty() {
            return None;
        }
        let i = rng.random_range(0..self.items.len());
        Some(self.items.swap_remove(i))
    }

    fn select(&mut self, n: usize, rng: &mut dyn RngCore) -> Vec<T> {
        // Each pick is uniform over what is left: a uniform subset without replacement.
        (0..n.min(self.items.len()))
            .map(|_| {
                let i = rng.random_range(0..self.items.len());
                self.items.swap_remove(i)
            })
            .collect()
    }

    fn gated(&self) -> bool {
        true
    }
}

#[derive(Debug)]
pub struct FifoPassThrough<T> {
    items: VecDeque<T>,
}

impl<T> Default for FifoPassThrough<T> {
    fn default() -> Self {
        Self {
            items: VecDeque::new(),
        }
    }
}

impl<T: Send> DataPolicy<T> for FifoPassThrough<T> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn insert(&mut self, item: T) {
        self.items.push_back(item);
    }

    fn evict(&mut self, _rng: &mut dyn RngCore) -> Option<T> {
        self.items.pop_front()
    }

    fn select(&mut self, n: usize, _rng: &mut dyn RngCore) -> Vec<T> {
        let n = n.min(self.items.len());
        self.items.drain(..n).collect()
    }

    fn gated(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PushOutcome {
    Stored,
    /// The buffer was full; one item was evicted first.
    Evicted,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DrawOutcome<T> {
    Batch(Vec<T>),
    /// Not enough data yet; retry later.
    Blocked,
    /// Draining and empty: nothing more will ever come.
    Exhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BufferMetrics {
    pub size: usize,
    pub total_pushed: u64,
    pub total_evicted: u64,
    pub total_drawn: u64,
    pub blocked_draws: u64,
}

pub struct MemoryBuffer<T> {
    config: BufferConfig,
    policy: Box<dyn DataPolicy<T>>,
    ready: bool,
    draining: bool,
    rng: ChaCha8Rng,
    metrics: BufferMetrics,
}

impl<T: Send + 'static> MemoryBuffer<T> {
    pub fn new(config: BufferConfig, kind: PolicyKind, seed: u64) -> Result<Self, BufferError> {
        Self::with_policy(config, kind.build(), seed)
    }
}

impl<T> MemoryBuffer<T> {
    pub fn with_policy(
        config: BufferConfig,
        policy: Box<dyn DataPolicy<T>>,
        seed: u64,
    ) -> Result<Self, BufferError> {
        config.validate()?;
        Ok(Self {
            config,
            policy,
            ready: false,
            draining: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
            metrics: BufferMetrics::default(),
        })
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn len(&self) -> usize {
        self.policy.len()
    }

    pub fn is_empty(&self) -> bool {
        self.policy.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.len() >= self.config.capacity
    }

    pub fn is_ready(&self) -> bool {
        self.ready
    }

    pub fn is_draining(&self) -> bool {
        self.draining
    }

    pub fn metrics(&self) -> BufferMetrics {
        BufferMetrics {
            size: self.len(),
            ..self.metrics
        }
    }

    pub fn push(&mut self, item: T) -> PushOutcome {
        let mut outcome = PushOutcome::Stored;
        if self.is_full() && self.policy.evict(&mut self.rng).is_some() {
            self.metrics.total_evicted += 1;
            outcome = PushOutcome::Evicted;
        }
        self.policy.insert(item);
        self.metrics.total_pushed += 1;
        if self.len() >= self.config.ready_threshold {
            self.ready = true;
        }
        outcome
    }

    pub fn draw_batch(&mut self, batch_size: usize) -> DrawOutcome<T> {
        let len = self.len();
        let take = if self.draining {
            if len == 0 {
                return DrawOutcome::Exhausted;
            }
            batch_size.min(len)
        } else if self.policy.gated() {
            if !(self.ready && len >= self.config.min_threshold + batch_size) {
                self.metrics.blocked_draws += 1;
                return DrawOutcome::Blocked;
            }
            batch_size
        } else {
            if len < batch_size {
                self.metrics.blocked_draws += 1;
                return DrawOutcome::Blocked;
            }
            batch_size
        };
        let batch = self.policy.select(take, &mut self.rng);
        self.metrics.total_drawn += batch.len() as u64;
        DrawOutcome::Batch(batch)
    }

    /// Idempotent.
    pub fn set_draining(&mut self) {
        self.draining = true;
    }
}

/// Per-component mean and unbiased standard deviation of a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    pub rho_mean: f64,
    pub rho_std: f64,
    pub x_mean: f64,
    pub x_std: f64,
    pub y_mean: f64,
    pub y_std: f64,
    pub z_mean: f64,
    pub z_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    if n < 2.0 {
        return (mean, 0.0);
    }
    let ss: f64 = values.map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

pub fn batch_statistics(batch: &[Sample]) -> Result<BatchStats, BufferError> {
    if batch.is_empty() {
        return Err(BufferError::EmptyBatch);
    }
    let (rho_mean, rho_std) = mean_std(batch.iter().map(|s| s.rho));
    let (x_mean, x_std) = mean_std(batch.iter().map(|s| s.state.x));
    let (y_mean, y_std) = mean_std(batch.iter().map(|s| s.state.y));
    let (z_mean, z_std) = mean_std(batch.iter().map(|s| s.state.z));
    Ok(BatchStats {
        rho_mean,
        rho_std,
        x_mean,
        x_std,
        y_mean,
        y_std,
        z_mean,
        z_std,
    })
}

/// Result of a blocking draw on a [`SharedBuffer`].
#[derive(Debug, Clone, PartialEq)]
pub enum Fetch<T> {
    Batch(Vec<T>),
    Exhausted,
    /// Blocked for the whole timeout without any new data arriving.
    Starved,
}

struct Shared<T> {
    buffer: MemoryBuffer<T>,
    live_producers: usize,
    ensemble_finished: bool,
    consumer_closed: bool,
    backpressure: bool,
    last_push: Instant,
}

impl<T> Shared<T> {
    fn maybe_drain(&mut self) {
        if self.ensemble_finished && self.live_producers == 0 {
            self.buffer.set_draining();
        }
    }
}

/// A [`MemoryBuffer`] shared by many producers (connection handlers) and one consumer.
///
/// Every operation takes one lock, so operations are linearizable. `push`
/// never waits; producers that want flow control call
/// [`SharedBuffer::wait_for_room`] before reading more input.
pub struct SharedBuffer<T> {
    inner: Arc<(Mutex<Shared<T>>, Condvar)>,
}

impl<T> Clone for SharedBuffer<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Arc::clone(&self.inner),
        }
    }
}

impl<T> SharedBuffer<T> {
    pub fn new(buffer: MemoryBuffer<T>, backpressure: bool) -> Self {
        Self {
            inner: Arc::new((
                Mutex::new(Shared {
                    buffer,
                    live_producers: 0,
                    ensemble_finished: false,
                    consumer_closed: false,
                    backpressure,
                    last_push: Instant::now(),
                }),
                Condvar::new(),
            )),
        }
    }

    fn lock(&self) -> MutexGuard<'_, Shared<T>> {
        self.inner.0.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn notify(&self) {
        self.inner.1.notify_all();
    }

    pub fn push(&self, item: T) -> PushOutcome {
        let outcome = {
            let mut g = self.lock();
            g.last_push = Instant::now();
            g.buffer.push(item)
        };
        self.notify();
        outcome
    }

    /// Blocks while the buffer is full, unless flow control is off or the consumer is gone.
    pub fn wait_for_room(&self) {
        let mut g = self.lock();
        while g.backpressure && !g.consumer_closed && g.buffer.is_full() {
            g = self.inner.1.wait(g).unwrap_or_else(|p| p.into_inner());
        }
    }

    pub fn try_draw(&self, batch_size: usize) -> DrawOutcome<T> {
        let out = self.lock().buffer.draw_batch(batch_size);
        if matches!(out, DrawOutcome::Batch(_)) {
            self.notify();
        }
        out
    }

    /// Waits for a batch. Reports [`Fetch::Starved`] after `timeout` without any push.
    pub fn draw_blocking(&self, batch_size: usize, timeout: Duration) -> Fetch<T> {
        let started = Instant::now();
        let mut g = self.lock();
        loop {
            match g.buffer.draw_batch(batch_size) {
                DrawOutcome::Batch(b) => {
                    drop(g);
                    self.notify();
                    return Fetch::Batch(b);
                }
                DrawOutcome::Exhausted => return Fetch::Exhausted,
                DrawOutcome::Blocked => {}
            }
            let quiet_since = g.last_push.max(started);
            let waited = quiet_since.elapsed();
            if waited >= timeout {
                return Fetch::Starved;
            }
            let slice = (timeout - waited).min(Duration::from_millis(200));
            g = self
                .inner
                .1
                .wait_timeout(g, slice)
                .unwrap_or_else(|p| p.into_inner())
                .0;
        }
    }

    pub fn producer_opened(&self) {
        self.lock().live_producers += 1;
    }

    pub fn producer_closed(&self) {
        {
            let mut g = self.lock();
            g.live_producers = g.live_producers.saturating_sub(1);
            g.maybe_drain();
        }
        self.notify();
    }

    /// The launcher reported the end of the ensemble; draining starts once
    /// every producer connection has closed.
    pub fn mark_ensemble_finished(&self) {
        {
            let mut g = self.lock();
            g.ensemble_finished = true;
            g.maybe_drain();
        }
        self.notify();
    }

    /// Forces draining immediately.
    pub fn set_draining(&self) {
        self.lock().buffer.set_draining();
        self.notify();
    }

    /// The consumer is done; producers stop waiting for room and pushes evict normally.
    pub fn close_consumer(&self) {
        self.lock().consumer_closed = true;
        self.notify();
    }

    pub fn live_producers(&self) -> usize {
        self.lock().live_producers
    }

    pub fn is_draining(&self) -> bool {
        self.lock().buffer.is_draining()
    }

    pub fn metrics(&self) -> BufferMetrics {
        self.lock().buffer.metrics()
    }

    pub fn len(&self) -> usize {
        self.lock().buffer.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

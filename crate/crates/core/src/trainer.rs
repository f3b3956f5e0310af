//! Training loop shared by the offline baselines and the online settings.

use std::fmt;
use std::io;
use std::str::FromStr;
use std::time::{Duration, Instant};

use log::{debug, info, warn};
use ndarray::{s, Array2, ArrayView2};

use crate::buffer::{batch_statistics, BatchStats, BufferMetrics, Fetch, PolicyKind, SharedBuffer};
use crate::datasets::{DatasetError, EpochLoader};
use crate::launcher::Strategy;
use crate::lorenz::{Sample, Standardization, State};
use crate::nn::{Adam, Batch, Mlp, NnError};

pub const DEFAULT_VALIDATION_INTERVAL: usize = 100;
pub const DEFAULT_STARVATION_TIMEOUT: Duration = Duration::from_secs(60);

/// Rows per forward pass during validation.
const VALIDATION_CHUNK: usize = 4096;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training setting: {0}")]
    InvalidSetting(String),
    #[error("no data for {waited:?} before batch {batch_index}; no producer is making progress")]
    DataStarvation { batch_index: usize, waited: Duration },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("malformed batch recording: {0}")]
    MalformedRecording(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SettingKind {
    OfflineFull,
    OfflineRestricted,
    OfflineSubsampled,
    OnlineStreaming,
    OnlineSampling,
    OnlineSamplingBuffer,
}

impl SettingKind {
    pub const ALL: [SettingKind; 6] = [
        SettingKind::OfflineFull,
        SettingKind::OfflineRestricted,
        SettingKind::OfflineSubsampled,
        SettingKind::OnlineStreaming,
        SettingKind::OnlineSampling,
        SettingKind::OnlineSamplingBuffer,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SettingKind::OfflineFull => "offline-full",
            SettingKind::OfflineRestricted => "offline-restricted",
            SettingKind::OfflineSubsampled => "offline-subsampled",
            SettingKind::OnlineStreaming => "online-streaming",
            SettingKind::OnlineSampling => "online-sampling",
            SettingKind::OnlineSamplingBuffer => "online-sampling-buffer",
        }
    }

    pub fn is_online(self) -> bool {
        self.online_wiring().is_some()
    }

    /// Buffer policy and ensemble strategy of the online settings.
    pub fn online_wiring(self) -> Option<(PolicyKind, Strategy)> {
        match self {
            SettingKind::OnlineStreaming => Some((PolicyKind::FifoPassThrough, Strategy::StreamingSweep)),
            SettingKind::OnlineSampling => Some((PolicyKind::FifoPassThrough, Strategy::RandomSampling)),
            SettingKind::OnlineSamplingBuffer => {
                Some((PolicyKind::RandomEvictOnSelect, Strategy::RandomSampling))
            }
            _ => None,
        }
    }
}

impl fmt::Display for SettingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SettingKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        SettingKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = SettingKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown setting {s:?}; expected one of {}", names.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingSetting {
    pub kind: SettingKind,
    pub batch_budget: usize,
    pub batch_size: usize,
    pub validation_interval: usize,
    /// Batch statistics are recorded on every `stats_interval`-th batch.
    pub stats_interval: usize,
    pub seed: u64,
    pub starvation_timeout: Duration,
    /// Keep every drawn batch in the log so the run can be replayed.
    pub record_batches: bool,
}

impl TrainingSetting {
    pub fn new(kind: SettingKind, batch_budget: usize, batch_size: usize, seed: u64) -> Self {
        Self {
            kind,
            batch_budget,
            batch_size,
            validation_interval: DEFAULT_VALIDATION_INTERVAL,
            stats_interval: 1,
            seed,
            starvation_timeout: DEFAULT_STARVATION_TIMEOUT,
            record_batches: false,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidSetting(m.into()));
        if self.batch_budget == 0 {
            return bad("batch_budget must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be > 0");
        }
        if self.validation_interval == 0 {
            return bad("validation_interval must be > 0");
        }
        if self.stats_interval == 0 {
            return bad("stats_interval must be > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchRecord {
    /// 1-based: the number of optimizer steps taken including this one.
    pub batch_index: usize,
    pub train_loss: f64,
    pub stats: Option<BatchStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValRecord {
    /// Optimizer steps taken before the validation; 0 is the untrained model.
    pub batch_index: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BufferRecord {
    pub batch_index: usize,
    pub metrics: BufferMetrics,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainingLog {
    pub batches: Vec<BatchRecord>,
    pub validations: Vec<ValRecord>,
    pub buffer: Vec<BufferRecord>,
    /// Set when online data ran out before the budget was spent.
    pub early_stop: Option<String>,
    pub elapsed: Duration,
    /// Raw samples of every batch, in order; empty unless recording.
    pub drawn: Vec<Vec<Sample>>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl TrainingLog {
    pub fn batches_executed(&self) -> usize {
        self.batches.len()
    }

    pub fn final_train_loss(&self) -> Option<f64> {
        self.batches.last().map(|b| b.train_loss)
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.validations.last().map(|v| v.val_loss)
    }

    /// Mean train loss over the last `window` batches, a less noisy end-of-run figure.
    pub fn trailing_train_loss(&self, window: usize) -> Option<f64> {
        let n = self.batches.len().min(window);
        (n > 0).then(|| self.batches[self.batches.len() - n..].iter().map(|b| b.train_loss).sum::<f64>() / n as f64)
    }

    /// Mean validation loss over the validations taken after one of the last
    /// `window` batches, the counterpart of [`TrainingLog::trailing_train_loss`].
    pub fn trailing_val_loss(&self, window: usize) -> Option<f64> {
        let start = self.batches_executed().saturating_sub(window);
        let tail: Vec<f64> = self
            .validations
            .iter()
            .filter(|v| v.batch_index > start)
            .map(|v| v.val_loss)
            .collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }

    pub fn write_train_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "batch_index", "train_loss", "rho_mean", "rho_std", "x_mean", "x_std", "y_mean", "y_std", "z_mean",
            "z_std",
        ])?;
        for b in &self.batches {
            let s = b.stats;
            w.write_record([
                b.batch_index.to_string(),
                format!("{:?}", b.train_loss),
                opt(s.map(|s| s.rho_mean)),
                opt(s.map(|s| s.rho_std)),
                opt(s.map(|s| s.x_mean)),
                opt(s.map(|s| s.x_std)),
                opt(s.map(|s| s.y_mean)),
                opt(s.map(|s| s.y_std)),
                opt(s.map(|s| s.z_mean)),
                opt(s.map(|s| s.z_std)),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_val_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["batch_index", "val_loss"])?;
        for v in &self.validations {
            w.write_record([v.batch_index.to_string(), format!("{:?}", v.val_loss)])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_buffer_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["batch_index", "buffer_size", "total_pushed", "total_evicted", "total_drawn"])?;
        for r in &self.buffer {
            let m = r.metrics;
            w.write_record([
                r.batch_index.to_string(),
                m.size.to_string(),
                m.total_pushed.to_string(),
                m.total_evicted.to_string(),
                m.total_drawn.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `batch_index,rho,x,y,z,vx,vy,vz`, one row per recorded sample.
    pub fn write_drawn_csv<W: io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(DRAWN_HEADER)?;
        for (i, batch) in self.drawn.iter().enumerate() {
            for s in batch {
                let mut row = vec![(i + 1).to_string()];
                row.extend(
                    [s.rho, s.state.x, s.state.y, s.state.z, s.velocity.x, s.velocity.y, s.velocity.z]
                        .map(|v| format!("{v:?}")),
                );
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

const DRAWN_HEADER: [&str; 8] = ["batch_index", "rho", "x", "y", "z", "vx", "vy", "vz"];

/// Reads batches written by [`TrainingLog::write_drawn_csv`].
pub fn read_drawn_csv<R: io::Read>(input: R) -> Result<Vec<Vec<Sample>>, TrainError> {
    let bad = |m: String| TrainError::MalformedRecording(m);
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers().map_err(|e| bad(e.to_string()))?;
    if header.iter().ne(DRAWN_HEADER) {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let mut batches: Vec<Vec<Sample>> = Vec::new();
    for (line, record) in r.records().enumerate() {
        let record = record.map_err(|e| bad(e.to_string()))?;
        if record.len() != DRAWN_HEADER.len() {
            return Err(bad(format!("row {} has {} fields", line + 1, record.len())));
        }
        let index: usize = record[0].parse().map_err(|_| bad(format!("row {}: bad batch_index", line + 1)))?;
        let mut v = [0.0; 7];
        for (slot, field) in v.iter_mut().zip(record.iter().skip(1)) {
            *slot = field.parse().map_err(|_| bad(format!("row {}: bad number {field:?}", line + 1)))?;
        }
        if index == batches.len() + 1 {
            batches.push(Vec::new());
        } else if index != batches.len() || index == 0 {
            return Err(bad(format!("row {}: batch_index {index} out of order", line + 1)));
        }
        batches.last_mut().expect("pushed above").push(Sample {
            rho: v[0],
            state: State::new(v[1], v[2], v[3]),
            velocity: State::new(v[4], v[5], v[6]),
        });
    }
    Ok(batches)
}

/// Anything that maps standardized inputs to standardized targets.
pub trait Predictor {
    fn predict(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError>;
}

impl Predictor for Mlp {
    fn predict(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.forward(inputs)
    }
}

/// Mean squared error over every standardized validation target component.
pub fn validate<P: Predictor + ?Sized>(model: &P, set: &Batch) -> Result<f64, NnError> {
    let n = set.len();
    if n == 0 {
        return Ok(0.0);
    }
    let mut sum = 0.0;
    for start in (0..n).step_by(VALIDATION_CHUNK) {
        let end = (start + VALIDATION_CHUNK).min(n);
        let pred = model.predict(set.inputs.slice(s![start..end, ..]))?;
        let target = set.targets.slice(s![start..end, ..]);
        if pred.dim() != target.dim() {
            return Err(NnError::ShapeMismatch(format!(
                "prediction {:?} vs target {:?}",
                pred.dim(),
                target.dim()
            )));
        }
        sum += pred
            .iter()
            .zip(target.iter())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>();
    }
    Ok(sum / set.targets.len() as f64)
}

/// Where training batches come from.
pub enum BatchSource<'a> {
    Offline(EpochLoader<'a>),
    Online(&'a SharedBuffer<Sample>),
    /// Batches recorded by an earlier run, replayed in order.
    Replay(std::vec::IntoIter<Vec<Sample>>),
}

enum Next {
    Batch(Vec<Sample>),
    Exhausted,
}

impl BatchSource<'_> {
    fn next(&mut self, setting: &TrainingSetting, batch_index: usize) -> Result<Next, TrainError> {
        match self {
            BatchSource::Offline(loader) => Ok(loader.next().map_or(Next::Exhausted, Next::Batch)),
            BatchSource::Replay(batches) => Ok(batches.next().map_or(Next::Exhausted, Next::Batch)),
            BatchSource::Online(buffer) => match buffer.draw_blocking(setting.batch_size, setting.starvation_timeout) {
                Fetch::Batch(b) => Ok(Next::Batch(b)),
                Fetch::Exhausted => Ok(Next::Exhausted),
                Fetch::Starved => Err(TrainError::DataStarvation {
                    batch_index,
                    waited: setting.starvation_timeout,
                }),
            },
        }
    }

    fn buffer(&self) -> Option<&SharedBuffer<Sample>> {
        match self {
            BatchSource::Online(b) => Some(b),
            BatchSource::Offline(_) | BatchSource::Replay(_) => None,
        }
    }
}

/// Takes up to `setting.batch_budget` optimizer steps on batches from `source`.
///
/// Validation runs before the first batch, every `validation_interval`
/// batches, and after the last batch.
pub fn train(
    setting: &TrainingSetting,
    model: &mut Mlp,
    optimizer: &mut Adam,
    standardization: &Standardization,
    validation_set: &Batch,
    mut source: BatchSource<'_>,
) -> Result<TrainingLog, TrainError> {
    setting.validate()?;
    let started = Instant::now();
    let mut log = TrainingLog::default();
    log.validations.push(ValRecord {
        batch_index: 0,
        val_loss: validate(model, validation_set)?,
    });

    for batch_index in 1..=setting.batch_budget {
        let samples = match source.next(setting, batch_index)? {
            Next::Batch(b) => b,
            Next::Exhausted => {
                let msg = format!(
                    "data exhausted after {} of {} batches",
                    batch_index - 1,
                    setting.batch_budget
                );
                warn!("{}: {msg}", setting.kind);
                log.early_stop = Some(msg);
                break;
            }
        };
        let stats = if (batch_index - 1) % setting.stats_interval == 0 {
            Some(batch_statistics(&samples).expect("batches are non-empty"))
        } else {
            None
        };
        let batch = Batch::from_samples(&samples, standardization);
        let (train_loss, grads) = model.backward(&batch)?;
        optimizer.step(model, &grads)?;
        log.batches.push(BatchRecord {
            batch_index,
            train_loss,
            stats,
        });
        if let Some(buffer) = source.buffer() {
            log.buffer.push(BufferRecord {
                batch_index,
                metrics: buffer.metrics(),
            });
        }
        if setting.record_batches {
            log.drawn.push(samples);
        }
        if batch_index % setting.validation_interval == 0 {
            let val_loss = validate(model, validation_set)?;
            log.validations.push(ValRecord { batch_index, val_loss });
            info!(
                "{} batch {batch_index}/{}: train {train_loss:.4e} val {val_loss:.4e}",
                setting.kind, setting.batch_budget
            );
        } else {
            debug!("{} batch {batch_index}: train {train_loss:.4e}", setting.kind);
        }
    }

    let executed = log.batches.len();
    if log.validations.last().map(|v| v.batch_index) != Some(executed) {
        log.validations.push(ValRecord {
            batch_index: executed,
            val_loss: validate(model, validation_set)?,
        });
    }
    log.elapsed = started.elapsed();
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lorenz::State;
    use crate::nn::AdamConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_samples(n: usize) -> Vec<Sample> {
        (0..n)
            .map(|i| {
                let v = i as f64 / n as f64;
                Sample {
                    rho: (i % 3) as f64 * 10.0,
                    state: State::new(v, 1.0 - v, 2.0 * v),
                    velocity: State::new(-v, v, 0.5),
                }
            })
            .collect()
    }

    #[test]
    fn trailing_losses_share_a_window() {
        let log = TrainingLog {
            batches: (1..=10)
                .map(|i| BatchRecord {
                    batch_index: i,
                    train_loss: i as f64,
                    stats: None,
                })
                .collect(),
            validations: [0, 4, 8, 10]
                .map(|i| ValRecord {
                    batch_index: i,
                    val_loss: 100.0 + i as f64,
                })
                .to_vec(),
            ..TrainingLog::default()
        };
        assert_eq!(log.trailing_train_loss(4), Some(8.5));
        assert_eq!(log.trailing_val_loss(4), Some(109.0));
        assert_eq!(log.trailing_val_loss(1), Some(110.0));
        // Batch 0 precedes every window.
        assert_eq!(log.trailing_val_loss(100), Some((104.0 + 108.0 + 110.0) / 3.0));
        assert_eq!(TrainingLog::default().trailing_val_loss(5), None);
    }

    #[test]
    fn setting_names_round_trip() {
        for k in SettingKind::ALL {
            assert_eq!(k.name().parse::<SettingKind>().unwrap(), k);
        }
        assert!("offline".parse::<SettingKind>().is_err());
        assert_eq!(SettingKind::ALL.iter().filter(|k| k.is_online()).count(), 3);
    }

    #[test]
    fn zero_budget_rejected() {
        let s = TrainingSetting::new(SettingKind::OfflineFull, 0, 4, 0);
        assert!(matches!(s.validate(), Err(TrainError::InvalidSetting(_))));
    }

    #[test]
    fn offline_training_runs_exact_budget() {
        let samples = toy_samples(64);
        let stats = Standardization::from_samples(&samples).unwrap();
        let val = Batch::from_samples(&samples, &stats);
        let mut model = Mlp::init(&[4, 8, 8, 3], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut adam = Adam::new(AdamConfig::default(), &model);
        let mut setting = TrainingSetting::new(SettingKind::OfflineFull, 50, 16, 1);
        setting.validation_interval = 20;
        setting.stats_interval = 2;
        let loader = EpochLoader::new(&samples, 16, 1).unwrap();
        let log = train(&setting, &mut model, &mut adam, &stats, &val, BatchSource::Offline(loader)).unwrap();
        assert_eq!(log.batches_executed(), 50);
        assert_eq!(adam.steps_taken(), 50);
        let idx: Vec<_> = log.validations.iter().map(|v| v.batch_index).collect();
        assert_eq!(idx, vec![0, 20, 40, 50]);
        assert!(log.batches[0].stats.is_some() && log.batches[1].stats.is_none());
        assert!(log.early_stop.is_none());
        let mut csv = Vec::new();
        log.write_train_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().count(), 51);
        assert!(text.lines().nth(2).unwrap().ends_with(",,,,,,,,"));
    }

    struct Lookup<'a>(&'a Batch);

    impl Predictor for Lookup<'_> {
        fn predict(&self, inputs: ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
            let rows: Vec<usize> = inputs
                .outer_iter()
                .map(|r| {
                    self.0
                        .inputs
                        .outer_iter()
                        .position(|q| q == r)
                        .expect("input present")
                })
                .collect();
            Ok(self.0.targets.select(ndarray::Axis(0), &rows))
        }
    }

    #[test]
    fn target_lookup_has_zero_validation_loss() {
        let samples = toy_samples(10);
        let stats = Standardization::from_samples(&samples).unwrap();
        let val = Batch::from_samples(&samples, &stats);
        assert_eq!(validate(&Lookup(&val), &val).unwrap(), 0.0);
    }

    #[test]
    fn validation_leaves_model_untouched() {
        let samples = toy_samples(5000);
        let stats = Standardization::from_samples(&samples).unwrap();
        let val = Batch::from_samples(&samples, &stats);
        let model = Mlp::init(&[4, 8, 3], &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let before = model.flatten();
        let a = validate(&model, &val).unwrap();
        let b = validate(&model, &val).unwrap();
        assert_eq!(a, b);
        assert_eq!(model.flatten(), before);
    }
}

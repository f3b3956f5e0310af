//! Offline datasets, the shuffled epoch loader, and batch-budget accounting.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lorenz::{
    sample_initial_state, LorenzError, LorenzParams, Sample, State, TrajectorySpec,
};

pub const DEFAULT_RHO_GRID: [f64; 6] = [0.0, 20.0, 40.0, 60.0, 80.0, 100.0];

const CACHE_MAGIC: &[u8; 8] = b"LZDSET01";
const CACHE_HEADER_LEN: usize = 8 + 1 + 4 + 4 + 4 + 8 + 8;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error(transparent)]
    Lorenz(#[from] LorenzError),
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("malformed dataset cache: {0}")]
    MalformedCache(String),
    #[error("dataset is empty")]
    Empty,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Full,
    Restricted,
    Subsampled,
    Validation,
    Pilot,
}

impl DatasetKind {
    fn code(self) -> u8 {
        match self {
            DatasetKind::Full => 0,
            DatasetKind::Restricted => 1,
            DatasetKind::Subsampled => 2,
            DatasetKind::Validation => 3,
            DatasetKind::Pilot => 4,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DatasetKind::Full,
            1 => DatasetKind::Restricted,
            2 => DatasetKind::Subsampled,
            3 => DatasetKind::Validation,
            4 => DatasetKind::Pilot,
            _ => return None,
        })
    }
}

/// How to generate a dataset. Trajectory `i` uses `rho_grid[i % len]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n_trajectories: usize,
    pub n_steps: usize,
    /// Keep the pair `(Y_t, Y_{t+1})` only for `t` multiple of `stride`.
    pub stride: usize,
    pub dt: f64,
    pub substeps: u32,
    pub sigma: f64,
    pub beta: f64,
    pub rho_grid: Vec<f64>,
}

impl DatasetSpec {
    /// The sizes used for each dataset kind at full scale.
    pub fn paper(kind: DatasetKind) -> Self {
        let (n_trajectories, stride) = match kind {
            DatasetKind::Full => (100, 1),
            DatasetKind::Restricted => (10, 1),
            DatasetKind::Subsampled => (10_000, 100),
            DatasetKind::Validation | DatasetKind::Pilot => (12, 1),
        };
        Self {
            kind,
            n_trajectories,
            n_steps: 2000,
            stride,
            dt: 1e-2,
            substeps: 1,
            sigma: crate::lorenz::DEFAULT_SIGMA,
            beta: crate::lorenz::DEFAULT_BETA,
            rho_grid: DEFAULT_RHO_GRID.to_vec(),
        }
    }

    pub fn samples_per_trajectory(&self) -> usize {
        samples_per_trajectory(self.n_steps, self.stride)
    }

    pub fn expected_len(&self) -> usize {
        self.n_trajectories * self.samples_per_trajectory()
    }

    pub fn trajectory_spec(&self, rho: f64, initial_state: State) -> TrajectorySpec {
        TrajectorySpec::new(
            LorenzParams {
                rho,
                sigma: self.sigma,
                beta: self.beta,
            },
            initial_state,
            self.dt,
            self.n_steps,
        )
        .with_substeps(self.substeps)
    }

    fn validate(&self) -> Result<(), DatasetError> {
        if self.n_trajectories == 0 || self.stride == 0 || self.rho_grid.is_empty() {
            return Err(DatasetError::InvalidSpec(format!(
                "need trajectories >= 1, stride >= 1 and a non-empty grid: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Pairs kept from an `n_steps` trajectory when sampling every `stride` steps:
/// `t = 0, stride, ...` with `t + 1 < n_steps`.
pub fn samples_per_trajectory(n_steps: usize, stride: usize) -> usize {
    if n_steps < 2 {
        0
    } else {
        (n_steps - 2) / stride + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Provenance {
    pub kind: DatasetKind,
    pub n_trajectories: u32,
    pub n_steps: u32,
    pub stride: u32,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    pub samples: Vec<Sample>,
    pub provenance: Provenance,
}

impl OfflineDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Header (magic `LZDSET01`, kind u8, trajectories u32, steps u32, stride u32,
    /// seed u64, sample count u64) followed by packed little-endian `f64`
    /// records `rho, x, y, z, vx, vy, vz`.
    pub fn to_cache_bytes(&self) -> Vec<u8> {
        let p = &self.provenance;
        let mut out = Vec::with_capacity(CACHE_HEADER_LEN + 56 * self.samples.len());
        out.extend_from_slice(CACHE_MAGIC);
        out.push(p.kind.code());
        out.extend_from_slice(&p.n_trajectories.to_le_bytes());
        out.extend_from_slice(&p.n_steps.to_le_bytes());
        out.extend_from_slice(&p.stride.to_le_bytes());
        out.extend_from_slice(&p.seed.to_le_bytes());
        out.extend_from_slice(&(self.samples.len() as u64).to_le_bytes());
        for s in &self.samples {
            for v in [
                s.rho,
                s.state.x,
                s.state.y,
                s.state.z,
                s.velocity.x,
                s.velocity.y,
                s.velocity.z,
            ] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_cache_bytes(bytes: &[u8]) -> Result<Self, DatasetError> {
        let bad = |m: &str| DatasetError::MalformedCache(m.to_string());
        if bytes.len() < CACHE_HEADER_LEN {
            return Err(bad("truncated header"));
        }
        let (header, body) = bytes.split_at(CACHE_HEADER_LEN);
        if &header[..8] != CACHE_MAGIC {
            return Err(bad("missing magic"));
        }
        let kind = DatasetKind::from_code(header[8]).ok_or_else(|| bad("unknown dataset kind"))?;
        let u32_at = |at: usize| u32::from_le_bytes(header[at..at + 4].try_into().expect("4"));
        let u64_at = |at: usize| u64::from_le_bytes(header[at..at + 8].try_into().expect("8"));
        let provenance = Provenance {
            kind,
            n_trajectories: u32_at(9),
            n_steps: u32_at(13),
            stride: u32_at(17),
            seed: u64_at(21),
        };
        let count = u64_at(29);
        if count.checked_mul(56) != Some(body.len() as u64) {
            return Err(bad("sample count does not match payload length"));
        }
        let samples = body
            .chunks_exact(56)
            .map(|rec| {
                let v: [f64; 7] = std::array::from_fn(|i| {
                    f64::from_le_bytes(rec[8 * i..8 * i + 8].try_into().expect("8"))
                });
                Sample {
                    rho: v[0],
                    state: State::new(v[1], v[2], v[3]),
                    velocity: State::new(v[4], v[5], v[6]),
                }
            })
            .collect();
        Ok(Self {
            samples,
            provenance,
        })
    }
}

/// Generates the dataset described by `spec`; initial states come from `seed`.
pub fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<OfflineDataset, DatasetError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(spec.expected_len());
    for i in 0..spec.n_trajectories {
        let rho = spec.rho_grid[i % spec.rho_grid.len()];
        let traj = spec.trajectory_spec(rho, sample_initial_state(&mut rng));
        traj.validate()?;
        let mut prev: Option<State> = None;
        for (t, state) in traj.states().enumerate() {
            let state = state?;
            if let Some(p) = prev {
                samples.push(Sample::from_pair(rho, p, state, spec.dt));
            }
            prev = (t % spec.stride == 0).then_some(state);
        }
    }
    assert_eq!(samples.len(), spec.expected_len(), "sample-count formula");
    Ok(OfflineDataset {
        samples,
        provenance: Provenance {
            kind: spec.kind,
            n_trajectories: spec.n_trajectories as u32,
            n_steps: spec.n_steps as u32,
            stride: spec.stride as u32,
            seed,
        },
    })
}

/// Endless stream of shuffled batches, reshuffled every epoch. The remainder
/// of each epoch that does not fill a batch is dropped.
///
/// Yields raw samples; standardization happens when the batch is built for the model.
pub struct EpochLoader<'a> {
    samples: &'a [Sample],
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> EpochLoader<'a> {
    pub fn new(samples: &'a [Sample], batch_size: usize, seed: u64) -> Result<Self, DatasetError> {
        if samples.len() < batch_size || batch_size == 0 {
            return Err(DatasetError::Empty);
        }
        let mut loader = Self {
            samples,
            batch_size,
            seed,
            epoch: 0,
            order: (0..samples.len()).collect(),
            cursor: 0,
        };
        loader.shuffle();
        Ok(loader)
    }

    fn shuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.epoch);
        self.order.sort_unstable();
        self.order.shuffle(&mut rng);
        self.cursor = 0;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.samples.len() / self.batch_size
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Indices into the dataset of the next batch.
    pub fn next_indices(&mut self) -> &[usize] {
        if self.cursor + self.batch_size > self.order.len() {
            self.epoch += 1;
            self.shuffle();
        }
        let start = self.cursor;
        self.cursor += self.batch_size;
        &self.order[start..self.cursor]
    }
}

impl Iterator for EpochLoader<'_> {
    type Item = Vec<Sample>;

    fn next(&mut self) -> Option<Vec<Sample>> {
        let samples = self.samples;
        Some(self.next_indices().iter().map(|&i| samples[i]).collect())
    }
}

/// Offline epochs `floor(n / batch)` batches each; `epochs` of them.
pub fn offline_budget(n_samples: usize, batch_size: usize, epochs: usize) -> usize {
    n_samples / batch_size * epochs
}

/// Dataset sizes and epoch counts from which every setting's batch budget follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BudgetInputs {
    pub batch_size: usize,
    pub full_samples: usize,
    pub restricted_samples: usize,
    pub subsampled_samples: usize,
    pub full_epochs: usize,
    pub restricted_epochs: usize,
    pub subsampled_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetSetting {
    Full,
    Restricted,
    Subsampled,
    /// All online settings; pinned to the full offline budget.
    Online,
}

pub fn total_batch_budget(setting: BudgetSetting, inputs: &BudgetInputs) -> usize {
    let b = inputs.batch_size;
    match setting {
        BudgetSetting::Full | BudgetSetting::Online => {
            offline_budget(inputs.full_samples, b, inputs.full_epochs)
        }
        BudgetSetting::Restricted => {
            offline_budget(inputs.restricted_samples, b, inputs.restricted_epochs)
        }
        BudgetSetting::Subsampled => {
            offline_budget(inputs.subsampled_samples, b, inputs.subsampled_epochs)
        }
    }
}

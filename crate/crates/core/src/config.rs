//! Experiment configuration: scale presets, TOML overrides, derived budgets.
//!
//! A config file is merged key by key over the preset selected by `scale`
//! (or `--scale`), then deserialized strictly: unknown keys are errors.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::buffer::BufferConfig;
use crate::datasets::{
    total_batch_budget, BudgetInputs, BudgetSetting, DatasetKind, DatasetSpec, DEFAULT_RHO_GRID,
};
use crate::eval::{DivergenceConfig, DEFAULT_BBOX_FACTOR, DEFAULT_DIVERGENCE_FRACTION};
use crate::launcher::{EnsemblePlan, Grouping, Strategy, TrajectoryTemplate};
use crate::lorenz::{DEFAULT_BETA, DEFAULT_SIGMA};
use crate::nn::AdamConfig;
use crate::trainer::{SettingKind, TrainingSetting};

pub const REFERENCE_HIDDEN: [usize; 3] = [512, 512, 512];

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(String),
    #[error("invalid config value: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    #[default]
    Paper,
    Desk,
    Smoke,
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scale::Paper => "paper",
            Scale::Desk => "desk",
            Scale::Smoke => "smoke",
        })
    }
}

impl FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paper" => Ok(Scale::Paper),
            "desk" => Ok(Scale::Desk),
            "smoke" => Ok(Scale::Smoke),
            other => Err(format!("unknown scale {other:?}; expected paper, desk or smoke")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClientMode {
    Process,
    InProcess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategyChoice {
    /// The strategy each online setting is defined with.
    Auto,
    StreamingSweep,
    RandomSampling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub sigma: f64,
    pub beta: f64,
    pub dt: f64,
    /// Recorded states per trajectory.
    pub n_steps: usize,
    /// Euler sub-steps per recorded step.
    pub substeps: u32,
    pub rho_grid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineConfig {
    pub full_trajectories: usize,
    pub restricted_trajectories: usize,
    pub subsampled_trajectories: usize,
    pub subsample_stride: usize,
    pub full_epochs: usize,
    pub restricted_epochs: usize,
    pub subsampled_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LauncherConfig {
    pub trajectories: usize,
    pub concurrency: usize,
    pub strategy: StrategyChoice,
    pub grouping: Grouping,
    pub mode: ClientMode,
    pub server_addr: String,
    /// Kernel socket buffer sizes; small values propagate backpressure to clients.
    pub socket_buffer_bytes: Option<usize>,
}

/// Buffer sizes in trajectory-equivalents (multiples of `n_steps - 1` samples).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferSection {
    pub capacity_trajectories: usize,
    pub ready_trajectories: usize,
    pub min_trajectories: usize,
    /// Stop reading from clients while the buffer is full.
    pub backpressure: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Overrides every setting's derived batch budget.
    pub budget: Option<usize>,
    pub validation_interval: usize,
    pub stats_interval: usize,
    pub starvation_timeout_secs: f64,
    /// Trailing batches over which the reported final train and validation
    /// losses are averaged.
    pub final_loss_window: usize,
    /// Write every drawn batch to `drawn_batches.csv` for replay.
    pub record_batches: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Validation trajectories, assigned to grid values round-robin.
    pub validation_trajectories: usize,
    /// Trajectories whose samples define the standardization.
    pub pilot_trajectories: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub rho: f64,
    pub n_steps: usize,
    /// Drawn from the eval seed when absent.
    pub initial_state: Option<[f64; 3]>,
    /// Steps integrated from the initial state before the rollout starts,
    /// so the test trajectory begins on the attractor.
    pub burn_in_steps: usize,
    pub divergence_fraction: f64,
    pub bbox_factor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Settings run by `suite`, in order.
    pub settings: Vec<String>,
    pub system: SystemConfig,
    pub offline: OfflineConfig,
    pub launcher: LauncherConfig,
    pub buffer: BufferSection,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Scale {
    pub fn preset(self) -> ExperimentConfig {
        let mut c = ExperimentConfig {
            scale: self,
            seed: 2023,
            output_dir: PathBuf::from("runs"),
            settings: SettingKind::ALL.iter().map(|k| k.name().to_string()).collect(),
            system: SystemConfig {
                sigma: DEFAULT_SIGMA,
                beta: DEFAULT_BETA,
                dt: 1e-2,
                n_steps: 2000,
                substeps: 10,
                rho_grid: DEFAULT_RHO_GRID.to_vec(),
            },
            offline: OfflineConfig {
                full_trajectories: 100,
                restricted_trajectories: 10,
                subsampled_trajectories: 10_000,
                subsample_stride: 100,
                full_epochs: 100,
                restricted_epochs: 1000,
                subsampled_epochs: 100,
            },
            launcher: LauncherConfig {
                trajectories: 10_000,
                concurrency: 8,
                strategy: StrategyChoice::Auto,
                grouping: Grouping::Backfill,
                mode: ClientMode::Process,
                server_addr: "127.0.0.1:0".into(),
                socket_buffer_bytes: Some(4096),
            },
            buffer: BufferSection {
                capacity_trajectories: 10,
                ready_trajectories: 5,
                min_trajectories: 3,
                backpressure: true,
            },
            model: ModelConfig {
                hidden: REFERENCE_HIDDEN.to_vec(),
                learning_rate: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                epsilon: 1e-8,
            },
            training: TrainingConfig {
                batch_size: 1024,
                budget: None,
                validation_interval: 100,
                stats_interval: 1,
                starvation_timeout_secs: 60.0,
                final_loss_window: 1000,
                record_batches: false,
            },
            data: DataConfig {
                validation_trajectories: 12,
                pilot_trajectories: 12,
            },
            eval: EvalConfig {
                rho: 28.0,
                n_steps: 2000,
                initial_state: None,
                burn_in_steps: 1000,
                divergence_fraction: DEFAULT_DIVERGENCE_FRACTION,
                bbox_factor: DEFAULT_BBOX_FACTOR,
            },
        };
        match self {
            Scale::Paper => {}
            Scale::Desk => {
                c.system.n_steps = 500;
                // 10 trajectories of 499 samples fill 4 batches per epoch.
                c.offline.restricted_epochs = 1200;
            }
            Scale::Smoke => {
                c.system.n_steps = 100;
                c.offline = OfflineConfig {
                    full_trajectories: 12,
                    restricted_trajectories: 3,
                    subsampled_trajectories: 120,
                    subsample_stride: 10,
                    full_epochs: 2,
                    restricted_epochs: 8,
                    subsampled_epochs: 2,
                };
                c.launcher.trajectories = 48;
                c.launcher.concurrency = 4;
                c.model.hidden = vec![32, 32, 32];
                c.training.batch_size = 32;
                c.training.validation_interval = 10;
                c.training.final_loss_window = 10;
            }
        }
        c
    }
}

fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (k, v) in overlay {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` over a preset. The scale comes from `scale`, else from
    /// the text's `scale` key, else `paper`.
    pub fn from_toml_str(text: &str, scale: Option<Scale>) -> Result<Self, ConfigError> {
        let overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let scale = match (scale, overlay.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| ConfigError::Parse("scale must be a string".into()))?
                .parse()
                .map_err(ConfigError::Parse)?,
            (None, None) => Scale::Paper,
        };
        let mut base = toml::Table::try_from(scale.preset()).expect("presets serialize");
        merge(&mut base, overlay);
        base.insert("scale".into(), toml::Value::String(scale.to_string()));
        let cfg: ExperimentConfig = base
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, scale: Option<Scale>) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, scale)
    }

    /// TOML snapshot of the resolved configuration.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        if self.model.hidden != REFERENCE_HIDDEN {
            out.push_str(&format!(
                "# note: model.hidden {:?} differs from the reference width {:?}\n",
                self.model.hidden, REFERENCE_HIDDEN
            ));
        }
        out.push_str(&toml::to_string(self).expect("config serializes"));
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let s = &self.system;
        if !(s.dt > 0.0 && s.dt.is_finite()) {
            return bad(format!("system.dt must be > 0, got {}", s.dt));
        }
        if s.n_steps < 2 || s.substeps == 0 {
            return bad("system.n_steps must be >= 2 and system.substeps >= 1".into());
        }
        if s.rho_grid.is_empty() || s.rho_grid.iter().any(|r| !r.is_finite()) {
            return bad("system.rho_grid must be non-empty and finite".into());
        }
        if ![s.sigma, s.beta].iter().all(|v| v.is_finite() && *v > 0.0) {
            return bad("system.sigma and system.beta must be > 0".into());
        }
        let o = &self.offline;
        if [
            o.full_trajectories,
            o.restricted_trajectories,
            o.subsampled_trajectories,
            o.subsample_stride,
            o.full_epochs,
            o.restricted_epochs,
            o.subsampled_epochs,
        ]
        .contains(&0)
        {
            return bad("offline counts must all be >= 1".into());
        }
        if self.launcher.trajectories == 0 || self.launcher.concurrency == 0 {
            return bad("launcher.trajectories and launcher.concurrency must be >= 1".into());
        }
        if self.launcher.server_addr.trim().is_empty() {
            return bad("launcher.server_addr must not be empty".into());
        }
        for name in &self.settings {
            name.parse::<SettingKind>().map_err(ConfigError::Invalid)?;
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad("model.hidden must list positive widths".into());
        }
        let t = &self.training;
        if t.batch_size == 0 || t.validation_interval == 0 || t.stats_interval == 0 || t.final_loss_window == 0 {
            return bad("training sizes and intervals must be >= 1".into());
        }
        if t.budget == Some(0) {
            return bad("training.budget must be >= 1".into());
        }
        if !(t.starvation_timeout_secs > 0.0 && t.starvation_timeout_secs.is_finite()) {
            return bad("training.starvation_timeout_secs must be > 0".into());
        }
        if self.data.validation_trajectories == 0 || self.data.pilot_trajectories == 0 {
            return bad("data trajectory counts must be >= 1".into());
        }
        let e = &self.eval;
        if e.n_steps < 2 || !e.rho.is_finite() || !(e.divergence_fraction > 0.0) || !(e.bbox_factor >= 1.0) {
            return bad("eval needs n_steps >= 2, finite rho, divergence_fraction > 0, bbox_factor >= 1".into());
        }
        if e.initial_state.is_some_and(|s| s.iter().any(|v| !v.is_finite())) {
            return bad("eval.initial_state must be finite".into());
        }
        self.buffer_config()
            .validate()
            .map_err(|e| ConfigError::Invalid(format!("buffer: {e}")))?;
        Ok(())
    }

    pub fn settings(&self) -> Vec<SettingKind> {
        self.settings.iter().filter_map(|s| s.parse().ok()).collect()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![4];
        dims.extend(&self.model.hidden);
        dims.push(3);
        dims
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.model.learning_rate,
            beta1: self.model.beta1,
            beta2: self.model.beta2,
            epsilon: self.model.epsilon,
        }
    }

    pub fn samples_per_trajectory(&self) -> usize {
        self.system.n_steps - 1
    }

    pub fn buffer_config(&self) -> BufferConfig {
        let b = &self.buffer;
        BufferConfig::from_trajectory_equivalents(
            self.samples_per_trajectory(),
            b.capacity_trajectories,
            b.ready_trajectories,
            b.min_trajectories,
            self.training.batch_size,
        )
    }

    pub fn dataset_spec(&self, kind: DatasetKind) -> DatasetSpec {
        let o = &self.offline;
        let (n_trajectories, stride) = match kind {
            DatasetKind::Full => (o.full_trajectories, 1),
            DatasetKind::Restricted => (o.restricted_trajectories, 1),
            DatasetKind::Subsampled => (o.subsampled_trajectories, o.subsample_stride),
            DatasetKind::Validation => (self.data.validation_trajectories, 1),
            DatasetKind::Pilot => (self.data.pilot_trajectories, 1),
        };
        DatasetSpec {
            kind,
            n_trajectories,
            n_steps: self.system.n_steps,
            stride,
            dt: self.system.dt,
            substeps: self.system.substeps,
            sigma: self.system.sigma,
            beta: self.system.beta,
            rho_grid: self.system.rho_grid.clone(),
        }
    }

    pub fn budget_inputs(&self) -> BudgetInputs {
        BudgetInputs {
            batch_size: self.training.batch_size,
            full_samples: self.dataset_spec(DatasetKind::Full).expected_len(),
            restricted_samples: self.dataset_spec(DatasetKind::Restricted).expected_len(),
            subsampled_samples: self.dataset_spec(DatasetKind::Subsampled).expected_len(),
            full_epochs: self.offline.full_epochs,
            restricted_epochs: self.offline.restricted_epochs,
            subsampled_epochs: self.offline.subsampled_epochs,
        }
    }

    pub fn batch_budget(&self, kind: SettingKind) -> usize {
        if let Some(b) = self.training.budget {
            return b;
        }
        let setting = match kind {
            SettingKind::OfflineFull => BudgetSetting::Full,
            SettingKind::OfflineRestricted => BudgetSetting::Restricted,
            SettingKind::OfflineSubsampled => BudgetSetting::Subsampled,
            _ => BudgetSetting::Online,
        };
        total_batch_budget(setting, &self.budget_inputs())
    }

    pub fn training_setting(&self, kind: SettingKind) -> TrainingSetting {
        let t = &self.training;
        TrainingSetting {
            kind,
            batch_budget: self.batch_budget(kind),
            batch_size: t.batch_size,
            validation_interval: t.validation_interval,
            stats_interval: t.stats_interval,
            seed: self.derived_seed("loader"),
            starvation_timeout: Duration::from_secs_f64(t.starvation_timeout_secs),
            record_batches: t.record_batches,
        }
    }

    /// The ensemble for an online setting; `None` for offline ones.
    pub fn ensemble_plan(&self, kind: SettingKind) -> Option<EnsemblePlan> {
        let (_, default_strategy) = kind.online_wiring()?;
        let strategy = match self.launcher.strategy {
            StrategyChoice::Auto => default_strategy,
            StrategyChoice::StreamingSweep => Strategy::StreamingSweep,
            StrategyChoice::RandomSampling => Strategy::RandomSampling,
        };
        Some(EnsemblePlan {
            strategy,
            rho_grid: self.system.rho_grid.clone(),
            n_trajectories: self.launcher.trajectories,
            concurrency: self.launcher.concurrency,
            seed: self.derived_seed("launcher"),
            trajectory: TrajectoryTemplate {
                sigma: self.system.sigma,
                beta: self.system.beta,
                dt: self.system.dt,
                n_steps: self.system.n_steps,
                substeps: self.system.substeps,
            },
        })
    }

    pub fn divergence(&self) -> DivergenceConfig {
        DivergenceConfig {
            threshold_fraction: self.eval.divergence_fraction,
            bbox_factor: self.eval.bbox_factor,
        }
    }

    /// Independent seed for one purpose, derived from the master seed.
    pub fn derived_seed(&self, purpose: &str) -> u64 {
        derive_seed(self.seed, purpose)
    }
}

/// SplitMix64 of the master seed mixed with an FNV-1a hash of the label.
pub fn derive_seed(master: u64, purpose: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in purpose.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    let mut z = (master ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for s in [Scale::Paper, Scale::Desk, Scale::Smoke] {
            s.preset().validate().unwrap();
        }
    }

    #[test]
    fn paper_budgets() {
        let c = Scale::Paper.preset();
        assert_eq!(c.batch_budget(SettingKind::OfflineFull), 19_500);
        assert_eq!(c.batch_budget(SettingKind::OfflineRestricted), 19_000);
        assert_eq!(c.batch_budget(SettingKind::OfflineSubsampled), 19_500);
        assert_eq!(c.batch_budget(SettingKind::OnlineSamplingBuffer), 19_500);
    }

    fn spread(c: &ExperimentConfig) -> f64 {
        let b: Vec<f64> = SettingKind::ALL.iter().map(|k| c.batch_budget(*k) as f64).collect();
        let (lo, hi) = b.iter().fold((f64::MAX, 0.0f64), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
        (hi - lo) / hi
    }

    #[test]
    fn budgets_agree_within_three_percent_at_every_scale() {
        for s in [Scale::Paper, Scale::Desk, Scale::Smoke] {
            assert!(spread(&s.preset()) <= 0.03, "{s}: {}", spread(&s.preset()));
        }
    }

    #[test]
    fn online_data_covers_budget() {
        for s in [Scale::Paper, Scale::Desk, Scale::Smoke] {
            let c = s.preset();
            let produced = c.launcher.trajectories * c.samples_per_trajectory();
            let residue = c.buffer_config().capacity;
            let needed = c.batch_budget(SettingKind::OnlineSamplingBuffer) * c.training.batch_size;
            assert!(produced - residue >= needed, "{s}: {produced} - {residue} < {needed}");
        }
    }

    #[test]
    fn overrides_merge_over_preset() {
        let c = ExperimentConfig::from_toml_str("seed = 5\n[launcher]\nconcurrency = 2\n", Some(Scale::Desk)).unwrap();
        assert_eq!(c.seed, 5);
        assert_eq!(c.launcher.concurrency, 2);
        assert_eq!(c.launcher.trajectories, 10_000);
        assert_eq!(c.system.n_steps, 500);
        assert_eq!(c.scale, Scale::Desk);
    }

    #[test]
    fn scale_key_selects_preset() {
        let c = ExperimentConfig::from_toml_str("scale = \"smoke\"", None).unwrap();
        assert_eq!(c.system.n_steps, 100);
        let c = ExperimentConfig::from_toml_str("scale = \"smoke\"", Some(Scale::Paper)).unwrap();
        assert_eq!(c.system.n_steps, 2000);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("bogus = 1", None).is_err());
        assert!(ExperimentConfig::from_toml_str("[training]\nlearning_rate = 0.1", None).is_err());
        assert!(ExperimentConfig::from_toml_str("settings = [\"offline-nope\"]", None).is_err());
    }

    #[test]
    fn snapshot_round_trips() {
        for s in [Scale::Paper, Scale::Desk, Scale::Smoke] {
            let c = s.preset();
            let text = c.to_toml();
            assert_eq!(text.starts_with("# note"), s == Scale::Smoke);
            assert_eq!(ExperimentConfig::from_toml_str(&text, None).unwrap(), c);
        }
    }

    #[test]
    fn physics_and_model_shape_do_not_depend_on_scale() {
        let (p, d, s) = (Scale::Paper.preset(), Scale::Desk.preset(), Scale::Smoke.preset());
        for c in [&d, &s] {
            assert_eq!((c.system.sigma, c.system.beta, c.system.dt), (p.system.sigma, p.system.beta, p.system.dt));
            assert_eq!(c.system.rho_grid, p.system.rho_grid);
            assert_eq!(c.eval, p.eval);
        }
        assert_eq!(d.model, p.model);
    }

    #[test]
    fn derived_seeds_differ_by_purpose() {
        assert_ne!(derive_seed(1, "model"), derive_seed(1, "launcher"));
        assert_ne!(derive_seed(1, "model"), derive_seed(2, "model"));
        assert_eq!(derive_seed(9, "eval"), derive_seed(9, "eval"));
    }
}

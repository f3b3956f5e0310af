//! Runs and suites: wires datasets or the online ensemble into the trainer,
//! evaluates the trained model and writes every artifact of a run.
//!
//! Run directory contents:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | resolved configuration |
//! | `stats.csv` | standardization (`name,mean,std`) |
//! | `train_log.csv`, `val_log.csv` | losses and batch statistics |
//! | `buffer_log.csv` | online only: buffer metrics after each batch |
//! | `ensemble_report.csv` | online only: `sim_id,rho,status,samples_sent` |
//! | `drawn_batches.csv` | when recording: `batch_index,rho,x,y,z,vx,vy,vz` |
//! | `rollout.csv` | test-trajectory rollout |
//! | `summary.csv` | one row of final metrics |
//! | `model.ckpt` | final parameters |

use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;

use log::{error, info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::buffer::{MemoryBuffer, SharedBuffer};
use crate::config::{ClientMode, ConfigError, ExperimentConfig};
use crate::datasets::{build_dataset, DatasetError, DatasetKind, EpochLoader, OfflineDataset};
use crate::eval::{evaluate_rollout, EvalError, RolloutResult, Surrogate};
use crate::launcher::{
    run_ensemble_until, ClientStatus, EnsembleReport, LaunchMode, LauncherError, LauncherOptions,
};
use crate::lorenz::{
    generate_trajectory, sample_initial_state, LorenzError, LorenzParams, Sample, Standardization, State,
    TrajectorySpec,
};
use crate::nn::{Adam, Batch, Mlp, NnError};
use crate::server::{IngestServer, IngestStats, ServerOptions};
use crate::trainer::{train, BatchSource, SettingKind, TrainError, TrainingLog};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error(transparent)]
    Lorenz(#[from] LorenzError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Launcher(#[from] LauncherError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("ingestion server: {0}")]
    Server(io::Error),
}

type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn write_csv_file<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(BufWriter<File>) -> csv::Result<()>,
{
    let f = File::create(path).map_err(io_err(path))?;
    write(BufWriter::new(f)).map_err(|source| ExperimentError::Csv {
        path: path.to_path_buf(),
        source,
    })
}

/// How the process running the experiment can launch clients.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunContext {
    /// Executable with a `client` subcommand; defaults to the current executable.
    pub client_program: Option<PathBuf>,
}

/// Data shared by every setting of a suite.
#[derive(Debug, Clone)]
pub struct SharedInputs {
    pub standardization: Standardization,
    pub validation: OfflineDataset,
    pub validation_batch: Batch,
    pub test_spec: TrajectorySpec,
    pub test_reference: Vec<State>,
}

pub fn generate_standardization(cfg: &ExperimentConfig) -> Result<Standardization> {
    let pilot = build_dataset(&cfg.dataset_spec(DatasetKind::Pilot), cfg.derived_seed("pilot"))?;
    Ok(Standardization::from_samples(&pilot.samples)?)
}

pub fn generate_validation(cfg: &ExperimentConfig) -> Result<OfflineDataset> {
    Ok(build_dataset(
        &cfg.dataset_spec(DatasetKind::Validation),
        cfg.derived_seed("validation"),
    )?)
}

/// The held-out rollout trajectory.
pub fn test_trajectory_spec(cfg: &ExperimentConfig) -> Result<TrajectorySpec> {
    let initial = match cfg.eval.initial_state {
        Some([x, y, z]) => State::new(x, y, z),
        None => sample_initial_state(&mut ChaCha8Rng::seed_from_u64(cfg.derived_seed("eval"))),
    };
    let params = LorenzParams {
        rho: cfg.eval.rho,
        sigma: cfg.system.sigma,
        beta: cfg.system.beta,
    };
    let spec = |initial, n_steps| {
        TrajectorySpec::new(params, initial, cfg.system.dt, n_steps).with_substeps(cfg.system.substeps)
    };
    let start = match cfg.eval.burn_in_steps {
        0 => initial,
        n => *generate_trajectory(&spec(initial, n + 1))?.last().expect("n + 1 states"),
    };
    Ok(spec(start, cfg.eval.n_steps))
}

pub fn prepare_inputs(cfg: &ExperimentConfig) -> Result<SharedInputs> {
    let standardization = generate_standardization(cfg)?;
    let validation = generate_validation(cfg)?;
    let validation_batch = Batch::from_samples(&validation.samples, &standardization);
    let test_spec = test_trajectory_spec(cfg)?;
    let test_reference = generate_trajectory(&test_spec)?;
    Ok(SharedInputs {
        standardization,
        validation,
        validation_batch,
        test_spec,
        test_reference,
    })
}

#[derive(Debug, Clone)]
pub struct OnlineArtifacts {
    pub report: EnsembleReport,
    pub ingest: IngestStats,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub kind: SettingKind,
    pub batch_budget: usize,
    pub log: TrainingLog,
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub rollout: RolloutResult,
    pub online: Option<OnlineArtifacts>,
    pub model: Mlp,
}

impl RunOutcome {
    pub fn val_train_ratio(&self) -> f64 {
        self.final_val_loss / self.final_train_loss
    }
}

fn initial_model(cfg: &ExperimentConfig) -> Result<Mlp> {
    Ok(Mlp::init(
        &cfg.layer_dims(),
        &mut ChaCha8Rng::seed_from_u64(cfg.derived_seed("model")),
    )?)
}

/// Trains and evaluates one setting in memory.
pub fn execute_setting(
    cfg: &ExperimentConfig,
    kind: SettingKind,
    inputs: &SharedInputs,
    ctx: &RunContext,
) -> Result<RunOutcome> {
    let setting = cfg.training_setting(kind);
    let mut model = initial_model(cfg)?;
    let mut adam = Adam::new(cfg.adam(), &model);
    info!("{kind}: budget {} batches", setting.batch_budget);

    let (log, online) = if kind.is_online() {
        let (log, online) = train_online(cfg, kind, inputs, ctx, &mut model, &mut adam)?;
        (log, Some(online))
    } else {
        let dataset_kind = match kind {
            SettingKind::OfflineFull => DatasetKind::Full,
            SettingKind::OfflineRestricted => DatasetKind::Restricted,
            _ => DatasetKind::Subsampled,
        };
        let data = build_dataset(
            &cfg.dataset_spec(dataset_kind),
            cfg.derived_seed(&format!("dataset-{dataset_kind:?}")),
        )?;
        let loader = EpochLoader::new(&data.samples, setting.batch_size, setting.seed)?;
        let log = train(
            &setting,
            &mut model,
            &mut adam,
            &inputs.standardization,
            &inputs.validation_batch,
            BatchSource::Offline(loader),
        )?;
        (log, None)
    };

    finish(cfg, kind, inputs, setting.batch_budget, log, online, model)
}

/// Retrains `kind` from its seeded initial model on batches recorded by an
/// earlier run, in order. Reproduces that run's model bit for bit.
pub fn execute_replay(
    cfg: &ExperimentConfig,
    kind: SettingKind,
    inputs: &SharedInputs,
    batches: Vec<Vec<Sample>>,
) -> Result<RunOutcome> {
    let setting = cfg.training_setting(kind);
    let mut model = initial_model(cfg)?;
    let mut adam = Adam::new(cfg.adam(), &model);
    let log = train(
        &setting,
        &mut model,
        &mut adam,
        &inputs.standardization,
        &inputs.validation_batch,
        BatchSource::Replay(batches.into_iter()),
    )?;
    finish(cfg, kind, inputs, setting.batch_budget, log, None, model)
}

fn finish(
    cfg: &ExperimentConfig,
    kind: SettingKind,
    inputs: &SharedInputs,
    batch_budget: usize,
    log: TrainingLog,
    online: Option<OnlineArtifacts>,
    model: Mlp,
) -> Result<RunOutcome> {
    let surrogate = Surrogate {
        model: &model,
        standardization: &inputs.standardization,
    };
    let rollout = evaluate_rollout(&surrogate, &inputs.test_spec, inputs.test_reference.clone(), &cfg.divergence())?;
    if let Some(step) = rollout.blew_up_at {
        warn!("{kind}: rollout blew up at step {step}");
    }
    Ok(RunOutcome {
        kind,
        batch_budget,
        final_train_loss: log
            .trailing_train_loss(cfg.training.final_loss_window)
            .unwrap_or(f64::NAN),
        final_val_loss: log
            .trailing_val_loss(cfg.training.final_loss_window)
            .unwrap_or(f64::NAN),
        log,
        rollout,
        online,
        model,
    })
}

fn train_online(
    cfg: &ExperimentConfig,
    kind: SettingKind,
    inputs: &SharedInputs,
    ctx: &RunContext,
    model: &mut Mlp,
    adam: &mut Adam,
) -> Result<(TrainingLog, OnlineArtifacts)> {
    let (policy, _) = kind.online_wiring().expect("online setting");
    let plan = cfg.ensemble_plan(kind).expect("online setting");
    let setting = cfg.training_setting(kind);
    let memory = MemoryBuffer::new(cfg.buffer_config(), policy, cfg.derived_seed("buffer"))
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
    let buffer: SharedBuffer<Sample> = SharedBuffer::new(memory, cfg.buffer.backpressure);
    let server = IngestServer::start(
        cfg.launcher.server_addr.as_str(),
        buffer.clone(),
        ServerOptions {
            recv_buffer_bytes: cfg.launcher.socket_buffer_bytes,
        },
    )
    .map_err(ExperimentError::Server)?;
    let mode = match cfg.launcher.mode {
        ClientMode::InProcess => LaunchMode::InProcess,
        ClientMode::Process => LaunchMode::Process {
            program: match &ctx.client_program {
                Some(p) => p.clone(),
                None => std::env::current_exe().map_err(ExperimentError::Server)?,
            },
        },
    };
    let opts = LauncherOptions {
        mode,
        grouping: cfg.launcher.grouping,
        send_buffer_bytes: cfg.launcher.socket_buffer_bytes,
        faults: Vec::new(),
    };
    let cancel = Arc::new(AtomicBool::new(false));
    let addr = server.local_addr();
    let supervisor = {
        let (buffer, cancel) = (buffer.clone(), cancel.clone());
        thread::Builder::new()
            .name("launcher".into())
            .spawn(move || {
                let result = run_ensemble_until(&plan, addr, &opts, &cancel);
                if result.is_err() {
                    // Wake the trainer instead of letting it starve.
                    buffer.set_draining();
                }
                result
            })
            .map_err(ExperimentError::Server)?
    };

    let trained = train(
        &setting,
        model,
        adam,
        &inputs.standardization,
        &inputs.validation_batch,
        BatchSource::Online(&buffer),
    );
    cancel.store(true, Ordering::SeqCst);
    buffer.close_consumer();
    let report = supervisor.join().expect("launcher thread panicked");
    let ingest = server.shutdown();
    let report = report?;
    let failed = report.count(ClientStatus::Failed);
    if failed > 0 {
        let first = report.clients.iter().find_map(|c| c.failure.as_deref()).unwrap_or("");
        warn!("{kind}: {failed} of {} clients failed (first: {first})", report.clients.len());
    }
    let log = trained?;
    info!(
        "{kind}: {} samples ingested, {} drawn, {} evicted",
        ingest.total_samples(),
        buffer.metrics().total_drawn,
        buffer.metrics().total_evicted
    );
    Ok((log, OnlineArtifacts { report, ingest }))
}

pub const COMPARISON_HEADER: [&str; 9] = [
    "setting",
    "final_train_loss",
    "final_val_loss",
    "val_train_ratio",
    "batches_executed",
    "batch_budget",
    "valid_time",
    "bounded",
    "status",
];

fn summary_row(o: &RunOutcome) -> Vec<String> {
    vec![
        o.kind.to_string(),
        format!("{:?}", o.final_train_loss),
        format!("{:?}", o.final_val_loss),
        format!("{:?}", o.val_train_ratio()),
        o.log.batches_executed().to_string(),
        o.batch_budget.to_string(),
        o.rollout.valid_time.to_string(),
        o.rollout.bounded.to_string(),
        match &o.log.early_stop {
            Some(_) => "early-stop".into(),
            None => "ok".into(),
        },
    ]
}

fn failure_row(kind: SettingKind, budget: usize) -> Vec<String> {
    let mut row = vec![kind.to_string()];
    row.extend(["NaN", "NaN", "NaN", "0"].map(String::from));
    row.push(budget.to_string());
    row.extend(["0", "false", "failed"].map(String::from));
    row
}

/// Writes every artifact of `outcome` into `dir`.
pub fn write_run_artifacts(
    dir: &Path,
    cfg: &ExperimentConfig,
    inputs: &SharedInputs,
    outcome: &RunOutcome,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_file(&dir.join("stats.csv"), inputs.standardization.to_csv().as_bytes())?;
    write_csv_file(&dir.join("train_log.csv"), |w| outcome.log.write_train_csv(w))?;
    write_csv_file(&dir.join("val_log.csv"), |w| outcome.log.write_val_csv(w))?;
    write_csv_file(&dir.join("rollout.csv"), |w| outcome.rollout.write_csv(w))?;
    if let Some(online) = &outcome.online {
        write_csv_file(&dir.join("buffer_log.csv"), |w| outcome.log.write_buffer_csv(w))?;
        write_csv_file(&dir.join("ensemble_report.csv"), |w| online.report.write_csv(w))?;
    }
    if !outcome.log.drawn.is_empty() {
        write_csv_file(&dir.join("drawn_batches.csv"), |w| outcome.log.write_drawn_csv(w))?;
    }
    write_csv_file(&dir.join("summary.csv"), |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(COMPARISON_HEADER)?;
        w.write_record(summary_row(outcome))?;
        w.flush()?;
        Ok(())
    })?;
    write_file(&dir.join("model.ckpt"), &outcome.model.to_checkpoint())?;
    Ok(())
}

/// A fresh `<out>/<timestamp>-<label>` directory.
pub fn timestamped_dir(out: &Path, label: &str) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(io_err(out))?;
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    for attempt in 0.. {
        let name = match attempt {
            0 => format!("{stamp}-{label}"),
            n => format!("{stamp}-{label}-{n}"),
        };
        let dir = out.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(io_err(&dir)(e)),
        }
    }
    unreachable!()
}

/// Runs one setting end to end into a new timestamped run directory.
pub fn cmd_run(cfg: &ExperimentConfig, kind: SettingKind, ctx: &RunContext) -> Result<(PathBuf, RunOutcome)> {
    let dir = timestamped_dir(&cfg.output_dir, kind.name())?;
    let inputs = prepare_inputs(cfg)?;
    let outcome = execute_setting(cfg, kind, &inputs, ctx)?;
    write_run_artifacts(&dir, cfg, &inputs, &outcome)?;
    info!("{kind}: artifacts in {}", dir.display());
    Ok((dir, outcome))
}

#[derive(Debug)]
pub struct SuiteOutcome {
    pub dir: PathBuf,
    pub runs: Vec<(SettingKind, std::result::Result<RunOutcome, String>)>,
}

impl SuiteOutcome {
    pub fn get(&self, kind: SettingKind) -> Option<&RunOutcome> {
        self.runs
            .iter()
            .find(|(k, _)| *k == kind)
            .and_then(|(_, r)| r.as_ref().ok())
    }

    pub fn failures(&self) -> usize {
        self.runs.iter().filter(|(_, r)| r.is_err()).count()
    }
}

/// Runs every configured setting with shared standardization and validation
/// data. A failing setting is reported and the suite moves on.
pub fn cmd_suite(cfg: &ExperimentConfig, ctx: &RunContext) -> Result<SuiteOutcome> {
    let dir = timestamped_dir(&cfg.output_dir, "suite")?;
    let inputs = prepare_inputs(cfg)?;
    write_file(&dir.join("config.toml"), cfg.to_toml().as_bytes())?;
    write_file(&dir.join("stats.csv"), inputs.standardization.to_csv().as_bytes())?;
    write_file(&dir.join("validation.lzds"), &inputs.validation.to_cache_bytes())?;

    let mut runs = Vec::new();
    for kind in cfg.settings() {
        let result = execute_setting(cfg, kind, &inputs, ctx)
            .and_then(|o| write_run_artifacts(&dir.join(kind.name()), cfg, &inputs, &o).map(|_| o));
        if let Err(e) = &result {
            error!("{kind} failed: {e}");
        }
        runs.push((kind, result.map_err(|e| e.to_string())));
    }
    let suite = SuiteOutcome { dir, runs };
    write_suite_tables(cfg, &suite)?;
    Ok(suite)
}

/// `comparison.csv` and the long-format tables behind the three figures.
pub fn write_suite_tables(cfg: &ExperimentConfig, suite: &SuiteOutcome) -> Result<()> {
    let dir = &suite.dir;
    write_csv_file(&dir.join("comparison.csv"), |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(COMPARISON_HEADER)?;
        for (kind, r) in &suite.runs {
            match r {
                Ok(o) => w.write_record(summary_row(o))?,
                Err(_) => w.write_record(failure_row(*kind, cfg.batch_budget(*kind)))?,
            }
        }
        w.flush()?;
        Ok(())
    })?;
    let ok = || suite.runs.iter().filter_map(|(k, r)| r.as_ref().ok().map(|o| (*k, o)));
    write_csv_file(&dir.join("batch_stats.csv"), |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record([
            "setting", "batch_index", "rho_mean", "rho_std", "x_mean", "x_std", "y_mean", "y_std", "z_mean", "z_std",
        ])?;
        for (kind, o) in ok() {
            for b in &o.log.batches {
                let Some(s) = b.stats else { continue };
                let vals = [s.rho_mean, s.rho_std, s.x_mean, s.x_std, s.y_mean, s.y_std, s.z_mean, s.z_std];
                let mut row = vec![kind.to_string(), b.batch_index.to_string()];
                row.extend(vals.iter().map(|v| format!("{v:?}")));
                w.write_record(row)?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    write_csv_file(&dir.join("losses.csv"), |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["setting", "split", "batch_index", "loss"])?;
        for (kind, o) in ok() {
            for b in &o.log.batches {
                w.write_record([kind.name(), "train", &b.batch_index.to_string(), &format!("{:?}", b.train_loss)])?;
            }
            for v in &o.log.validations {
                w.write_record([kind.name(), "val", &v.batch_index.to_string(), &format!("{:?}", v.val_loss)])?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    write_csv_file(&dir.join("trajectories.csv"), |w| {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["setting", "t", "x_pred", "y_pred", "z_pred", "x_ref", "y_ref", "z_ref"])?;
        for (kind, o) in ok() {
            for (t, (p, r)) in o.rollout.predicted.iter().zip(&o.rollout.reference).enumerate() {
                let mut row = vec![kind.to_string(), t.to_string()];
                row.extend([p.x, p.y, p.z, r.x, r.y, r.z].iter().map(|v| format!("{v:?}")));
                w.write_record(row)?;
            }
        }
        w.flush()?;
        Ok(())
    })?;
    Ok(())
}

pub fn cmd_gen_stats(cfg: &ExperimentConfig, out: &Path) -> Result<Standardization> {
    let stats = generate_standardization(cfg)?;
    write_file(out, stats.to_csv().as_bytes())?;
    Ok(stats)
}

pub fn cmd_gen_validation(cfg: &ExperimentConfig, out: &Path) -> Result<OfflineDataset> {
    let data = generate_validation(cfg)?;
    write_file(out, &data.to_cache_bytes())?;
    Ok(data)
}

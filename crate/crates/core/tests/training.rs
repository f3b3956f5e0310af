use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use streamtrain::config::{ExperimentConfig, Scale};
use streamtrain::experiment::{execute_replay, execute_setting, prepare_inputs, RunContext};
use streamtrain::launcher::ClientStatus;
use streamtrain::nn::{Adam, Batch, Mlp};
use streamtrain::trainer::{read_drawn_csv, validate, SettingKind};

fn smoke() -> ExperimentConfig {
    Scale::Smoke.preset()
}

fn ctx() -> RunContext {
    RunContext {
        client_program: Some(env!("CARGO_BIN_EXE_streamtrain").into()),
    }
}

#[test]
fn offline_full_loss_drops_tenfold() {
    let mut cfg = smoke();
    cfg.training.budget = Some(600);
    let inputs = prepare_inputs(&cfg).unwrap();
    let run = execute_setting(&cfg, SettingKind::OfflineFull, &inputs, &ctx()).unwrap();
    let first = run.log.batches[0].train_loss;
    assert!(run.final_train_loss * 10.0 <= first, "{first} -> {}", run.final_train_loss);
    assert_eq!(run.log.batches_executed(), 600);
    assert_eq!(run.log.validations.first().unwrap().batch_index, 0);
    assert_eq!(run.log.validations.last().unwrap().batch_index, 600);
}

#[test]
fn zero_prediction_scores_about_one_on_validation() {
    let cfg = Scale::Paper.preset();
    let inputs = prepare_inputs(&cfg).unwrap();
    let loss = validate(&Mlp::zeros(&cfg.layer_dims()).unwrap(), &inputs.validation_batch).unwrap();
    assert!((loss - 1.0).abs() < 0.2, "{loss}");
}

#[test]
fn streaming_batches_start_with_a_single_rho() {
    let cfg = smoke();
    let inputs = prepare_inputs(&cfg).unwrap();
    let run = execute_setting(&cfg, SettingKind::OnlineStreaming, &inputs, &ctx()).unwrap();
    let early: Vec<f64> = run
        .log
        .batches
        .iter()
        .take(10)
        .map(|b| b.stats.expect("stats every batch").rho_std)
        .collect();
    assert!(early.iter().all(|s| *s < 1.0), "{early:?}");
    let online = run.online.unwrap();
    assert_eq!(online.report.count(ClientStatus::Failed), 0);
    assert!(online.ingest.total_samples() >= (run.log.batches_executed() * cfg.training.batch_size) as u64);
}

#[test]
fn sampling_buffer_mixes_rho_values() {
    let cfg = smoke();
    let inputs = prepare_inputs(&cfg).unwrap();
    let run = execute_setting(&cfg, SettingKind::OnlineSamplingBuffer, &inputs, &ctx()).unwrap();
    assert_eq!(run.log.batches_executed(), run.batch_budget);
    let mixed = run
        .log
        .batches
        .iter()
        .filter_map(|b| b.stats)
        .filter(|s| s.rho_std > 10.0)
        .count();
    assert!(mixed * 2 > run.log.batches.len(), "{mixed} of {}", run.log.batches.len());
    let buf = &run.log.buffer;
    assert!(!buf.is_empty());
    let cap = cfg.buffer_config().capacity;
    assert!(buf.iter().all(|r| r.metrics.size <= cap));
}

#[test]
fn recorded_online_run_replays_bit_for_bit() {
    let mut cfg = smoke();
    cfg.training.record_batches = true;
    let inputs = prepare_inputs(&cfg).unwrap();
    let live = execute_setting(&cfg, SettingKind::OnlineSampling, &inputs, &ctx()).unwrap();
    assert_eq!(live.log.drawn.len(), live.log.batches_executed());

    let mut csv = Vec::new();
    live.log.write_drawn_csv(&mut csv).unwrap();
    let recorded = read_drawn_csv(csv.as_slice()).unwrap();
    assert_eq!(recorded, live.log.drawn);

    let replayed = execute_replay(&cfg, SettingKind::OnlineSampling, &inputs, recorded).unwrap();
    assert_eq!(replayed.model.flatten(), live.model.flatten());
    let losses = |r: &streamtrain::experiment::RunOutcome| r.log.batches.iter().map(|b| b.train_loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&replayed), losses(&live));
}

#[test]
fn validation_leaves_model_and_optimizer_untouched() {
    let cfg = smoke();
    let inputs = prepare_inputs(&cfg).unwrap();
    let mut model = Mlp::init(&cfg.layer_dims(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let mut adam = Adam::new(cfg.adam(), &model);
    let batch = Batch::from_samples(&inputs.validation.samples[..64], &inputs.standardization);
    let (_, g) = model.backward(&batch).unwrap();
    adam.step(&mut model, &g).unwrap();
    let (params, opt_state) = (model.flatten(), adam.clone());
    let first = validate(&model, &inputs.validation_batch).unwrap();
    assert_eq!(validate(&model, &inputs.validation_batch).unwrap().to_bits(), first.to_bits());
    assert_eq!(model.flatten(), params);
    assert_eq!(adam, opt_state);
}

#[test]
fn tiny_offline_config_is_fast_and_finite() {
    let mut cfg = smoke();
    cfg.system.n_steps = 200;
    cfg.offline.full_trajectories = 2;
    cfg.training.budget = Some(20);
    let inputs = prepare_inputs(&cfg).unwrap();
    let started = Instant::now();
    let run = execute_setting(&cfg, SettingKind::OfflineFull, &inputs, &ctx()).unwrap();
    assert!(started.elapsed() < Duration::from_secs(10));
    assert_eq!(run.log.batches_executed(), 20);
    assert!(run.log.batches.iter().all(|b| b.train_loss.is_finite()));
    assert!(run.final_val_loss.is_finite());
}

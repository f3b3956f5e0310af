use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn streamtrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_streamtrain"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = streamtrain(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// The run or suite directory is printed on the last stdout line.
fn printed_dir(stdout: &str) -> PathBuf {
    PathBuf::from(stdout.lines().last().unwrap().trim())
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(Result::unwrap).collect()
}

#[test]
fn invalid_setting_is_a_usage_error() {
    let out = streamtrain(&["run", "--setting", "offline-everything", "--scale", "smoke"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("offline-everything"), "{err}");
}

#[test]
fn offline_runs_are_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let stdout = ok(&["run", "--setting", "offline-full", "--scale", "smoke", "--out", out.to_str().unwrap()]);
        let dir = printed_dir(&stdout);
        for f in ["config.toml", "stats.csv", "train_log.csv", "val_log.csv", "rollout.csv", "summary.csv", "model.ckpt"] {
            assert!(dir.join(f).is_file(), "missing {f}");
        }
        logs.push((fs::read(dir.join("train_log.csv")).unwrap(), fs::read(dir.join("model.ckpt")).unwrap()));
    }
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn online_run_writes_ensemble_and_buffer_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let stdout = ok(&[
        "run",
        "--setting",
        "online-sampling-buffer",
        "--scale",
        "smoke",
        "--out",
        tmp.path().to_str().unwrap(),
    ]);
    let dir = printed_dir(&stdout);
    let report = csv_rows(&dir.join("ensemble_report.csv"));
    assert!(!report.is_empty());
    assert!(report.iter().all(|r| ["pending", "running", "done", "failed"].contains(&&r[2])));
    assert!(!csv_rows(&dir.join("buffer_log.csv")).is_empty());
}

#[test]
fn smoke_suite_covers_every_setting_and_plots() {
    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let stdout = ok(&["suite", "--scale", "smoke", "--out", tmp.path().to_str().unwrap()]);
    assert!(started.elapsed() < Duration::from_secs(120));
    let dir = printed_dir(&stdout);
    let rows = csv_rows(&dir.join("comparison.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows {
        assert!(dir.join(&r[0]).join("train_log.csv").is_file(), "{}", &r[0]);
        assert_eq!(&r[8], "ok", "{r:?}");
    }
    for f in ["batch_stats.csv", "losses.csv", "trajectories.csv", "config.toml", "stats.csv"] {
        assert!(dir.join(f).is_file(), "missing {f}");
    }

    let figs = tmp.path().join("figs");
    let printed = ok(&["plot", dir.to_str().unwrap(), "--out", figs.to_str().unwrap()]);
    assert_eq!(printed.lines().count(), 3);
    for f in ["fig_batch_stats.svg", "fig_losses.svg", "fig_trajectories.svg"] {
        let svg = fs::read_to_string(figs.join(f)).unwrap();
        assert!(svg.starts_with("<svg") || svg.contains("<svg"), "{f}");
    }
}

#[test]
fn generated_inputs_are_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    let mut stats = Vec::new();
    for name in ["a", "b"] {
        let out = tmp.path().join(name);
        let out = out.to_str().unwrap();
        ok(&["gen-stats", "--scale", "smoke", "--out", out]);
        ok(&["gen-validation", "--scale", "smoke", "--out", out]);
        stats.push((
            fs::read(Path::new(out).join("stats.csv")).unwrap(),
            fs::read(Path::new(out).join("validation.lzds")).unwrap(),
        ));
    }
    assert_eq!(stats[0], stats[1]);
    let other = tmp.path().join("c");
    ok(&["gen-stats", "--scale", "smoke", "--seed", "7", "--out", other.to_str().unwrap()]);
    assert_ne!(fs::read(other.join("stats.csv")).unwrap(), stats[0].0);
}

#[test]
fn config_file_overrides_preset() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.toml");
    fs::write(&cfg, "[training]\nbudget = 5\n").unwrap();
    let stdout = ok(&[
        "run",
        "--setting",
        "offline-restricted",
        "--scale",
        "smoke",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert!(stdout.contains(": 5 batches"), "{stdout}");

    fs::write(&cfg, "[training]\nbudgett = 5\n").unwrap();
    let out = streamtrain(&["run", "--setting", "offline-full", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("budgett"));
}

#[test]
fn annotated_example_config_matches_desk_preset() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/example.toml");
    let cfg = streamtrain::config::ExperimentConfig::load(Some(&path), None).unwrap();
    assert_eq!(cfg, streamtrain::config::Scale::Desk.preset());
}

#[test]
fn replay_reproduces_a_recorded_online_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("rec.toml");
    fs::write(&cfg, "[training]\nrecord_batches = true\n").unwrap();
    let common = ["--scale", "smoke", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()];
    let live = printed_dir(&ok(&[&["run", "--setting", "online-streaming"][..], &common].concat()));
    let batches = live.join("drawn_batches.csv");
    assert!(batches.is_file());
    let replayed = printed_dir(&ok(&[
        &["replay", "--setting", "online-streaming", "--batches", batches.to_str().unwrap()][..],
        &common,
    ]
    .concat()));
    assert_ne!(live, replayed);
    assert_eq!(fs::read(live.join("model.ckpt")).unwrap(), fs::read(replayed.join("model.ckpt")).unwrap());
    assert_eq!(fs::read(live.join("train_log.csv")).unwrap(), fs::read(replayed.join("train_log.csv")).unwrap());
}

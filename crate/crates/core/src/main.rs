use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use streamtrain::config::{ExperimentConfig, Scale};
use streamtrain::experiment::{
    cmd_gen_stats, cmd_gen_validation, cmd_run, cmd_suite, execute_replay, prepare_inputs, timestamped_dir,
    write_run_artifacts, RunContext,
};
use streamtrain::launcher::ClientArgs;
use streamtrain::plot::cmd_plot;
use streamtrain::trainer::{read_drawn_csv, SettingKind};

/// Online training of neural surrogates from streamed Lorenz simulations.
#[derive(Parser)]
#[command(name = "streamtrain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML file merged over the scale preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_scale)]
    scale: Option<Scale>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one setting end to end.
    Run {
        #[arg(long, value_parser = parse_setting)]
        setting: SettingKind,
        #[command(flatten)]
        common: Common,
    },
    /// Retrain a setting on batches recorded with `training.record_batches`.
    Replay {
        #[arg(long, value_parser = parse_setting)]
        setting: SettingKind,
        /// A `drawn_batches.csv` from an earlier run.
        #[arg(long)]
        batches: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train every configured setting and write comparison tables.
    Suite {
        #[command(flatten)]
        common: Common,
    },
    /// Render figures from a run or suite directory.
    Plot {
        dirs: Vec<PathBuf>,
        /// Write figures here instead of next to the CSVs.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the standardization statistics file.
    GenStats {
        #[command(flatten)]
        common: Common,
    },
    /// Write the validation dataset cache.
    GenValidation {
        #[command(flatten)]
        common: Common,
    },
    /// Simulate one trajectory and stream it to a server.
    #[command(hide = true)]
    Client(ClientArgs),
}

fn parse_scale(s: &str) -> Result<Scale, String> {
    s.parse()
}

fn parse_setting(s: &str) -> Result<SettingKind, String> {
    s.parse()
}

fn load(common: &Common) -> Result<ExperimentConfig, String> {
    let mut cfg = ExperimentConfig::load(common.config.as_deref(), common.scale).map_err(|e| e.to_string())?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    Ok(cfg)
}

fn output_file(cfg: &ExperimentConfig, common: &Common, name: &str) -> Result<PathBuf, String> {
    let dir = common.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    Ok(dir.join(name))
}

fn execute(command: Command) -> Result<(), String> {
    let ctx = RunContext::default();
    match command {
        Command::Run { setting, common } => {
            let cfg = load(&common)?;
            let (dir, outcome) = cmd_run(&cfg, setting, &ctx).map_err(|e| e.to_string())?;
            println!(
                "{setting}: {} batches, train {:.4e}, val {:.4e}, valid_time {}, bounded {}",
                outcome.log.batches_executed(),
                outcome.final_train_loss,
                outcome.final_val_loss,
                outcome.rollout.valid_time,
                outcome.rollout.bounded
            );
            println!("{}", dir.display());
        }
        Command::Replay {
            setting,
            batches,
            common,
        } => {
            let cfg = load(&common)?;
            let file = std::fs::File::open(&batches).map_err(|e| format!("{}: {e}", batches.display()))?;
            let recorded = read_drawn_csv(std::io::BufReader::new(file)).map_err(|e| e.to_string())?;
            let inputs = prepare_inputs(&cfg).map_err(|e| e.to_string())?;
            let outcome = execute_replay(&cfg, setting, &inputs, recorded).map_err(|e| e.to_string())?;
            let dir = timestamped_dir(&cfg.output_dir, &format!("replay-{setting}")).map_err(|e| e.to_string())?;
            write_run_artifacts(&dir, &cfg, &inputs, &outcome).map_err(|e| e.to_string())?;
            println!(
                "{setting} (replay): {} batches, train {:.4e}, val {:.4e}",
                outcome.log.batches_executed(),
                outcome.final_train_loss,
                outcome.final_val_loss
            );
            println!("{}", dir.display());
        }
        Command::Suite { common } => {
            let cfg = load(&common)?;
            let suite = cmd_suite(&cfg, &ctx).map_err(|e| e.to_string())?;
            println!("{}", suite.dir.display());
            if suite.failures() > 0 {
                return Err(format!("{} setting(s) failed; see comparison.csv", suite.failures()));
            }
        }
        Command::Plot { dirs, out } => {
            if dirs.is_empty() {
                return Err("plot needs at least one directory".into());
            }
            for dir in &dirs {
                let target = out.as_ref().map(|o| {
                    if dirs.len() > 1 {
                        o.join(dir.file_name().unwrap_or_default())
                    } else {
                        o.clone()
                    }
                });
                for p in cmd_plot(dir, target.as_deref()).map_err(|e| e.to_string())? {
                    println!("{}", p.display());
                }
            }
        }
        Command::GenStats { common } => {
            let cfg = load(&common)?;
            let path = output_file(&cfg, &common, "stats.csv")?;
            cmd_gen_stats(&cfg, &path).map_err(|e| e.to_string())?;
            println!("{}", path.display());
        }
        Command::GenValidation { common } => {
            let cfg = load(&common)?;
            let path = output_file(&cfg, &common, "validation.lzds")?;
            let data = cmd_gen_validation(&cfg, &path).map_err(|e| e.to_string())?;
            println!("{} ({} samples)", path.display(), data.len());
        }
        Command::Client(_) => unreachable!("handled before logging starts"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Command::Client(args) = &cli.command {
        return ExitCode::from(args.execute() as u8);
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

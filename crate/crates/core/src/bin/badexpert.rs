//! Command-line interface for the backdoor-defense pipeline.
//!
//! Exit codes: 0 success, 2 config error, 3 dependency error, 4 numeric
//! failure, 1 anything else.

use badexpert::config::ExperimentConfig;
use badexpert::harness::Pipeline;
use badexpert::Error;
use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "badexpert", version, about = "Backdoor-defense laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Path to the experiment config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Re-run stages even if their outputs exist
    #[arg(long, global = true)]
    force: bool,

    /// Override the config's global seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Override the config's output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Full pipeline: data, poison, train, extract, finetune, calibrate, eval
    Run,
    /// Dataset construction, poisoning, and suspect-model training
    Train,
    /// Backdoor-expert extraction from the trained suspect model
    Extract,
    /// Clean finetuning of the auxiliary model
    Finetune,
    /// Threshold calibration on the reserved clean set
    Calibrate,
    /// Evaluation and report writing
    Eval,
    /// Adaptive-attack grid against the calibrated detector
    Adaptive,
    /// Unlearning-rate sweep
    Sweep,
}

fn load_pipeline(cli: &Cli) -> Result<Pipeline, Error> {
    let config_path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config PATH is required".into()))?;
    let mut cfg = ExperimentConfig::from_file(config_path)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(Pipeline::new(cfg, cli.out.as_deref(), cli.force))
}

fn execute(cli: &Cli) -> Result<(), Error> {
    let pipeline = load_pipeline(cli)?;
    match cli.command {
        Command::Run => {
            let report = pipeline.run()?;
            print!("{}", report.text);
            eprintln!("report written to {}", pipeline.report_path().display());
        }
        Command::Train => {
            report_stage("data", pipeline.stage_data()?);
            report_stage("poison", pipeline.stage_poison()?);
            report_stage("train", pipeline.stage_train()?);
            eprintln!("suspect model at {}", pipeline.suspect_path().display());
        }
        Command::Extract => {
            report_stage("extract", pipeline.stage_extract()?);
            eprintln!("backdoor expert at {}", pipeline.expert_path().display());
        }
        Command::Finetune => {
            report_stage("finetune", pipeline.stage_finetune()?);
            eprintln!("auxiliary model at {}", pipeline.auxiliary_path().display());
        }
        Command::Calibrate => {
            report_stage("calibrate", pipeline.stage_calibrate()?);
            eprintln!("alpha = {}", pipeline.load_alpha()?);
        }
        Command::Eval => {
            match pipeline.stage_eval()? {
                Some((ms, report)) => {
                    eprintln!("eval finished in {ms} ms");
                    print!("{}", report.text);
                }
                None => {
                    eprintln!("eval outputs already exist (use --force to re-run)");
                    print!("{}", pipeline.read_report()?.text);
                }
            }
        }
        Command::Adaptive => {
            if pipeline.cfg.adaptive.is_none() {
                return Err(Error::Config(
                    "config has no [adaptive] section".into(),
                ));
            }
            report_stage("adaptive", pipeline.stage_adaptive()?);
            eprintln!("grid at {}", pipeline.adaptive_grid_path().display());
        }
        Command::Sweep => {
            if pipeline.cfg.sweep.is_none() {
                return Err(Error::Config("config has no [sweep] section".into()));
            }
            report_stage("sweep", pipeline.stage_sweep()?);
            eprintln!("sweep at {}", pipeline.sweep_path().display());
        }
    }
    Ok(())
}

fn report_stage(name: &str, elapsed: Option<u128>) {
    match elapsed {
        Some(ms) => eprintln!("stage {name}: {ms} ms"),
        None => eprintln!("stage {name}: skipped (outputs exist)"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

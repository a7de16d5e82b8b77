//! Command line driver: each subcommand runs one pipeline phase against a
//! config file; `run-sim` runs the whole study.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use tgdp_core::{ExperimentConfig, Phase, Pipeline};

#[derive(Parser)]
#[command(
    name = "tgdp",
    about = "Transfer-guided diffusion experiments on Gaussian mixtures",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file; omitted keys fall back to the full-scale defaults.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override the master seed from the config.
    #[arg(long, value_name = "INT")]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Re-run the phase even if the manifest marks it complete.
    #[arg(long)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Draw the source, target, and evaluation sample files.
    GenData(Common),
    /// Train the source-domain score model.
    TrainSource(Common),
    /// Train the static source-vs-target classifiers.
    TrainClassifier(Common),
    /// Train the time-dependent source-vs-target classifiers.
    TrainTimeClassifier(Common),
    /// Train the guidance networks (and ablation variants).
    TrainGuidance(Common),
    /// Train the vanilla, finetune, and vanilla-guidance baselines.
    TrainBaselines(Common),
    /// Sample every configured method from its trained score field.
    Sample(Common),
    /// Score all sample sets and write the result tables.
    Evaluate(Common),
    /// Run every phase in order.
    RunSim(Common),
    /// Print the fully resolved configuration as TOML.
    ShowConfig(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::TrainSource(c)
            | Command::TrainClassifier(c)
            | Command::TrainTimeClassifier(c)
            | Command::TrainGuidance(c)
            | Command::TrainBaselines(c)
            | Command::Sample(c)
            | Command::Evaluate(c)
            | Command::RunSim(c)
            | Command::ShowConfig(c) => c,
        }
    }

    fn phase(&self) -> Option<Phase> {
        match self {
            Command::GenData(_) => Some(Phase::GenData),
            Command::TrainSource(_) => Some(Phase::TrainSource),
            Command::TrainClassifier(_) => Some(Phase::TrainClassifier),
            Command::TrainTimeClassifier(_) => Some(Phase::TrainTimeClassifier),
            Command::TrainGuidance(_) => Some(Phase::TrainGuidance),
            Command::TrainBaselines(_) => Some(Phase::TrainBaselines),
            Command::Sample(_) => Some(Phase::Sample),
            Command::Evaluate(_) => Some(Phase::Evaluate),
            Command::RunSim(_) | Command::ShowConfig(_) => None,
        }
    }
}

fn resolve_config(common: &Common) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)
            .with_context(|| format!("loading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let common = cli.command.common();
    let cfg = resolve_config(common)?;
    if let Command::ShowConfig(_) = cli.command {
        print!("{}", cfg.to_toml()?);
        return Ok(());
    }
    let out_dir = cfg.output_dir.clone();
    let pipeline = Pipeline::new(cfg)?;
    match cli.command.phase() {
        Some(phase) => {
            let ran = pipeline.run_phase(phase, common.force)?;
            if ran {
                println!("{phase}: done ({})", out_dir.display());
            } else {
                println!("{phase}: already complete, skipped (use --force to re-run)");
            }
        }
        None => {
            for (phase, ran) in pipeline.run_all(common.force)? {
                if ran {
                    println!("{phase}: done");
                } else {
                    println!("{phase}: already complete, skipped");
                }
            }
            let table = out_dir.join("table.txt");
            if let Ok(text) = std::fs::read_to_string(&table) {
                println!("\n{text}");
            }
            println!("results under {}", out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use steerlab::config::LabConfig;
use steerlab::manifest::Stage;
use steerlab::pipeline::{default_out, Lab};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Command {
    GenCorpus,
    TrainModel,
    CollectActs,
    TrainSaes,
    FindFeatures,
    Sweep,
    Baselines,
    Attribute,
    Decompose,
    Demo,
    Report,
    /// Every command in order.
    All,
}

/// Sparse-feature language steering laboratory.
#[derive(Debug, Parser)]
#[command(version)]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// JSON config with flat dotted keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set model.n_layers=4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root (default: $STEERLAB_OUT or ./steerlab-out).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn run(cli: Cli) -> steerlab::Result<()> {
    let config = LabConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let lab = Lab::new(cli.out.unwrap_or_else(default_out), config)?;
    let stages: Vec<Stage> = match cli.command {
        Command::All => Stage::ALL.to_vec(),
        c => {
            let name = c.to_possible_value().expect("named variant");
            vec![Stage::from_name(name.get_name()).expect("command names match stages")]
        }
    };
    for s in stages {
        let outcome = lab.run(s)?;
        if let Some(text) = outcome.stdout {
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

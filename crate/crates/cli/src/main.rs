use std::path::PathBuf;
use std::process::ExitCode;

use asklearn_core::engine::{run_experiment, EngineError};
use asklearn_core::{ExperimentConfig, OracleSpec, Strategy};
use asklearn_service::serve_session;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "asklearn", version, about = "Batch active learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run all trials of an experiment with a simulated oracle.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Run one trial with a human oracle behind the annotation API.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory with a built annotation UI to serve at `/`.
        #[arg(long)]
        ui: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    strategy: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, EngineError> {
        let mut config = ExperimentConfig::from_file(&self.config)?;
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(s) = &self.strategy {
            config.strategy = s.parse::<Strategy>()?;
        }
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        config.validate()?;
        Ok(config)
    }
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    match cli.command {
        Command::Run { common } => {
            let config = common.load()?;
            let trials = run_experiment(&config)?;
            for (t, records) in trials.iter().enumerate() {
                if let Some(last) = records.last() {
                    eprintln!(
                        "trial {t} ({}): {} labels, accuracy {:.4}, ece {:.4}",
                        config.strategy, last.labeled_count, last.accuracy, last.ece
                    );
                }
            }
            eprintln!("wrote {}", config.output_dir.display());
            Ok(())
        }
        Command::Serve { common, port, ui } => {
            let mut config = common.load()?;
            if !matches!(config.oracle, OracleSpec::Human { .. }) {
                config.oracle = OracleSpec::Human { timeout_secs: None };
            }
            serve_session(config, port, ui)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use cglab::commands::{self, FINAL};
use cglab::{CliError, RunDir};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cglab",
    version,
    about = "Compositional generalization experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Stage {
    /// Experiment config; for stages after `gen` it must match the run's copy.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct FromCheckpoint {
    #[command(flatten)]
    stage: Stage,
    /// Checkpoint name under `checkpoints/`, e.g. `final` or `epoch_00100`.
    #[arg(long, default_value = FINAL)]
    checkpoint: String,
}

#[derive(Subcommand)]
enum Command {
    /// Write the config copy, split and manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run: PathBuf,
    },
    /// Train and write checkpoints and the training log.
    Train(Stage),
    /// Plain forward metrics on the held-out combinations.
    Eval(FromCheckpoint),
    /// Latent-optimization metrics on the held-out combinations.
    Infer(FromCheckpoint),
    /// Entropy, conditional-independence and probe reports.
    Diag(FromCheckpoint),
    /// Cross-run summary as JSON on stdout.
    Compare {
        #[arg(long = "run", required = true, num_args = 1..)]
        runs: Vec<PathBuf>,
    },
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("CGLAB_THREADS") {
        let n = v.parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            CliError::Config(vec![format!(
                "CGLAB_THREADS must be a positive integer, got {v:?}"
            )])
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Other(e.to_string()))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Gen { config, run } => commands::cmd_gen(&config, &RunDir::new(run)),
        Command::Train(s) => {
            commands::cmd_train(&RunDir::new(s.run), s.config.as_deref()).map(|_| ())
        }
        Command::Eval(c) => {
            let row = commands::cmd_eval(
                &RunDir::new(c.stage.run),
                c.stage.config.as_deref(),
                &c.checkpoint,
            )?;
            println!("{}", serde_json::to_string(&row)?);
            Ok(())
        }
        Command::Infer(c) => {
            let m = commands::cmd_infer(
                &RunDir::new(c.stage.run),
                c.stage.config.as_deref(),
                &c.checkpoint,
            )?;
            println!("{}", serde_json::to_string(&m)?);
            Ok(())
        }
        Command::Diag(c) => commands::cmd_diag(
            &RunDir::new(c.stage.run),
            c.stage.config.as_deref(),
            &c.checkpoint,
        ),
        Command::Compare { runs } => {
            let runs: Vec<RunDir> = runs.into_iter().map(RunDir::new).collect();
            println!(
                "{}",
                serde_json::to_string_pretty(&commands::cmd_compare(&runs)?)?
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

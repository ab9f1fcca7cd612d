use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use classwise::runner::{run, Command, RunOptions};

/// Class-wise adversarial robustness experiments.
#[derive(Parser)]
#[command(name = "classwise", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model and write its checkpoint and per-epoch log.
    Train(Common),
    /// Attack a trained model and write class-wise reports.
    Attack(Common),
    /// Retrain without each confound class and re-attack.
    Homing(Common),
    /// Train on per-class coloured backgrounds and attack.
    Background(Common),
    /// Replace backgrounds at inference time for one class.
    InferenceAdjust(Common),
    /// Combine the reports in a directory into summary.csv.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dotted-path override, e.g. `train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// No per-epoch progress on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Attack(c) => (Command::Attack, c),
        Cmd::Homing(c) => (Command::Homing, c),
        Cmd::Background(c) => (Command::Background, c),
        Cmd::InferenceAdjust(c) => (Command::InferenceAdjust, c),
        Cmd::Report(c) => (Command::Report, c),
    };
    let opts = RunOptions {
        config: common.config,
        out: common.out,
        overrides: common.set,
        quiet: common.quiet,
    };
    match run(command, &opts) {
        Ok(written) => {
            for p in written {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code as u8)
        }
    }
}

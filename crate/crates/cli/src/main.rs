//! `rrgs`: render scenes, train motion models with grouping regularizers,
//! run the ablation grid and the gradient-verification suite.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "rrgs", version, about = "Ray-grouped relaxed-rigidity regularizers for dynamic Gaussian splatting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render one ground-truth frame and dump its ray groups.
    Render { config: PathBuf },
    /// Fit the motion model to the scene's target images.
    Train { config: PathBuf },
    /// Run the oracle suite; exits 1 if any check fails.
    Verify {
        /// Deliberately break one analytic path (e.g. covariance-backward-sign).
        #[arg(long)]
        inject_fault: Option<String>,
        /// Also write the report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the grouping × regularizer grid and write a comparison table.
    Ablate { config: PathBuf },
    /// Write a scene's ground truth, targets and point sequences to a directory.
    Scene { config: PathBuf, out: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = commands::configure_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::from(2);
    }
    let result = match cli.command {
        Command::Render { config } => commands::render(&config),
        Command::Train { config } => commands::train(&config),
        Command::Verify { inject_fault, report } => commands::verify(inject_fault.as_deref(), report.as_deref()),
        Command::Ablate { config } => commands::ablate(&config),
        Command::Scene { config, out } => commands::scene(&config, &out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}

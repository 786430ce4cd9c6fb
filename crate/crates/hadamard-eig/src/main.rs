//! Command-line front end: loads a JSON run configuration, executes the
//! requested command, prints one summary line to stdout, and maps errors to
//! exit codes (2 for configuration/input problems, 3 for numerical
//! failures).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use hadamard_eig::config::{Command as RunCommand, RunConfig};
use hadamard_eig::runner::execute;
use hadamard_eig::Error;

#[derive(Parser)]
#[command(
    name = "hadamard-eig",
    version,
    about = "Eigenvalue derivatives under domain deformation"
)]
struct Cli {
    #[command(subcommand)]
    command: CliCommand,
}

#[derive(Subcommand)]
enum CliCommand {
    /// Sensitivity report (eigenvalues, clusters, derivatives) at one parameter
    Report(RunArgs),
    /// Branch curves over a parameter grid, rearranged through crossings
    Sweep(RunArgs),
    /// Finite-difference comparison table for every reported derivative
    Oracle(RunArgs),
}

#[derive(clap::Args)]
struct RunArgs {
    /// Path to the JSON run configuration
    #[arg(long)]
    config: PathBuf,
    /// Output directory for artifacts (defaults to the current directory)
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn init_thread_pool() -> Result<(), Error> {
    if let Ok(raw) = std::env::var("HADAMARD_EIG_THREADS") {
        let n: usize = raw
            .parse()
            .map_err(|_| Error::Config(format!("HADAMARD_EIG_THREADS = {raw:?} is not a number")))?;
        if n > 0 {
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        }
    }
    Ok(())
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    init_thread_pool()?;
    let (command, args) = match &cli.command {
        CliCommand::Report(a) => (RunCommand::Report, a),
        CliCommand::Sweep(a) => (RunCommand::Sweep, a),
        CliCommand::Oracle(a) => (RunCommand::Oracle, a),
    };
    let config = RunConfig::load(&args.config)?;
    if config.command != command {
        return Err(Error::Config(format!(
            "configuration declares command {:?} but the CLI invoked {:?}",
            config.command, command
        )));
    }
    let artifacts = execute(&config, &args.out)?;
    println!("{}", artifacts.summary);
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

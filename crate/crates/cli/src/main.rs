//! `rpickle` command-line entry point. Stages run one per invocation and
//! communicate through the output directory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rpickle::pipeline::{Pipeline, RunConfig, Stage};
use rpickle::Error;

#[derive(Parser, Debug)]
#[command(name = "rpickle", version, about = "Randomized PICKLE posterior sampling pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads. Results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Build the mesh, reference fields and observation wells.
    Generate,
    /// Fit the kernel and build the conditional expansions.
    BuildPrior,
    /// Minimize the PICKLE loss for every residual variance.
    Map,
    /// Draw randomized PICKLE ensembles.
    SampleRpickle,
    /// Draw HMC chains.
    SampleHmc,
    /// Score ensembles against the reference.
    Diagnose,
    /// Run the linear-Gaussian consistency checks.
    OracleCheck,
}

impl From<Command> for Stage {
    fn from(c: Command) -> Stage {
        match c {
            Command::Generate => Stage::Generate,
            Command::BuildPrior => Stage::BuildPrior,
            Command::Map => Stage::Map,
            Command::SampleRpickle => Stage::SampleRpickle,
            Command::SampleHmc => Stage::SampleHmc,
            Command::Diagnose => Stage::Diagnose,
            Command::OracleCheck => Stage::OracleCheck,
        }
    }
}

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;

fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        EXIT_NUMERICAL
    } else {
        EXIT_VALIDATION
    }
}

fn run(cli: Cli) -> Result<bool, Error> {
    let config = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_json("{\"problem\": \"linear\"}")?,
    };
    let pipeline = Pipeline::new(config, cli.out, cli.seed, cli.threads)?;
    let outcome = pipeline.run(cli.command.into())?;
    for w in &outcome.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}: wrote {} file(s) to {}", outcome.stage, outcome.files.len(), pipeline.out_dir().display());
    Ok(outcome.passed.unwrap_or(true))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let stage = Stage::from(cli.command);
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("{stage}: checks failed");
            ExitCode::from(EXIT_NUMERICAL)
        }
        Err(e) => {
            eprintln!("error: {stage}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

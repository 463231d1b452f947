//! Command-line interface: `fit` on CSV data, and the `simulate`, `power`
//! and `curves` Monte Carlo studies.

pub mod commands;
pub mod config;
pub mod ingest;
pub mod output;

use clap::{Parser, Subcommand};

pub use commands::{cmd_curves, cmd_fit, cmd_power, cmd_simulate, error_record};
pub use config::{Mode, RunArgs, RunConfig};
pub use ingest::{ingest_csv, Ingested, Roles};

#[derive(Debug, Parser)]
#[command(
    name = "pepsi",
    version,
    about = "Integrate secondary outcomes into primary regression estimates"
)]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit the primary model on CSV data with the requested methods.
    Fit(RunArgs),
    /// Monte Carlo table of bias, MCSD, SE, coverage and relative efficiency.
    Simulate(RunArgs),
    /// Wald rejection rates over a grid of beta2 values.
    Power(RunArgs),
    /// Relative efficiency and coverage across sample sizes.
    Curves(RunArgs),
}

impl Command {
    fn split(self) -> (Mode, RunArgs) {
        match self {
            Command::Fit(a) => (Mode::Fit, a),
            Command::Simulate(a) => (Mode::Simulate, a),
            Command::Power(a) => (Mode::Power, a),
            Command::Curves(a) => (Mode::Curves, a),
        }
    }
}

/// Run a parsed command line and return the process exit code:
/// 0 success, 2 validation error, 3 numerical failure.
pub fn run(cli: Cli) -> i32 {
    let (mode, args) = cli.command.split();
    let result = RunConfig::resolve(mode, args).and_then(|cfg| commands::dispatch(&cfg));
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", error_record(&e));
            e.exit_code()
        }
    }
}

/// Parse `args` (including the program name) and run.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => {
            let level = match cli.verbose {
                0 => log::LevelFilter::Warn,
                1 => log::LevelFilter::Info,
                _ => log::LevelFilter::Debug,
            };
            let _ = env_logger::Builder::new()
                .filter_level(level)
                .parse_default_env()
                .try_init();
            run(cli)
        }
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                2
            } else {
                0
            }
        }
    }
}

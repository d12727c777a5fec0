use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use qmarket::cli::{self, exit_code, EXIT_CRITERIA_FAILED};
use qmarket::scenario::Error;

#[derive(Parser)]
#[command(name = "qmarket", version, about = "Two-trader operator market simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evolve the scenario with each engine and write one CSV per engine.
    Run(Common),
    /// Run the validation suites selected in the config and write a report.
    Compare(Common),
    /// Tabulate the asymptotic portfolio changes over a parameter sweep.
    Asymptote(Common),
}

#[derive(Args)]
struct Common {
    /// Scenario JSON file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Comma-separated engines overriding the config, e.g. `exact,perturb`.
    #[arg(long)]
    engines: Option<String>,
    /// Only report errors.
    #[arg(long)]
    quiet: bool,
}

fn execute(command: Command) -> Result<i32, Error> {
    let (common, which) = match command {
        Command::Run(c) => (c, 0),
        Command::Compare(c) => (c, 1),
        Command::Asymptote(c) => (c, 2),
    };
    let scenario = cli::load_scenario(&common.config, common.engines.as_deref())?;
    match which {
        0 => {
            for path in cli::cmd_run(&scenario, &common.out)? {
                log::info!("wrote {}", path.display());
            }
            Ok(0)
        }
        1 => {
            let report = cli::cmd_compare(&scenario, &common.out)?;
            if !common.quiet {
                print!("{}", report.summary());
            }
            Ok(if report.passed() { 0 } else { EXIT_CRITERIA_FAILED })
        }
        _ => {
            let (path, cells) = cli::cmd_asymptote(&scenario, &common.out)?;
            let undefined = cells.iter().filter(|c| c.delta_pi.is_none()).count();
            if undefined > 0 {
                log::warn!("{undefined} of {} cells undefined", cells.len());
            }
            log::info!("wrote {}", path.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let quiet = match &cli.command {
        Command::Run(c) | Command::Compare(c) | Command::Asymptote(c) => c.quiet,
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if quiet { "error" } else { "info" }))
        .format_timestamp(None)
        .init();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()) as u8)
        }
    }
}

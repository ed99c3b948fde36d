use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epsm_cli::{run, CliError};

/// Dielectric response of gapped crystals: band structure, linear
/// response, macroscopic dielectric tensors, supercell defect
/// screening, and the homogenization limit.
///
/// Logs go to stderr; data tables and the run summary are written into
/// the output directory. Exit codes: 0 success, 2 rejected input,
/// 3 numerical failure. Set RAYON_NUM_THREADS to pin the worker count
/// (required for byte-identical artifacts across runs).
#[derive(Parser)]
#[command(name = "epsm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Band energies along the G-X-M-R-G path, plus the Fermi data
    Bands(RunArgs),
    /// Response tensor L and small-momentum curvature samples
    Respond(RunArgs),
    /// Macroscopic dielectric tensor by two independent routes
    Epsm(RunArgs),
    /// Supercell self-consistent screening of a Gaussian defect charge
    Defect(RunArgs),
    /// Weak convergence of the rescaled screened potential
    Homogenize(RunArgs),
    /// Built-in acceptance checks on the shipped presets
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration file
    #[arg(long)]
    config: PathBuf,
    /// Output directory (takes precedence over output.directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config entry (repeatable)
    #[arg(long = "override", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct SelftestArgs {
    /// Optional config; it is validated and echoed, but the checks
    /// always run on the built-in presets
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (takes precedence over output.directory)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override one config entry (repeatable)
    #[arg(long = "override", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
    /// Run a single numbered criterion instead of the whole suite
    #[arg(long, value_name = "N")]
    only: Option<usize>,
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Bands(a) => {
            run::bands(&run::prepare(&a.config, a.out.as_deref(), &a.overrides, "bands")?)
        }
        Command::Respond(a) => {
            run::respond(&run::prepare(&a.config, a.out.as_deref(), &a.overrides, "respond")?)
        }
        Command::Epsm(a) => {
            run::epsm(&run::prepare(&a.config, a.out.as_deref(), &a.overrides, "epsm")?)
        }
        Command::Defect(a) => {
            run::defect(&run::prepare(&a.config, a.out.as_deref(), &a.overrides, "defect")?)
        }
        Command::Homogenize(a) => {
            run::homogenize(&run::prepare(&a.config, a.out.as_deref(), &a.overrides, "homogenize")?)
        }
        Command::Selftest(a) => {
            run::selftest(a.config.as_deref(), a.out.as_deref(), &a.overrides, a.only)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("epsm: error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

//! Command-line front end for trapforge.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::Ctx;
use crate::error::CliError;
use crate::output::OutDir;

#[derive(Debug, Parser)]
#[command(name = "trapforge", version, about = "Surface-electrode trap design")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run configuration (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory [default: config `out`, else ./trapforge-out]
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Basis cache directory [default: config `cache`, else $TRAPFORGE_CACHE]
    #[arg(long, global = true)]
    pub cache: Option<PathBuf>,
    /// Panel size near the trap, um.
    #[arg(long, global = true)]
    pub resolution: Option<f64>,
    /// Seed for randomized restarts; recorded in every output.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads [default: all cores]
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build or check the electrode layout.
    #[command(subcommand)]
    Geometry(GeometryCommand),
    /// Solve and cache the unit-voltage basis.
    #[command(subcommand)]
    Basis(BasisCommand),
    /// Null, secular frequencies, axes, depth and q of a single ion.
    SingleIon,
    /// Chain equilibria and normal modes.
    #[command(subcommand)]
    Chain(ChainCommand),
    /// Static voltage synthesis.
    #[command(subcommand)]
    Voltages(VoltagesCommand),
    /// Depth or spacing error over one parameter.
    Sweep {
        /// slot_width, oxide_thickness, segment_width or rf_peak
        parameter: Option<String>,
        /// Comma-separated values, overriding the config.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Option<Vec<f64>>,
    },
    /// Potentials on a grid.
    #[command(subcommand)]
    Export(ExportCommand),
}

#[derive(Debug, Subcommand)]
pub enum GeometryCommand {
    Build,
    Validate,
}

#[derive(Debug, Subcommand)]
pub enum BasisCommand {
    Solve,
}

#[derive(Debug, Subcommand)]
pub enum ChainCommand {
    Solve {
        /// Voltage set (JSON) applied on top of the drive.
        #[arg(long)]
        voltages: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum VoltagesCommand {
    Solve,
}

#[derive(Debug, Subcommand)]
pub enum ExportCommand {
    Grid,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Geometry(GeometryCommand::Build) => "geometry build",
            Command::Geometry(GeometryCommand::Validate) => "geometry validate",
            Command::Basis(_) => "basis solve",
            Command::SingleIon => "single-ion",
            Command::Chain(_) => "chain solve",
            Command::Voltages(_) => "voltages solve",
            Command::Sweep { .. } => "sweep",
            Command::Export(_) => "export grid",
        }
    }
}

/// Run one command; returns the files written.
pub fn run(cli: Cli) -> Result<Vec<PathBuf>, CliError> {
    let loaded = config::load(cli.global.config.as_deref())?;
    let out = cli
        .global
        .out
        .clone()
        .or_else(|| {
            loaded
                .config
                .out
                .as_ref()
                .map(|p| config::RunConfig::resolve(loaded.path.as_deref(), p))
        })
        .unwrap_or_else(|| PathBuf::from("trapforge-out"));
    let cache = commands::cache_for(cli.global.cache.as_deref(), &loaded.config);
    let mut ctx = Ctx {
        command: cli.command.name().to_string(),
        out: OutDir::create(&out)?,
        loaded,
        cache,
        resolution: cli.global.resolution,
        seed: cli.global.seed,
    };
    let result = match cli.command {
        Command::Geometry(GeometryCommand::Build) => commands::geometry_build(&mut ctx),
        Command::Geometry(GeometryCommand::Validate) => commands::geometry_validate(&mut ctx),
        Command::Basis(BasisCommand::Solve) => commands::basis_solve(&mut ctx),
        Command::SingleIon => commands::single_ion(&mut ctx),
        Command::Chain(ChainCommand::Solve { voltages }) => commands::chain_solve(&mut ctx, voltages),
        Command::Voltages(VoltagesCommand::Solve) => commands::voltages_solve(&mut ctx),
        Command::Sweep { parameter, values } => commands::sweep(&mut ctx, parameter, values),
        Command::Export(ExportCommand::Grid) => commands::export_grid(&mut ctx),
    };
    result.map(|()| ctx.out.written().to_vec())
}

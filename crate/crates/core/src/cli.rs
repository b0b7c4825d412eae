//! Command-line surface: `run`, `converge`, `scenario`, `list-scenarios`.
//!
//! Exit codes: 0 success, 1 configuration or I/O error, 2 structural
//! assertion failure, 3 linear solver failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use thiserror::Error;

use crate::fem::Discretization;
use crate::io::{
    parse_config, read_config, write_diagnostics_csv, write_snapshot_file, ConfigError, OutputError, Problem,
    RunConfig, SnapshotData,
};
use crate::manufactured::{convergence_csv, convergence_study, manufactured_params, ManufacturedError, SourceTerms};
use crate::mesh::build_rect_mesh;
use crate::model::DiagnosticsRecord;
use crate::scenarios::{by_name, scenario_names, Overrides, ScenarioError};
use crate::scheme::{Forcing, PotentialBc, SchemeError, Simulation};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration: {0}")]
    Config(#[from] ConfigError),
    #[error("scenario: {0}")]
    Scenario(#[from] ScenarioError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Manufactured(#[from] ManufacturedError),
    #[error("output: {0}")]
    Output(#[from] OutputError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Scenario(_) | CliError::Output(_) => 1,
            CliError::Scheme(e) => e.exit_code(),
            CliError::Manufactured(e) => match e {
                ManufacturedError::Scheme(s) => s.exit_code(),
                ManufacturedError::SourceValidation { .. } => 2,
                ManufacturedError::InvalidArgument(_) | ManufacturedError::Fem(_) => 1,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "spnp", about = "Carreau flow coupled to steric Poisson-Nernst-Planck transport")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the problem described by a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides `out` of the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Temporal convergence study of the manufactured solution.
    Converge {
        /// Cells per side of the unit square.
        #[arg(long, default_value_t = 64)]
        h_cells: usize,
        /// Comma-separated step counts.
        #[arg(long, value_delimiter = ',', default_value = "8,16,32,64")]
        steps: Vec<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a preset scenario.
    Scenario {
        /// `energy-decay`, `steric:<0..4>` or `exponent-k:<value>`.
        name: String,
        /// Use the reduced mesh and final time.
        #[arg(long)]
        desk: bool,
        /// Cells per side.
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long = "t-final")]
        t_final: Option<f64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Print the scenario names.
    ListScenarios,
}

/// Caps the worker count at `SPNP_THREADS` when set.
pub fn init_threads() {
    if let Some(n) = std::env::var("SPNP_THREADS").ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not set thread count: {e}");
        }
    }
}

/// Builds the simulation a configuration describes.
pub fn build_simulation(cfg: &RunConfig) -> Result<Simulation, CliError> {
    let mesh = build_rect_mesh(0.0, 1.0, 0.0, 1.0, cfg.nx, cfg.ny).map_err(|e| SchemeError::Setup(e.to_string()))?;
    let disc = Discretization::new(mesh).map_err(|e| SchemeError::Setup(e.to_string()))?;
    match &cfg.problem {
        Problem::Scenario(name) => {
            let s = by_name(name)?;
            let opts = cfg.scheme_options(s.opts);
            if opts.potential_bc == PotentialBc::DirichletLr {
                log::info!("Dirichlet potential; xi scales the full potential: {}", opts.xi_scales_dirichlet_potential);
            }
            Ok(Simulation::new(disc, cfg.params.clone(), opts, &s.init, None)?)
        }
        Problem::Manufactured => {
            let src = SourceTerms::new(cfg.params.clone())?;
            let init = src.exact.initial_data();
            let forcing: Box<dyn Forcing> = Box::new(src);
            Ok(Simulation::new(disc, cfg.params.clone(), cfg.scheme_options(Default::default()), &init, Some(forcing))?)
        }
    }
}

/// Runs `sim` to its final time, writing `diagnostics.csv` and a snapshot
/// at each requested time (the first step reaching it) into `out`.
pub fn run_simulation(sim: &mut Simulation, snapshot_times: &[f64], out: &Path) -> Result<Vec<DiagnosticsRecord>, CliError> {
    std::fs::create_dir_all(out).map_err(OutputError::from)?;
    let mut times: Vec<f64> = snapshot_times.to_vec();
    times.sort_by(f64::total_cmp);
    let eps = 1e-9 * sim.params.dt;
    let mut next = 0;
    let mut failure: Option<OutputError> = None;
    let snap = |sim: &Simulation, next: &mut usize| -> Result<(), OutputError> {
        while *next < times.len() && sim.curr.t + eps >= times[*next] {
            let data = SnapshotData::from_level(&sim.disc, &sim.curr);
            let path = write_snapshot_file(out, *next, &sim.disc, &data, sim.curr.t)?;
            log::info!("snapshot t={} -> {}", sim.curr.t, path.display());
            *next += 1;
        }
        Ok(())
    };
    snap(sim, &mut next)?;
    let result = sim.run(|sim, rep| {
        log::debug!("step {} t={:.6} E_h={:.10e} xi={:.8}", rep.step, rep.record.t, rep.record.e_h, rep.record.xi);
        snap(sim, &mut next).map_err(|e| {
            let msg = e.to_string();
            failure = Some(e);
            SchemeError::Setup(msg)
        })
    });
    if let Some(e) = failure {
        return Err(e.into());
    }
    let records = result?;
    let f = std::fs::File::create(out.join("diagnostics.csv")).map_err(OutputError::from)?;
    write_diagnostics_csv(&records, std::io::BufWriter::new(f))?;
    Ok(records)
}

pub fn run_config(cfg: &RunConfig) -> Result<Vec<DiagnosticsRecord>, CliError> {
    let mut sim = build_simulation(cfg)?;
    run_simulation(&mut sim, &cfg.snapshot_times, &cfg.out_dir)
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, out } => {
            let mut cfg = read_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let records = run_config(&cfg)?;
            if let Some(last) = records.last() {
                println!("t={} E_h={:.10e} xi={:.8}", last.t, last.e_h, last.xi);
            }
        }
        Command::Converge { h_cells, steps, out } => {
            let rows = convergence_study(&steps, h_cells, &manufactured_params())?;
            let csv = convergence_csv(&rows);
            print!("{csv}");
            std::fs::create_dir_all(&out).map_err(OutputError::from)?;
            std::fs::write(out.join("convergence.csv"), csv).map_err(OutputError::from)?;
        }
        Command::Scenario { name, desk, cells, dt, t_final, out } => {
            let mut s = by_name(&name)?;
            if desk {
                s = s.desk();
            }
            let s = s.with_overrides(&Overrides { n_cells: cells, dt, t_final });
            let mut sim = s.build()?;
            let records = run_simulation(&mut sim, &s.snapshot_times, &out)?;
            if let Some(last) = records.last() {
                println!("{}: t={} E_h={:.10e} xi={:.8}", s.name, last.t, last.e_h, last.xi);
            }
        }
        Command::ListScenarios => {
            for n in scenario_names() {
                println!("{n}");
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs, reports errors on stderr and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Parses a config string and runs it (used by tests and scripts).
pub fn run_config_text(text: &str, out: &Path) -> Result<Vec<DiagnosticsRecord>, CliError> {
    let mut cfg = parse_config(text)?;
    cfg.out_dir = out.to_path_buf();
    run_config(&cfg)
}

//! `ddefloquet`: Floquet spectra, eigenfunctions, adjoints, normal forms and simulations of
//! delay equations from JSON model files.

mod commands;
mod config;
mod output;

use clap::{Args, Parser, Subcommand, ValueEnum};
use config::{setup, CliResult, RunConfig};
use ddefloquet::normalform::Bifurcation;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "ddefloquet", version, about = "Floquet and normal-form analysis of periodic orbits of delay equations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Model document `{name, n, delays, params, builtin}`.
    #[arg(long)]
    model: PathBuf,
    /// Orbit document `{period, coefficients}`.
    #[arg(long)]
    orbit: Option<PathBuf>,
    /// Refine the orbit by Newton collocation; without `--orbit`, start from a simulation.
    #[arg(long)]
    solve_orbit: bool,
    /// Chebyshev degree of history segments.
    #[arg(long, default_value_t = 32)]
    mesh: usize,
    /// Time step; defaults to a twentieth of the smallest delay.
    #[arg(long)]
    dt: Option<f64>,
    /// Samples per window for eigenfunctions and normal-form coefficients.
    #[arg(long, default_value_t = 64)]
    tau_mesh: usize,
    /// Half-width of the unit-circle band for center multipliers.
    #[arg(long, default_value_t = 0.05)]
    band: f64,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Constant initial history when the orbit is found by simulation.
    #[arg(long, default_value_t = 0.5)]
    initial: f64,
    /// Fourier harmonics of a solved orbit.
    #[arg(long, default_value_t = 60)]
    harmonics: usize,
}

impl Common {
    fn run_config(&self) -> RunConfig {
        RunConfig {
            model: self.model.clone(),
            orbit: self.orbit.clone(),
            solve_orbit: self.solve_orbit,
            mesh: self.mesh,
            dt: self.dt,
            tau_mesh: self.tau_mesh,
            band: self.band,
            out: self.out.clone(),
            initial: self.initial,
            harmonics: self.harmonics,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Fold,
    Pd,
    Ns,
    Auto,
}

#[derive(Subcommand)]
enum Command {
    /// Floquet multipliers to `mult.csv`.
    Multipliers {
        #[command(flatten)]
        common: Common,
    },
    /// Periodic eigenfunctions to `eigfun.json`.
    Eigfun {
        #[command(flatten)]
        common: Common,
        /// Smallest multiplier modulus to expand.
        #[arg(long, default_value_t = 0.1)]
        min_modulus: f64,
        /// Points of the theta grid in the output.
        #[arg(long, default_value_t = 33)]
        theta_points: usize,
    },
    /// Adjoint eigenfunctions, normalized against the forward ones, to `adjoint.json`.
    Adjoint {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.1)]
        min_modulus: f64,
        #[arg(long, default_value_t = 33)]
        theta_points: usize,
    },
    /// Periodic normal form to `normalform.json` and `normalform_H.csv`.
    Normalform {
        #[command(flatten)]
        common: Common,
        #[arg(long = "type", value_enum, default_value_t = Kind::Auto)]
        kind: Kind,
        #[arg(long, default_value_t = 3)]
        order: usize,
        #[arg(long, default_value_t = 9)]
        theta_points: usize,
    },
    /// Nonlinear simulation from the orbit segment to `trajectory.csv`.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 10.0)]
        periods: f64,
        #[arg(long, default_value_t = 1001)]
        samples: usize,
    },
}

fn theta_points(n: usize) -> CliResult<usize> {
    if n < 2 {
        return Err(config::CliError::Config("--theta-points must be at least 2".into()));
    }
    Ok(n)
}

fn run(cli: Cli) -> CliResult<Vec<PathBuf>> {
    let common = match &cli.command {
        Command::Multipliers { common }
        | Command::Eigfun { common, .. }
        | Command::Adjoint { common, .. }
        | Command::Normalform { common, .. }
        | Command::Simulate { common, .. } => common.clone(),
    };
    let cfg = common.run_config();
    let s = setup(&cfg)?;
    output::prepare_dir(&cfg.out)?;
    let out = cfg.out.as_path();
    let mut written = Vec::new();
    if cfg.solve_orbit {
        let meta = output::Metadata::new("solve-orbit", &s);
        written.push(output::write_json(out, "orbit.json", &meta, &config::OrbitFile::from(&s.orbit))?);
    }
    let produced = match cli.command {
        Command::Multipliers { .. } => Ok(vec![commands::multipliers(&s, cfg.band, out)?]),
        Command::Eigfun { min_modulus, theta_points: t, .. } => {
            Ok(vec![commands::eigfun(&s, cfg.band, min_modulus, theta_points(t)?, out)?])
        }
        Command::Adjoint { min_modulus, theta_points: t, .. } => {
            Ok(vec![commands::adjoint(&s, cfg.band, min_modulus, theta_points(t)?, out)?])
        }
        Command::Normalform { kind, order, theta_points: t, .. } => {
            let kind = match kind {
                Kind::Fold => Some(Bifurcation::Fold),
                Kind::Pd => Some(Bifurcation::PeriodDoubling),
                Kind::Ns => Some(Bifurcation::NeimarkSacker),
                Kind::Auto => None,
            };
            commands::normalform(&s, cfg.band, kind, order, theta_points(t)?, out)
        }
        Command::Simulate { periods, samples, .. } => Ok(vec![commands::simulate_cmd(&s, periods, samples, out)?]),
    }?;
    written.extend(produced);
    Ok(written)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("ddefloquet: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

//! Model and orbit documents, run configuration, and the error classes behind the exit codes.

use ddefloquet::model::builtin;
use ddefloquet::oracle::{orbit_from_trajectory, poincare_period, simulate};
use ddefloquet::orbit::{solve_periodic_orbit, OrbitSolveOptions};
use ddefloquet::{DdeModel, Discretization, HistorySegment, PeriodicOrbit};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or inconsistent input; exit code 2.
    Config(String),
    /// A computation failed; exit code 3.
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "configuration error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

pub fn numerical(e: ddefloquet::Error) -> CliError {
    CliError::Numerical(e.to_string())
}

pub fn config(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelFile {
    pub name: String,
    pub n: usize,
    #[serde(default)]
    pub delays: Vec<f64>,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    pub builtin: String,
}

/// Trigonometric coefficients per component, `[a0, a1, b1, ..., aK, bK]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OrbitFile {
    pub period: f64,
    pub coefficients: Vec<Vec<f64>>,
}

impl From<&PeriodicOrbit> for OrbitFile {
    fn from(o: &PeriodicOrbit) -> Self {
        OrbitFile { period: o.period, coefficients: o.coeffs.clone() }
    }
}

fn read(path: &Path) -> CliResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub struct LoadedModel {
    pub file: ModelFile,
    pub model: Box<dyn DdeModel>,
    pub sha256: String,
}

pub fn load_model(path: &Path) -> CliResult<LoadedModel> {
    let bytes = read(path)?;
    let file: ModelFile =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let model = builtin(&file.builtin, file.n, &file.delays, &file.params).map_err(config)?;
    Ok(LoadedModel { file, model, sha256: sha256_hex(&bytes) })
}

pub fn load_orbit(path: &Path, n: usize) -> CliResult<(PeriodicOrbit, String)> {
    let bytes = read(path)?;
    let file: OrbitFile =
        serde_json::from_slice(&bytes).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if file.coefficients.len() != n {
        return Err(CliError::Config(format!("orbit has {} components, model has {n}", file.coefficients.len())));
    }
    let orbit = PeriodicOrbit::new(file.period, file.coefficients).map_err(config)?;
    Ok((orbit, sha256_hex(&bytes)))
}

/// Settings shared by every subcommand.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: PathBuf,
    pub orbit: Option<PathBuf>,
    pub solve_orbit: bool,
    pub mesh: usize,
    pub dt: Option<f64>,
    pub tau_mesh: usize,
    pub band: f64,
    pub out: PathBuf,
    pub initial: f64,
    pub harmonics: usize,
}

impl RunConfig {
    pub fn validate(&self) -> CliResult<()> {
        if !(2..=256).contains(&self.mesh) {
            return Err(CliError::Config(format!("--mesh {} outside 2..=256", self.mesh)));
        }
        if !(4..=4096).contains(&self.tau_mesh) {
            return Err(CliError::Config(format!("--tau-mesh {} outside 4..=4096", self.tau_mesh)));
        }
        if !(self.band > 0.0 && self.band < 1.0) {
            return Err(CliError::Config(format!("--band {} outside (0, 1)", self.band)));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(CliError::Config(format!("--dt {dt} not positive")));
            }
        }
        if !(1..=400).contains(&self.harmonics) {
            return Err(CliError::Config(format!("--harmonics {} outside 1..=400", self.harmonics)));
        }
        Ok(())
    }

    /// Step defaults to a twentieth of the smallest delay.
    pub fn discretization(&self, model: &dyn DdeModel) -> CliResult<Discretization> {
        let base = model.delays().iter().copied().reduce(f64::min).unwrap_or(model.max_delay());
        let disc = Discretization::new(self.mesh, self.dt.unwrap_or(base / 20.0)).with_tau_mesh(self.tau_mesh);
        disc.validate(model).map_err(config)?;
        Ok(disc)
    }
}

pub struct Setup {
    pub model: LoadedModel,
    pub orbit: PeriodicOrbit,
    pub orbit_sha256: Option<String>,
    pub orbit_source: &'static str,
    pub disc: Discretization,
}

/// Cycle from `--orbit`, refined with `--solve-orbit`; without a file, the manufactured model
/// uses its exact cycle and `--solve-orbit` starts from a simulated attractor.
pub fn setup(cfg: &RunConfig) -> CliResult<Setup> {
    cfg.validate()?;
    let model = load_model(&cfg.model)?;
    let disc = cfg.discretization(model.model.as_ref())?;
    let n = model.file.n;
    let (orbit, orbit_sha256, source) = match (&cfg.orbit, cfg.solve_orbit) {
        (Some(p), false) => {
            let (o, h) = load_orbit(p, n)?;
            (o, Some(h), "file")
        }
        (Some(p), true) => {
            let (guess, h) = load_orbit(p, n)?;
            (refine(model.model.as_ref(), &guess, cfg.harmonics)?, Some(h), "newton")
        }
        (None, true) => {
            let guess = simulated_guess(model.model.as_ref(), cfg.initial, cfg.harmonics)?;
            (refine(model.model.as_ref(), &guess, cfg.harmonics)?, None, "simulation+newton")
        }
        (None, false) if model.file.builtin == "manufactured" => (PeriodicOrbit::manufactured(), None, "exact"),
        (None, false) => return Err(CliError::Config("an orbit is required: pass --orbit or --solve-orbit".into())),
    };
    Ok(Setup { model, orbit, orbit_sha256, orbit_source: source, disc })
}

fn refine(model: &dyn DdeModel, guess: &PeriodicOrbit, harmonics: usize) -> CliResult<PeriodicOrbit> {
    let opts = OrbitSolveOptions { tolerance: 1e-10, harmonics: Some(harmonics), ..Default::default() };
    let sol = solve_periodic_orbit(model, guess, &opts).map_err(numerical)?;
    if sol.subharmonic_suspect {
        return Err(CliError::Numerical("solved orbit repeats after half a period".into()));
    }
    Ok(sol.orbit)
}

fn simulated_guess(model: &dyn DdeModel, initial: f64, harmonics: usize) -> CliResult<PeriodicOrbit> {
    let h = model.max_delay();
    let n = model.dim();
    let span = 300.0 * h.max(1.0);
    let start = HistorySegment::constant(&vec![initial; n], h, 4);
    let tr = simulate(model, &start, span).map_err(numerical)?;
    let ret = poincare_period(&tr, 0, 0.6 * span, h, 8, 1e-4)
        .ok_or_else(|| CliError::Numerical("simulation did not settle on a periodic orbit".into()))?;
    let t0 = *ret.crossings.last().unwrap() - ret.period;
    orbit_from_trajectory(&tr, t0, ret.period, harmonics).map_err(numerical)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> RunConfig {
        RunConfig {
            model: PathBuf::from("m.json"),
            orbit: None,
            solve_orbit: false,
            mesh: 32,
            dt: None,
            tau_mesh: 64,
            band: 0.05,
            out: PathBuf::from("."),
            initial: 0.5,
            harmonics: 60,
        }
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }

    #[test]
    fn options_outside_ranges_are_rejected() {
        assert!(cfg().validate().is_ok());
        assert!(RunConfig { mesh: 1, ..cfg() }.validate().is_err());
        assert!(RunConfig { band: 1.5, ..cfg() }.validate().is_err());
        assert!(RunConfig { dt: Some(-0.1), ..cfg() }.validate().is_err());
        assert!(RunConfig { tau_mesh: 2, ..cfg() }.validate().is_err());
    }

    #[test]
    fn default_step_divides_the_smallest_delay() {
        let m = ddefloquet::model::Manufactured::new(1.0);
        let d = cfg().discretization(&m).unwrap();
        assert!((d.dt - std::f64::consts::PI / 40.0).abs() < 1e-15);
        assert!(matches!(RunConfig { dt: Some(2.0), ..cfg() }.discretization(&m), Err(CliError::Config(_))));
    }
}

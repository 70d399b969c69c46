//! Metadata header and writers for CSV and JSON artifacts.
//!
//! Floats are written with shortest round-trip digits, so identical runs give identical bytes.

use crate::config::{CliError, CliResult, Setup};
use serde::Serialize;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize)]
pub struct DiscretizationInfo {
    pub mesh: usize,
    pub dt: f64,
    pub order: usize,
    pub tau_mesh: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metadata {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub model: String,
    pub model_sha256: String,
    pub orbit_source: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub orbit_sha256: Option<String>,
    pub period: f64,
    pub discretization: DiscretizationInfo,
}

impl Metadata {
    pub fn new(command: &str, s: &Setup) -> Self {
        Metadata {
            tool: "ddefloquet",
            version: env!("CARGO_PKG_VERSION"),
            command: command.to_string(),
            model: s.model.file.name.clone(),
            model_sha256: s.model.sha256.clone(),
            orbit_source: s.orbit_source,
            orbit_sha256: s.orbit_sha256.clone(),
            period: s.orbit.period,
            discretization: DiscretizationInfo {
                mesh: s.disc.mesh,
                dt: s.disc.dt,
                order: s.disc.order,
                tau_mesh: s.disc.tau_mesh,
            },
        }
    }

    /// `# key: value` lines for CSV files.
    fn comment_lines(&self) -> Vec<String> {
        let d = &self.discretization;
        let mut lines = vec![
            format!("# tool: {} {}", self.tool, self.version),
            format!("# command: {}", self.command),
            format!("# model: {}", self.model),
            format!("# model_sha256: {}", self.model_sha256),
            format!("# orbit_source: {}", self.orbit_source),
        ];
        if let Some(h) = &self.orbit_sha256 {
            lines.push(format!("# orbit_sha256: {h}"));
        }
        lines.push(format!("# period: {}", self.period));
        lines.push(format!("# discretization: mesh={} dt={} order={} tau_mesh={}", d.mesh, d.dt, d.order, d.tau_mesh));
        lines
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("cannot write {}: {e}", path.display()))
}

pub fn prepare_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_error(dir, e))
}

/// Writes `rows` under a metadata comment block and a header line.
pub fn write_csv(dir: &Path, name: &str, meta: &Metadata, header: &[&str], rows: &[Vec<String>]) -> CliResult<PathBuf> {
    let path = dir.join(name);
    let file = File::create(&path).map_err(|e| io_error(&path, e))?;
    let mut w = BufWriter::new(file);
    for line in meta.comment_lines() {
        writeln!(w, "{line}").map_err(|e| io_error(&path, e))?;
    }
    let mut csv = csv::Writer::from_writer(w);
    csv.write_record(header).map_err(|e| io_error(&path, e))?;
    for r in rows {
        csv.write_record(r).map_err(|e| io_error(&path, e))?;
    }
    csv.flush().map_err(|e| io_error(&path, e))?;
    Ok(path)
}

#[derive(Serialize)]
struct Document<'a, T: Serialize> {
    metadata: &'a Metadata,
    #[serde(flatten)]
    body: &'a T,
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, meta: &Metadata, body: &T) -> CliResult<PathBuf> {
    let path = dir.join(name);
    let text = serde_json::to_string_pretty(&Document { metadata: meta, body }).map_err(|e| io_error(&path, e))?;
    std::fs::write(&path, text + "\n").map_err(|e| io_error(&path, e))?;
    Ok(path)
}

/// Shortest round-trip digits; scientific notation outside `[1e-4, 1e15)`.
pub fn num(x: f64) -> String {
    let a = x.abs();
    if a == 0.0 || (1e-4..1e15).contains(&a) || !a.is_finite() {
        format!("{x}")
    } else {
        format!("{x:e}")
    }
}

#[cfg(test)]
mod tests {
    use super::num;

    #[test]
    fn numbers_round_trip() {
        for x in [0.0, 1.0, -2.5, 1e-4, 3.2e-17, 6.02e23, std::f64::consts::PI] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(1.5e-9), "1.5e-9");
        assert_eq!(num(0.25), "0.25");
    }
}

//! Subcommand bodies: each computes its artifact and writes it under the output directory.

use crate::config::{numerical, CliError, CliResult, Setup};
use crate::output::{num, write_csv, write_json, Metadata};
use ddefloquet::evolution::monodromy_matrix;
use ddefloquet::floquet::{
    adjoint_eigenfunctions, floquet_multipliers, jordan_chain, normalize_biorthogonal, pairing_matrix,
    periodic_eigenfunctions, AdjointEigenfunctions, FloquetMultiplier, FloquetSpectrum, MultiplierKind,
    MultiplierOptions, PeriodicEigenfunctions,
};
use ddefloquet::normalform::{normal_form_coefficients, Bifurcation, NormalFormOptions};
use ddefloquet::oracle::simulate;
use ddefloquet::orbit::orbit_segment;
use ddefloquet::{DualElement, HistorySegment, MonodromyMatrix};
use nalgebra::DMatrix;
use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Serialize)]
struct Complex {
    re: f64,
    im: f64,
}

impl From<num_complex::Complex64> for Complex {
    fn from(z: num_complex::Complex64) -> Self {
        Complex { re: z.re, im: z.im }
    }
}

fn spectrum(s: &Setup, band: f64) -> CliResult<(MonodromyMatrix, FloquetSpectrum)> {
    let mono = monodromy_matrix(s.model.model.as_ref(), &s.orbit, 0.0, &s.disc).map_err(numerical)?;
    let opts = MultiplierOptions { band, ..Default::default() };
    let spec = floquet_multipliers(&mono, &opts).map_err(numerical)?;
    Ok((mono, spec))
}

pub fn multipliers(s: &Setup, band: f64, out: &Path) -> CliResult<PathBuf> {
    let (_, spec) = spectrum(s, band)?;
    let rows: Vec<Vec<String>> = spec
        .multipliers
        .iter()
        .map(|m| {
            vec![
                num(m.value.re),
                num(m.value.im),
                num(m.modulus()),
                num(m.exponent.re),
                num(m.exponent.im),
                m.algebraic.to_string(),
                num(m.residual),
                m.center.to_string(),
            ]
        })
        .collect();
    let header = ["re", "im", "modulus", "sigma_re", "sigma_im", "alg_mult", "residual", "center"];
    write_csv(out, "mult.csv", &Metadata::new("multipliers", s), &header, &rows)
}

/// Multipliers with `|lambda| >= floor`, one representative per complex pair.
fn selected(spec: &FloquetSpectrum, floor: f64) -> Vec<&FloquetMultiplier> {
    spec.multipliers
        .iter()
        .enumerate()
        .filter(|(i, m)| {
            m.modulus() >= floor && !matches!(m.kind, MultiplierKind::ComplexPair { conjugate } if conjugate < *i)
        })
        .map(|(_, m)| m)
        .collect()
}

#[derive(Serialize)]
struct MultiplierInfo {
    value: Complex,
    exponent: Complex,
    algebraic: usize,
    geometric: usize,
    antiperiodic: bool,
    center: bool,
}

impl From<&FloquetMultiplier> for MultiplierInfo {
    fn from(m: &FloquetMultiplier) -> Self {
        MultiplierInfo {
            value: m.value.into(),
            exponent: m.exponent.into(),
            algebraic: m.algebraic,
            geometric: m.geometric,
            antiperiodic: m.antiperiodic,
            center: m.center,
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn theta_grid(h: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| h * i as f64 / (count - 1) as f64).collect()
}

/// Values of `phi(-theta)` on the grid, one row per theta.
fn segment_values(phi: &HistorySegment, thetas: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![0.0; phi.dim()];
    thetas
        .iter()
        .map(|&t| {
            phi.eval_into(-t, &mut out);
            out.clone()
        })
        .collect()
}

#[derive(Serialize)]
struct ForwardSample {
    tau: f64,
    /// `values[c][j]` is column `c` at `-theta[j]`, one vector per component.
    columns: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct ForwardSystem {
    multiplier: MultiplierInfo,
    window: f64,
    complex: bool,
    block: Vec<Vec<f64>>,
    chain_residuals: Vec<f64>,
    periodic_closure: f64,
    ode_residual: f64,
    transport_residual: f64,
    theta: Vec<f64>,
    samples: Vec<ForwardSample>,
}

#[derive(Serialize)]
struct EigfunReport {
    eigensystems: Vec<ForwardSystem>,
}

struct Computed<'a> {
    mult: &'a FloquetMultiplier,
    chain_residuals: Vec<f64>,
    forward: PeriodicEigenfunctions,
}

fn forward_systems<'a>(
    s: &Setup,
    mono: &MonodromyMatrix,
    spec: &'a FloquetSpectrum,
    floor: f64,
) -> CliResult<Vec<Computed<'a>>> {
    let model = s.model.model.as_ref();
    selected(spec, floor)
        .into_iter()
        .map(|m| {
            let chain = jordan_chain(mono, m).map_err(numerical)?;
            let forward = periodic_eigenfunctions(model, &s.orbit, &chain, m, &s.disc).map_err(numerical)?;
            Ok(Computed { mult: m, chain_residuals: chain.residuals.clone(), forward })
        })
        .collect()
}

fn closure(pe: &PeriodicEigenfunctions) -> f64 {
    if pe.multiplier.antiperiodic {
        pe.antiperiodic_defect()
    } else {
        pe.closure_defect()
    }
}

pub fn eigfun(s: &Setup, band: f64, floor: f64, theta_points: usize, out: &Path) -> CliResult<PathBuf> {
    let (mono, spec) = spectrum(s, band)?;
    let systems = forward_systems(s, &mono, &spec, floor)?;
    let model = s.model.model.as_ref();
    let thetas = theta_grid(model.max_delay(), theta_points);
    let eigensystems = systems
        .into_iter()
        .map(|c| {
            let pe = &c.forward;
            ForwardSystem {
                multiplier: c.mult.into(),
                window: pe.window,
                complex: pe.complex,
                block: rows(&pe.block),
                chain_residuals: c.chain_residuals,
                periodic_closure: closure(pe),
                ode_residual: pe.ode_residual(model, &s.orbit),
                transport_residual: pe.transport_residual(),
                theta: thetas.clone(),
                samples: (0..pe.samples())
                    .map(|k| ForwardSample {
                        tau: pe.times[k],
                        columns: pe.columns.iter().map(|col| segment_values(&col[k], &thetas)).collect(),
                    })
                    .collect(),
            }
        })
        .collect();
    write_json(out, "eigfun.json", &Metadata::new("eigfun", s), &EigfunReport { eigensystems })
}

#[derive(Serialize)]
struct AdjointSample {
    tau: f64,
    heads: Vec<Vec<f64>>,
    /// `densities[c][j]` is the density of column `c` at `theta[j]`.
    densities: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct AdjointSystem {
    multiplier: MultiplierInfo,
    window: f64,
    complex: bool,
    block: Vec<Vec<f64>>,
    closure: f64,
    ode_residual: f64,
    transport_residual: f64,
    theta: Vec<f64>,
    samples: Vec<AdjointSample>,
}

#[derive(Serialize)]
struct AdjointReport {
    /// `max_k |<r_i(tau_k), q_j(tau_k)> - delta_ij|` over all selected multipliers.
    biorthogonality: f64,
    eigensystems: Vec<AdjointSystem>,
}

fn density_values(d: &DualElement, thetas: &[f64]) -> Vec<Vec<f64>> {
    let mut out = vec![0.0; d.dim()];
    thetas
        .iter()
        .map(|&t| {
            d.density.eval_side(t, t < d.h, &mut out);
            out.clone()
        })
        .collect()
}

pub fn adjoint(s: &Setup, band: f64, floor: f64, theta_points: usize, out: &Path) -> CliResult<PathBuf> {
    let (mono, spec) = spectrum(s, band)?;
    let systems = forward_systems(s, &mono, &spec, floor)?;
    let model = s.model.model.as_ref();
    let mut adjoints: Vec<AdjointEigenfunctions> = Vec::new();
    for c in &systems {
        let mut ae = adjoint_eigenfunctions(model, &s.orbit, c.mult, 0.0, &s.disc).map_err(numerical)?;
        normalize_biorthogonal(&mut ae, &c.forward).map_err(numerical)?;
        adjoints.push(ae);
    }
    let adj: Vec<&AdjointEigenfunctions> = adjoints.iter().collect();
    let fwd: Vec<&PeriodicEigenfunctions> = systems.iter().map(|c| &c.forward).collect();
    let mut biorthogonality = 0.0f64;
    if let Some(first) = fwd.first() {
        for k in 0..first.samples() {
            let p = pairing_matrix(&adj, &fwd, k).map_err(numerical)?;
            biorthogonality = biorthogonality.max((&p - DMatrix::identity(p.nrows(), p.ncols())).amax());
        }
    }
    let thetas = theta_grid(model.max_delay(), theta_points);
    let eigensystems = adjoints
        .iter()
        .map(|ae| AdjointSystem {
            multiplier: (&ae.multiplier).into(),
            window: ae.window,
            complex: ae.complex,
            block: rows(&ae.block),
            closure: ae.closure_defect(),
            ode_residual: ae.ode_residual(model, &s.orbit),
            transport_residual: ae.transport_residual(),
            theta: thetas.clone(),
            samples: (0..ae.samples())
                .map(|k| AdjointSample {
                    tau: ae.times[k],
                    heads: ae.columns.iter().map(|col| col[k].head.clone()).collect(),
                    densities: ae.columns.iter().map(|col| density_values(&col[k], &thetas)).collect(),
                })
                .collect(),
        })
        .collect();
    write_json(out, "adjoint.json", &Metadata::new("adjoint", s), &AdjointReport { biorthogonality, eigensystems })
}

#[derive(Serialize)]
struct NamedValue {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct NormalFormDocument {
    bifurcation: &'static str,
    order: usize,
    center_multipliers: Vec<Complex>,
    center_block: Vec<Vec<f64>>,
    coefficients: Vec<NamedValue>,
    diagnostics: Vec<NamedValue>,
    h_samples: String,
}

pub fn normalform(
    s: &Setup,
    band: f64,
    kind: Option<Bifurcation>,
    order: usize,
    theta_points: usize,
    out: &Path,
) -> CliResult<Vec<PathBuf>> {
    if !(2..=3).contains(&order) {
        return Err(CliError::Config(format!("--order {order} not in 2..=3")));
    }
    let opts = NormalFormOptions {
        order,
        multipliers: MultiplierOptions { band, ..Default::default() },
        ..Default::default()
    };
    let model = s.model.model.as_ref();
    let rep = normal_form_coefficients(model, &s.orbit, kind, &s.disc, &opts).map_err(numerical)?;
    let meta = Metadata::new("normalform", s);
    let basis = &rep.basis;
    let thetas = theta_grid(model.max_delay(), theta_points);
    let mut h_rows = Vec::new();
    for mc in &rep.orders {
        for a in 0..mc.monomials.len() {
            let label = mc.monomials.label(a);
            for k in 0..basis.samples() {
                let seg = mc.segment(basis, a, k);
                for (j, v) in segment_values(&seg, &thetas).into_iter().enumerate() {
                    for (c, x) in v.into_iter().enumerate() {
                        h_rows.push(vec![
                            mc.order.to_string(),
                            label.clone(),
                            num(basis.time(k)),
                            num(thetas[j]),
                            c.to_string(),
                            num(x),
                        ]);
                    }
                }
            }
        }
    }
    let header = ["order", "monomial", "tau", "theta", "component", "value"];
    let csv_path = write_csv(out, "normalform_H.csv", &meta, &header, &h_rows)?;
    let doc = NormalFormDocument {
        bifurcation: rep.bifurcation.label(),
        order: rep.orders.iter().map(|m| m.order).max().unwrap_or(1),
        center_multipliers: basis.multipliers.iter().map(|z| (*z).into()).collect(),
        center_block: rows(&basis.block),
        coefficients: rep.coefficients.iter().map(|c| NamedValue { name: c.name.clone(), value: c.value }).collect(),
        diagnostics: rep.diagnostics.iter().map(|(n, v)| NamedValue { name: n.clone(), value: *v }).collect(),
        h_samples: "normalform_H.csv".into(),
    };
    let json_path = write_json(out, "normalform.json", &meta, &doc)?;
    Ok(vec![json_path, csv_path])
}

pub fn simulate_cmd(s: &Setup, periods: f64, samples: usize, out: &Path) -> CliResult<PathBuf> {
    if !(periods > 0.0) || samples < 2 {
        return Err(CliError::Config("--periods must be positive and --samples at least 2".into()));
    }
    let model = s.model.model.as_ref();
    let h = model.max_delay();
    let start = orbit_segment(&s.orbit, 0.0, h, s.disc.mesh);
    let t_end = periods * s.orbit.period;
    let tr = simulate(model, &start, t_end).map_err(numerical)?;
    let n = model.dim();
    let mut rows = Vec::with_capacity(samples);
    for i in 0..samples {
        let t = t_end * i as f64 / (samples - 1) as f64;
        let x = tr.eval(t.min(tr.end())).map_err(numerical)?;
        let mut row = vec![num(t)];
        row.extend(x.iter().map(|v| num(*v)));
        rows.push(row);
    }
    let names: Vec<String> = (0..n).map(|i| format!("x{i}")).collect();
    let mut header = vec!["t"];
    header.extend(names.iter().map(|s| s.as_str()));
    write_csv(out, "trajectory.csv", &Metadata::new("simulate", s), &header, &rows)
}

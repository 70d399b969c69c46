//! Linearization along a cycle, multilinear forms, and the generator actions on segments and dual elements.

use crate::error::{Error, Result};
use crate::model::DdeModel;
use crate::orbit::PeriodicOrbit;
use crate::prelude::*;
use crate::segment::{DualElement, HistorySegment, PwCheb};
use nalgebra::DMatrix;

/// Blocks `A_0(t), ..., A_m(t)` with `L(t) phi = sum_j A_j(t) phi(-tau_j)` and `tau_0 = 0`.
pub fn eval_linearization(model: &dyn DdeModel, orbit: &PeriodicOrbit, t: f64) -> Vec<DMatrix<f64>> {
    let n = model.dim();
    let args = orbit.args(model.delays(), t);
    model
        .jacobian_blocks(&args)
        .into_iter()
        .map(|b| DMatrix::from_row_slice(n, n, &b))
        .collect()
}

/// `L(t) phi`.
pub fn apply_linearization(model: &dyn DdeModel, orbit: &PeriodicOrbit, t: f64, phi: &HistorySegment) -> Vec<f64> {
    let n = model.dim();
    let blocks = eval_linearization(model, orbit, t);
    let mut out = vec![0.0; n];
    let mut v = vec![0.0; n];
    for (j, b) in blocks.iter().enumerate() {
        let th = if j == 0 { 0.0 } else { -model.delays()[j - 1] };
        phi.eval_into(th, &mut v);
        for r in 0..n {
            for c in 0..n {
                out[r] += b[(r, c)] * v[c];
            }
        }
    }
    out
}

/// Flattened `[phi(0), phi(-tau_1), ...]`.
pub fn delay_values(model: &dyn DdeModel, phi: &HistorySegment) -> Vec<f64> {
    let n = model.dim();
    let m = model.delays().len();
    let mut out = vec![0.0; n * (m + 1)];
    phi.eval_into(0.0, &mut out[..n]);
    for j in 0..m {
        phi.eval_into(-model.delays()[j], &mut out[(j + 1) * n..(j + 2) * n]);
    }
    out
}

/// `(1/q!) D^q F(gamma_t)(d_1, ..., d_q)` on flattened delay-value directions.
pub fn multilinear_flat(model: &dyn DdeModel, orbit: &PeriodicOrbit, t: f64, dirs: &[&[f64]]) -> Result<Vec<f64>> {
    let args = orbit.args(model.delays(), t);
    let mut out = vec![0.0; model.dim()];
    match dirs.len() {
        1 => model.d1(&args, dirs[0], &mut out),
        2 => {
            model.d2(&args, dirs[0], dirs[1], &mut out);
            out.iter_mut().for_each(|v| *v *= 0.5);
        }
        3 => {
            model.d3(&args, dirs[0], dirs[1], dirs[2], &mut out);
            out.iter_mut().for_each(|v| *v /= 6.0);
        }
        q => return Err(Error::InvalidInput(format!("multilinear order {q} not available"))),
    }
    Ok(out)
}

/// `G_q(t, phi_1, ..., phi_q) = (1/q!) D^q F(gamma_t)(phi_1, ..., phi_q)` for `q` in 2..=3.
pub fn eval_multilinear(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    t: f64,
    q: usize,
    dirs: &[&HistorySegment],
) -> Result<Vec<f64>> {
    if !(2..=3).contains(&q) || dirs.len() != q {
        return Err(Error::InvalidInput(format!("multilinear order {q} with {} directions", dirs.len())));
    }
    let flat: Vec<Vec<f64>> = dirs.iter().map(|d| delay_values(model, d)).collect();
    let refs: Vec<&[f64]> = flat.iter().map(|v| v.as_slice()).collect();
    multilinear_flat(model, orbit, t, &refs)
}

/// `A^{sun star}(tau) j phi = (L(tau) phi, phi')`.
pub fn apply_generator(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    tau: f64,
    phi: &HistorySegment,
) -> (Vec<f64>, HistorySegment) {
    (apply_linearization(model, orbit, tau, phi), phi.derivative())
}

/// Functional `phi -> head . phi(0) + int_0^h density(theta) phi(-theta) d theta + sum_k row_k . phi(-theta_k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointGeneratorValue {
    pub head: Vec<f64>,
    pub density: PwCheb,
    pub masses: Vec<(f64, Vec<f64>)>,
}

impl AdjointGeneratorValue {
    pub fn norm(&self, h: f64) -> f64 {
        let c = self.head.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let d = h * self.density.sampled_sup(8);
        let mm = self.masses.iter().flat_map(|(_, r)| r.iter()).fold(0.0f64, |m, v| m.max(v.abs()));
        c.max(d).max(mm)
    }

    /// Adds mass rows at coinciding positions.
    pub fn merge_masses(&mut self, tol: f64) {
        let mut merged: Vec<(f64, Vec<f64>)> = Vec::new();
        for (x, r) in self.masses.drain(..) {
            if let Some((_, acc)) = merged.iter_mut().find(|(y, _)| (x - *y).abs() <= tol) {
                acc.iter_mut().zip(&r).for_each(|(a, b)| *a += b);
            } else {
                merged.push((x, r));
            }
        }
        merged.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        self.masses = merged;
    }
}

/// Dual generator applied to `(c, g)` with `g` differentiable on each piece:
/// head `g(0+) + c A_0`, density `g'`, masses `c A_j` at `tau_j`, the jumps of `g` at interior breaks, and `-g(h-)` at `h`.
pub fn apply_adjoint_generator(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    tau: f64,
    f: &DualElement,
) -> AdjointGeneratorValue {
    let n = f.dim();
    let blocks = eval_linearization(model, orbit, tau);
    let row_times = |c: &[f64], b: &DMatrix<f64>| -> Vec<f64> {
        (0..n).map(|col| (0..n).map(|r| c[r] * b[(r, col)]).sum()).collect()
    };
    let g = &f.density;
    let first = g.node_value(0, 0).to_vec();
    let ca0 = row_times(&f.head, &blocks[0]);
    let head: Vec<f64> = first.iter().zip(&ca0).map(|(a, b)| a + b).collect();
    let mut masses = Vec::new();
    for (j, tj) in model.delays().iter().enumerate() {
        masses.push((*tj, row_times(&f.head, &blocks[j + 1])));
    }
    let deg = g.degree();
    for k in 1..g.pieces() {
        let right = g.node_value(k, 0);
        let left = g.node_value(k - 1, deg);
        masses.push((g.breaks[k], right.iter().zip(left).map(|(a, b)| a - b).collect()));
    }
    let last = g.node_value(g.pieces() - 1, deg);
    masses.push((f.h, last.iter().map(|v| -v).collect()));
    let mut out = AdjointGeneratorValue { head, density: g.derivative(), masses };
    out.merge_masses(1e-12 * f.h.max(1.0));
    out
}

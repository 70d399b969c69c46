//! Fixed-step Chebyshev–Lobatto collocation for linear delay equations, many right-hand sides at once.
//!
//! Solves `y'(r) = B_0(r) y(r) + sum_j B_j(r) y(r - lag_j) + f(r)` for `r >= r0` with a prescribed
//! past, keeping the per-step polynomials as dense output.

use crate::cheb::ChebGrid;
use crate::error::{Error, Result};
use crate::prelude::*;
use nalgebra::DMatrix;

pub(crate) trait LinearSystem {
    fn dim(&self) -> usize;
    fn lags(&self) -> &[f64];
    /// Blocks `B_0, ..., B_m` at time `r`.
    fn blocks(&self, r: f64, out: &mut [DMatrix<f64>]);
}

pub(crate) trait History {
    fn cols(&self) -> usize;
    /// Value at `r <= r0` as an `n x cols` matrix.
    fn eval(&self, r: f64, out: &mut DMatrix<f64>);
    /// Starting value at `r0`.
    fn initial(&self, r0: f64, out: &mut DMatrix<f64>) {
        self.eval(r0, out)
    }
}

/// Forcing at `r`; the second argument is the midpoint of the current step and selects the side at jumps.
pub(crate) type Forcing<'f> = &'f dyn Fn(f64, f64, &mut DMatrix<f64>);

pub(crate) struct Dense<'h> {
    pub n: usize,
    pub cols: usize,
    pub r0: f64,
    history: Box<dyn History + 'h>,
    grid: ChebGrid,
    starts: Vec<f64>,
    ends: Vec<f64>,
    vals: Vec<Vec<DMatrix<f64>>>,
}

impl Dense<'_> {
    pub fn eval(&self, r: f64, out: &mut DMatrix<f64>) {
        if r < self.r0 || self.starts.is_empty() {
            self.history.eval(r.min(self.r0), out);
            return;
        }
        let k = self.starts.partition_point(|&a| a <= r).saturating_sub(1).min(self.starts.len() - 1);
        self.eval_step(k, r, out);
    }

    fn eval_step(&self, k: usize, r: f64, out: &mut DMatrix<f64>) {
        let (a, b) = (self.starts[k], self.ends[k]);
        let x = ((2.0 * r - a - b) / (b - a)).clamp(-1.0, 1.0);
        let g = &self.grid;
        out.fill(0.0);
        let mut den = 0.0;
        for i in 0..g.len() {
            let d = x - g.nodes[i];
            if d == 0.0 {
                out.copy_from(&self.vals[k][i]);
                return;
            }
            let w = g.bary[i] / d;
            den += w;
            *out += &self.vals[k][i] * w;
        }
        *out /= den;
    }
}

/// Breakpoints `seed + sum_j k_j lag_j` up to total order `max_order` inside `[lo, hi]`, with their orders.
pub(crate) fn breakpoints(seeds: &[f64], lags: &[f64], max_order: usize, lo: f64, hi: f64) -> Vec<(f64, usize)> {
    let tol = 1e-11 * (hi - lo).abs().max(1.0);
    let mut out: Vec<(f64, usize)> = Vec::new();
    let mut frontier: Vec<f64> = seeds.to_vec();
    for order in 0..=max_order {
        let mut next = Vec::new();
        for &b in &frontier {
            if b > hi + tol {
                continue;
            }
            if b >= lo - tol && !out.iter().any(|(x, _)| (x - b).abs() <= tol) {
                out.push((b, order));
            }
            for &l in lags {
                let c = b + l;
                if c <= hi + tol && !next.iter().any(|x: &f64| (x - c).abs() <= tol) {
                    next.push(c);
                }
            }
        }
        frontier = next;
        if frontier.is_empty() {
            break;
        }
    }
    out.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    out
}

/// Step boundaries on `[r0, r1]` refining every breakpoint gap to steps of at most `dt`.
pub(crate) fn step_mesh(r0: f64, r1: f64, dt: f64, breaks: &[(f64, usize)]) -> Vec<f64> {
    let tol = 1e-11 * (r1 - r0).abs().max(1.0);
    let mut pts = vec![r0];
    for &(b, _) in breaks {
        if b > r0 + tol && b < r1 - tol {
            pts.push(b);
        }
    }
    pts.push(r1);
    let mut mesh = vec![r0];
    for w in pts.windows(2) {
        let gap = w[1] - w[0];
        let m = ((gap / dt) - 1e-9).ceil().max(1.0) as usize;
        for i in 1..=m {
            mesh.push(if i == m { w[1] } else { w[0] + gap * i as f64 / m as f64 });
        }
    }
    mesh
}

pub(crate) fn integrate<'h>(
    sys: &dyn LinearSystem,
    history: Box<dyn History + 'h>,
    forcing: Option<Forcing<'_>>,
    mesh: &[f64],
    order: usize,
) -> Result<Dense<'h>> {
    let n = sys.dim();
    let cols = history.cols();
    let mut y0 = DMatrix::zeros(n, cols);
    history.initial(mesh[0], &mut y0);
    let lags = sys.lags();
    let m = lags.len();
    let r0 = mesh[0];
    let grid = ChebGrid::new(order);
    let p = order;
    let dref = grid.diff_matrix();
    let mut dense = Dense {
        n,
        cols,
        r0,
        history,
        grid: grid.clone(),
        starts: Vec::with_capacity(mesh.len()),
        ends: Vec::with_capacity(mesh.len()),
        vals: Vec::with_capacity(mesh.len()),
    };
    let mut blocks = vec![DMatrix::zeros(n, n); m + 1];
    let mut lagged = DMatrix::zeros(n, cols);
    let mut fv = DMatrix::zeros(n, cols);
    for w in mesh.windows(2) {
        let (a, b) = (w[0], w[1]);
        let scale = 2.0 / (b - a);
        let nodes: Vec<f64> = (0..=p)
            .map(|i| if i == 0 { a } else if i == p { b } else { 0.5 * (a + b) + 0.5 * (b - a) * grid.nodes[i] })
            .collect();
        let mut mat = DMatrix::<f64>::zeros(p * n, p * n);
        let mut rhs = DMatrix::<f64>::zeros(p * n, cols);
        for i in 1..=p {
            let row = (i - 1) * n;
            for k in 1..=p {
                let d = dref[i * (p + 1) + k] * scale;
                for c in 0..n {
                    mat[(row + c, (k - 1) * n + c)] += d;
                }
            }
            sys.blocks(nodes[i], &mut blocks);
            for r in 0..n {
                for c in 0..n {
                    mat[(row + r, row + c)] -= blocks[0][(r, c)];
                }
            }
            let d0 = dref[i * (p + 1)] * scale;
            let mut acc = &y0 * (-d0);
            for j in 1..=m {
                let rr = nodes[i] - lags[j - 1];
                if rr > a + 1e-10 * (b - a) {
                    return Err(Error::InvalidInput(format!(
                        "step {} exceeds the smallest delay {}",
                        b - a,
                        lags[j - 1]
                    )));
                }
                if rr >= a {
                    lagged.copy_from(&y0);
                } else if rr <= r0 {
                    dense.history.eval(rr, &mut lagged);
                } else {
                    dense.eval(rr, &mut lagged);
                }
                acc += &blocks[j] * &lagged;
            }
            if let Some(f) = forcing {
                f(nodes[i], 0.5 * (a + b), &mut fv);
                acc += &fv;
            }
            rhs.view_mut((row, 0), (n, cols)).copy_from(&acc);
        }
        let lu = mat.lu();
        let sol = lu.solve(&rhs).ok_or_else(|| Error::Singular(format!("collocation step at r = {a}")))?;
        let mut vals = Vec::with_capacity(p + 1);
        vals.push(y0.clone());
        for i in 1..=p {
            vals.push(sol.view(((i - 1) * n, 0), (n, cols)).into_owned());
        }
        y0.copy_from(&vals[p]);
        dense.starts.push(a);
        dense.ends.push(b);
        dense.vals.push(vals);
    }
    Ok(dense)
}

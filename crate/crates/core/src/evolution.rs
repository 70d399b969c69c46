//! Forward and adjoint evolution of the linearization along a periodic orbit.
//!
//! The forward operator `U(t, s)` maps history segments; the adjoint `U^sun(s, t)` maps dual
//! elements `(c, g)` backwards. Both are computed with the collocation stepper, the adjoint by
//! integrating the time-reversed transposed equation for the head and rebuilding the density.

use crate::cheb::{gauss_legendre, ChebGrid};
use crate::error::{Error, Result};
use crate::model::DdeModel;
use crate::ops::eval_linearization;
use crate::orbit::PeriodicOrbit;
use crate::prelude::*;
use crate::segment::{dedup_breaks, DualElement, HistorySegment, PwCheb};
use crate::stepper::{breakpoints, integrate, step_mesh, Dense, Forcing, History, LinearSystem};
use nalgebra::DMatrix;

/// Numerical resolution of segments and time stepping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Discretization {
    /// Chebyshev degree of segments on `[-h, 0]`.
    pub mesh: usize,
    /// Largest time step.
    pub dt: f64,
    /// Collocation degree per step.
    pub order: usize,
    /// Samples per window for periodic eigenfunctions.
    pub tau_mesh: usize,
    /// Highest order of propagated breakpoints kept in the step mesh.
    pub break_order: usize,
}

impl Discretization {
    pub const DEFAULT_ORDER: usize = 5;

    pub fn new(mesh: usize, dt: f64) -> Self {
        Discretization { mesh, dt, order: Self::DEFAULT_ORDER, tau_mesh: 64, break_order: 4 }
    }

    pub fn with_order(mut self, order: usize) -> Self {
        self.order = order;
        self
    }

    pub fn with_tau_mesh(mut self, m: usize) -> Self {
        self.tau_mesh = m;
        self
    }

    /// Doubles the segment degree and halves the step.
    pub fn refined(&self) -> Self {
        Discretization { mesh: 2 * self.mesh, dt: 0.5 * self.dt, ..*self }
    }

    pub fn validate(&self, model: &dyn DdeModel) -> Result<()> {
        if self.mesh < 2 {
            return Err(Error::InvalidInput(format!("segment degree {} below 2", self.mesh)));
        }
        if self.order < 1 {
            return Err(Error::InvalidInput("collocation degree must be positive".into()));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidInput(format!("time step {} not positive", self.dt)));
        }
        if let Some(min) = model.delays().iter().copied().reduce(f64::min) {
            if self.dt > min * (1.0 + 1e-12) {
                return Err(Error::InvalidInput(format!("time step {} exceeds the smallest delay {}", self.dt, min)));
            }
        }
        if self.tau_mesh < 4 {
            return Err(Error::InvalidInput(format!("tau mesh {} below 4", self.tau_mesh)));
        }
        Ok(())
    }
}

pub(crate) struct Forward<'a> {
    pub model: &'a dyn DdeModel,
    pub orbit: &'a PeriodicOrbit,
}

impl LinearSystem for Forward<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn lags(&self) -> &[f64] {
        self.model.delays()
    }
    fn blocks(&self, r: f64, out: &mut [DMatrix<f64>]) {
        for (o, b) in out.iter_mut().zip(eval_linearization(self.model, self.orbit, r)) {
            *o = b;
        }
    }
}

/// Transposed equation in reversed time `v = t_ref - u`:
/// `z'(v) = sum_j A_j(t_ref - v + tau_j)^T z(v - tau_j)`.
pub(crate) struct Reversed<'a> {
    pub model: &'a dyn DdeModel,
    pub orbit: &'a PeriodicOrbit,
    pub tref: f64,
}

impl LinearSystem for Reversed<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }
    fn lags(&self) -> &[f64] {
        self.model.delays()
    }
    fn blocks(&self, v: f64, out: &mut [DMatrix<f64>]) {
        let d = self.model.delays();
        for j in 0..out.len() {
            let lag = if j == 0 { 0.0 } else { d[j - 1] };
            let b = eval_linearization(self.model, self.orbit, self.tref - v + lag);
            out[j] = b[j].transpose();
        }
    }
}

pub(crate) struct SegmentsHistory {
    pub r0: f64,
    pub segs: Vec<HistorySegment>,
}

impl History for SegmentsHistory {
    fn cols(&self) -> usize {
        self.segs.len()
    }
    fn eval(&self, r: f64, out: &mut DMatrix<f64>) {
        let n = out.nrows();
        let mut v = vec![0.0; n];
        for (c, s) in self.segs.iter().enumerate() {
            s.eval_into(r - self.r0, &mut v);
            for i in 0..n {
                out[(i, c)] = v[i];
            }
        }
    }
}

/// Cardinal functions times unit vectors; column `node * n + comp`.
pub(crate) struct BasisHistory {
    pub r0: f64,
    pub h: f64,
    pub n: usize,
    pub grid: ChebGrid,
}

impl History for BasisHistory {
    fn cols(&self) -> usize {
        self.n * self.grid.len()
    }
    fn eval(&self, r: f64, out: &mut DMatrix<f64>) {
        let th = (r - self.r0).clamp(-self.h, 0.0);
        let x = 2.0 * th / self.h + 1.0;
        let mut w = vec![0.0; self.grid.len()];
        self.grid.cardinals(x, &mut w);
        out.fill(0.0);
        for (k, wk) in w.iter().enumerate() {
            for c in 0..self.n {
                out[(c, k * self.n + c)] = *wk;
            }
        }
    }
}

/// Starts from `head` with a vanishing past.
struct HeadOnly {
    head: DMatrix<f64>,
}

impl History for HeadOnly {
    fn cols(&self) -> usize {
        self.head.ncols()
    }
    fn eval(&self, _r: f64, out: &mut DMatrix<f64>) {
        out.fill(0.0);
    }
    fn initial(&self, _r0: f64, out: &mut DMatrix<f64>) {
        out.copy_from(&self.head);
    }
}

/// Dense solution of a linear delay equation together with its breakpoints.
pub(crate) struct Solution<'h> {
    pub dense: Dense<'h>,
    pub breaks: Vec<(f64, usize)>,
    pub h: f64,
}

impl Solution<'_> {
    pub fn value(&self, r: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dense.n, self.dense.cols);
        self.dense.eval(r, &mut out);
        out
    }

    /// Segments at `r` with pieces at breakpoints of order at most `max_order`.
    pub fn segments(&self, r: f64, degree: usize, max_order: usize) -> Vec<HistorySegment> {
        let h = self.h;
        let tol = 1e-10 * h;
        let mut br = vec![-h, 0.0];
        for &(b, o) in &self.breaks {
            let th = b - r;
            if o <= max_order && th > -h + tol && th < -tol {
                br.push(th);
            }
        }
        br.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let br = dedup_breaks(br);
        self.sample(r, degree, br)
    }

    /// Single-piece segments at `r`.
    pub fn single_segments(&self, r: f64, degree: usize) -> Vec<HistorySegment> {
        self.sample(r, degree, vec![-self.h, 0.0])
    }

    fn sample(&self, r: f64, degree: usize, br: Vec<f64>) -> Vec<HistorySegment> {
        let (n, cols) = (self.dense.n, self.dense.cols);
        let mut out: Vec<HistorySegment> = (0..cols)
            .map(|_| HistorySegment { h: self.h, f: PwCheb::zeros(n, degree, br.clone()) })
            .collect();
        let mut m = DMatrix::zeros(n, cols);
        let proto = &out[0].f.clone();
        for k in 0..proto.pieces() {
            for j in 0..proto.grid.len() {
                let th = proto.node(k, j);
                self.dense.eval(r + th, &mut m);
                let off = proto.offset(k, j);
                for (c, seg) in out.iter_mut().enumerate() {
                    for i in 0..n {
                        seg.f.values[off + i] = m[(i, c)];
                    }
                }
            }
        }
        out
    }

    /// Nodal matrix of the single-piece resampling at `r`; row `node * n + comp`.
    pub fn nodal_matrix(&self, r: f64, degree: usize) -> DMatrix<f64> {
        let (n, cols) = (self.dense.n, self.dense.cols);
        let grid = ChebGrid::new(degree);
        let mut out = DMatrix::zeros(n * grid.len(), cols);
        let mut m = DMatrix::zeros(n, cols);
        for j in 0..grid.len() {
            let th = if j == degree { 0.0 } else { 0.5 * self.h * (grid.nodes[j] - 1.0) };
            self.dense.eval(r + th, &mut m);
            for i in 0..n {
                out.row_mut(j * n + i).copy_from(&m.row(i));
            }
        }
        out
    }
}

pub(crate) fn solve_linear<'h>(
    sys: &dyn LinearSystem,
    history: Box<dyn History + 'h>,
    forcing: Option<Forcing<'_>>,
    r0: f64,
    r1: f64,
    seeds: &[f64],
    h: f64,
    disc: &Discretization,
) -> Result<Solution<'h>> {
    if r1 < r0 {
        return Err(Error::Domain(format!("cannot integrate from {r0} back to {r1}")));
    }
    let br = breakpoints(seeds, sys.lags(), disc.break_order, r0 - h, r1);
    let mesh = step_mesh(r0, r1, disc.dt, &br);
    let dense = integrate(sys, history, forcing, &mesh, disc.order)?;
    Ok(Solution { dense, breaks: br, h })
}

fn history_seeds(r0: f64, segs: &[HistorySegment]) -> Vec<f64> {
    let mut seeds = vec![r0];
    for s in segs {
        for &b in &s.f.breaks[1..s.f.breaks.len() - 1] {
            if !seeds.iter().any(|x| (x - (r0 + b)).abs() < 1e-12) {
                seeds.push(r0 + b);
            }
        }
    }
    seeds
}

fn check_segments(model: &dyn DdeModel, segs: &[HistorySegment]) -> Result<()> {
    let h = model.max_delay();
    for s in segs {
        if s.dim() != model.dim() {
            return Err(Error::DimensionMismatch { expected: model.dim(), found: s.dim() });
        }
        if (s.h - h).abs() > 1e-12 * h.max(1.0) {
            return Err(Error::InvalidInput(format!("segment horizon {} differs from {}", s.h, h)));
        }
    }
    Ok(())
}

pub(crate) fn forward_solution<'a>(
    model: &'a dyn DdeModel,
    orbit: &'a PeriodicOrbit,
    s: f64,
    t: f64,
    phis: &[HistorySegment],
    forcing: Option<Forcing<'_>>,
    disc: &Discretization,
) -> Result<Solution<'static>> {
    disc.validate(model)?;
    check_segments(model, phis)?;
    let seeds = history_seeds(s, phis);
    let hist = Box::new(SegmentsHistory { r0: s, segs: phis.to_vec() });
    let sys = Forward { model, orbit };
    solve_linear(&sys, hist, forcing, s, t, &seeds, model.max_delay(), disc)
}

/// `U(t, s) phi`.
pub fn propagate(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    s: f64,
    t: f64,
    phi: &HistorySegment,
    disc: &Discretization,
) -> Result<HistorySegment> {
    propagate_many(model, orbit, s, t, core::slice::from_ref(phi), disc).map(|mut v| v.remove(0))
}

/// `U(t, s)` applied to several segments at once.
pub fn propagate_many(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    s: f64,
    t: f64,
    phis: &[HistorySegment],
    disc: &Discretization,
) -> Result<Vec<HistorySegment>> {
    let sol = forward_solution(model, orbit, s, t, phis, None, disc)?;
    Ok(sol.segments(t, phis[0].degree().max(disc.mesh), 3))
}

/// Solution segment at `t` of `y' = L(r) y_r + f(r)` with `y_s = phi`.
pub fn propagate_inhomogeneous(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    s: f64,
    t: f64,
    phi: &HistorySegment,
    forcing: &dyn Fn(f64) -> Vec<f64>,
    disc: &Discretization,
) -> Result<HistorySegment> {
    let f = |r: f64, _mid: f64, out: &mut DMatrix<f64>| {
        let v = forcing(r);
        for i in 0..v.len() {
            out[(i, 0)] = v[i];
        }
    };
    let sol = forward_solution(model, orbit, s, t, core::slice::from_ref(phi), Some(&f), disc)?;
    Ok(sol.segments(t, phi.degree().max(disc.mesh), 3).remove(0))
}

/// Discretized evolution operator on single-piece nodal vectors of degree `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct MonodromyMatrix {
    pub matrix: DMatrix<f64>,
    pub base: f64,
    pub period: f64,
    pub dim: usize,
    pub h: f64,
    pub disc: Discretization,
}

impl MonodromyMatrix {
    pub fn size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn to_segment(&self, v: &[f64]) -> HistorySegment {
        HistorySegment::from_nodal(self.dim, self.h, self.disc.mesh, v.to_vec())
    }

    pub fn from_segment(&self, s: &HistorySegment) -> Vec<f64> {
        if s.degree() == self.disc.mesh {
            return s.to_single_nodal();
        }
        let g = ChebGrid::new(self.disc.mesh);
        let n = self.dim;
        let mut out = vec![0.0; g.len() * n];
        for j in 0..g.len() {
            let th = if j == self.disc.mesh { 0.0 } else { 0.5 * self.h * (g.nodes[j] - 1.0) };
            s.eval_into(th, &mut out[j * n..(j + 1) * n]);
        }
        out
    }
}

fn basis_matrix(
    sys: &dyn LinearSystem,
    n: usize,
    h: f64,
    r0: f64,
    r1: f64,
    disc: &Discretization,
) -> Result<DMatrix<f64>> {
    let hist = Box::new(BasisHistory { r0, h, n, grid: ChebGrid::new(disc.mesh) });
    let sol = solve_linear(sys, hist, None, r0, r1, &[r0], h, disc)?;
    Ok(sol.nodal_matrix(r1, disc.mesh))
}

/// Matrix of `U(t, s)` on nodal vectors.
pub fn evolution_matrix(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    s: f64,
    t: f64,
    disc: &Discretization,
) -> Result<DMatrix<f64>> {
    disc.validate(model)?;
    basis_matrix(&Forward { model, orbit }, model.dim(), model.max_delay(), s, t, disc)
}

/// Monodromy `U(s + T, s)`.
pub fn monodromy_matrix(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    s: f64,
    disc: &Discretization,
) -> Result<MonodromyMatrix> {
    let m = evolution_matrix(model, orbit, s, s + orbit.period, disc)?;
    Ok(MonodromyMatrix { matrix: m, base: s, period: orbit.period, dim: model.dim(), h: model.max_delay(), disc: *disc })
}

/// Monodromy of the reversed transposed equation started at `t_ref`, over `v` in `[0, T]`.
pub fn reversed_monodromy(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    tref: f64,
    disc: &Discretization,
) -> Result<MonodromyMatrix> {
    disc.validate(model)?;
    let sys = Reversed { model, orbit, tref };
    let m = basis_matrix(&sys, model.dim(), model.max_delay(), 0.0, orbit.period, disc)?;
    Ok(MonodromyMatrix { matrix: m, base: tref, period: orbit.period, dim: model.dim(), h: model.max_delay(), disc: *disc })
}

pub(crate) fn reversed_solution(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    tref: f64,
    span: f64,
    zetas: &[HistorySegment],
    disc: &Discretization,
) -> Result<Solution<'static>> {
    disc.validate(model)?;
    check_segments(model, zetas)?;
    let hist = Box::new(SegmentsHistory { r0: 0.0, segs: zetas.to_vec() });
    let sys = Reversed { model, orbit, tref };
    solve_linear(&sys, hist, None, 0.0, span, &history_seeds(0.0, zetas), model.max_delay(), disc)
}

/// Dual element at time `u` represented by a reversed-time segment `zeta`:
/// head `zeta(0)`, density `g(theta) = sum_{tau_j >= theta} zeta(theta - tau_j)^T A_j(u - theta + tau_j)`.
pub fn dual_from_reversed(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    u: f64,
    zeta: &HistorySegment,
    degree: usize,
) -> DualElement {
    let n = model.dim();
    let h = model.max_delay();
    let d = model.delays();
    let mut br = vec![0.0, h];
    br.extend(d.iter().copied().filter(|&x| x > 0.0 && x < h));
    br.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let br = dedup_breaks(br);
    let mut zv = vec![0.0; n];
    let density = PwCheb::from_fn(n, degree, br.clone(), |k, th, out| {
        let mid = 0.5 * (br[k] + br[k + 1]);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &tj) in d.iter().enumerate() {
            if mid > tj {
                continue;
            }
            zeta.eval_into(th - tj, &mut zv);
            let a = &eval_linearization(model, orbit, u - th + tj)[j + 1];
            for c in 0..n {
                out[c] += (0..n).map(|r| zv[r] * a[(r, c)]).sum::<f64>();
            }
        }
    });
    DualElement { h, head: zeta.head(), density }
}

/// Forcing term of the backward dual equation, given as a functional-valued function of time.
pub trait DualForcing {
    fn head(&self, tau: f64) -> Vec<f64>;
    /// Density value at `theta`; `right` picks the piece starting at a break.
    fn density(&self, tau: f64, theta: f64, right: bool) -> Vec<f64>;
    /// Interior breaks of the density in `theta`.
    fn density_breaks(&self) -> Vec<f64> {
        Vec::new()
    }
    /// Fixed positions of point masses in `(0, h]`.
    fn mass_positions(&self) -> Vec<f64> {
        Vec::new()
    }
    /// Mass rows at `tau`, one per position.
    fn masses(&self, _tau: f64) -> Vec<Vec<f64>> {
        Vec::new()
    }
}

/// `U^sun(s, t) f` for `s <= t`.
pub fn adjoint_propagate(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    s: f64,
    t: f64,
    f: &DualElement,
    disc: &Discretization,
) -> Result<DualElement> {
    adjoint_solve(model, orbit, s, t, f, None, disc)
}

/// `U^sun(s, t) psi - int_s^t U^sun(s, tau) f(tau) d tau`, the solution at `s` of
/// `du/ds = -A^*(s) u + f(s)` with `u(t) = psi`.
pub fn adjoint_voc(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    s: f64,
    t: f64,
    psi: &DualElement,
    forcing: &dyn DualForcing,
    disc: &Discretization,
) -> Result<DualElement> {
    adjoint_solve(model, orbit, s, t, psi, Some(forcing), disc)
}

const DIAGONAL_NODES: usize = 16;

fn adjoint_solve(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    s: f64,
    t: f64,
    psi: &DualElement,
    forcing: Option<&dyn DualForcing>,
    disc: &Discretization,
) -> Result<DualElement> {
    disc.validate(model)?;
    let n = model.dim();
    let h = model.max_delay();
    if psi.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: psi.dim() });
    }
    if (psi.h - h).abs() > 1e-12 * h.max(1.0) {
        return Err(Error::InvalidInput(format!("dual horizon {} differs from {}", psi.h, h)));
    }
    if t < s {
        return Err(Error::Domain(format!("adjoint evolution needs s <= t, got s = {s}, t = {t}")));
    }
    let delays = model.delays().to_vec();
    // Rounding in `t - s` must not split off slivers next to delay-aligned breaks.
    let mut span = t - s;
    for &d in delays.iter().chain(core::iter::once(&h)) {
        let k = (span / d).round();
        if k >= 1.0 && (span - k * d).abs() <= 1e-13 * span.max(1.0) {
            span = k * d;
        }
    }
    let (gl_x, gl_w) = gauss_legendre(DIAGONAL_NODES);
    let fbreaks = forcing.map(|f| f.density_breaks()).unwrap_or_default();
    let fmass = forcing.map(|f| f.mass_positions()).unwrap_or_default();

    // Integral of `w -> f_g(t - v + w, w)` over `[0, min(v, h)]`, split at density breaks.
    let diag_integral = |v: f64, out: &mut [f64]| {
        let f = forcing.unwrap();
        let top = v.min(h);
        let mut cuts = vec![0.0];
        cuts.extend(fbreaks.iter().copied().filter(|&b| b > 0.0 && b < top));
        cuts.push(top);
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= 0.0 {
                continue;
            }
            let mid = 0.5 * (a + b);
            for (x, wt) in gl_x.iter().zip(&gl_w) {
                let ww = mid + 0.5 * (b - a) * x;
                let val = f.density(t - v + ww, ww, false);
                for i in 0..n {
                    out[i] += 0.5 * (b - a) * wt * val[i];
                }
            }
        }
    };

    let rhs = |v: f64, mid: f64, out: &mut DMatrix<f64>| {
        out.fill(0.0);
        if mid < h {
            let p = psi.density.locate(mid, false);
            let mut g = vec![0.0; n];
            psi.density.eval_in_piece(p, v.min(h), &mut g);
            for i in 0..n {
                out[(i, 0)] += g[i];
            }
        }
        if let Some(f) = forcing {
            let c = f.head(t - v);
            let mut acc = vec![0.0; n];
            diag_integral(v, &mut acc);
            for (k, &th) in fmass.iter().enumerate() {
                if mid > th {
                    let rows = f.masses(t - v + th);
                    for i in 0..n {
                        acc[i] += rows[k][i];
                    }
                }
            }
            for i in 0..n {
                out[(i, 0)] -= c[i] + acc[i];
            }
        }
    };

    let mut seeds = vec![0.0, h];
    seeds.extend(psi.density.breaks.iter().copied());
    seeds.extend(fmass.iter().copied());
    seeds.extend(fbreaks.iter().copied());
    let head = DMatrix::from_column_slice(n, 1, &psi.head);
    let sys = Reversed { model, orbit, tref: t };
    let hist = Box::new(HeadOnly { head });
    let sol = solve_linear(&sys, hist, Some(&rhs), 0.0, span, &seeds, h, disc)?;
    let z = |v: f64| sol.value(v);

    let mut br = vec![0.0, h];
    let clip = |x: f64, br: &mut Vec<f64>| {
        if x > 0.0 && x < h {
            br.push(x);
        }
    };
    for &tj in &delays {
        clip(tj, &mut br);
        clip(tj - span, &mut br);
        for &(b, o) in &sol.breaks {
            if o <= 2 {
                clip(b - span + tj, &mut br);
            }
        }
    }
    clip(h - span, &mut br);
    for &b in &psi.density.breaks {
        clip(b - span, &mut br);
    }
    for &th in &fmass {
        clip(th, &mut br);
        clip(th - span, &mut br);
    }
    for &b in &fbreaks {
        clip(b, &mut br);
        clip(b - span, &mut br);
    }
    br.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let br = dedup_breaks(br);
    let tol = 1e-12 * h.max(1.0);

    let density = PwCheb::from_fn(n, disc.mesh, br.clone(), |k, th, out| {
        let mid = 0.5 * (br[k] + br[k + 1]);
        out.iter_mut().for_each(|o| *o = 0.0);
        for (j, &tj) in delays.iter().enumerate() {
            if mid > tj || mid - tj + span <= 0.0 {
                continue;
            }
            let v = (span + th - tj).max(0.0);
            let zv = z(v);
            let a = &eval_linearization(model, orbit, s - th + tj)[j + 1];
            for c in 0..n {
                out[c] += (0..n).map(|r| zv[(r, 0)] * a[(r, c)]).sum::<f64>();
            }
        }
        if mid + span < h {
            let p = psi.density.locate(mid + span, false);
            let mut g = vec![0.0; n];
            psi.density.eval_in_piece(p, (th + span).min(h), &mut g);
            for c in 0..n {
                out[c] += g[c];
            }
        }
        if let Some(f) = forcing {
            // - int_s^{min(t, s + h - theta)} f_g(tau, tau - s + theta) d tau
            let top = span.min(h - th);
            if top > tol {
                let mut cuts = vec![0.0];
                for &b in &fbreaks {
                    let x = b - th;
                    if x > 0.0 && x < top {
                        cuts.push(x);
                    }
                }
                cuts.push(top);
                cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
                for w in cuts.windows(2) {
                    let (a, b) = (w[0], w[1]);
                    let mm = 0.5 * (a + b);
                    for (x, wt) in gl_x.iter().zip(&gl_w) {
                        let e = mm + 0.5 * (b - a) * x;
                        let val = f.density(s + e, e + th, false);
                        for c in 0..n {
                            out[c] -= 0.5 * (b - a) * wt * val[c];
                        }
                    }
                }
            }
            for (kk, &thk) in fmass.iter().enumerate() {
                let lag = thk - mid;
                if lag >= 0.0 && lag <= span {
                    let rows = f.masses(s + thk - th);
                    for c in 0..n {
                        out[c] -= rows[kk][c];
                    }
                }
            }
        }
    });
    let zs = z(span);
    Ok(DualElement { h, head: (0..n).map(|i| zs[(i, 0)]).collect(), density })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Linear, Manufactured};
    use crate::orbit::orbit_derivative_segment;
    use crate::segment::pairing;
    use core::f64::consts::{FRAC_PI_2, PI};

    fn disc() -> Discretization {
        Discretization::new(32, PI / 40.0)
    }

    #[test]
    fn trivial_solution_is_transported() {
        let m = Manufactured::new(1.0);
        let o = PeriodicOrbit::manufactured();
        let phi = orbit_derivative_segment(&o, 0.0, FRAC_PI_2, 32);
        let out = propagate(&m, &o, 0.0, 2.5, &phi, &disc()).unwrap();
        for th in [-1.5, -0.77, -0.1, 0.0] {
            let err = (out.eval(th).unwrap()[0] - (2.5 + th).cos()).abs();
            assert!(err < 1e-8, "{err}");
        }
    }

    #[test]
    fn scalar_constant_coefficient_matches_method_of_steps() {
        // y' = -y(t - 1), y = 1 on [-1, 0]: y = 1 - t on [0, 1], 1 - t + (t - 1)^2 / 2 on [1, 2].
        let m = Linear::new(vec![0.0, -1.0], vec![1.0], 1.0);
        let o = PeriodicOrbit::manufactured();
        let phi = HistorySegment::constant(&[1.0], 1.0, 16);
        let d = Discretization::new(16, 0.1);
        let out = propagate(&m, &o, 0.0, 2.0, &phi, &d).unwrap();
        for th in [-0.9, -0.5, 0.0] {
            let t: f64 = 2.0 + th;
            let exact = 1.0 - t + 0.5 * (t - 1.0).powi(2);
            assert!((out.eval(th).unwrap()[0] - exact).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_linear_part_adjoint_is_transpose() {
        let m = Linear::new(vec![0.0, 0.0], vec![1.0], 1.0);
        let o = PeriodicOrbit::manufactured();
        let d = Discretization::new(12, 0.05);
        let f = DualElement::new(vec![0.4], 1.0, 12, vec![0.0, 1.0], |_, x, out| out[0] = (3.0 * x).sin());
        let g = adjoint_propagate(&m, &o, 0.0, 2.0, &f, &d).unwrap();
        let mono = monodromy_matrix(&m, &o, 0.0, &d).unwrap();
        let size = mono.size();
        let mut wf = vec![0.0; size];
        let mut wg = vec![0.0; size];
        for k in 0..size {
            let mut e = vec![0.0; size];
            e[k] = 1.0;
            let seg = mono.to_segment(&e);
            wf[k] = pairing(&f, &seg).unwrap();
            wg[k] = pairing(&g, &seg).unwrap();
        }
        let _ = &mono;
        let mt = evolution_matrix(&m, &o, 0.0, 2.0, &d).unwrap().transpose();
        for k in 0..size {
            let v: f64 = (0..size).map(|i| mt[(k, i)] * wf[i]).sum();
            assert!((v - wg[k]).abs() < 1e-10, "{k}: {v} vs {}", wg[k]);
        }
    }

    #[test]
    fn adjoint_pairing_is_preserved() {
        let m = Manufactured::new(1.0);
        let o = PeriodicOrbit::manufactured();
        let d = disc();
        let h = FRAC_PI_2;
        let f = DualElement::new(vec![0.3], h, 32, vec![0.0, h], |_, x, out| out[0] = (x - 0.4).cos());
        let phi = HistorySegment::from_fn(1, h, 32, |th| vec![(2.0 * th).sin() + 0.5]);
        let spans = [(0.3, 0.3 + PI / 80.0), (0.3, 1.1), (0.3, 2.0), (0.3, 2.5), (0.3, 3.5), (0.3, 0.3 + 2.0 * PI)];
        for (s, t) in spans.into_iter().chain([(3.4, 3.4 + h), (3.331, 3.331 + h)]) {
            let lhs = pairing(&f, &propagate(&m, &o, s, t, &phi, &d).unwrap()).unwrap();
            let rhs = pairing(&adjoint_propagate(&m, &o, s, t, &f, &d).unwrap(), &phi).unwrap();
            assert!((lhs - rhs).abs() < 1e-8 * lhs.abs().max(1.0), "{t}: {lhs} vs {rhs}");
        }
    }

    struct CosineForcing<'a> {
        model: &'a Manufactured,
        orbit: &'a PeriodicOrbit,
    }

    impl CosineForcing<'_> {
        fn state(s: f64) -> DualElement {
            DualElement::new(vec![s.cos()], FRAC_PI_2, 32, vec![0.0, FRAC_PI_2], |_, _, out| out[0] = 0.0)
        }
        fn generator(&self, s: f64) -> crate::ops::AdjointGeneratorValue {
            crate::ops::apply_adjoint_generator(self.model, self.orbit, s, &Self::state(s))
        }
    }

    impl DualForcing for CosineForcing<'_> {
        fn head(&self, tau: f64) -> Vec<f64> {
            vec![-tau.sin() + self.generator(tau).head[0]]
        }
        fn density(&self, tau: f64, theta: f64, _right: bool) -> Vec<f64> {
            vec![self.generator(tau).density.eval(theta)[0]]
        }
        fn mass_positions(&self) -> Vec<f64> {
            vec![FRAC_PI_2]
        }
        fn masses(&self, tau: f64) -> Vec<Vec<f64>> {
            vec![vec![self.generator(tau).masses.iter().map(|(_, r)| r[0]).sum()]]
        }
    }

    #[test]
    fn forced_adjoint_recovers_state_across_mass_crossings() {
        let o = PeriodicOrbit::manufactured();
        for kappa in [0.0, 1.0] {
            let m = Manufactured::new(kappa);
            let f = CosineForcing { model: &m, orbit: &o };
            let (s, t) = (0.2, 2.7);
            let got = adjoint_voc(&m, &o, s, t, &CosineForcing::state(t), &f, &disc()).unwrap();
            assert!((got.head[0] - s.cos()).abs() < 1e-8, "{kappa}: {}", got.head[0]);
            for th in [0.1, 0.8, 1.5] {
                assert!(got.density.eval(th)[0].abs() < 1e-8);
            }
        }
    }
}

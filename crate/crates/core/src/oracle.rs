//! Brute-force references: a nonlinear delay simulator, an ODE variational monodromy,
//! and finite-difference checks of model derivatives.

use crate::error::{Error, Result};
use crate::model::{DdeModel, OdeRhs};
use crate::orbit::PeriodicOrbit;
use crate::prelude::*;
use crate::segment::HistorySegment;
use nalgebra::DMatrix;
use num_complex::Complex64;

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A: [[f64; 6]; 7] = [
    [0.0; 6],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

#[derive(Debug, Clone)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_step: Option<f64>,
    pub max_steps: usize,
    /// Highest order of propagated breakpoints `sum_j k_j tau_j` the stepper lands on.
    pub discontinuity_order: usize,
    /// States with a component beyond this bound count as blow-up.
    pub blow_up: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions { rtol: 1e-10, atol: 1e-12, max_step: None, max_steps: 5_000_000, discontinuity_order: 3, blow_up: 1e10 }
    }
}

/// Accepted steps of a simulation with Dormand–Prince dense output; the initial segment covers `t < 0`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    initial: HistorySegment,
    dense: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn dim(&self) -> usize {
        self.initial.dim()
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    fn step_of(&self, t: f64) -> usize {
        self.times.partition_point(|&s| s <= t).saturating_sub(1).min(self.times.len().saturating_sub(2))
    }

    fn eval_unchecked(&self, t: f64, out: &mut [f64]) {
        if t <= 0.0 || self.times.len() < 2 {
            self.initial.eval_into(t.min(0.0), out);
            return;
        }
        let k = self.step_of(t);
        let n = self.dim();
        let h = self.times[k + 1] - self.times[k];
        let th = (t - self.times[k]) / h;
        let r = &self.dense[k];
        let th1 = 1.0 - th;
        for i in 0..n {
            out[i] = r[i] + th * (r[n + i] + th1 * (r[2 * n + i] + th * (r[3 * n + i] + th1 * r[4 * n + i])));
        }
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let tol = 1e-12 * self.end().abs().max(1.0);
        if t < -self.initial.h - tol || t > self.end() + tol {
            return Err(Error::Domain(format!("t = {t} outside the simulated interval")));
        }
        self.eval_unchecked(t, out);
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }

    /// Time derivative of the dense output (of the initial segment for `t <= 0`).
    pub fn derivative(&self, t: f64) -> Result<Vec<f64>> {
        let n = self.dim();
        if t <= 0.0 || self.times.len() < 2 {
            return Ok(self.initial.derivative().f.eval(t.max(-self.initial.h).min(0.0)));
        }
        if t > self.end() * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::Domain(format!("t = {t} outside the simulated interval")));
        }
        let k = self.step_of(t);
        let h = self.times[k + 1] - self.times[k];
        let th = (t - self.times[k]) / h;
        let r = &self.dense[k];
        let mut out = vec![0.0; n];
        for i in 0..n {
            let a = r[3 * n + i] + (1.0 - th) * r[4 * n + i];
            let da = -r[4 * n + i];
            let b = r[2 * n + i] + th * a;
            let db = a + th * da;
            let c = r[n + i] + (1.0 - th) * b;
            let dc = -b + (1.0 - th) * db;
            out[i] = (c + th * dc) / h;
        }
        Ok(out)
    }

    /// `x_t` resampled as a single-piece segment on `[-h, 0]`.
    pub fn segment(&self, t: f64, h: f64, degree: usize) -> Result<HistorySegment> {
        if t - h < -self.initial.h - 1e-12 || t > self.end() + 1e-12 {
            return Err(Error::Domain(format!("segment at t = {t} not covered")));
        }
        Ok(HistorySegment::from_fn_pieces(self.dim(), h, degree, vec![-h, 0.0], |_, th, out| {
            self.eval_unchecked(t + th, out)
        }))
    }

    /// Max of `|x'(t) - F(x_t)|` at `samples` points per step over `[t0, t1]`, skipping breakpoints.
    pub fn defect(&self, model: &dyn DdeModel, t0: f64, t1: f64, samples: usize) -> Result<f64> {
        let n = model.dim();
        let mut args = vec![0.0; model.n_args()];
        let mut f = vec![0.0; n];
        let mut worst = 0.0f64;
        for k in 0..self.times.len() - 1 {
            let (a, b) = (self.times[k], self.times[k + 1]);
            if b < t0 || a > t1 {
                continue;
            }
            for s in 1..=samples {
                let t = a + (b - a) * s as f64 / (samples + 1) as f64;
                self.eval_unchecked(t, &mut args[..n]);
                for (j, tau) in model.delays().iter().enumerate() {
                    self.eval_unchecked(t - tau, &mut args[(j + 1) * n..(j + 2) * n]);
                }
                model.rhs(&args, &mut f);
                let d = self.derivative(t)?;
                worst = d.iter().zip(&f).fold(worst, |m, (x, y)| m.max((x - y).abs()));
            }
        }
        Ok(worst)
    }
}

pub fn simulate(model: &dyn DdeModel, initial: &HistorySegment, t_end: f64) -> Result<Trajectory> {
    simulate_with(model, initial, t_end, &SimOptions::default())
}

pub fn simulate_with(model: &dyn DdeModel, initial: &HistorySegment, t_end: f64, opts: &SimOptions) -> Result<Trajectory> {
    let n = model.dim();
    if initial.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: initial.dim() });
    }
    if !(t_end > 0.0) {
        return Err(Error::InvalidInput("t_end must be positive".into()));
    }
    let delays = model.delays().to_vec();
    if delays.iter().any(|&d| d > initial.h * (1.0 + 1e-12)) {
        return Err(Error::InvalidInput("initial segment shorter than the largest delay".into()));
    }
    let min_delay = delays.iter().copied().fold(f64::INFINITY, f64::min);
    let mut h_cap = opts.max_step.unwrap_or(f64::INFINITY).min(min_delay).min(t_end);
    if !h_cap.is_finite() {
        h_cap = t_end;
    }
    let breaks = propagated_breaks(&delays, opts.discontinuity_order, t_end);

    let mut traj = Trajectory { times: vec![0.0], states: vec![initial.head()], initial: initial.clone(), dense: Vec::new() };
    let m = delays.len();
    let mut args = vec![0.0; n * (m + 1)];
    let mut k = vec![vec![0.0; n]; 7];
    let mut stage = vec![0.0; n];
    let mut y = initial.head();
    let mut t = 0.0;
    let rhs_at = |traj: &Trajectory, s: f64, state: &[f64], args: &mut [f64], out: &mut [f64]| {
        args[..n].copy_from_slice(state);
        for (j, tau) in delays.iter().enumerate() {
            traj.eval_unchecked(s - tau, &mut args[(j + 1) * n..(j + 2) * n]);
        }
        model.rhs(args, out);
    };
    rhs_at(&traj, t, &y, &mut args, &mut k[0]);
    let scale0 = y.iter().fold(1.0f64, |a, v| a.max(v.abs()));
    let mut h = (1e-3 * scale0).min(h_cap).min(0.01 * t_end.max(1.0));
    let mut next_break = 0;
    let mut steps = 0;
    let mut y_new = vec![0.0; n];
    let mut err = vec![0.0; n];
    while t < t_end {
        steps += 1;
        if steps > opts.max_steps {
            return Err(Error::StepFailure { t });
        }
        while next_break < breaks.len() && breaks[next_break] <= t * (1.0 + 1e-14) + 1e-14 {
            next_break += 1;
        }
        let target = breaks.get(next_break).copied().unwrap_or(t_end).min(t_end);
        let mut step = h.min(h_cap);
        let mut landing = false;
        if t + step >= target - 1e-12 * target.abs().max(1.0) {
            step = target - t;
            landing = true;
        } else if t + 1.5 * step > target {
            step = 0.5 * (target - t);
        }
        if step <= 1e-14 * t.abs().max(1.0) {
            return Err(Error::StepFailure { t });
        }
        // The stored steps end at `t`, and `step <= min delay` keeps every lagged time at or before `t`.
        for s in 1..7 {
            for i in 0..n {
                let mut acc = y[i];
                for (j, kj) in k.iter().enumerate().take(s) {
                    acc += step * A[s][j] * kj[i];
                }
                stage[i] = acc;
            }
            let (before, after) = k.split_at_mut(s);
            let _ = before;
            rhs_at(&traj, t + C[s] * step, &stage, &mut args, &mut after[0]);
            if s == 6 {
                y_new.copy_from_slice(&stage);
            }
        }
        let mut sq = 0.0;
        for i in 0..n {
            err[i] = step * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
            let sc = opts.atol + opts.rtol * y[i].abs().max(y_new[i].abs());
            sq += (err[i] / sc) * (err[i] / sc);
        }
        let e = (sq / n as f64).sqrt();
        if !e.is_finite() {
            h = 0.25 * step;
            continue;
        }
        if e <= 1.0 {
            let mut r = vec![0.0; 5 * n];
            for i in 0..n {
                let dy = y_new[i] - y[i];
                r[i] = y[i];
                r[n + i] = dy;
                r[2 * n + i] = step * k[0][i] - dy;
                r[3 * n + i] = dy - step * k[6][i] - r[2 * n + i];
                r[4 * n + i] = step * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>();
            }
            t = if landing { target } else { t + step };
            traj.times.push(t);
            traj.states.push(y_new.clone());
            traj.dense.push(r);
            y.copy_from_slice(&y_new);
            if y.iter().any(|v| !v.is_finite() || v.abs() > opts.blow_up) {
                return Err(Error::BlowUp { t });
            }
            let k6 = k[6].clone();
            k[0].copy_from_slice(&k6);
            let fac = if e == 0.0 { 5.0 } else { (0.9 * e.powf(-0.2)).clamp(0.2, 5.0) };
            h = step * fac;
            if landing {
                // Recompute the slope after a breakpoint where the right-hand side may jump.
                rhs_at(&traj, t, &y, &mut args, &mut k[0]);
            }
        } else {
            h = step * (0.9 * e.powf(-0.2)).clamp(0.1, 0.9);
        }
    }
    Ok(traj)
}

fn propagated_breaks(delays: &[f64], order: usize, t_end: f64) -> Vec<f64> {
    let mut out = vec![0.0];
    let mut frontier = vec![0.0];
    for _ in 0..order {
        let mut next = Vec::new();
        for &b in &frontier {
            for &d in delays {
                let c = b + d;
                if c <= t_end && !next.iter().any(|x: &f64| (x - c).abs() < 1e-12) {
                    next.push(c);
                }
            }
        }
        out.extend(next.iter().copied());
        frontier = next;
    }
    out.sort_by(|a, b| a.partial_cmp(b).unwrap());
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    out.retain(|&b| b > 0.0);
    out
}

/// Upward crossings of `x_component = level` in `[t_from, end]`, located by bisection on the dense output.
pub fn upward_crossings(traj: &Trajectory, component: usize, level: f64, t_from: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let mut buf = vec![0.0; traj.dim()];
    let mut value = |t: f64| {
        traj.eval_unchecked(t, &mut buf);
        buf[component] - level
    };
    for k in 0..traj.times.len() - 1 {
        let (a, b) = (traj.times[k], traj.times[k + 1]);
        if b < t_from {
            continue;
        }
        let a = a.max(t_from);
        let sub = 4;
        for s in 0..sub {
            let (mut lo, mut hi) = (a + (b - a) * s as f64 / sub as f64, a + (b - a) * (s + 1) as f64 / sub as f64);
            let (fl, fh) = (value(lo), value(hi));
            if !(fl < 0.0 && fh >= 0.0) {
                continue;
            }
            for _ in 0..60 {
                let mid = 0.5 * (lo + hi);
                if value(mid) < 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            out.push(0.5 * (lo + hi));
        }
    }
    out
}

/// Mean of one component over `[t0, t1]` by the trapezoidal rule on a uniform grid.
pub fn time_average(traj: &Trajectory, component: usize, t0: f64, t1: f64, samples: usize) -> f64 {
    let mut buf = vec![0.0; traj.dim()];
    let mut acc = 0.0;
    for i in 0..=samples {
        traj.eval_unchecked(t0 + (t1 - t0) * i as f64 / samples as f64, &mut buf);
        let w = if i == 0 || i == samples { 0.5 } else { 1.0 };
        acc += w * buf[component];
    }
    acc / samples as f64
}

/// Return map of a simulated attractor: crossing times and the number of crossings per period.
#[derive(Debug, Clone)]
pub struct PoincareReturn {
    pub crossings: Vec<f64>,
    pub returns: usize,
    pub period: f64,
    /// Largest mismatch of the state segments `x_c` at crossings `returns` apart.
    pub mismatch: f64,
}

/// Finds the smallest number of section crossings after which the delay state repeats within `tol`.
pub fn poincare_period(
    traj: &Trajectory,
    component: usize,
    t_from: f64,
    h: f64,
    max_returns: usize,
    tol: f64,
) -> Option<PoincareReturn> {
    let level = time_average(traj, component, t_from, traj.end(), 4000);
    let crossings: Vec<f64> = upward_crossings(traj, component, level, t_from).into_iter().filter(|&c| c - h >= t_from).collect();
    let n = traj.dim();
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    for p in 1..=max_returns {
        if crossings.len() < 2 * p + 1 {
            return None;
        }
        let mut worst = 0.0f64;
        let start = crossings.len() - p - 1 - p.min(crossings.len() - p - 1);
        for i in start..crossings.len() - p {
            for s in 0..=32 {
                let th = -h * s as f64 / 32.0;
                traj.eval_unchecked(crossings[i] + th, &mut a);
                traj.eval_unchecked(crossings[i + p] + th, &mut b);
                worst = a.iter().zip(&b).fold(worst, |m, (x, y)| m.max((x - y).abs()));
            }
        }
        if worst <= tol {
            let last = crossings.len() - 1;
            let period = (crossings[last] - crossings[last - p]) / 1.0;
            return Some(PoincareReturn { crossings, returns: p, period, mismatch: worst });
        }
    }
    None
}

/// Trigonometric fit of one simulated period `[t0, t0 + period]`.
pub fn orbit_from_trajectory(traj: &Trajectory, t0: f64, period: f64, harmonics: usize) -> Result<PeriodicOrbit> {
    if t0 < 0.0 || t0 + period > traj.end() + 1e-12 {
        return Err(Error::Domain("requested period not covered by the trajectory".into()));
    }
    Ok(PeriodicOrbit::from_fn(traj.dim(), period, harmonics, t0, |t| {
        let mut v = vec![0.0; traj.dim()];
        traj.eval_unchecked(t, &mut v);
        v
    }))
}

fn segment_distance(traj: &Trajectory, orbit: &PeriodicOrbit, t: f64, shift: f64, h: f64, samples: usize) -> f64 {
    let n = traj.dim();
    let mut x = vec![0.0; n];
    let mut g = vec![0.0; n];
    let mut worst = 0.0f64;
    for s in 0..=samples {
        let th = -h * s as f64 / samples as f64;
        traj.eval_unchecked(t + th, &mut x);
        orbit.eval_deriv(t + shift + th, 0, &mut g);
        worst = x.iter().zip(&g).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    worst
}

/// Asymptotic phase: the shift minimizing `||x_t - gamma_{t + shift}||` at time `t`.
pub fn asymptotic_phase(traj: &Trajectory, orbit: &PeriodicOrbit, t: f64, h: f64) -> f64 {
    let period = orbit.period;
    let grid = 720;
    let mut best = (f64::INFINITY, 0.0);
    for i in 0..grid {
        let s = period * i as f64 / grid as f64;
        let d = segment_distance(traj, orbit, t, s, h, 32);
        if d < best.0 {
            best = (d, s);
        }
    }
    let (mut lo, mut hi) = (best.1 - period / grid as f64, best.1 + period / grid as f64);
    let g = 0.5 * (5.0f64.sqrt() - 1.0);
    for _ in 0..80 {
        let a = hi - g * (hi - lo);
        let b = lo + g * (hi - lo);
        if segment_distance(traj, orbit, t, a, h, 64) < segment_distance(traj, orbit, t, b, h, 64) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

/// Per-period contraction `(d_K / d_0)^{1/K}` of `d_k = ||x_{t0 + kT} - gamma_{t0 + kT + phase}||`.
pub fn decay_rate(traj: &Trajectory, orbit: &PeriodicOrbit, t0: f64, periods: usize, h: f64) -> Result<f64> {
    let t1 = t0 + periods as f64 * orbit.period;
    if t1 > traj.end() || t0 - h < -traj.initial.h {
        return Err(Error::Domain("decay window not covered by the trajectory".into()));
    }
    let phase = asymptotic_phase(traj, orbit, traj.end(), h);
    let d0 = segment_distance(traj, orbit, t0, phase, h, 64);
    let d1 = segment_distance(traj, orbit, t1, phase, h, 64);
    Ok((d1 / d0).powf(1.0 / periods as f64))
}

/// Closed cycle of an ODE with its monodromy matrix from the variational equations.
#[derive(Debug, Clone)]
pub struct OdeCycle {
    pub period: f64,
    pub point: Vec<f64>,
    pub monodromy: DMatrix<f64>,
    /// Sorted by decreasing modulus.
    pub multipliers: Vec<Complex64>,
    pub closure: f64,
}

impl OdeCycle {
    /// Multipliers without the one closest to 1.
    pub fn nontrivial(&self) -> Vec<Complex64> {
        let mut best = 0;
        for (i, z) in self.multipliers.iter().enumerate() {
            if (z - 1.0).norm() < (self.multipliers[best] - 1.0).norm() {
                best = i;
            }
        }
        self.multipliers.iter().enumerate().filter(|(i, _)| *i != best).map(|(_, z)| *z).collect()
    }
}

fn variational_flow(ode: &dyn OdeRhs, x0: &[f64], period: f64, steps: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = ode.dim();
    let field = |z: &[f64], out: &mut [f64]| {
        ode.f(&z[..n], &mut out[..n]);
        let mut col = vec![0.0; n];
        let mut d = vec![0.0; n];
        for c in 0..n {
            for r in 0..n {
                col[r] = z[n + r * n + c];
            }
            ode.d1(&z[..n], &col, &mut d);
            for r in 0..n {
                out[n + r * n + c] = d[r];
            }
        }
    };
    let dim = n + n * n;
    let mut z = vec![0.0; dim];
    z[..n].copy_from_slice(x0);
    for i in 0..n {
        z[n + i * n + i] = 1.0;
    }
    let dt = period / steps as f64;
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    for _ in 0..steps {
        field(&z, &mut k1);
        tmp.iter_mut().zip(&z).zip(&k1).for_each(|((o, a), b)| *o = a + 0.5 * dt * b);
        field(&tmp, &mut k2);
        tmp.iter_mut().zip(&z).zip(&k2).for_each(|((o, a), b)| *o = a + 0.5 * dt * b);
        field(&tmp, &mut k3);
        tmp.iter_mut().zip(&z).zip(&k3).for_each(|((o, a), b)| *o = a + dt * b);
        field(&tmp, &mut k4);
        for i in 0..dim {
            z[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
    let phi = DMatrix::from_row_slice(n, n, &z[n..]);
    (z[..n].to_vec(), phi)
}

/// Shoots the cycle through `point` with period near `period` using classical RK4 with `steps`
/// fixed steps, then returns the eigenvalues of the variational flow over one period.
pub fn ode_monodromy_oracle(ode: &dyn OdeRhs, point: &[f64], period: f64, steps: usize) -> Result<OdeCycle> {
    let n = ode.dim();
    if point.len() != n {
        return Err(Error::DimensionMismatch { expected: n, found: point.len() });
    }
    if !(period > 0.0) || steps == 0 {
        return Err(Error::InvalidInput("period and step count must be positive".into()));
    }
    let anchor = point.to_vec();
    let mut f_anchor = vec![0.0; n];
    ode.f(&anchor, &mut f_anchor);
    let mut x = anchor.clone();
    let mut t_per = period;
    let scale = anchor.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for _ in 0..30 {
        let (xe, phi) = variational_flow(ode, &x, t_per, steps);
        let res: Vec<f64> = xe.iter().zip(&x).map(|(a, b)| a - b).collect();
        let rn = res.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if rn <= 1e-13 * scale {
            break;
        }
        let mut fe = vec![0.0; n];
        ode.f(&xe, &mut fe);
        let mut jac = DMatrix::zeros(n + 1, n + 1);
        let mut rhs = DMatrix::zeros(n + 1, 1);
        for r in 0..n {
            for c in 0..n {
                jac[(r, c)] = phi[(r, c)] - if r == c { 1.0 } else { 0.0 };
            }
            jac[(r, n)] = fe[r];
            rhs[(r, 0)] = -res[r];
            jac[(n, r)] = f_anchor[r];
        }
        rhs[(n, 0)] = -(0..n).map(|i| f_anchor[i] * (x[i] - anchor[i])).sum::<f64>();
        let Some(dx) = jac.lu().solve(&rhs) else { break };
        if dx.iter().any(|v| !v.is_finite()) {
            break;
        }
        for i in 0..n {
            x[i] += dx[(i, 0)];
        }
        t_per += dx[(n, 0)];
        if !(t_per > 0.0) {
            return Err(Error::NewtonDivergence { iterations: 0, residual: rn });
        }
    }
    let (xe, monodromy) = variational_flow(ode, &x, t_per, steps);
    let closure = xe.iter().zip(&x).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    if !closure.is_finite() || monodromy.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("variational integration failed".into()));
    }
    let mut multipliers: Vec<Complex64> = monodromy.clone().complex_eigenvalues().iter().copied().collect();
    multipliers.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap_or(core::cmp::Ordering::Equal));
    Ok(OdeCycle { period: t_per, point: x, monodromy, multipliers, closure })
}

/// Deterministic directions in argument space used by [`fd_derivative_check`].
fn probe_direction(len: usize, seed: usize) -> Vec<f64> {
    (0..len).map(|i| (1.3 * (i + 1) as f64 + 0.71 * (seed + 1) as f64).sin()).collect()
}

/// Max over fixed probe directions of `|D^q F - central difference of D^{q-1} F|` at the delay values of
/// `base`, step `1e-5`, divided by `max(1, |D^q F|)`.
pub fn fd_derivative_check(model: &dyn DdeModel, base: &HistorySegment, q: usize) -> Result<f64> {
    if !(1..=3).contains(&q) {
        return Err(Error::InvalidInput(format!("derivative order {q} not in 1..=3")));
    }
    let n = model.dim();
    let x = crate::ops::delay_values(model, base);
    let len = x.len();
    let eps = 1e-5;
    let mut worst = 0.0f64;
    let mut exact = vec![0.0; n];
    let mut plus = vec![0.0; n];
    let mut minus = vec![0.0; n];
    for trial in 0..4 {
        let a = probe_direction(len, 3 * trial);
        let b = probe_direction(len, 3 * trial + 1);
        let c = probe_direction(len, 3 * trial + 2);
        let last = match q {
            1 => &a,
            2 => &b,
            _ => &c,
        };
        let xp: Vec<f64> = x.iter().zip(last).map(|(u, v)| u + eps * v).collect();
        let xm: Vec<f64> = x.iter().zip(last).map(|(u, v)| u - eps * v).collect();
        match q {
            1 => {
                model.d1(&x, &a, &mut exact);
                model.rhs(&xp, &mut plus);
                model.rhs(&xm, &mut minus);
            }
            2 => {
                model.d2(&x, &a, &b, &mut exact);
                model.d1(&xp, &a, &mut plus);
                model.d1(&xm, &a, &mut minus);
            }
            _ => {
                model.d3(&x, &a, &b, &c, &mut exact);
                model.d2(&xp, &a, &b, &mut plus);
                model.d2(&xm, &a, &b, &mut minus);
            }
        }
        let size = exact.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for i in 0..n {
            let fd = (plus[i] - minus[i]) / (2.0 * eps);
            worst = worst.max((exact[i] - fd).abs() / size);
        }
    }
    Ok(worst)
}

//! Periodic orbits as truncated Fourier series, and their Newton–collocation solver.

use crate::error::{Error, Result};
use crate::fourier::trig_fit;
use crate::model::DdeModel;
use crate::prelude::*;
use crate::segment::HistorySegment;
use core::f64::consts::PI;
use nalgebra::{DMatrix, DVector};

/// `gamma_r(t) = a0 + sum_k a_k cos(2 pi k t / T) + b_k sin(2 pi k t / T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicOrbit {
    pub period: f64,
    pub harmonics: usize,
    /// Per component `[a0, a1, b1, ..., aK, bK]`.
    pub coeffs: Vec<Vec<f64>>,
    /// Declared residual tolerance.
    pub tolerance: f64,
}

impl PeriodicOrbit {
    pub fn new(period: f64, coeffs: Vec<Vec<f64>>) -> Result<Self> {
        if !(period > 0.0) {
            return Err(Error::InvalidInput("period must be positive".into()));
        }
        let len = coeffs.first().map(|c| c.len()).unwrap_or(0);
        if len == 0 || len % 2 == 0 || coeffs.iter().any(|c| c.len() != len) {
            return Err(Error::InvalidInput("each component needs 2K+1 coefficients".into()));
        }
        Ok(PeriodicOrbit { period, harmonics: (len - 1) / 2, coeffs, tolerance: 1e-8 })
    }

    /// The cycle `sin t` of the manufactured model.
    pub fn manufactured() -> Self {
        PeriodicOrbit::new(2.0 * PI, vec![vec![0.0, 0.0, 1.0]]).unwrap()
    }

    /// Trigonometric interpolant of `f` sampled at `2K + 1` points of `[t0, t0 + T)`, rebased to start at 0.
    pub fn from_fn(n: usize, period: f64, harmonics: usize, t0: f64, mut f: impl FnMut(f64) -> Vec<f64>) -> Self {
        let m = 2 * harmonics + 1;
        let samples: Vec<Vec<f64>> = (0..m).map(|i| f(t0 + period * i as f64 / m as f64)).collect();
        let mut coeffs: Vec<Vec<f64>> = (0..n)
            .map(|r| trig_fit(&samples.iter().map(|s| s[r]).collect::<Vec<_>>(), harmonics))
            .collect();
        let shift = 2.0 * PI * t0 / period;
        for c in coeffs.iter_mut() {
            for k in 1..=harmonics {
                let (s, co) = (k as f64 * shift).sin_cos();
                let (a, b) = (c[2 * k - 1], c[2 * k]);
                c[2 * k - 1] = a * co - b * s;
                c[2 * k] = a * s + b * co;
            }
        }
        PeriodicOrbit { period, harmonics, coeffs, tolerance: 1e-8 }
    }

    pub fn dim(&self) -> usize {
        self.coeffs.len()
    }

    /// Derivative of order `order` (0 for the value) at time `t`.
    pub fn eval_deriv(&self, t: f64, order: u32, out: &mut [f64]) {
        let w = 2.0 * PI / self.period;
        let x = w * t;
        for (r, c) in self.coeffs.iter().enumerate() {
            let mut v = if order == 0 { c[0] } else { 0.0 };
            for k in 1..=self.harmonics {
                let kw = k as f64 * w;
                let (s, co) = (k as f64 * x).sin_cos();
                let (a, b) = (c[2 * k - 1], c[2 * k]);
                let (dc, ds) = match order % 4 {
                    0 => (co, s),
                    1 => (-s, co),
                    2 => (-co, -s),
                    _ => (s, -co),
                };
                v += kw.powi(order as i32) * (a * dc + b * ds);
            }
            out[r] = v;
        }
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_deriv(t, 0, &mut out);
        out
    }

    pub fn velocity(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.eval_deriv(t, 1, &mut out);
        out
    }

    /// Flattened argument tuple `[gamma(t), gamma(t - tau_1), ...]`.
    pub fn args(&self, delays: &[f64], t: f64) -> Vec<f64> {
        let n = self.dim();
        let mut a = vec![0.0; n * (delays.len() + 1)];
        self.eval_deriv(t, 0, &mut a[..n]);
        for (j, tau) in delays.iter().enumerate() {
            self.eval_deriv(t - tau, 0, &mut a[(j + 1) * n..(j + 2) * n]);
        }
        a
    }

    /// Max over one period of `|gamma(t + T/2) - gamma(t)|`; small values flag a subharmonic period.
    pub fn half_period_defect(&self) -> f64 {
        let m = 8 * (2 * self.harmonics + 1).max(16);
        (0..m)
            .map(|i| {
                let t = self.period * i as f64 / m as f64;
                let a = self.eval(t);
                let b = self.eval(t + 0.5 * self.period);
                a.iter().zip(&b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
            })
            .fold(0.0, f64::max)
    }
}

/// `gamma_t(theta) = gamma(t + theta)`.
pub fn orbit_segment(orbit: &PeriodicOrbit, t: f64, h: f64, degree: usize) -> HistorySegment {
    let n = orbit.dim();
    HistorySegment::from_fn_pieces(n, h, degree, vec![-h, 0.0], |_, th, out| orbit.eval_deriv(t + th, 0, out))
}

/// `theta -> gamma'(t + theta)`.
pub fn orbit_derivative_segment(orbit: &PeriodicOrbit, t: f64, h: f64, degree: usize) -> HistorySegment {
    let n = orbit.dim();
    HistorySegment::from_fn_pieces(n, h, degree, vec![-h, 0.0], |_, th, out| orbit.eval_deriv(t + th, 1, out))
}

/// Max over a fine mesh of `|gamma'(t) - F(gamma_t)|`.
pub fn orbit_residual(model: &dyn DdeModel, orbit: &PeriodicOrbit) -> f64 {
    let m = (16 * (2 * orbit.harmonics + 1)).max(512);
    let n = orbit.dim();
    let mut f = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut worst = 0.0f64;
    for i in 0..m {
        let t = orbit.period * (i as f64 + 0.37) / m as f64;
        let args = orbit.args(model.delays(), t);
        model.rhs(&args, &mut f);
        orbit.eval_deriv(t, 1, &mut v);
        for r in 0..n {
            worst = worst.max((v[r] - f[r]).abs());
        }
    }
    worst
}

#[derive(Debug, Clone)]
pub struct OrbitSolveOptions {
    pub max_iter: usize,
    pub tolerance: f64,
    /// Harmonics of the solution; defaults to those of the guess.
    pub harmonics: Option<usize>,
}

impl Default for OrbitSolveOptions {
    fn default() -> Self {
        OrbitSolveOptions { max_iter: 40, tolerance: 1e-8, harmonics: None }
    }
}

#[derive(Debug, Clone)]
pub struct OrbitSolution {
    pub orbit: PeriodicOrbit,
    pub iterations: usize,
    pub residual: f64,
    /// Set when `gamma(t + T/2)` reproduces `gamma(t)`, suggesting a non-minimal period.
    pub subharmonic_suspect: bool,
}

fn basis(k_max: usize, s: f64, val: &mut [f64], der: &mut [f64]) {
    val[0] = 1.0;
    der[0] = 0.0;
    for k in 1..=k_max {
        let kw = 2.0 * PI * k as f64;
        let (sn, cs) = (kw * s).sin_cos();
        val[2 * k - 1] = cs;
        val[2 * k] = sn;
        der[2 * k - 1] = -kw * sn;
        der[2 * k] = kw * cs;
    }
}

struct Collocation<'a> {
    model: &'a dyn DdeModel,
    n: usize,
    k: usize,
    reference: Vec<Vec<f64>>,
}

impl Collocation<'_> {
    fn width(&self) -> usize {
        2 * self.k + 1
    }

    fn unknowns(&self) -> usize {
        self.n * self.width() + 1
    }

    /// Residual and (optionally) Jacobian at `x = [coeffs..., T]`.
    fn evaluate(&self, x: &[f64], jac: Option<&mut DMatrix<f64>>) -> DVector<f64> {
        let (n, w) = (self.n, self.width());
        let delays = self.model.delays();
        let m = delays.len();
        let period = x[n * w];
        let mut g = DVector::zeros(self.unknowns());
        let mut jac = jac;
        let mut bv = vec![vec![0.0; w]; m + 1];
        let mut bd = vec![vec![0.0; w]; m + 1];
        let mut args = vec![0.0; n * (m + 1)];
        let mut dargs = vec![0.0; n * (m + 1)];
        let mut f = vec![0.0; n];
        for i in 0..w {
            let s = i as f64 / w as f64;
            for j in 0..=m {
                let lag = if j == 0 { 0.0 } else { delays[j - 1] / period };
                basis(self.k, s - lag, &mut bv[j], &mut bd[j]);
                for r in 0..n {
                    let c = &x[r * w..(r + 1) * w];
                    args[j * n + r] = c.iter().zip(&bv[j]).map(|(a, b)| a * b).sum();
                    dargs[j * n + r] = c.iter().zip(&bd[j]).map(|(a, b)| a * b).sum();
                }
            }
            self.model.rhs(&args, &mut f);
            for r in 0..n {
                g[i * n + r] = dargs[r] / period - f[r];
            }
            if let Some(jm) = jac.as_deref_mut() {
                let blocks = self.model.jacobian_blocks(&args);
                for r in 0..n {
                    let row = i * n + r;
                    for l in 0..w {
                        jm[(row, r * w + l)] += bd[0][l] / period;
                    }
                    for (j, b) in blocks.iter().enumerate() {
                        for q in 0..n {
                            let a = b[r * n + q];
                            if a == 0.0 {
                                continue;
                            }
                            for l in 0..w {
                                jm[(row, q * w + l)] -= a * bv[j][l];
                            }
                        }
                    }
                    let mut dt = -dargs[r] / (period * period);
                    for (j, b) in blocks.iter().enumerate().skip(1) {
                        let tau = delays[j - 1];
                        for q in 0..n {
                            dt -= b[r * n + q] * dargs[j * n + q] * tau / (period * period);
                        }
                    }
                    jm[(row, n * w)] = dt;
                }
            }
        }
        let last = n * w;
        let mut phase = 0.0;
        for r in 0..n {
            for kk in 1..=self.k {
                let (ra, rb) = (self.reference[r][2 * kk - 1], self.reference[r][2 * kk]);
                let (a, b) = (x[r * w + 2 * kk - 1], x[r * w + 2 * kk]);
                let kf = kk as f64;
                phase += kf * (a * rb - b * ra);
                if let Some(jm) = jac.as_deref_mut() {
                    jm[(last, r * w + 2 * kk - 1)] = kf * rb;
                    jm[(last, r * w + 2 * kk)] = -kf * ra;
                }
            }
        }
        g[last] = phase;
        g
    }
}

/// Newton iteration on the Fourier collocation equations with unknown period and integral phase anchor.
pub fn solve_periodic_orbit(
    model: &dyn DdeModel,
    guess: &PeriodicOrbit,
    opts: &OrbitSolveOptions,
) -> Result<OrbitSolution> {
    let n = model.dim();
    if guess.dim() != n {
        return Err(Error::DimensionMismatch { expected: n, found: guess.dim() });
    }
    let k = opts.harmonics.unwrap_or(guess.harmonics);
    let w = 2 * k + 1;
    let reference: Vec<Vec<f64>> = guess
        .coeffs
        .iter()
        .map(|c| (0..w).map(|l| c.get(l).copied().unwrap_or(0.0)).collect())
        .collect();
    let col = Collocation { model, n, k, reference: reference.clone() };
    let mut x: Vec<f64> = reference.iter().flatten().copied().collect();
    x.push(guess.period);
    let scale = reference.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
    let mut g = col.evaluate(&x, None);
    let mut iterations = 0;
    loop {
        let gnorm = g.amax();
        if gnorm <= 1e-12 * scale {
            break;
        }
        if iterations >= opts.max_iter {
            return Err(Error::NewtonDivergence { iterations, residual: gnorm });
        }
        let mut jm = DMatrix::zeros(col.unknowns(), col.unknowns());
        col.evaluate(&x, Some(&mut jm));
        let step = jm.lu().solve(&g).ok_or(Error::SingularJacobian)?;
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularJacobian);
        }
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..12 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, d)| a - lambda * d).collect();
            if trial[n * w] > 0.0 {
                let gt = col.evaluate(&trial, None);
                if gt.amax() < gnorm || lambda < 1e-3 {
                    x = trial;
                    g = gt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        iterations += 1;
        if !accepted {
            return Err(Error::NewtonDivergence { iterations, residual: gnorm });
        }
        if step.amax() * lambda <= 1e-14 * scale.max(x[n * w]) {
            break;
        }
    }
    let coeffs: Vec<Vec<f64>> = (0..n).map(|r| x[r * w..(r + 1) * w].to_vec()).collect();
    let mut orbit = PeriodicOrbit::new(x[n * w], coeffs)?;
    orbit.tolerance = opts.tolerance;
    let residual = orbit_residual(model, &orbit);
    if !(residual <= opts.tolerance) {
        return Err(Error::Numerical(format!(
            "collocation converged but residual {residual:e} exceeds {:e}; increase harmonics",
            opts.tolerance
        )));
    }
    let subharmonic_suspect = orbit.half_period_defect() <= 1e3 * opts.tolerance;
    Ok(OrbitSolution { orbit, iterations, residual, subharmonic_suspect })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Manufactured;

    #[test]
    fn manufactured_segment_and_derivative() {
        let o = PeriodicOrbit::manufactured();
        let s = orbit_segment(&o, 0.0, PI / 2.0, 32);
        let d = orbit_derivative_segment(&o, 0.0, PI / 2.0, 32);
        for th in [-1.5, -0.4, 0.0] {
            assert!((s.eval(th).unwrap()[0] - th.sin()).abs() < 1e-14);
            assert!((d.eval(th).unwrap()[0] - th.cos()).abs() < 1e-14);
        }
    }

    #[test]
    fn from_fn_rebases_phase() {
        let o = PeriodicOrbit::from_fn(1, 2.0, 3, 0.7, |t| vec![(PI * t).cos() + 0.2 * (2.0 * PI * t).sin()]);
        for t in [0.0, 0.3, 1.9] {
            let v = (PI * t).cos() + 0.2 * (2.0 * PI * t).sin();
            assert!((o.eval(t)[0] - v).abs() < 1e-13);
        }
    }

    #[test]
    fn residual_detects_perturbation() {
        let m = Manufactured::new(1.0);
        let o = PeriodicOrbit::manufactured();
        assert!(orbit_residual(&m, &o) <= 1e-10);
        let mut p = o.clone();
        p.coeffs[0][1] += 0.1;
        assert!(orbit_residual(&m, &p) >= 1e-3);
    }

    #[test]
    fn newton_recovers_manufactured_cycle() {
        let m = Manufactured::new(1.0);
        let mut g = PeriodicOrbit::new(2.0 * PI * 1.05, vec![vec![0.05, 0.0, 1.05, 0.05, 0.0]]).unwrap();
        g.tolerance = 1e-8;
        let sol = solve_periodic_orbit(&m, &g, &OrbitSolveOptions::default()).unwrap();
        assert!((sol.orbit.period - 2.0 * PI).abs() < 1e-8);
        for t in [0.0, 1.0, 4.0] {
            assert!((sol.orbit.eval(t)[0] - t.sin()).abs() < 1e-8);
        }
        assert!(sol.residual < 1e-8);
        let again = solve_periodic_orbit(&m, &sol.orbit, &OrbitSolveOptions::default()).unwrap();
        assert!(again.iterations <= 2);
        assert!(!sol.subharmonic_suspect);
    }
}

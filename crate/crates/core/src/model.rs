//! Delay equations `x'(t) = F(x(t), x(t - tau_1), ..., x(t - tau_m))` with closed-form derivatives.

use crate::error::{Error, Result};
use crate::prelude::*;
use alloc::collections::BTreeMap;

/// Right-hand side with discrete delays.
///
/// Argument tuples are flattened as `[v_0 | v_1 | ... | v_m]`, each block of length `n`.
pub trait DdeModel: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn delays(&self) -> &[f64];
    fn max_delay(&self) -> f64;
    fn params(&self) -> Vec<(String, f64)>;
    fn rhs(&self, args: &[f64], out: &mut [f64]);
    fn d1(&self, args: &[f64], a: &[f64], out: &mut [f64]);
    fn d2(&self, args: &[f64], a: &[f64], b: &[f64], out: &mut [f64]);
    fn d3(&self, args: &[f64], a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]);

    fn n_args(&self) -> usize {
        self.dim() * (self.delays().len() + 1)
    }

    /// Partial Jacobian blocks `dF/dv_j`, each `n x n` row-major.
    fn jacobian_blocks(&self, args: &[f64]) -> Vec<Vec<f64>> {
        let n = self.dim();
        let m = self.delays().len();
        let mut dir = vec![0.0; n * (m + 1)];
        let mut col = vec![0.0; n];
        let mut blocks = vec![vec![0.0; n * n]; m + 1];
        for (j, block) in blocks.iter_mut().enumerate() {
            for c in 0..n {
                dir[j * n + c] = 1.0;
                self.d1(args, &dir, &mut col);
                dir[j * n + c] = 0.0;
                for r in 0..n {
                    block[r * n + c] = col[r];
                }
            }
        }
        blocks
    }
}

/// Scalar equation `x' = -x(t - pi/2) (1 + kappa (x^2 + x(t - pi/2)^2 - 1))` with cycle `sin t`.
#[derive(Debug, Clone)]
pub struct Manufactured {
    pub kappa: f64,
    delays: [f64; 1],
}

impl Manufactured {
    pub fn new(kappa: f64) -> Self {
        Manufactured { kappa, delays: [core::f64::consts::FRAC_PI_2] }
    }
}

impl DdeModel for Manufactured {
    fn name(&self) -> &str {
        "manufactured"
    }
    fn dim(&self) -> usize {
        1
    }
    fn delays(&self) -> &[f64] {
        &self.delays
    }
    fn max_delay(&self) -> f64 {
        self.delays[0]
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![("kappa".into(), self.kappa)]
    }
    fn rhs(&self, v: &[f64], out: &mut [f64]) {
        let s = v[0] * v[0] + v[1] * v[1] - 1.0;
        out[0] = -v[1] * (1.0 + self.kappa * s);
    }
    fn d1(&self, v: &[f64], a: &[f64], out: &mut [f64]) {
        let k = self.kappa;
        let s = v[0] * v[0] + v[1] * v[1] - 1.0;
        out[0] = -a[1] * (1.0 + k * s) - 2.0 * k * v[1] * (v[0] * a[0] + v[1] * a[1]);
    }
    fn d2(&self, v: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        let k = self.kappa;
        out[0] = -2.0
            * k
            * (a[1] * (v[0] * b[0] + v[1] * b[1])
                + b[1] * (v[0] * a[0] + v[1] * a[1])
                + v[1] * (a[0] * b[0] + a[1] * b[1]));
    }
    fn d3(&self, _v: &[f64], a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]) {
        let k = self.kappa;
        out[0] = -2.0
            * k
            * (a[1] * (b[0] * c[0] + b[1] * c[1])
                + b[1] * (a[0] * c[0] + a[1] * c[1])
                + c[1] * (a[0] * b[0] + a[1] * b[1]));
    }
}

/// `x' = beta x(t - tau) / (1 + |x(t - tau)|^p) - gamma x`, extended oddly to negative states.
#[derive(Debug, Clone)]
pub struct MackeyGlass {
    pub beta: f64,
    pub gamma: f64,
    pub power: f64,
    delays: [f64; 1],
}

impl MackeyGlass {
    pub fn new(beta: f64, gamma: f64, power: f64, tau: f64) -> Self {
        MackeyGlass { beta, gamma, power, delays: [tau] }
    }

    pub fn tau(&self) -> f64 {
        self.delays[0]
    }

    /// Hill-type factor `q(x) = x / (1 + |x|^p)` and its first three derivatives.
    pub fn hill(&self, x: f64) -> [f64; 4] {
        let p = self.power;
        let ax = x.abs();
        let u = ax.powf(p);
        let w = 1.0 + u;
        let sgn = if x < 0.0 { -1.0 } else { 1.0 };
        let u_over_x = sgn * ax.powf(p - 1.0);
        let u_over_x2 = ax.powf(p - 2.0);
        [
            x / w,
            (1.0 + (1.0 - p) * u) / (w * w),
            p * u_over_x * (p * u - p - u - 1.0) / (w * w * w),
            -p * u_over_x2 * (p * p * u * u - 4.0 * p * p * u + p * p - u * u - 2.0 * u - 1.0) / (w * w * w * w),
        ]
    }
}

impl DdeModel for MackeyGlass {
    fn name(&self) -> &str {
        "mackey_glass"
    }
    fn dim(&self) -> usize {
        1
    }
    fn delays(&self) -> &[f64] {
        &self.delays
    }
    fn max_delay(&self) -> f64 {
        self.delays[0]
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![("beta".into(), self.beta), ("gamma".into(), self.gamma), ("n".into(), self.power)]
    }
    fn rhs(&self, v: &[f64], out: &mut [f64]) {
        out[0] = self.beta * self.hill(v[1])[0] - self.gamma * v[0];
    }
    fn d1(&self, v: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = self.beta * self.hill(v[1])[1] * a[1] - self.gamma * a[0];
    }
    fn d2(&self, v: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        out[0] = self.beta * self.hill(v[1])[2] * a[1] * b[1];
    }
    fn d3(&self, v: &[f64], a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]) {
        out[0] = self.beta * self.hill(v[1])[3] * a[1] * b[1] * c[1];
    }
}

/// Delayed logistic equation `x' = r x (1 - x(t - tau) / K)`.
#[derive(Debug, Clone)]
pub struct Hutchinson {
    pub rate: f64,
    pub capacity: f64,
    delays: [f64; 1],
}

impl Hutchinson {
    pub fn new(rate: f64, capacity: f64, tau: f64) -> Self {
        Hutchinson { rate, capacity, delays: [tau] }
    }
}

impl DdeModel for Hutchinson {
    fn name(&self) -> &str {
        "hutchinson"
    }
    fn dim(&self) -> usize {
        1
    }
    fn delays(&self) -> &[f64] {
        &self.delays
    }
    fn max_delay(&self) -> f64 {
        self.delays[0]
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![("r".into(), self.rate), ("K".into(), self.capacity)]
    }
    fn rhs(&self, v: &[f64], out: &mut [f64]) {
        out[0] = self.rate * v[0] * (1.0 - v[1] / self.capacity);
    }
    fn d1(&self, v: &[f64], a: &[f64], out: &mut [f64]) {
        let c = self.rate / self.capacity;
        out[0] = self.rate * a[0] - c * (a[0] * v[1] + v[0] * a[1]);
    }
    fn d2(&self, _v: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        out[0] = -self.rate / self.capacity * (a[0] * b[1] + a[1] * b[0]);
    }
    fn d3(&self, _v: &[f64], _a: &[f64], _b: &[f64], _c: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
}

/// Scalar linear equation `x' = c_0 x + sum_j c_j x(t - tau_j)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub coeffs: Vec<f64>,
    delays: Vec<f64>,
    h: f64,
}

impl Linear {
    pub fn new(coeffs: Vec<f64>, delays: Vec<f64>, h: f64) -> Self {
        assert_eq!(coeffs.len(), delays.len() + 1);
        Linear { coeffs, delays, h }
    }
}

impl DdeModel for Linear {
    fn name(&self) -> &str {
        "linear"
    }
    fn dim(&self) -> usize {
        1
    }
    fn delays(&self) -> &[f64] {
        &self.delays
    }
    fn max_delay(&self) -> f64 {
        self.h
    }
    fn params(&self) -> Vec<(String, f64)> {
        self.coeffs.iter().enumerate().map(|(j, c)| (format!("c{j}"), *c)).collect()
    }
    fn rhs(&self, v: &[f64], out: &mut [f64]) {
        out[0] = self.coeffs.iter().zip(v).map(|(c, x)| c * x).sum();
    }
    fn d1(&self, _v: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = self.coeffs.iter().zip(a).map(|(c, x)| c * x).sum();
    }
    fn d2(&self, _v: &[f64], _a: &[f64], _b: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn d3(&self, _v: &[f64], _a: &[f64], _b: &[f64], _c: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
}

/// Autonomous ODE `x' = f(x)` with derivatives up to order three.
pub trait OdeRhs: Send + Sync {
    fn name(&self) -> &str;
    fn dim(&self) -> usize;
    fn params(&self) -> Vec<(String, f64)>;
    fn f(&self, x: &[f64], out: &mut [f64]);
    fn d1(&self, x: &[f64], a: &[f64], out: &mut [f64]);
    fn d2(&self, x: &[f64], a: &[f64], b: &[f64], out: &mut [f64]);
    fn d3(&self, x: &[f64], a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct VanDerPol {
    pub mu: f64,
}

impl OdeRhs for VanDerPol {
    fn name(&self) -> &str {
        "van_der_pol"
    }
    fn dim(&self) -> usize {
        2
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![("mu".into(), self.mu)]
    }
    fn f(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1];
        out[1] = self.mu * (1.0 - x[0] * x[0]) * x[1] - x[0];
    }
    fn d1(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        out[0] = a[1];
        out[1] = self.mu * (1.0 - x[0] * x[0]) * a[1] - (2.0 * self.mu * x[0] * x[1] + 1.0) * a[0];
    }
    fn d2(&self, x: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = -2.0 * self.mu * (x[1] * a[0] * b[0] + x[0] * (a[0] * b[1] + a[1] * b[0]));
    }
    fn d3(&self, _x: &[f64], a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
        out[1] = -2.0 * self.mu * (a[0] * b[0] * c[1] + a[0] * b[1] * c[0] + a[1] * b[0] * c[0]);
    }
}

/// Planar rotation `x' = -omega y, y' = omega x`.
#[derive(Debug, Clone)]
pub struct LinearRotation {
    pub omega: f64,
}

impl OdeRhs for LinearRotation {
    fn name(&self) -> &str {
        "linear_rotation"
    }
    fn dim(&self) -> usize {
        2
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![("omega".into(), self.omega)]
    }
    fn f(&self, x: &[f64], out: &mut [f64]) {
        out[0] = -self.omega * x[1];
        out[1] = self.omega * x[0];
    }
    fn d1(&self, _x: &[f64], a: &[f64], out: &mut [f64]) {
        self.f(a, out)
    }
    fn d2(&self, _x: &[f64], _a: &[f64], _b: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
    fn d3(&self, _x: &[f64], _a: &[f64], _b: &[f64], _c: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
    }
}

/// Amplitude-dependent rotation `x' = -(x^2 + y^2) y, y' = (x^2 + y^2) x`.
///
/// Every circle is a cycle with period `2 pi / r^2`, so the trivial multiplier carries a
/// Jordan block of size two.
#[derive(Debug, Clone, Default)]
pub struct Twist;

impl OdeRhs for Twist {
    fn name(&self) -> &str {
        "twist"
    }
    fn dim(&self) -> usize {
        2
    }
    fn params(&self) -> Vec<(String, f64)> {
        Vec::new()
    }
    fn f(&self, x: &[f64], out: &mut [f64]) {
        let r2 = x[0] * x[0] + x[1] * x[1];
        out[0] = -r2 * x[1];
        out[1] = r2 * x[0];
    }
    fn d1(&self, x: &[f64], a: &[f64], out: &mut [f64]) {
        let (u, v) = (x[0], x[1]);
        out[0] = -2.0 * u * v * a[0] - (u * u + 3.0 * v * v) * a[1];
        out[1] = (3.0 * u * u + v * v) * a[0] + 2.0 * u * v * a[1];
    }
    fn d2(&self, x: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        let (u, v) = (x[0], x[1]);
        let mixed = a[0] * b[1] + a[1] * b[0];
        out[0] = -2.0 * v * a[0] * b[0] - 2.0 * u * mixed - 6.0 * v * a[1] * b[1];
        out[1] = 6.0 * u * a[0] * b[0] + 2.0 * v * mixed + 2.0 * u * a[1] * b[1];
    }
    fn d3(&self, _x: &[f64], a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]) {
        out[0] = -2.0 * (a[0] * b[0] * c[1] + a[0] * b[1] * c[0] + a[1] * b[0] * c[0]) - 6.0 * a[1] * b[1] * c[1];
        out[1] = 6.0 * a[0] * b[0] * c[0] + 2.0 * (a[0] * b[1] * c[1] + a[1] * b[0] * c[1] + a[1] * b[1] * c[0]);
    }
}

/// An ODE viewed as a delay equation without delays on a nominal horizon `h`.
pub struct ZeroDelay<O: OdeRhs> {
    pub ode: O,
    pub h: f64,
    label: String,
}

impl<O: OdeRhs> ZeroDelay<O> {
    pub fn new(ode: O, h: f64) -> Self {
        let label = format!("ode:{}", ode.name());
        ZeroDelay { ode, h, label }
    }
}

impl<O: OdeRhs> DdeModel for ZeroDelay<O> {
    fn name(&self) -> &str {
        &self.label
    }
    fn dim(&self) -> usize {
        self.ode.dim()
    }
    fn delays(&self) -> &[f64] {
        &[]
    }
    fn max_delay(&self) -> f64 {
        self.h
    }
    fn params(&self) -> Vec<(String, f64)> {
        let mut p = self.ode.params();
        p.push(("h".into(), self.h));
        p
    }
    fn rhs(&self, v: &[f64], out: &mut [f64]) {
        self.ode.f(v, out)
    }
    fn d1(&self, v: &[f64], a: &[f64], out: &mut [f64]) {
        self.ode.d1(v, a, out)
    }
    fn d2(&self, v: &[f64], a: &[f64], b: &[f64], out: &mut [f64]) {
        self.ode.d2(v, a, b, out)
    }
    fn d3(&self, v: &[f64], a: &[f64], b: &[f64], c: &[f64], out: &mut [f64]) {
        self.ode.d3(v, a, b, c, out)
    }
}

/// Identifiers accepted by [`builtin`].
pub const BUILTIN_IDS: &[&str] = &[
    "manufactured",
    "mackey_glass",
    "hutchinson",
    "linear",
    "ode:van_der_pol",
    "ode:linear_rotation",
    "ode:twist",
];

fn param(params: &BTreeMap<String, f64>, key: &str, default: Option<f64>) -> Result<f64> {
    match params.get(key) {
        Some(v) => Ok(*v),
        None => default.ok_or_else(|| Error::InvalidInput(format!("missing parameter '{key}'"))),
    }
}

fn single_delay(id: &str, delays: &[f64]) -> Result<f64> {
    match delays {
        [tau] if *tau > 0.0 => Ok(*tau),
        _ => Err(Error::InvalidInput(format!("model '{id}' expects exactly one positive delay"))),
    }
}

/// Builds a registered model from its identifier, declared delays and parameters.
pub fn builtin(id: &str, n: usize, delays: &[f64], params: &BTreeMap<String, f64>) -> Result<Box<dyn DdeModel>> {
    let check_dim = |expected: usize| {
        if n == expected {
            Ok(())
        } else {
            Err(Error::DimensionMismatch { expected, found: n })
        }
    };
    let no_delays = || {
        if delays.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("model '{id}' takes no delays")))
        }
    };
    match id {
        "manufactured" => {
            check_dim(1)?;
            let tau = single_delay(id, delays)?;
            if (tau - core::f64::consts::FRAC_PI_2).abs() > 1e-12 {
                return Err(Error::InvalidInput("manufactured model requires delay pi/2".into()));
            }
            Ok(Box::new(Manufactured::new(param(params, "kappa", Some(1.0))?)))
        }
        "mackey_glass" => {
            check_dim(1)?;
            let tau = single_delay(id, delays)?;
            Ok(Box::new(MackeyGlass::new(
                param(params, "beta", Some(2.0))?,
                param(params, "gamma", Some(1.0))?,
                param(params, "n", Some(9.65))?,
                tau,
            )))
        }
        "hutchinson" => {
            check_dim(1)?;
            let tau = single_delay(id, delays)?;
            Ok(Box::new(Hutchinson::new(param(params, "r", None)?, param(params, "K", Some(1.0))?, tau)))
        }
        "linear" => {
            check_dim(1)?;
            if delays.windows(2).any(|w| w[0] >= w[1]) || delays.iter().any(|&t| t <= 0.0) {
                return Err(Error::InvalidInput("delays must be positive and increasing".into()));
            }
            let coeffs = (0..=delays.len())
                .map(|j| param(params, &format!("c{j}"), Some(0.0)))
                .collect::<Result<Vec<_>>>()?;
            let h = delays.last().copied().unwrap_or(param(params, "h", Some(1.0))?);
            Ok(Box::new(Linear::new(coeffs, delays.to_vec(), h)))
        }
        "ode:van_der_pol" => {
            check_dim(2)?;
            no_delays()?;
            Ok(Box::new(ZeroDelay::new(VanDerPol { mu: param(params, "mu", Some(1.0))? }, param(params, "h", Some(1.0))?)))
        }
        "ode:linear_rotation" => {
            check_dim(2)?;
            no_delays()?;
            Ok(Box::new(ZeroDelay::new(
                LinearRotation { omega: param(params, "omega", Some(1.0))? },
                param(params, "h", Some(1.0))?,
            )))
        }
        "ode:twist" => {
            check_dim(2)?;
            no_delays()?;
            Ok(Box::new(ZeroDelay::new(Twist, param(params, "h", Some(1.0))?)))
        }
        _ => Err(Error::InvalidInput(format!("unknown builtin model '{id}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manufactured_cycle_solves_equation() {
        let m = Manufactured::new(1.0);
        for i in 0..20 {
            let t = 0.3 * i as f64;
            let mut out = [0.0];
            m.rhs(&[t.sin(), (t - core::f64::consts::FRAC_PI_2).sin()], &mut out);
            assert!((out[0] - t.cos()).abs() < 1e-14);
        }
    }

    #[test]
    fn multilinear_forms_are_symmetric() {
        let m = MackeyGlass::new(2.0, 1.0, 9.65, 2.0);
        let v = [0.8, 1.1];
        let (a, b, c) = ([0.3, -0.7], [1.2, 0.4], [-0.5, 0.9]);
        let mut x = [0.0];
        let mut y = [0.0];
        m.d3(&v, &a, &b, &c, &mut x);
        m.d3(&v, &c, &a, &b, &mut y);
        assert!((x[0] - y[0]).abs() <= 1e-14 * x[0].abs());
        let t = Twist;
        let mut x = [0.0; 2];
        let mut y = [0.0; 2];
        t.d3(&v, &a, &b, &c, &mut x);
        t.d3(&v, &b, &c, &a, &mut y);
        assert!((x[0] - y[0]).abs() < 1e-14 && (x[1] - y[1]).abs() < 1e-14);
    }

    #[test]
    fn hill_is_odd() {
        let m = MackeyGlass::new(2.0, 1.0, 9.65, 2.0);
        let p = m.hill(0.9);
        let q = m.hill(-0.9);
        assert!((p[0] + q[0]).abs() < 1e-15 && (p[1] - q[1]).abs() < 1e-15);
        assert!((p[2] + q[2]).abs() < 1e-14 && (p[3] - q[3]).abs() < 1e-13);
    }

    #[test]
    fn registry_rejects_bad_input() {
        let p = BTreeMap::new();
        assert!(builtin("nope", 1, &[1.0], &p).is_err());
        assert!(builtin("mackey_glass", 2, &[1.0], &p).is_err());
        assert!(builtin("ode:van_der_pol", 2, &[1.0], &p).is_err());
        assert!(builtin("manufactured", 1, &[1.0], &p).is_err());
        for id in BUILTIN_IDS {
            let (n, d): (usize, Vec<f64>) = match *id {
                "manufactured" => (1, vec![core::f64::consts::FRAC_PI_2]),
                id if id.starts_with("ode:") => (2, vec![]),
                _ => (1, vec![1.0]),
            };
            let mut p = BTreeMap::new();
            p.insert("r".to_string(), 1.0);
            assert!(builtin(id, n, &d, &p).is_ok(), "{id}");
        }
    }
}

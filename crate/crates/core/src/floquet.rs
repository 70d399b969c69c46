//! Floquet multipliers, Jordan chains, and periodic eigenfunctions of the linearization and its adjoint.

use crate::error::{Error, Result};
use crate::evolution::{
    dual_from_reversed, forward_solution, reversed_monodromy, reversed_solution, Discretization, MonodromyMatrix,
};
use crate::fourier::PeriodicSamples;
use crate::linalg::{self, to_complex, CMatrix, CVector};
use crate::model::DdeModel;
use crate::ops::{apply_adjoint_generator, apply_linearization};
use crate::orbit::PeriodicOrbit;
use crate::prelude::*;
use crate::segment::{pairing, DualElement, HistorySegment};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MultiplierOptions {
    /// Multipliers below this modulus are not reported.
    pub floor: f64,
    /// Half-width of the unit band that marks center multipliers.
    pub band: f64,
    /// Relative distance below which eigenvalues form one cluster.
    pub cluster_tol: f64,
    /// Relative singular-value threshold for numerical rank decisions.
    pub rank_tol: f64,
}

impl Default for MultiplierOptions {
    fn default() -> Self {
        MultiplierOptions { floor: 1e-4, band: 0.05, cluster_tol: 1e-4, rank_tol: 1e-4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MultiplierKind {
    RealPositive,
    RealNegative,
    /// Index of the conjugate partner in the raw eigenvalue list.
    ComplexPair { conjugate: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloquetMultiplier {
    pub value: Complex64,
    /// `sigma` with `exp(sigma T) = value`, or `= |value|` for a negative multiplier.
    pub exponent: Complex64,
    pub antiperiodic: bool,
    pub algebraic: usize,
    pub geometric: usize,
    pub pole_order: usize,
    pub kind: MultiplierKind,
    pub residual: f64,
    pub center: bool,
}

impl FloquetMultiplier {
    pub fn is_real(&self) -> bool {
        !matches!(self.kind, MultiplierKind::ComplexPair { .. })
    }

    pub fn modulus(&self) -> f64 {
        self.value.norm()
    }

    /// Length of the eigenfunction window: the period, or twice it for negative multipliers.
    pub fn window(&self, period: f64) -> f64 {
        if self.antiperiodic {
            2.0 * period
        } else {
            period
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloquetSpectrum {
    /// All eigenvalues of the monodromy matrix by decreasing modulus.
    pub eigenvalues: Vec<Complex64>,
    pub multipliers: Vec<FloquetMultiplier>,
}

impl FloquetSpectrum {
    pub fn center(&self) -> Vec<&FloquetMultiplier> {
        self.multipliers.iter().filter(|m| m.center).collect()
    }

    /// Multiplier nearest to `z`.
    pub fn nearest(&self, z: Complex64) -> Option<&FloquetMultiplier> {
        self.multipliers.iter().min_by(|a, b| (a.value - z).norm().partial_cmp(&(b.value - z).norm()).unwrap())
    }
}

fn exponent_of(value: Complex64, period: f64, negative: bool) -> Complex64 {
    if negative {
        Complex64::new(value.norm().ln() / period, 0.0)
    } else {
        value.ln() / period
    }
}

/// Multipliers with `|lambda| >= floor`, clustered, classified and with multiplicities.
pub fn floquet_multipliers(mono: &MonodromyMatrix, opts: &MultiplierOptions) -> Result<FloquetSpectrum> {
    let m = &mono.matrix;
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("monodromy matrix has non-finite entries".into()));
    }
    let eig = linalg::eigenvalues(m);
    let norm = m.norm().max(f64::MIN_POSITIVE);
    let mut clusters: Vec<(Complex64, Vec<usize>)> = Vec::new();
    for (i, z) in eig.iter().enumerate() {
        if z.norm() < opts.floor {
            continue;
        }
        let tol = opts.cluster_tol * z.norm();
        if let Some(c) = clusters.iter_mut().find(|(rep, _)| (rep - z).norm() <= tol) {
            c.1.push(i);
            let k = c.1.len() as f64;
            c.0 = c.1.iter().map(|&j| eig[j]).sum::<Complex64>() / k;
        } else {
            clusters.push((*z, vec![i]));
        }
    }
    let mc = to_complex(m);
    let mut out = Vec::new();
    for (rep, members) in &clusters {
        let imag_tol = 1e-12 * rep.norm().max(1.0);
        if rep.im < -imag_tol {
            continue;
        }
        let real = rep.im.abs() <= imag_tol;
        let value = if real { Complex64::new(rep.re, 0.0) } else { *rep };
        let alg = members.len();
        let a = &mc - CMatrix::identity(mc.nrows(), mc.ncols()) * value;
        let geometric = linalg::numerical_nullity(&a, opts.rank_tol)?.clamp(1, alg);
        let mut pole = alg;
        let mut ak = a.clone();
        for k in 1..=alg {
            if k > 1 {
                ak = &ak * &a;
            }
            if linalg::numerical_nullity(&ak, opts.rank_tol)? >= alg {
                pole = k;
                break;
            }
        }
        let residual = linalg::smallest_singular_value(&linalg::power(&a, alg))? / norm.powi(alg as i32);
        let kind = if !real {
            let conj = value.conj();
            let idx = (0..eig.len())
                .min_by(|&i, &j| (eig[i] - conj).norm().partial_cmp(&(eig[j] - conj).norm()).unwrap())
                .unwrap();
            MultiplierKind::ComplexPair { conjugate: idx }
        } else if value.re < 0.0 {
            MultiplierKind::RealNegative
        } else {
            MultiplierKind::RealPositive
        };
        let negative = kind == MultiplierKind::RealNegative;
        out.push(FloquetMultiplier {
            value,
            exponent: exponent_of(value, mono.period, negative),
            antiperiodic: negative,
            algebraic: alg,
            geometric,
            pole_order: pole,
            kind,
            residual,
            center: (value.norm() - 1.0).abs() <= opts.band,
        });
    }
    out.sort_by(|a, b| {
        b.value
            .norm()
            .partial_cmp(&a.value.norm())
            .unwrap()
            .then(b.value.arg().partial_cmp(&a.value.arg()).unwrap())
    });
    Ok(FloquetSpectrum { eigenvalues: eig, multipliers: out })
}

/// Jordan chain `(M - lambda) v_i = v_{i-1}`, `(M - lambda) v_0 = 0`, as nodal vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct JordanChain {
    pub multiplier: Complex64,
    pub base: f64,
    pub dim: usize,
    pub h: f64,
    pub degree: usize,
    pub vectors: Vec<CVector>,
    /// `|(M - lambda) v_i - v_{i-1}| / (|M| |v_i|)`.
    pub residuals: Vec<f64>,
    pub gram_condition: f64,
}

impl JordanChain {
    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn is_real(&self) -> bool {
        self.vectors.iter().all(|v| v.iter().all(|z| z.im == 0.0))
    }

    pub fn real_segment(&self, i: usize) -> HistorySegment {
        HistorySegment::from_nodal(self.dim, self.h, self.degree, self.vectors[i].iter().map(|z| z.re).collect())
    }

    pub fn imag_segment(&self, i: usize) -> HistorySegment {
        HistorySegment::from_nodal(self.dim, self.h, self.degree, self.vectors[i].iter().map(|z| z.im).collect())
    }

    fn rescale(&mut self, f: Complex64) {
        for v in &mut self.vectors {
            *v *= f;
        }
    }

    /// Rescales the chain so that its eigenvector is the least-squares multiple of `target`.
    pub fn align(&mut self, target: &[f64]) {
        let v = &self.vectors[0];
        let num: Complex64 = v.iter().zip(target).map(|(a, b)| a.conj() * *b).sum();
        let den: f64 = v.iter().map(|a| a.norm_sqr()).sum();
        if den > 0.0 && num.norm() > 0.0 {
            self.rescale(num / den);
        }
    }
}

fn chain_of(
    matrix: &DMatrix<f64>,
    value: Complex64,
    len: usize,
    real: bool,
) -> Result<(Vec<CVector>, Vec<f64>, f64)> {
    let mc = to_complex(matrix);
    let size = mc.nrows();
    let a = &mc - CMatrix::identity(size, size) * value;
    let top = if len == 1 {
        linalg::null_space(&a, 1)?.column(0).into_owned()
    } else {
        let ns = linalg::null_space(&linalg::power(&a, len), len)?;
        let b = linalg::power(&a, len - 1) * &ns;
        let (_, v) = linalg::svd_sorted(&b)?;
        &ns * v.column(0)
    };
    let mut chain = vec![top];
    for _ in 1..len {
        let next = &a * chain.last().unwrap();
        chain.push(next);
    }
    chain.reverse();
    let mut lead = chain[0].clone();
    if real {
        // Rotate to a real eigenvector before fixing the scale.
        let k = (0..size).max_by(|&i, &j| lead[i].norm().partial_cmp(&lead[j].norm()).unwrap()).unwrap();
        let ph = lead[k].conj() / lead[k].norm();
        for v in &mut chain {
            *v *= ph;
            v.iter_mut().for_each(|z| z.im = 0.0);
        }
        lead = chain[0].clone();
    }
    let mut normed = lead.clone();
    linalg::normalize_phase(&mut normed);
    let k = (0..size).find(|&i| lead[i].norm() > 0.0 && normed[i].norm() > 0.0).unwrap_or(0);
    let f = normed[k] / lead[k];
    for v in &mut chain {
        *v *= f;
    }
    let norm = mc.norm().max(f64::MIN_POSITIVE);
    let residuals = (0..len)
        .map(|i| {
            let mut r = &a * &chain[i];
            if i > 0 {
                r -= &chain[i - 1];
            }
            r.norm() / (norm * chain[i].norm())
        })
        .collect();
    let mut g = CMatrix::zeros(size, len);
    for (i, v) in chain.iter().enumerate() {
        g.set_column(i, v);
    }
    let cond = linalg::condition(&g)?;
    Ok((chain, residuals, cond))
}

/// Jordan chain of the monodromy matrix for a non-semisimple or simple multiplier.
pub fn jordan_chain(mono: &MonodromyMatrix, mult: &FloquetMultiplier) -> Result<JordanChain> {
    if mult.geometric > 1 {
        return Err(Error::Numerical(format!(
            "multiplier {} has {} independent eigenvectors; only single Jordan blocks are supported",
            mult.value, mult.geometric
        )));
    }
    let (vectors, residuals, gram_condition) = chain_of(&mono.matrix, mult.value, mult.algebraic, mult.is_real())?;
    Ok(JordanChain {
        multiplier: mult.value,
        base: mono.base,
        dim: mono.dim,
        h: mono.h,
        degree: mono.disc.mesh,
        vectors,
        residuals,
        gram_condition,
    })
}

fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |a, b| a * b as f64)
}

/// Coefficients `a_i` (over the chain basis) of periodic initial data for the forward eigenfunctions.
fn forward_coefficients(value: Complex64, period: f64, m: usize) -> Vec<Vec<Complex64>> {
    let zero = Complex64::new(0.0, 0.0);
    let mut a: Vec<Vec<Complex64>> = Vec::with_capacity(m);
    let mut first = vec![zero; m];
    first[0] = Complex64::new(1.0, 0.0);
    a.push(first);
    for i in 1..m {
        let mut acc = vec![zero; m];
        for k in 1..=i {
            let c = (-period).powi(k as i32) / factorial(k);
            for l in 0..m {
                acc[l] += a[i - k][l] * c;
            }
        }
        // r = -(lambda I + N) acc with (N x)[l - 1] = x[l].
        let mut r = vec![zero; m];
        for l in 0..m {
            r[l] = -acc[l] * value;
            if l + 1 < m {
                r[l] -= acc[l + 1];
            }
        }
        let mut next = vec![zero; m];
        for l in 0..m - 1 {
            next[l + 1] = r[l];
        }
        a.push(next);
    }
    a
}

/// Coefficients `b_i` (over the adjoint chain basis) of periodic initial data for the adjoint eigenfunctions.
fn adjoint_coefficients(value: Complex64, period: f64, m: usize) -> Vec<Vec<Complex64>> {
    let zero = Complex64::new(0.0, 0.0);
    let mut b = vec![vec![zero; m]; m];
    b[m - 1][m - 1] = Complex64::new(1.0, 0.0);
    for i in (0..m.saturating_sub(1)).rev() {
        let mut acc = vec![zero; m];
        for l in i + 1..m {
            let c = (-period).powi((l - i) as i32) / factorial(l - i);
            for q in 0..m {
                acc[q] += b[l][q] * c;
            }
        }
        // rhs = -(lambda I + N') acc with (N' x)[q + 1] = x[q].
        let mut rhs = vec![zero; m];
        for q in 0..m {
            rhs[q] = -acc[q] * value;
            if q >= 1 {
                rhs[q] -= acc[q - 1];
            }
        }
        for q in 0..m - 1 {
            b[i][q] = rhs[q + 1];
        }
    }
    b
}

/// Real Jordan matrix `M` of the real form `dq/dtau - A q + q M = 0`.
pub fn jordan_matrix(sigma: Complex64, m: usize, complex: bool) -> DMatrix<f64> {
    if !complex {
        let mut j = DMatrix::from_diagonal_element(m, m, sigma.re);
        for i in 1..m {
            j[(i - 1, i)] = 1.0;
        }
        return j;
    }
    let mut j = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        let o = 2 * i;
        j[(o, o)] = sigma.re;
        j[(o + 1, o + 1)] = sigma.re;
        j[(o, o + 1)] = -sigma.im;
        j[(o + 1, o)] = sigma.im;
        if i > 0 {
            j[(o - 2, o)] = 1.0;
            j[(o - 1, o + 1)] = 1.0;
        }
    }
    j
}

/// Real-form periodic (or antiperiodic) eigenfunctions sampled on an equispaced mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicEigenfunctions {
    pub multiplier: FloquetMultiplier,
    pub base: f64,
    pub period: f64,
    pub window: f64,
    /// `base + k * window / samples` for `k = 0..=samples`.
    pub times: Vec<f64>,
    /// `columns[c][k]`, single-piece segments.
    pub columns: Vec<Vec<HistorySegment>>,
    pub block: DMatrix<f64>,
    pub complex: bool,
}

fn sample_count(disc: &Discretization, window: f64, period: f64) -> usize {
    ((disc.tau_mesh as f64) * window / period).round().max(4.0) as usize
}

fn real_columns(cplx: &[CVector], complex: bool, negate_imag: bool) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for v in cplx {
        out.push(v.iter().map(|z| z.re).collect());
        if complex {
            let s = if negate_imag { -1.0 } else { 1.0 };
            out.push(v.iter().map(|z| s * z.im).collect());
        }
    }
    out
}

/// Periodic eigenfunctions built from a chain at `base` by forward propagation over one window.
pub fn periodic_eigenfunctions(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    chain: &JordanChain,
    mult: &FloquetMultiplier,
    disc: &Discretization,
) -> Result<PeriodicEigenfunctions> {
    let m = chain.len();
    let period = orbit.period;
    let s = chain.base;
    let window = mult.window(period);
    let complex = !mult.is_real();
    let sigma = mult.exponent;
    let coeffs = forward_coefficients(mult.value, period, m);
    let mut hist = Vec::new();
    for i in 0..m {
        hist.push(chain.real_segment(i));
        if complex {
            hist.push(chain.imag_segment(i));
        }
    }
    let sol = forward_solution(model, orbit, s, s + window, &hist, None, disc)?;
    let samples = sample_count(disc, window, period);
    let times: Vec<f64> = (0..=samples).map(|k| s + window * k as f64 / samples as f64).collect();
    let n = model.dim();
    let deg = disc.mesh;
    let width = if complex { 2 } else { 1 };
    let mut columns: Vec<Vec<HistorySegment>> = vec![Vec::with_capacity(times.len()); m * width];
    for &tau in &times {
        let nodal = sol.nodal_matrix(tau, deg);
        let prop: Vec<CVector> = (0..m)
            .map(|l| {
                let re = nodal.column(width * l);
                if complex {
                    let im = nodal.column(width * l + 1);
                    CVector::from_iterator(re.len(), re.iter().zip(im.iter()).map(|(a, b)| Complex64::new(*a, *b)))
                } else {
                    CVector::from_iterator(re.len(), re.iter().map(|a| Complex64::new(*a, 0.0)))
                }
            })
            .collect();
        let damp = (-sigma * (tau - s)).exp();
        let phis: Vec<CVector> = (0..m)
            .map(|i| {
                let mut acc = CVector::zeros(prop[0].len());
                for k in 0..=i {
                    let c = (s - tau).powi(k as i32) / factorial(k);
                    for l in 0..m {
                        let w = coeffs[i - k][l] * c;
                        if w.norm() != 0.0 {
                            acc += &prop[l] * w;
                        }
                    }
                }
                acc * damp
            })
            .collect();
        for (c, col) in real_columns(&phis, complex, true).into_iter().enumerate() {
            columns[c].push(HistorySegment::from_nodal(n, model.max_delay(), deg, col));
        }
    }
    Ok(PeriodicEigenfunctions {
        multiplier: mult.clone(),
        base: s,
        period,
        window,
        times,
        columns,
        block: jordan_matrix(sigma, m, complex),
        complex,
    })
}

fn column_scale(cols: &[Vec<HistorySegment>]) -> f64 {
    cols.iter().flat_map(|c| c.iter()).map(|s| linalg::max_abs(&s.f.values)).fold(0.0, f64::max)
}

impl PeriodicEigenfunctions {
    pub fn samples(&self) -> usize {
        self.times.len() - 1
    }

    /// Column `c` at sample `k` (periodic index).
    pub fn at(&self, c: usize, k: usize) -> &HistorySegment {
        &self.columns[c][k % self.samples()]
    }

    /// `max |q(base + window) - q(base)| / max |q|`.
    pub fn closure_defect(&self) -> f64 {
        let m = self.samples();
        let scale = column_scale(&self.columns).max(f64::MIN_POSITIVE);
        self.columns
            .iter()
            .map(|c| {
                c[m].f.values.iter().zip(&c[0].f.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
            / scale
    }

    /// For negative multipliers: `max |q(base + T) + q(base)| / max |q|`.
    pub fn antiperiodic_defect(&self) -> f64 {
        if !self.multiplier.antiperiodic {
            return 0.0;
        }
        let half = self.samples() / 2;
        let scale = column_scale(&self.columns).max(f64::MIN_POSITIVE);
        self.columns
            .iter()
            .map(|c| {
                c[half].f.values.iter().zip(&c[0].f.values).map(|(a, b)| (a + b).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
            / scale
    }

    fn tau_derivatives(&self) -> Vec<Vec<Vec<f64>>> {
        let m = self.samples();
        self.columns
            .iter()
            .map(|c| {
                let data: Vec<Vec<f64>> = c[..m].iter().map(|s| s.f.values.clone()).collect();
                PeriodicSamples::new(self.base, self.window, data).derivative()
            })
            .collect()
    }

    /// Relative residual of `dq/dtau - A(tau) q + q M = 0` over all samples.
    pub fn ode_residual(&self, model: &dyn DdeModel, orbit: &PeriodicOrbit) -> f64 {
        let dq = self.tau_derivatives();
        let m = self.samples();
        let n = model.dim();
        let nc = self.columns.len();
        let mut worst = 0.0f64;
        let mut scale = column_scale(&self.columns);
        for d in dq.iter().flat_map(|c| c.iter()) {
            scale = scale.max(linalg::max_abs(d));
        }
        for k in 0..m {
            let tau = self.times[k];
            for c in 0..nc {
                let q = &self.columns[c][k];
                let dth = q.derivative();
                let head = apply_linearization(model, orbit, tau, q);
                let len = q.f.values.len();
                for idx in 0..len {
                    let node = idx / n;
                    let comp = idx % n;
                    let mut qm = 0.0;
                    for c2 in 0..nc {
                        let w = self.block[(c2, c)];
                        if w != 0.0 {
                            qm += self.columns[c2][k].f.values[idx] * w;
                        }
                    }
                    let gen = if node == q.degree() { head[comp] } else { dth.f.values[idx] };
                    worst = worst.max((dq[c][k][idx] - gen + qm).abs());
                }
            }
        }
        worst / scale.max(f64::MIN_POSITIVE)
    }

    /// Relative residual of the transport equation `dq/dtau = dq/dtheta`.
    pub fn transport_residual(&self) -> f64 {
        let dq = self.tau_derivatives();
        let m = self.samples();
        let mut worst = 0.0f64;
        let mut scale = column_scale(&self.columns);
        for d in dq.iter().flat_map(|c| c.iter()) {
            scale = scale.max(linalg::max_abs(d));
        }
        for (c, col) in self.columns.iter().enumerate() {
            for k in 0..m {
                let dth = col[k].derivative();
                for (a, b) in dq[c][k].iter().zip(&dth.f.values) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
        worst / scale.max(f64::MIN_POSITIVE)
    }
}

/// Adjoint chain `(V - lambda) w_i = w_{i-1}` of the reversed-time monodromy at `tref`.
pub fn adjoint_chain(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    mult: &FloquetMultiplier,
    tref: f64,
    disc: &Discretization,
) -> Result<JordanChain> {
    let v = reversed_monodromy(model, orbit, tref, disc)?;
    if mult.geometric > 1 {
        return Err(Error::Numerical(format!("multiplier {} is not a single Jordan block", mult.value)));
    }
    let (vectors, residuals, gram_condition) = chain_of(&v.matrix, mult.value, mult.algebraic, mult.is_real())?;
    Ok(JordanChain {
        multiplier: mult.value,
        base: tref,
        dim: v.dim,
        h: v.h,
        degree: disc.mesh,
        vectors,
        residuals,
        gram_condition,
    })
}

/// Real-form adjoint eigenfunctions on the same mesh as the forward ones.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointEigenfunctions {
    pub multiplier: FloquetMultiplier,
    pub base: f64,
    pub period: f64,
    pub window: f64,
    pub times: Vec<f64>,
    /// `columns[c][k]`.
    pub columns: Vec<Vec<DualElement>>,
    /// `N` in `(d/dtau + A^*) r = r N`.
    pub block: DMatrix<f64>,
    pub complex: bool,
}

/// Adjoint periodic eigenfunctions on `[base, base + window]`, integrated backwards from `base + window`.
pub fn adjoint_eigenfunctions(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    mult: &FloquetMultiplier,
    base: f64,
    disc: &Discretization,
) -> Result<AdjointEigenfunctions> {
    let period = orbit.period;
    let window = mult.window(period);
    let tref = base + window;
    let chain = adjoint_chain(model, orbit, mult, tref, disc)?;
    let m = chain.len();
    let complex = !mult.is_real();
    let sigma = mult.exponent;
    let coeffs = adjoint_coefficients(mult.value, period, m);
    let mut hist = Vec::new();
    // Adjoint basis element l is J(w_{m-1-l}).
    for l in 0..m {
        hist.push(chain.real_segment(m - 1 - l));
        if complex {
            hist.push(chain.imag_segment(m - 1 - l));
        }
    }
    let sol = reversed_solution(model, orbit, tref, window, &hist, disc)?;
    let samples = sample_count(disc, window, period);
    let times: Vec<f64> = (0..=samples).map(|k| base + window * k as f64 / samples as f64).collect();
    let deg = disc.mesh;
    let width = if complex { 2 } else { 1 };
    let mut columns: Vec<Vec<DualElement>> = vec![Vec::with_capacity(times.len()); m * width];
    for &tau in &times {
        let v = tref - tau;
        let segs = sol.single_segments(v, deg);
        let duals: Vec<DualElement> = segs.iter().map(|z| dual_from_reversed(model, orbit, tau, z, deg)).collect();
        let damp = (-sigma * (tref - tau)).exp();
        for i in 0..m {
            let (mut re, mut im) = (duals[0].scale(0.0), duals[0].scale(0.0));
            for l in i..m {
                let c = (tau - tref).powi((l - i) as i32) / factorial(l - i);
                for q in 0..m {
                    let w = coeffs[l][q] * c * damp;
                    if w.norm() == 0.0 {
                        continue;
                    }
                    let dr = &duals[width * q];
                    re = re.axpy(w.re, dr);
                    im = im.axpy(w.im, dr);
                    if complex {
                        let di = &duals[width * q + 1];
                        re = re.axpy(-w.im, di);
                        im = im.axpy(w.re, di);
                    }
                }
            }
            columns[width * i].push(re);
            if complex {
                columns[width * i + 1].push(im);
            }
        }
    }
    Ok(AdjointEigenfunctions {
        multiplier: mult.clone(),
        base,
        period,
        window,
        times,
        columns,
        block: jordan_matrix(sigma, m, complex).transpose(),
        complex,
    })
}

fn dual_values(d: &DualElement) -> Vec<f64> {
    let mut v = d.head.clone();
    v.extend_from_slice(&d.density.values);
    v
}

fn dual_scale(cols: &[Vec<DualElement>]) -> f64 {
    cols.iter().flat_map(|c| c.iter()).map(|d| linalg::max_abs(&dual_values(d))).fold(0.0, f64::max)
}

impl AdjointEigenfunctions {
    pub fn samples(&self) -> usize {
        self.times.len() - 1
    }

    pub fn at(&self, c: usize, k: usize) -> &DualElement {
        &self.columns[c][k % self.samples()]
    }

    pub fn closure_defect(&self) -> f64 {
        let m = self.samples();
        let scale = dual_scale(&self.columns).max(f64::MIN_POSITIVE);
        self.columns
            .iter()
            .map(|c| {
                let (a, b) = (dual_values(&c[m]), dual_values(&c[0]));
                a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
            / scale
    }

    fn tau_derivatives(&self) -> Vec<Vec<Vec<f64>>> {
        let m = self.samples();
        self.columns
            .iter()
            .map(|c| {
                let data: Vec<Vec<f64>> = c[..m].iter().map(dual_values).collect();
                PeriodicSamples::new(self.base, self.window, data).derivative()
            })
            .collect()
    }

    fn scale_with(&self, d: &[Vec<Vec<f64>>]) -> f64 {
        let mut scale = dual_scale(&self.columns);
        for v in d.iter().flat_map(|c| c.iter()) {
            scale = scale.max(linalg::max_abs(v));
        }
        scale.max(f64::MIN_POSITIVE)
    }

    /// Relative residual of `(d/dtau + A^*(tau)) r - r N = 0`, point masses included.
    pub fn ode_residual(&self, model: &dyn DdeModel, orbit: &PeriodicOrbit) -> f64 {
        let dr = self.tau_derivatives();
        let scale = self.scale_with(&dr);
        let nc = self.columns.len();
        let mut worst = 0.0f64;
        for k in 0..self.samples() {
            let tau = self.times[k];
            for c in 0..nc {
                let r = &self.columns[c][k];
                let a = apply_adjoint_generator(model, orbit, tau, r);
                let mut rn = r.scale(0.0);
                for c2 in 0..nc {
                    let w = self.block[(c2, c)];
                    if w != 0.0 {
                        rn = rn.axpy(w, &self.columns[c2][k]);
                    }
                }
                let n = r.dim();
                for i in 0..n {
                    worst = worst.max((dr[c][k][i] + a.head[i] - rn.head[i]).abs());
                }
                let dens = a.density.resample(&r.density.breaks);
                for (idx, v) in dens.values.iter().enumerate() {
                    worst = worst.max((dr[c][k][n + idx] + v - rn.density.values[idx]).abs());
                }
                for (_, row) in &a.masses {
                    worst = worst.max(linalg::max_abs(row));
                }
            }
        }
        worst / scale
    }

    /// Relative residual of the density transport `dg/dtau + dg/dtheta = 0`.
    pub fn transport_residual(&self) -> f64 {
        let dr = self.tau_derivatives();
        let scale = self.scale_with(&dr);
        let mut worst = 0.0f64;
        for (c, col) in self.columns.iter().enumerate() {
            for k in 0..self.samples() {
                let r = &col[k];
                let n = r.dim();
                let dth = r.density.derivative();
                for (idx, v) in dth.values.iter().enumerate() {
                    worst = worst.max((dr[c][k][n + idx] + v).abs());
                }
            }
        }
        worst / scale
    }

    /// Replaces the columns `R` by `R C`.
    pub fn transform(&mut self, c: &DMatrix<f64>) {
        let nc = self.columns.len();
        let samples = self.columns[0].len();
        let mut out: Vec<Vec<DualElement>> = vec![Vec::with_capacity(samples); nc];
        for k in 0..samples {
            for j in 0..nc {
                let mut acc = self.columns[0][k].scale(0.0);
                for i in 0..nc {
                    if c[(i, j)] != 0.0 {
                        acc = acc.axpy(c[(i, j)], &self.columns[i][k]);
                    }
                }
                out[j].push(acc);
            }
        }
        self.columns = out;
    }
}

/// `P_ij = <r_i(tau_k), q_j(tau_k)>` for sample `k`.
pub fn pairing_matrix(
    adjoint: &[&AdjointEigenfunctions],
    forward: &[&PeriodicEigenfunctions],
    k: usize,
) -> Result<DMatrix<f64>> {
    let rs: Vec<&DualElement> = adjoint.iter().flat_map(|a| a.columns.iter().map(move |c| &c[k])).collect();
    let qs: Vec<&HistorySegment> = forward.iter().flat_map(|f| f.columns.iter().map(move |c| &c[k])).collect();
    let mut p = DMatrix::zeros(rs.len(), qs.len());
    for (i, r) in rs.iter().enumerate() {
        for (j, q) in qs.iter().enumerate() {
            p[(i, j)] = pairing(r, q)?;
        }
    }
    Ok(p)
}

/// Rescales the adjoint columns by `C = P^{-T}` so that `<r_i, q_j> = delta_ij` at the first sample.
pub fn normalize_biorthogonal(adjoint: &mut AdjointEigenfunctions, forward: &PeriodicEigenfunctions) -> Result<()> {
    let p = pairing_matrix(&[&*adjoint], &[forward], 0)?;
    let c = linalg::inverse(&p.transpose()).map_err(|_| Error::Singular("adjoint pairing matrix".into()))?;
    adjoint.transform(&c);
    Ok(())
}

/// `max_x |<r, M x> - lambda <r, x>| / max_x |<r, x>|` over smooth probe segments `x`.
pub fn left_eigen_defect(mono: &MonodromyMatrix, r: &DualElement, value: f64, probes: &[HistorySegment]) -> Result<f64> {
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for x in probes {
        let v = DVector::from_vec(mono.from_segment(x));
        let mx = mono.to_segment((&mono.matrix * v).as_slice());
        let a = pairing(r, &mx)?;
        let b = pairing(r, x)?;
        worst = worst.max((a - value * b).abs());
        scale = scale.max(b.abs() * value.abs().max(1.0));
    }
    Ok(worst / scale.max(f64::MIN_POSITIVE))
}

/// Smooth probe segments `cos(k pi theta / h)` and `sin(k pi theta / h)` in each component.
pub fn trig_probes(dim: usize, h: f64, degree: usize, harmonics: usize) -> Vec<HistorySegment> {
    let mut out = Vec::new();
    for c in 0..dim {
        for k in 0..=harmonics {
            let w = core::f64::consts::PI * k as f64 / h;
            out.push(HistorySegment::from_fn(dim, h, degree, |th| {
                let mut v = vec![0.0; dim];
                v[c] = (w * th).cos();
                v
            }));
            if k > 0 {
                out.push(HistorySegment::from_fn(dim, h, degree, |th| {
                    let mut v = vec![0.0; dim];
                    v[c] = (w * th).sin();
                    v
                }));
            }
        }
    }
    out
}

/// Periodic eigenfunctions restricted to the first period as a piecewise object for `tau` outside the mesh.
pub fn interpolate_column(ef: &PeriodicEigenfunctions, c: usize) -> PeriodicSamples {
    let m = ef.samples();
    PeriodicSamples::new(ef.base, ef.window, ef.columns[c][..m].iter().map(|s| s.f.values.clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jordan_matrix_real_and_complex() {
        let j = jordan_matrix(Complex64::new(0.5, 0.0), 2, false);
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.0, 0.5]));
        let c = jordan_matrix(Complex64::new(0.1, 2.0), 1, true);
        assert_eq!(c, DMatrix::from_row_slice(2, 2, &[0.1, -2.0, 2.0, 0.1]));
    }

    #[test]
    fn forward_coefficients_make_data_periodic() {
        // In chain coordinates M = lambda I + N; check (M - lambda) a_i = -M sum_k (-T)^k / k! a_{i-k}.
        let (lam, t, m) = (Complex64::new(1.3, 0.0), 2.0, 3);
        let a = forward_coefficients(lam, t, m);
        let apply = |x: &[Complex64]| -> Vec<Complex64> {
            (0..m).map(|l| x[l] * lam + if l + 1 < m { x[l + 1] } else { Complex64::new(0.0, 0.0) }).collect()
        };
        for i in 1..m {
            let lhs: Vec<Complex64> = apply(&a[i]).iter().zip(&a[i]).map(|(x, y)| x - y * lam).collect();
            let mut acc = vec![Complex64::new(0.0, 0.0); m];
            for k in 1..=i {
                let c = (-t).powi(k as i32) / factorial(k);
                for l in 0..m {
                    acc[l] += a[i - k][l] * c;
                }
            }
            let rhs: Vec<Complex64> = apply(&acc).iter().map(|z| -z).collect();
            for l in 0..m {
                assert!((lhs[l] - rhs[l]).norm() < 1e-13);
            }
        }
    }

    #[test]
    fn adjoint_coefficients_make_data_periodic() {
        let (lam, t, m) = (Complex64::new(-0.7, 0.2), 1.5, 3);
        let b = adjoint_coefficients(lam, t, m);
        let zero = Complex64::new(0.0, 0.0);
        let apply = |x: &[Complex64]| -> Vec<Complex64> {
            (0..m).map(|q| x[q] * lam + if q >= 1 { x[q - 1] } else { zero }).collect()
        };
        for i in 0..m - 1 {
            let lhs: Vec<Complex64> = apply(&b[i]).iter().zip(&b[i]).map(|(x, y)| x - y * lam).collect();
            let mut acc = vec![zero; m];
            for l in i + 1..m {
                let c = (-t).powi((l - i) as i32) / factorial(l - i);
                for q in 0..m {
                    acc[q] += b[l][q] * c;
                }
            }
            let rhs: Vec<Complex64> = apply(&acc).iter().map(|z| -z).collect();
            for q in 0..m {
                assert!((lhs[q] - rhs[q]).norm() < 1e-13);
            }
        }
    }
}

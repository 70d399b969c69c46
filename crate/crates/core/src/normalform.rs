//! Periodic normal form on the center manifold of a nonhyperbolic cycle.
//!
//! Each order `q` gives a forcing `R_q` per monomial `xi^alpha`. Its center part is solved
//! mode by mode in `tau`, with the resonant content becoming the normal-form terms `p` and
//! `P`; its complement part is the unique periodic solution of the forced linearization.

use crate::cheb::gauss_legendre;
use crate::error::{Error, Result};
use crate::evolution::{evolution_matrix, forward_solution, monodromy_matrix, Discretization, MonodromyMatrix};
use crate::floquet::{
    adjoint_eigenfunctions, floquet_multipliers, jordan_chain, normalize_biorthogonal, periodic_eigenfunctions,
    FloquetMultiplier, FloquetSpectrum, MultiplierOptions,
};
use crate::fourier::PeriodicSamples;
use crate::linalg::{self, CMatrix, CVector};
use crate::model::DdeModel;
use crate::ops::{apply_linearization, delay_values, eval_linearization, multilinear_flat};
use crate::orbit::{orbit_derivative_segment, PeriodicOrbit};
use crate::prelude::*;
use crate::segment::{pairing, DualElement, HistorySegment};
use core::f64::consts::PI;
use nalgebra::DMatrix;
use num_complex::Complex64;

/// Multi-indices `alpha` with `|alpha| = order` in `vars` variables, in descending lexicographic order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Monomials {
    pub vars: usize,
    pub order: usize,
    pub exponents: Vec<Vec<usize>>,
}

fn fill_exponents(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, i: usize, rem: usize) {
    if i + 1 == cur.len() {
        cur[i] = rem;
        out.push(cur.clone());
        return;
    }
    for k in (0..=rem).rev() {
        cur[i] = k;
        fill_exponents(out, cur, i + 1, rem - k);
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

impl Monomials {
    pub fn new(vars: usize, order: usize) -> Self {
        let mut exponents = Vec::new();
        if vars > 0 {
            fill_exponents(&mut exponents, &mut vec![0; vars], 0, order);
        }
        Monomials { vars, order, exponents }
    }

    pub fn len(&self) -> usize {
        self.exponents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exponents.is_empty()
    }

    pub fn index(&self, e: &[usize]) -> Option<usize> {
        self.exponents.iter().position(|x| x == e)
    }

    /// `alpha!`.
    pub fn factorial(&self, a: usize) -> f64 {
        self.exponents[a].iter().map(|&k| factorial(k)).product()
    }

    pub fn eval(&self, a: usize, xi: &[f64]) -> f64 {
        self.exponents[a].iter().zip(xi).map(|(&k, x)| x.powi(k as i32)).product()
    }

    /// Entry `(alpha, beta)` is the coefficient of `xi^beta` in `D(xi^alpha) M xi`.
    pub fn derivative_action(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let nm = self.len();
        let mut out = DMatrix::zeros(nm, nm);
        for (a, e) in self.exponents.iter().enumerate() {
            for i in 0..self.vars {
                if e[i] == 0 {
                    continue;
                }
                for j in 0..self.vars {
                    if m[(i, j)] == 0.0 {
                        continue;
                    }
                    let mut t = e.clone();
                    t[i] -= 1;
                    t[j] += 1;
                    let b = self.index(&t).expect("same total degree");
                    out[(a, b)] += e[i] as f64 * m[(i, j)];
                }
            }
        }
        out
    }

    /// Label such as `xi1^2 xi2`.
    pub fn label(&self, a: usize) -> String {
        let mut parts = Vec::new();
        for (i, &k) in self.exponents[a].iter().enumerate() {
            match k {
                0 => {}
                1 => parts.push(format!("xi{}", i + 1)),
                _ => parts.push(format!("xi{}^{}", i + 1, k)),
            }
        }
        parts.join(" ")
    }
}

fn add_exponents(a: &[usize], b: &[usize]) -> Vec<usize> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

fn unit_exponent(vars: usize, i: usize) -> Vec<usize> {
    let mut e = vec![0; vars];
    e[i] = 1;
    e
}

/// Element `(head, body)` of the extended state space; `j(phi)` is `(phi(0), phi)` and a
/// head-only element has a zero body.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtendedSegment {
    pub head: Vec<f64>,
    pub body: HistorySegment,
}

impl ExtendedSegment {
    pub fn zeros(n: usize, h: f64, degree: usize) -> Self {
        ExtendedSegment { head: vec![0.0; n], body: HistorySegment::zeros(n, h, degree) }
    }

    pub fn head_only(head: Vec<f64>, h: f64, degree: usize) -> Self {
        let n = head.len();
        ExtendedSegment { head, body: HistorySegment::zeros(n, h, degree) }
    }

    pub fn embed(phi: &HistorySegment) -> Self {
        ExtendedSegment { head: phi.head(), body: phi.clone() }
    }

    pub fn axpy(&self, alpha: f64, other: &ExtendedSegment) -> ExtendedSegment {
        ExtendedSegment {
            head: self.head.iter().zip(&other.head).map(|(a, b)| a + alpha * b).collect(),
            body: self.body.axpy(alpha, &other.body),
        }
    }

    pub fn scale(&self, alpha: f64) -> ExtendedSegment {
        ExtendedSegment { head: self.head.iter().map(|v| alpha * v).collect(), body: self.body.scale(alpha) }
    }

    pub fn has_body(&self) -> bool {
        self.body.f.values.iter().any(|v| *v != 0.0)
    }

    pub fn norm(&self) -> f64 {
        linalg::max_abs(&self.head).max(linalg::max_abs(&self.body.f.values))
    }
}

/// `<(c, g), (a, psi)> = c . a + int_0^h g(theta) psi(-theta) d theta`.
pub fn extended_pairing(f: &DualElement, x: &ExtendedSegment) -> Result<f64> {
    let b0 = x.body.head();
    let jump: f64 = f.head.iter().zip(&x.head).zip(&b0).map(|((c, a), b)| c * (a - b)).sum();
    Ok(pairing(f, &x.body)? + jump)
}

/// Single-piece resampling at the given degree.
fn resample(seg: &HistorySegment, degree: usize) -> HistorySegment {
    if seg.is_single_piece() && seg.degree() == degree {
        return seg.clone();
    }
    HistorySegment::from_fn(seg.dim(), seg.h, degree, |th| {
        let mut v = vec![0.0; seg.dim()];
        seg.eval_into(th, &mut v);
        v
    })
}

/// Center directions along the cycle: the velocity, the columns of `Q~_0` and their adjoints.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterBasis {
    pub period: f64,
    /// `T`, or `2T` when a column is antiperiodic.
    pub window: f64,
    pub dim: usize,
    pub h: f64,
    pub degree: usize,
    /// `base + k * window / samples`, `k = 0..samples`.
    pub times: Vec<f64>,
    pub velocity: Vec<HistorySegment>,
    pub velocity_adjoint: Vec<DualElement>,
    /// `columns[i][k]`.
    pub columns: Vec<Vec<HistorySegment>>,
    pub adjoints: Vec<Vec<DualElement>>,
    /// `M~_0` with zero real parts on the diagonal.
    pub block: DMatrix<f64>,
    /// First center coordinate feeds the velocity direction: `(-d/dtau + A) phi_1 = gamma'`.
    pub coupled: bool,
    pub antiperiodic: Vec<bool>,
    /// Multiplier of each column.
    pub multipliers: Vec<Complex64>,
}

impl CenterBasis {
    pub fn samples(&self) -> usize {
        self.times.len()
    }

    pub fn size(&self) -> usize {
        self.columns.len()
    }

    pub fn base(&self) -> f64 {
        self.times[0]
    }

    pub fn time(&self, k: usize) -> f64 {
        self.base() + self.window * k as f64 / self.samples() as f64
    }

    pub fn column(&self, i: usize, k: usize) -> &HistorySegment {
        &self.columns[i][k % self.samples()]
    }

    pub fn adjoint(&self, i: usize, k: usize) -> &DualElement {
        &self.adjoints[i][k % self.samples()]
    }

    /// `Q~_0(tau_k) xi`.
    pub fn combine(&self, k: usize, xi: &[f64]) -> HistorySegment {
        let mut acc = HistorySegment::zeros(self.dim, self.h, self.degree);
        for (i, x) in xi.iter().enumerate() {
            acc = acc.axpy(*x, self.column(i, k));
        }
        acc
    }

    /// Components along the velocity and the center columns.
    pub fn components(&self, k: usize, x: &ExtendedSegment) -> Result<(f64, Vec<f64>)> {
        let s = self.samples();
        let c0 = extended_pairing(&self.velocity_adjoint[k % s], x)?;
        let c = (0..self.size()).map(|i| extended_pairing(self.adjoint(i, k), x)).collect::<Result<Vec<_>>>()?;
        Ok((c0, c))
    }

    /// `x` minus its center components.
    pub fn project_complement(&self, k: usize, x: &HistorySegment) -> Result<HistorySegment> {
        let s = self.samples();
        let mut out = x.axpy(-pairing(&self.velocity_adjoint[k % s], x)?, &self.velocity[k % s]);
        for i in 0..self.size() {
            out = out.axpy(-pairing(self.adjoint(i, k), x)?, self.column(i, k));
        }
        Ok(out)
    }

    /// `S~_0`: `-1` on antiperiodic coordinates.
    pub fn symmetry_signs(&self) -> Vec<f64> {
        self.antiperiodic.iter().map(|&a| if a { -1.0 } else { 1.0 }).collect()
    }

    /// `max_k max_ij |<r_i, q_j> - delta_ij|` over velocity and columns.
    pub fn biorthogonality_defect(&self) -> Result<f64> {
        let mut worst = 0.0f64;
        for k in 0..self.samples() {
            let mut fwd = vec![&self.velocity[k]];
            let mut adj = vec![&self.velocity_adjoint[k]];
            for i in 0..self.size() {
                fwd.push(self.column(i, k));
                adj.push(self.adjoint(i, k));
            }
            for (i, r) in adj.iter().enumerate() {
                for (j, q) in fwd.iter().enumerate() {
                    let d = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((pairing(r, q)? - d).abs());
                }
            }
        }
        Ok(worst)
    }

    /// Relative residual of `(-d/dtau + A) j Q~ = j(Q~ M~ + gamma' Pi_1)` on the mesh.
    pub fn linear_residual(&self, model: &dyn DdeModel, orbit: &PeriodicOrbit) -> f64 {
        let s = self.samples();
        let n0 = self.size();
        let mut worst = 0.0f64;
        let mut scale = 0.0f64;
        let d: Vec<Vec<Vec<f64>>> = (0..n0)
            .map(|i| {
                let data: Vec<Vec<f64>> = (0..s).map(|k| self.columns[i][k].f.values.clone()).collect();
                PeriodicSamples::new(self.base(), self.window, data).derivative()
            })
            .collect();
        for k in 0..s {
            let t = self.times[k];
            for i in 0..n0 {
                let q = self.column(i, k);
                scale = scale.max(linalg::max_abs(&q.f.values));
                let dq = HistorySegment::from_nodal(self.dim, self.h, self.degree, d[i][k].clone());
                let mut rhs = HistorySegment::zeros(self.dim, self.h, self.degree);
                for j in 0..n0 {
                    if self.block[(j, i)] != 0.0 {
                        rhs = rhs.axpy(self.block[(j, i)], self.column(j, k));
                    }
                }
                if self.coupled && i == 0 {
                    rhs = rhs.axpy(1.0, &self.velocity[k]);
                }
                let body = dq.scale(-1.0).axpy(1.0, &q.derivative()).sub(&rhs);
                let lq = apply_linearization(model, orbit, t, q);
                let head: Vec<f64> =
                    dq.head().iter().zip(&lq).zip(rhs.head()).map(|((a, b), c)| -a + b - c).collect();
                worst = worst.max(linalg::max_abs(&head)).max(linalg::max_abs(&body.f.values));
            }
        }
        worst / scale.max(f64::MIN_POSITIVE)
    }
}

fn flatten_block(out: &mut DMatrix<f64>, at: usize, b: &DMatrix<f64>) {
    for i in 0..b.nrows() {
        for j in 0..b.ncols() {
            out[(at + i, at + j)] = if i == j { 0.0 } else { b[(i, j)] };
        }
    }
}

/// Center basis from the monodromy at `base` and its spectrum.
pub fn center_basis(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    mono: &MonodromyMatrix,
    spectrum: &FloquetSpectrum,
    disc: &Discretization,
) -> Result<CenterBasis> {
    build_basis(model, orbit, mono, spectrum, disc, true)
}

/// Basis with the velocity direction only (and the trivial Jordan partner when the trivial
/// multiplier is double); the complement then holds every other multiplier.
pub fn velocity_basis(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    mono: &MonodromyMatrix,
    spectrum: &FloquetSpectrum,
    disc: &Discretization,
) -> Result<CenterBasis> {
    build_basis(model, orbit, mono, spectrum, disc, false)
}

fn build_basis(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    mono: &MonodromyMatrix,
    spectrum: &FloquetSpectrum,
    disc: &Discretization,
    critical: bool,
) -> Result<CenterBasis> {
    let period = orbit.period;
    let base = mono.base;
    let (n, h, deg) = (model.dim(), model.max_delay(), disc.mesh);
    let center: Vec<&FloquetMultiplier> = spectrum.center();
    let trivial = center
        .iter()
        .copied()
        .filter(|m| m.is_real() && !m.antiperiodic)
        .min_by(|a, b| (a.value.re - 1.0).abs().partial_cmp(&(b.value.re - 1.0).abs()).unwrap())
        .ok_or_else(|| Error::InvalidInput("no trivial multiplier in the unit band".into()))?;
    let coupled = trivial.algebraic > 1;
    let others: Vec<&FloquetMultiplier> =
        center.iter().copied().filter(|m| critical && !core::ptr::eq(*m, trivial)).collect();
    if critical && others.is_empty() && !coupled {
        return Err(Error::InvalidInput("no critical multiplier in the unit band besides the trivial one".into()));
    }
    let anti = others.iter().any(|m| m.antiperiodic);
    let window = if anti { 2.0 * period } else { period };
    let samples = ((disc.tau_mesh as f64) * window / period).round() as usize;
    let times: Vec<f64> = (0..samples).map(|k| base + window * k as f64 / samples as f64).collect();

    let chain = jordan_chain(mono, trivial)?;
    let mut pe = periodic_eigenfunctions(model, orbit, &chain, trivial, disc)?;
    let v0 = orbit_derivative_segment(orbit, base, h, deg);
    let q0 = &pe.columns[0][0].f.values;
    let num: f64 = q0.iter().zip(&v0.f.values).map(|(a, b)| a * b).sum();
    let den: f64 = q0.iter().map(|a| a * a).sum();
    let s = num / den;
    for col in pe.columns.iter_mut() {
        for seg in col.iter_mut() {
            *seg = seg.scale(s);
        }
    }
    let mut ae = adjoint_eigenfunctions(model, orbit, trivial, base, disc)?;
    normalize_biorthogonal(&mut ae, &pe)?;
    let velocity: Vec<HistorySegment> = times.iter().map(|&t| orbit_derivative_segment(orbit, t, h, deg)).collect();
    let velocity_adjoint: Vec<DualElement> = (0..samples).map(|k| ae.at(0, k).clone()).collect();

    let mut columns = Vec::new();
    let mut adjoints = Vec::new();
    let mut blocks: Vec<DMatrix<f64>> = Vec::new();
    let mut antiperiodic = Vec::new();
    let mut multipliers = Vec::new();
    if coupled {
        if pe.columns.len() != 2 {
            return Err(Error::Numerical(format!(
                "trivial multiplier has algebraic multiplicity {}, only 2 is supported",
                pe.columns.len()
            )));
        }
        columns.push((0..samples).map(|k| pe.at(1, k).clone()).collect());
        adjoints.push((0..samples).map(|k| ae.at(1, k).clone()).collect());
        blocks.push(DMatrix::zeros(1, 1));
        antiperiodic.push(false);
        multipliers.push(trivial.value);
    }
    for m in &others {
        let chain = jordan_chain(mono, m)?;
        let pe = periodic_eigenfunctions(model, orbit, &chain, m, disc)?;
        let mut ae = adjoint_eigenfunctions(model, orbit, m, base, disc)?;
        normalize_biorthogonal(&mut ae, &pe)?;
        for c in 0..pe.columns.len() {
            columns.push((0..samples).map(|k| pe.at(c, k).clone()).collect());
            adjoints.push((0..samples).map(|k| ae.at(c, k).clone()).collect());
            antiperiodic.push(m.antiperiodic);
            multipliers.push(m.value);
        }
        blocks.push(pe.block.clone());
    }
    let n0 = columns.len();
    let mut block = DMatrix::zeros(n0, n0);
    let mut at = 0;
    for b in &blocks {
        flatten_block(&mut block, at, b);
        at += b.nrows();
    }
    Ok(CenterBasis {
        period,
        window,
        dim: n,
        h,
        degree: deg,
        times,
        velocity,
        velocity_adjoint,
        columns,
        adjoints,
        block,
        coupled,
        antiperiodic,
        multipliers,
    })
}

/// Solved components of one order.
#[derive(Debug, Clone, PartialEq)]
pub struct MonomialCoefficients {
    pub order: usize,
    pub monomials: Monomials,
    /// `forcing[alpha][k]`.
    pub forcing: Vec<Vec<ExtendedSegment>>,
    /// `p[alpha][k]`.
    pub p: Vec<Vec<f64>>,
    /// `normal[alpha][k][i]`, the vector `P_alpha`.
    pub normal: Vec<Vec<Vec<f64>>>,
    /// `H^00_alpha`.
    pub h_velocity: Vec<Vec<f64>>,
    /// `H~_alpha`.
    pub h_center: Vec<Vec<Vec<f64>>>,
    /// `H^h_alpha(tau_k)` for `k = 0..=samples`.
    pub h_hyperbolic: Vec<Vec<HistorySegment>>,
    /// Smallest singular value kept as a nonresonant divisor.
    pub min_divisor: f64,
}

impl MonomialCoefficients {
    /// Full `H_alpha(tau_k)`.
    pub fn segment(&self, basis: &CenterBasis, a: usize, k: usize) -> HistorySegment {
        let s = basis.samples();
        let mut out = self.h_hyperbolic[a][k].axpy(self.h_velocity[a][k % s], &basis.velocity[k % s]);
        for i in 0..basis.size() {
            out = out.axpy(self.h_center[a][k % s][i], basis.column(i, k));
        }
        out
    }

    /// `sum_alpha P_alpha(tau_k) xi^alpha`.
    pub fn normal_at(&self, k: usize, xi: &[f64]) -> Vec<f64> {
        let n0 = self.monomials.vars;
        let mut out = vec![0.0; n0];
        for a in 0..self.monomials.len() {
            let m = self.monomials.eval(a, xi);
            for i in 0..n0 {
                out[i] += self.normal[a][k][i] * m;
            }
        }
        out
    }

    pub fn p_at(&self, k: usize, xi: &[f64]) -> f64 {
        (0..self.monomials.len()).map(|a| self.p[a][k] * self.monomials.eval(a, xi)).sum()
    }

    fn find(&self, e: &[usize]) -> Option<usize> {
        self.monomials.index(e)
    }
}

fn ordered_tuples(vars: usize, len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    for _ in 0..len {
        out = out
            .into_iter()
            .flat_map(|t| {
                (0..vars).map(move |i| {
                    let mut u = t.clone();
                    u.push(i);
                    u
                })
            })
            .collect();
    }
    out
}

/// Forcing `R_q` per monomial on the basis mesh. Order three needs the solved order two.
pub fn assemble_rq(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    basis: &CenterBasis,
    lower: &[MonomialCoefficients],
    q: usize,
) -> Result<Vec<Vec<ExtendedSegment>>> {
    let (n, h, deg) = (basis.dim, basis.h, basis.degree);
    let n0 = basis.size();
    let s = basis.samples();
    let mons = Monomials::new(n0, q);
    let mut out = vec![vec![ExtendedSegment::zeros(n, h, deg); s]; mons.len()];
    let second = match q {
        2 => None,
        3 => {
            if basis.coupled {
                return Err(Error::InvalidInput("order three is not available with a coupled trivial block".into()));
            }
            Some(
                lower
                    .iter()
                    .find(|m| m.order == 2)
                    .ok_or_else(|| Error::InvalidInput("order three needs the solved order two".into()))?,
            )
        }
        _ => return Err(Error::InvalidInput(format!("order {q} not available"))),
    };
    let tuples = ordered_tuples(n0, q);
    for k in 0..s {
        let t = basis.times[k];
        let dv: Vec<Vec<f64>> = (0..n0).map(|i| delay_values(model, basis.column(i, k))).collect();
        for tup in &tuples {
            let dirs: Vec<&[f64]> = tup.iter().map(|&i| dv[i].as_slice()).collect();
            let g = multilinear_flat(model, orbit, t, &dirs)?;
            let mut e = vec![0; n0];
            tup.iter().for_each(|&i| e[i] += 1);
            let a = mons.index(&e).expect("monomial of order q");
            for (x, y) in out[a][k].head.iter_mut().zip(&g) {
                *x += y;
            }
        }
        let derivs: Vec<HistorySegment> = (0..n0).map(|i| basis.column(i, k).derivative()).collect();
        if q == 2 && basis.coupled {
            for (j, dphi) in derivs.iter().enumerate() {
                let mut x = dphi.clone();
                if j == 0 {
                    x = x.sub(&basis.velocity[k]);
                }
                let a = mons.index(&add_exponents(&unit_exponent(n0, 0), &unit_exponent(n0, j))).unwrap();
                out[a][k] = out[a][k].axpy(-1.0, &ExtendedSegment::embed(&x));
            }
        }
        if let Some(low) = second {
            let hs: Vec<HistorySegment> = (0..low.monomials.len()).map(|b| low.segment(basis, b, k)).collect();
            for (b, eb) in low.monomials.exponents.iter().enumerate() {
                let dh = delay_values(model, &hs[b]);
                for i in 0..n0 {
                    let g = multilinear_flat(model, orbit, t, &[&dv[i], &dh])?;
                    let a = mons.index(&add_exponents(eb, &unit_exponent(n0, i))).unwrap();
                    for (x, y) in out[a][k].head.iter_mut().zip(&g) {
                        *x += 2.0 * y;
                    }
                }
                let emb = ExtendedSegment::embed(&hs[b]);
                for i in 0..n0 {
                    if eb[i] == 0 {
                        continue;
                    }
                    for (c, ec) in low.monomials.exponents.iter().enumerate() {
                        let coef = eb[i] as f64 * low.normal[c][k][i];
                        if coef == 0.0 {
                            continue;
                        }
                        let mut e = add_exponents(eb, ec);
                        e[i] -= 1;
                        let a = mons.index(&e).unwrap();
                        out[a][k] = out[a][k].axpy(-coef, &emb);
                    }
                }
            }
            for (c, ec) in low.monomials.exponents.iter().enumerate() {
                let coef = low.p[c][k];
                if coef == 0.0 {
                    continue;
                }
                for (j, dphi) in derivs.iter().enumerate() {
                    let a = mons.index(&add_exponents(ec, &unit_exponent(n0, j))).unwrap();
                    out[a][k] = out[a][k].axpy(-coef, &ExtendedSegment::embed(dphi));
                }
            }
        }
    }
    Ok(out)
}

/// Center part of one order: normal-form terms and the center components of `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterSolution {
    pub p: Vec<Vec<f64>>,
    pub normal: Vec<Vec<Vec<f64>>>,
    pub h_velocity: Vec<Vec<f64>>,
    pub h_center: Vec<Vec<Vec<f64>>>,
    pub min_divisor: f64,
    pub resonant: usize,
}

/// Solves `-dH00/dtau - D H00 M xi [+ H~_1] = p - R00` and `-dH~/dtau + M H~ - D H~ M xi = P - R~`
/// per Fourier mode over `window`; singular values below `divisor_tol` (Fischer-weighted
/// monomials) route the forcing into `p` and `P`.
pub fn solve_homological_center(
    r_velocity: &[Vec<f64>],
    r_center: &[Vec<Vec<f64>>],
    block: &DMatrix<f64>,
    coupled: bool,
    window: f64,
    order: usize,
    divisor_tol: f64,
) -> Result<CenterSolution> {
    let n0 = block.nrows();
    let mons = Monomials::new(n0, order);
    let nm = mons.len();
    if r_velocity.len() != nm || r_center.len() != nm {
        return Err(Error::DimensionMismatch { expected: nm, found: r_velocity.len() });
    }
    let s = r_velocity[0].len();
    let w = 1 + n0;
    let d = nm * w;
    let act = mons.derivative_action(block);
    let mut kmat = DMatrix::<f64>::zeros(d, d);
    for b in 0..nm {
        for a in 0..nm {
            let c = act[(a, b)];
            if c != 0.0 {
                for comp in 0..w {
                    kmat[(b * w + comp, a * w + comp)] -= c;
                }
            }
        }
        if coupled {
            kmat[(b * w, b * w + 1)] += 1.0;
        }
        for i in 0..n0 {
            for j in 0..n0 {
                kmat[(b * w + 1 + i, b * w + 1 + j)] += block[(i, j)];
            }
        }
    }
    let weights: Vec<f64> = (0..d).map(|r| mons.factorial(r / w).sqrt()).collect();
    let stacked: Vec<Vec<f64>> = (0..s)
        .map(|k| {
            let mut v = Vec::with_capacity(d);
            for a in 0..nm {
                v.push(r_velocity[a][k]);
                v.extend_from_slice(&r_center[a][k]);
            }
            v
        })
        .collect();
    let kmax = ((s - 1) / 2) as i64;
    let mut ys = vec![vec![0.0; d]; s];
    let mut ns = vec![vec![0.0; d]; s];
    let mut min_divisor = f64::INFINITY;
    let mut resonant = 0;
    for m in -kmax..=kmax {
        let omega = 2.0 * PI * m as f64 / window;
        let mut rk = CVector::zeros(d);
        for (k, row) in stacked.iter().enumerate() {
            let ph = -2.0 * PI * ((m * k as i64).rem_euclid(s as i64)) as f64 / s as f64;
            let e = Complex64::new(ph.cos(), ph.sin());
            for r in 0..d {
                rk[r] += e * row[r];
            }
        }
        rk /= Complex64::new(s as f64, 0.0);
        if rk.iter().all(|z| z.norm() == 0.0) {
            continue;
        }
        let mut lhat = CMatrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                let mut v = Complex64::new(kmat[(r, c)], 0.0);
                if r == c {
                    v -= Complex64::new(0.0, omega);
                }
                lhat[(r, c)] = v * (weights[r] / weights[c]);
            }
        }
        let rhat = CVector::from_iterator(d, (0..d).map(|r| rk[r] * weights[r]));
        let svd = lhat.svd(true, true);
        let u = svd.u.ok_or_else(|| Error::Numerical("singular value decomposition failed".into()))?;
        let vt = svd.v_t.ok_or_else(|| Error::Numerical("singular value decomposition failed".into()))?;
        let mut nhat = CVector::zeros(d);
        let mut yhat = CVector::zeros(d);
        for l in 0..d {
            let sig = svd.singular_values[l];
            let ul = u.column(l);
            let proj = ul.dotc(&rhat);
            if sig < divisor_tol {
                resonant += 1;
                nhat += ul * proj;
            } else {
                min_divisor = min_divisor.min(sig);
                let vl = vt.row(l).adjoint();
                yhat -= vl * (proj / sig);
            }
        }
        for k in 0..s {
            let ph = 2.0 * PI * ((m * k as i64).rem_euclid(s as i64)) as f64 / s as f64;
            let e = Complex64::new(ph.cos(), ph.sin());
            for r in 0..d {
                ys[k][r] += (yhat[r] * e).re / weights[r];
                ns[k][r] += (nhat[r] * e).re / weights[r];
            }
        }
    }
    let pick = |v: &Vec<Vec<f64>>, a: usize| -> (Vec<f64>, Vec<Vec<f64>>) {
        let scalar = (0..s).map(|k| v[k][a * w]).collect();
        let vector = (0..s).map(|k| v[k][a * w + 1..(a + 1) * w].to_vec()).collect();
        (scalar, vector)
    };
    let mut sol = CenterSolution {
        p: Vec::new(),
        normal: Vec::new(),
        h_velocity: Vec::new(),
        h_center: Vec::new(),
        min_divisor,
        resonant,
    };
    for a in 0..nm {
        let (p, pv) = pick(&ns, a);
        let (h0, hv) = pick(&ys, a);
        sol.p.push(p);
        sol.normal.push(pv);
        sol.h_velocity.push(h0);
        sol.h_center.push(hv);
    }
    Ok(sol)
}

/// Integral `E(t, theta) = int_0^{-theta} e^{mu (t-u)} psi(t-u)(theta+u) du` of a segment-valued
/// forcing `psi` along characteristics, at fixed `theta` values.
struct BodyIntegral {
    /// Per `theta`: quadrature `(u, weight, samples of psi(.)(theta + u) re/im)`.
    points: Vec<Vec<(f64, f64, PeriodicSamples, Option<PeriodicSamples>)>>,
}

impl BodyIntegral {
    fn new(thetas: &[f64], re: &[ExtendedSegment], im: Option<&[ExtendedSegment]>, base: f64, window: f64) -> Self {
        let (x, wts) = gauss_legendre(16);
        let n = re[0].head.len();
        let sample = |src: &[ExtendedSegment], th: f64| -> PeriodicSamples {
            let data: Vec<Vec<f64>> = src
                .iter()
                .map(|e| {
                    let mut v = vec![0.0; n];
                    e.body.eval_into(th, &mut v);
                    v
                })
                .collect();
            PeriodicSamples::new(base, window, data)
        };
        let points = thetas
            .iter()
            .map(|&th| {
                let len = -th;
                if len <= 0.0 {
                    return Vec::new();
                }
                x.iter()
                    .zip(&wts)
                    .map(|(&xi, &wi)| {
                        let u = 0.5 * len * (xi + 1.0);
                        (u, 0.5 * len * wi, sample(re, th + u), im.map(|s| sample(s, th + u)))
                    })
                    .collect()
            })
            .collect();
        BodyIntegral { points }
    }

    fn eval(&self, i: usize, t: f64, mu: Complex64, out_re: &mut [f64], out_im: &mut [f64]) {
        out_re.iter_mut().for_each(|v| *v = 0.0);
        out_im.iter_mut().for_each(|v| *v = 0.0);
        let n = out_re.len();
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        for (u, w, pr, pi) in &self.points[i] {
            let e = (mu * (t - u)).exp() * *w;
            pr.eval_into(t - u, &mut a);
            match pi {
                Some(p) => p.eval_into(t - u, &mut b),
                None => b.iter_mut().for_each(|v| *v = 0.0),
            }
            for c in 0..n {
                let z = e * Complex64::new(a[c], b[c]);
                out_re[c] += z.re;
                out_im[c] += z.im;
            }
        }
    }
}

/// Periodic solver for `(-d/dtau + A - mu) j g = -F` on the complement of the center subspace.
pub struct HyperbolicSolver<'a> {
    model: &'a dyn DdeModel,
    orbit: &'a PeriodicOrbit,
    basis: &'a CenterBasis,
    disc: Discretization,
    window_matrix: DMatrix<f64>,
    border_forward: DMatrix<f64>,
    border_adjoint: DMatrix<f64>,
}

impl<'a> HyperbolicSolver<'a> {
    pub fn new(
        model: &'a dyn DdeModel,
        orbit: &'a PeriodicOrbit,
        basis: &'a CenterBasis,
        disc: &Discretization,
    ) -> Result<Self> {
        let base = basis.base();
        let window_matrix = evolution_matrix(model, orbit, base, base + basis.window, disc)?;
        let size = window_matrix.nrows();
        let (n, h, deg) = (basis.dim, basis.h, disc.mesh);
        let mut fwd = vec![&basis.velocity[0]];
        let mut adj = vec![&basis.velocity_adjoint[0]];
        for i in 0..basis.size() {
            fwd.push(basis.column(i, 0));
            adj.push(basis.adjoint(i, 0));
        }
        let nc = fwd.len();
        let mut border_forward = DMatrix::zeros(size, nc);
        for (c, q) in fwd.iter().enumerate() {
            let v = resample(q, deg).f.values;
            border_forward.column_mut(c).copy_from_slice(&v);
        }
        let mut border_adjoint = DMatrix::zeros(nc, size);
        for j in 0..size {
            let mut e = vec![0.0; size];
            e[j] = 1.0;
            let seg = HistorySegment::from_nodal(n, h, deg, e);
            for (r, a) in adj.iter().enumerate() {
                border_adjoint[(r, j)] = pairing(a, &seg)?;
            }
        }
        Ok(HyperbolicSolver { model, orbit, basis, disc: *disc, window_matrix, border_forward, border_adjoint })
    }

    /// Complement-projected `g(tau_k)`, `k = 0..=samples`, as real and imaginary parts.
    pub fn solve(
        &self,
        mu: Complex64,
        forcing_re: &[ExtendedSegment],
        forcing_im: Option<&[ExtendedSegment]>,
    ) -> Result<(Vec<HistorySegment>, Vec<HistorySegment>)> {
        let basis = self.basis;
        let (model, orbit) = (self.model, self.orbit);
        let s = basis.samples();
        if forcing_re.len() != s || forcing_im.map_or(false, |f| f.len() != s) {
            return Err(Error::DimensionMismatch { expected: s, found: forcing_re.len() });
        }
        let (n, h, deg) = (basis.dim, basis.h, self.disc.mesh);
        let base = basis.base();
        let window = basis.window;
        let complex = mu.im != 0.0 || forcing_im.is_some();
        let cols = if complex { 2 } else { 1 };
        let heads = |src: &[ExtendedSegment]| {
            PeriodicSamples::new(base, window, src.iter().map(|e| e.head.clone()).collect())
        };
        let head_re = heads(forcing_re);
        let head_im = forcing_im.map(heads);
        let has_body = forcing_re.iter().chain(forcing_im.unwrap_or(&[])).any(|e| e.has_body());
        let delays = model.delays().to_vec();
        let lag_thetas: Vec<f64> = delays.iter().map(|d| -d).collect();
        let lag_int = has_body.then(|| BodyIntegral::new(&lag_thetas, forcing_re, forcing_im, base, window));
        let eff = |r: f64, out: &mut DMatrix<f64>| {
            let e = (mu * r).exp();
            let a = head_re.eval(r);
            let b = head_im.as_ref().map(|p| p.eval(r)).unwrap_or_else(|| vec![0.0; n]);
            let mut re: Vec<f64> = (0..n).map(|c| (e * Complex64::new(a[c], b[c])).re).collect();
            let mut im: Vec<f64> = (0..n).map(|c| (e * Complex64::new(a[c], b[c])).im).collect();
            if let Some(li) = &lag_int {
                let blocks = eval_linearization(model, orbit, r);
                let mut er = vec![0.0; n];
                let mut ei = vec![0.0; n];
                for j in 0..delays.len() {
                    li.eval(j, r, mu, &mut er, &mut ei);
                    let bj = &blocks[j + 1];
                    for p in 0..n {
                        for q in 0..n {
                            re[p] += bj[(p, q)] * er[q];
                            im[p] += bj[(p, q)] * ei[q];
                        }
                    }
                }
            }
            for p in 0..n {
                out[(p, 0)] = re[p];
                if cols == 2 {
                    out[(p, 1)] = im[p];
                }
            }
        };
        let f = |r: f64, _mid: f64, out: &mut DMatrix<f64>| eff(r, out);
        let zeros = vec![HistorySegment::zeros(n, h, deg); cols];
        let sol0 = forward_solution(model, orbit, base, base + window, &zeros, Some(&f), &self.disc)?;
        let v = sol0.nodal_matrix(base + window, deg);
        let size = self.window_matrix.nrows();
        let nc = self.border_forward.ncols();
        let shift = (mu * window).exp();
        let mut sys = CMatrix::zeros(size + nc, size + nc);
        for i in 0..size {
            for j in 0..size {
                sys[(i, j)] = Complex64::new(self.window_matrix[(i, j)], 0.0);
            }
            sys[(i, i)] -= shift;
            for c in 0..nc {
                sys[(i, size + c)] = Complex64::new(-self.border_forward[(i, c)], 0.0);
                sys[(size + c, i)] = Complex64::new(self.border_adjoint[(c, i)], 0.0);
            }
        }
        let mut rhs = CMatrix::zeros(size + nc, 1);
        for i in 0..size {
            rhs[(i, 0)] = -Complex64::new(v[(i, 0)], if cols == 2 { v[(i, 1)] } else { 0.0 });
        }
        let y0 = linalg::solve_complex(&sys, &rhs).map_err(|_| Error::Resonance { divisor: 0.0 })?;
        if y0.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::Resonance { divisor: 0.0 });
        }
        let mut init = vec![HistorySegment::from_nodal(n, h, deg, (0..size).map(|i| y0[(i, 0)].re).collect())];
        if cols == 2 {
            init.push(HistorySegment::from_nodal(n, h, deg, (0..size).map(|i| y0[(i, 0)].im).collect()));
        }
        let sol = forward_solution(model, orbit, base, base + window, &init, Some(&f), &self.disc)?;
        let grid_thetas: Vec<f64> = {
            let proto = HistorySegment::zeros(n, h, deg);
            (0..=deg).map(|j| proto.f.node(0, j)).collect()
        };
        let node_int = has_body.then(|| BodyIntegral::new(&grid_thetas, forcing_re, forcing_im, base, window));
        let mut out_re = Vec::with_capacity(s + 1);
        let mut out_im = Vec::with_capacity(s + 1);
        for k in 0..=s {
            let t = basis.time(k);
            let segs = sol.single_segments(t, deg);
            let mut yr = segs[0].clone();
            let mut yi = if cols == 2 { segs[1].clone() } else { HistorySegment::zeros(n, h, deg) };
            if let Some(ni) = &node_int {
                let mut er = vec![0.0; n];
                let mut ei = vec![0.0; n];
                for j in 0..=deg {
                    ni.eval(j, t, mu, &mut er, &mut ei);
                    for c in 0..n {
                        yr.f.values[j * n + c] += er[c];
                        yi.f.values[j * n + c] += ei[c];
                    }
                }
            }
            let e = (-mu * t).exp();
            let gr = yr.scale(e.re).axpy(-e.im, &yi);
            let gi = yi.scale(e.re).axpy(e.im, &yr);
            out_re.push(basis.project_complement(k, &gr)?);
            out_im.push(basis.project_complement(k, &gi)?);
        }
        Ok((out_re, out_im))
    }
}

/// Eigenvalues of a block-diagonal matrix with blocks of size at most two.
fn block_eigenvalues(m: &DMatrix<f64>) -> Result<Vec<Complex64>> {
    let d = m.nrows();
    let mut out = Vec::with_capacity(d);
    let mut i = 0;
    while i < d {
        let joined = i + 1 < d && (m[(i, i + 1)] != 0.0 || m[(i + 1, i)] != 0.0);
        if !joined {
            out.push(Complex64::new(m[(i, i)], 0.0));
            i += 1;
            continue;
        }
        if (i + 2..d).any(|j| m[(i, j)] != 0.0 || m[(j, i)] != 0.0 || m[(i + 1, j)] != 0.0 || m[(j, i + 1)] != 0.0) {
            return Err(Error::InvalidInput("center block larger than two is not supported".into()));
        }
        let (a, b, c, e) = (m[(i, i)], m[(i, i + 1)], m[(i + 1, i)], m[(i + 1, i + 1)]);
        let half = 0.5 * (a + e);
        let disc = Complex64::new(0.25 * (a - e) * (a - e) + b * c, 0.0).sqrt();
        out.push(half + disc);
        out.push(half - disc);
        i += 2;
    }
    Ok(out)
}

/// Eigen-decomposition `act = V diag(mu) V^{-1}` of the monomial action of `block`; the
/// eigenvalues are the sums `sum_i alpha_i lambda_i` over the eigenvalues of `block`.
fn diagonalize(mons: &Monomials, block: &DMatrix<f64>, act: &DMatrix<f64>) -> Result<(Vec<Complex64>, CMatrix, CMatrix)> {
    let d = act.nrows();
    if act.iter().all(|v| *v == 0.0) {
        return Ok((vec![Complex64::new(0.0, 0.0); d], CMatrix::identity(d, d), CMatrix::identity(d, d)));
    }
    let scale = act.norm().max(1.0);
    let lambda = block_eigenvalues(block)?;
    let mut groups: Vec<(Complex64, usize)> = Vec::new();
    for e in &mons.exponents {
        let z: Complex64 = e.iter().zip(&lambda).map(|(&k, l)| l * k as f64).sum();
        match groups.iter_mut().find(|(c, _)| (*c - z).norm() < 1e-8 * scale) {
            Some(g) => g.1 += 1,
            None => groups.push((z, 1)),
        }
    }
    let ca = linalg::to_complex(act);
    let mut v = CMatrix::zeros(d, d);
    let mut mus = Vec::with_capacity(d);
    let mut col = 0;
    for (z, m) in groups {
        let shifted = &ca - CMatrix::identity(d, d) * z;
        let ns = linalg::null_space(&shifted, m)?;
        if (&shifted * &ns).iter().any(|x| x.norm() > 1e-8 * scale) {
            return Err(Error::Numerical("monomial action matrix is not diagonalizable".into()));
        }
        for c in 0..m {
            v.set_column(col, &ns.column(c));
            mus.push(z);
            col += 1;
        }
    }
    let vinv = v
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::Numerical("monomial action matrix is not diagonalizable".into()))?;
    Ok((mus, v, vinv))
}

/// Complement components `H^h_alpha(tau_k)`, `k = 0..=samples`, solving
/// `(-d/dtau + A) j H_alpha - sum_beta H_beta act[beta, alpha] = -R_alpha` on the complement.
pub fn solve_homological_hyperbolic(
    solver: &HyperbolicSolver<'_>,
    forcing: &[Vec<ExtendedSegment>],
    mons: &Monomials,
    block: &DMatrix<f64>,
) -> Result<Vec<Vec<HistorySegment>>> {
    let nm = forcing.len();
    let act = mons.derivative_action(block);
    let (mus, v, vinv) = diagonalize(mons, block, &act)?;
    let trivial = act.iter().all(|x| *x == 0.0);
    let mut out: Vec<Vec<HistorySegment>> = Vec::with_capacity(nm);
    if trivial {
        for f in forcing {
            out.push(solver.solve(Complex64::new(0.0, 0.0), f, None)?.0);
        }
        return Ok(out);
    }
    let s = forcing[0].len();
    let zero = forcing[0][0].scale(0.0);
    let mut acc: Vec<Vec<HistorySegment>> = Vec::new();
    for j in 0..nm {
        let mut fr = vec![zero.clone(); s];
        let mut fi = vec![zero.clone(); s];
        for a in 0..nm {
            let c = v[(a, j)];
            if c.norm() == 0.0 {
                continue;
            }
            for k in 0..s {
                fr[k] = fr[k].axpy(c.re, &forcing[a][k]);
                fi[k] = fi[k].axpy(c.im, &forcing[a][k]);
            }
        }
        let (gr, gi) = solver.solve(mus[j], &fr, Some(&fi))?;
        if acc.is_empty() {
            acc = vec![vec![gr[0].scale(0.0); gr.len()]; nm];
        }
        for a in 0..nm {
            let c = vinv[(j, a)];
            for k in 0..gr.len() {
                acc[a][k] = acc[a][k].axpy(c.re, &gr[k]).axpy(-c.im, &gi[k]);
            }
        }
    }
    Ok(acc)
}

/// Cross-check for the complement solve with `mu = 0`: integrates the forced linearization from
/// zero data `periods` windows in the past and projects out the center part at the mesh times.
pub fn truncated_integral(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    basis: &CenterBasis,
    forcing: &[ExtendedSegment],
    periods: usize,
    disc: &Discretization,
) -> Result<Vec<HistorySegment>> {
    if forcing.iter().any(|f| f.has_body()) {
        return Err(Error::InvalidInput("truncated integral takes head-valued forcing only".into()));
    }
    let (n, h, deg) = (basis.dim, basis.h, disc.mesh);
    let base = basis.base();
    let heads = PeriodicSamples::new(base, basis.window, forcing.iter().map(|e| e.head.clone()).collect());
    let f = |r: f64, _mid: f64, out: &mut DMatrix<f64>| {
        let v = heads.eval(r);
        for p in 0..n {
            out[(p, 0)] = v[p];
        }
    };
    let start = base - periods as f64 * basis.window;
    let zeros = vec![HistorySegment::zeros(n, h, deg)];
    let sol = forward_solution(model, orbit, start, base + basis.window, &zeros, Some(&f), disc)?;
    (0..basis.samples()).map(|k| basis.project_complement(k, &sol.single_segments(basis.time(k), deg)[0])).collect()
}

/// Residual of the full order-`q` homological equation per monomial, with spectral
/// `tau`-derivatives over the window, relative to the forcing scale (floored at `sqrt(eps)`).
pub fn homological_residual(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    basis: &CenterBasis,
    mc: &MonomialCoefficients,
) -> Result<f64> {
    let s = basis.samples();
    let nm = mc.monomials.len();
    let act = mc.monomials.derivative_action(&basis.block);
    let hs: Vec<Vec<HistorySegment>> =
        (0..nm).map(|a| (0..s).map(|k| resample(&mc.segment(basis, a, k), basis.degree)).collect()).collect();
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    for a in 0..nm {
        let data: Vec<Vec<f64>> = hs[a].iter().map(|x| x.f.values.clone()).collect();
        let dh = PeriodicSamples::new(basis.base(), basis.window, data).derivative();
        for k in 0..s {
            let t = basis.times[k];
            let hk = &hs[a][k];
            let dseg = HistorySegment::from_nodal(basis.dim, basis.h, basis.degree, dh[k].clone());
            let lh = apply_linearization(model, orbit, t, hk);
            let mut lhs = ExtendedSegment {
                head: lh.iter().zip(dseg.head()).map(|(x, y)| x - y).collect(),
                body: hk.derivative().sub(&dseg),
            };
            let mut rhs = HistorySegment::zeros(basis.dim, basis.h, basis.degree);
            for b in 0..nm {
                if act[(b, a)] != 0.0 {
                    rhs = rhs.axpy(act[(b, a)], &hs[b][k]);
                }
            }
            rhs = rhs.axpy(mc.p[a][k], &basis.velocity[k]);
            for i in 0..basis.size() {
                rhs = rhs.axpy(mc.normal[a][k][i], basis.column(i, k));
            }
            lhs = lhs.axpy(-1.0, &ExtendedSegment::embed(&rhs)).axpy(1.0, &mc.forcing[a][k]);
            worst = worst.max(lhs.norm());
            scale = scale.max(mc.forcing[a][k].norm());
        }
    }
    Ok(worst / scale.max(f64::EPSILON.sqrt()))
}

/// Scaling and squaring with a Taylor series; the blocks here are at most a few rows.
fn matrix_exp(m: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    let a = m * t;
    let norm = a.abs().row_sum().max();
    let squarings = if norm > 0.5 { (norm / 0.5).log2().ceil() as i32 } else { 0 };
    let a = a / 2f64.powi(squarings);
    let n = a.nrows();
    let mut term = DMatrix::identity(n, n);
    let mut out = term.clone();
    for k in 1..=20 {
        term = &term * &a / k as f64;
        out += &term;
    }
    for _ in 0..squarings {
        out = &out * &out;
    }
    out
}

/// Largest change over the mesh of `p(tau, e^{-tau M^T} xi)` and of
/// `e^{tau M^T} P(tau, e^{-tau M^T} xi)` at the given points.
pub fn invariance_defect(mc: &MonomialCoefficients, basis: &CenterBasis, points: &[Vec<f64>]) -> (f64, f64) {
    let mt = basis.block.transpose();
    let (mut dp, mut dbig) = (0.0f64, 0.0f64);
    for xi in points {
        let x = nalgebra::DVector::from_column_slice(xi);
        let mut first: Option<(f64, nalgebra::DVector<f64>)> = None;
        for k in 0..basis.samples() {
            let t = basis.times[k] - basis.base();
            let z = matrix_exp(&mt, -t) * &x;
            let p = mc.p_at(k, z.as_slice());
            let big = matrix_exp(&mt, t) * nalgebra::DVector::from_vec(mc.normal_at(k, z.as_slice()));
            match &first {
                None => first = Some((p, big)),
                Some((p0, b0)) => {
                    dp = dp.max((p - p0).abs());
                    dbig = dbig.max((big - b0).amax());
                }
            }
        }
    }
    (dp, dbig)
}

/// `max_k |H(tau_k + T, xi) - H(tau_k, S~_0 xi)|` and `max_k |H(tau_k, xi)|` for a window of `2T`.
pub fn symmetry_defect(orders: &[MonomialCoefficients], basis: &CenterBasis, xi: &[f64]) -> (f64, f64) {
    let s = basis.samples();
    if s % 2 != 0 || (basis.window - 2.0 * basis.period).abs() > 1e-9 * basis.period {
        return (0.0, 0.0);
    }
    let signs = basis.symmetry_signs();
    let sx: Vec<f64> = xi.iter().zip(&signs).map(|(a, b)| a * b).collect();
    let eval = |k: usize, x: &[f64]| -> HistorySegment {
        let mut acc = HistorySegment::zeros(basis.dim, basis.h, basis.degree);
        for mc in orders {
            for a in 0..mc.monomials.len() {
                acc = acc.axpy(mc.monomials.eval(a, x), &resample(&mc.segment(basis, a, k), basis.degree));
            }
        }
        acc
    };
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for k in 0..s / 2 {
        let shifted = eval(k + s / 2, xi);
        let mirrored = eval(k, &sx);
        worst = worst.max(linalg::max_abs(&shifted.sub(&mirrored).f.values));
        scale = scale.max(linalg::max_abs(&mirrored.f.values));
    }
    (worst, scale)
}

/// Largest relative mismatch between `R_alpha(tau + T)` and `(-1)^{alpha_anti} R_alpha(tau)`.
pub fn parity_defect(mc: &MonomialCoefficients, basis: &CenterBasis) -> f64 {
    let s = basis.samples();
    if s % 2 != 0 || (basis.window - 2.0 * basis.period).abs() > 1e-9 * basis.period {
        return 0.0;
    }
    let (mut worst, mut scale) = (0.0f64, 0.0f64);
    for (a, e) in mc.monomials.exponents.iter().enumerate() {
        let odd = e.iter().zip(&basis.antiperiodic).filter(|(k, anti)| **anti && **k % 2 == 1).count() % 2 == 1;
        let sign = if odd { -1.0 } else { 1.0 };
        for k in 0..s / 2 {
            let x = &mc.forcing[a][k + s / 2];
            let y = &mc.forcing[a][k];
            worst = worst.max(x.axpy(-sign, y).norm());
            scale = scale.max(y.norm());
        }
    }
    worst / scale.max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bifurcation {
    Fold,
    PeriodDoubling,
    NeimarkSacker,
    Generic,
}

impl Bifurcation {
    pub fn label(&self) -> &'static str {
        match self {
            Bifurcation::Fold => "fold",
            Bifurcation::PeriodDoubling => "period-doubling",
            Bifurcation::NeimarkSacker => "neimark-sacker",
            Bifurcation::Generic => "generic",
        }
    }

    fn classify(basis: &CenterBasis) -> Self {
        let n0 = basis.size();
        if basis.coupled && n0 == 1 {
            Bifurcation::Fold
        } else if n0 == 1 && basis.antiperiodic[0] {
            Bifurcation::PeriodDoubling
        } else if n0 == 2 && basis.multipliers[0].im.abs() > 0.0 && basis.multipliers[0] == basis.multipliers[1] {
            Bifurcation::NeimarkSacker
        } else {
            Bifurcation::Generic
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalFormOptions {
    /// Highest order, 2 or 3.
    pub order: usize,
    /// Singular values below this count as resonant.
    pub divisor_tol: f64,
    pub multipliers: MultiplierOptions,
}

impl Default for NormalFormOptions {
    fn default() -> Self {
        NormalFormOptions { order: 3, divisor_tol: 1e-6, multipliers: MultiplierOptions::default() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedCoefficient {
    pub name: String,
    pub value: f64,
    /// Largest homological residual among the orders it depends on.
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalFormReport {
    pub bifurcation: Bifurcation,
    pub basis: CenterBasis,
    pub orders: Vec<MonomialCoefficients>,
    pub coefficients: Vec<NamedCoefficient>,
    pub diagnostics: Vec<(String, f64)>,
}

impl NormalFormReport {
    pub fn coefficient(&self, name: &str) -> Option<f64> {
        self.coefficients.iter().find(|c| c.name == name).map(|c| c.value)
    }

    pub fn diagnostic(&self, name: &str) -> Option<f64> {
        self.diagnostics.iter().find(|d| d.0 == name).map(|d| d.1)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn spread(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().fold(0.0f64, |a, x| a.max((x - m).abs()))
}

fn invariance_points(n0: usize) -> Vec<Vec<f64>> {
    (0..5)
        .map(|s| (0..n0).map(|i| 0.1 * (1.3 * (i + 1) as f64 + 0.71 * (s + 1) as f64).sin()).collect())
        .collect()
}

/// Solves one order on a given basis.
pub fn solve_order(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    basis: &CenterBasis,
    solver: &HyperbolicSolver<'_>,
    lower: &[MonomialCoefficients],
    q: usize,
    divisor_tol: f64,
) -> Result<MonomialCoefficients> {
    let forcing = assemble_rq(model, orbit, basis, lower, q)?;
    let mons = Monomials::new(basis.size(), q);
    let s = basis.samples();
    let mut r0 = vec![vec![0.0; s]; mons.len()];
    let mut rc = vec![vec![Vec::new(); s]; mons.len()];
    for a in 0..mons.len() {
        for k in 0..s {
            let (c0, c) = basis.components(k, &forcing[a][k])?;
            r0[a][k] = c0;
            rc[a][k] = c;
        }
    }
    let center = solve_homological_center(&r0, &rc, &basis.block, basis.coupled, basis.window, q, divisor_tol)?;
    let h_hyperbolic = solve_homological_hyperbolic(solver, &forcing, &mons, &basis.block)?;
    Ok(MonomialCoefficients {
        order: q,
        monomials: mons,
        forcing,
        p: center.p,
        normal: center.normal,
        h_velocity: center.h_velocity,
        h_center: center.h_center,
        h_hyperbolic,
        min_divisor: center.min_divisor,
    })
}

/// Normal form at a cycle whose center spectrum is in the unit band.
pub fn normal_form_coefficients(
    model: &dyn DdeModel,
    orbit: &PeriodicOrbit,
    expected: Option<Bifurcation>,
    disc: &Discretization,
    opts: &NormalFormOptions,
) -> Result<NormalFormReport> {
    if !(2..=3).contains(&opts.order) {
        return Err(Error::InvalidInput(format!("normal-form order {} not in 2..=3", opts.order)));
    }
    let mono = monodromy_matrix(model, orbit, 0.0, disc)?;
    let spectrum = floquet_multipliers(&mono, &opts.multipliers)?;
    let guard = |e: Bifurcation| match e {
        Bifurcation::PeriodDoubling => "no multiplier in the unit band near -1",
        Bifurcation::NeimarkSacker => "no complex pair in the unit band",
        Bifurcation::Fold => "trivial multiplier is not a double eigenvalue",
        Bifurcation::Generic => "no critical multiplier in the unit band",
    };
    let basis = match center_basis(model, orbit, &mono, &spectrum, disc) {
        Ok(b) => b,
        Err(Error::InvalidInput(msg)) => {
            return Err(Error::InvalidInput(expected.map_or(msg, |e| guard(e).to_string())));
        }
        Err(e) => return Err(e),
    };
    let detected = Bifurcation::classify(&basis);
    if let Some(e) = expected {
        if e != Bifurcation::Generic && e != detected {
            return Err(Error::InvalidInput(format!("{}; detected {}", guard(e), detected.label())));
        }
    }
    let top = if basis.coupled { 2 } else { opts.order };
    let solver = HyperbolicSolver::new(model, orbit, &basis, disc)?;
    let mut orders: Vec<MonomialCoefficients> = Vec::new();
    let mut diagnostics = vec![
        ("biorthogonality".to_string(), basis.biorthogonality_defect()?),
        ("linear_residual".to_string(), basis.linear_residual(model, orbit)),
    ];
    let mut worst = 0.0f64;
    for q in 2..=top {
        let mc = solve_order(model, orbit, &basis, &solver, &orders, q, opts.divisor_tol)?;
        let res = homological_residual(model, orbit, &basis, &mc)?;
        worst = worst.max(res);
        let (ip, ibig) = invariance_defect(&mc, &basis, &invariance_points(basis.size()));
        diagnostics.push((format!("residual_order{q}"), res));
        diagnostics.push((format!("invariance_p_order{q}"), ip));
        diagnostics.push((format!("invariance_P_order{q}"), ibig));
        diagnostics.push((format!("min_divisor_order{q}"), mc.min_divisor));
        if basis.antiperiodic.iter().any(|a| *a) {
            diagnostics.push((format!("parity_order{q}"), parity_defect(&mc, &basis)));
        }
        orders.push(mc);
    }
    if basis.antiperiodic.iter().any(|a| *a) {
        let n0 = basis.size();
        let xi: Vec<f64> = vec![0.1 / (n0 as f64).sqrt(); n0];
        let (d, s) = symmetry_defect(&orders, &basis, &xi);
        diagnostics.push(("symmetry".to_string(), d / s.max(f64::MIN_POSITIVE)));
    }
    let mut coefficients = Vec::new();
    let mut push = |name: &str, value: f64| {
        coefficients.push(NamedCoefficient { name: name.to_string(), value, residual: worst })
    };
    let at = |q: usize, e: &[usize]| -> Option<(&MonomialCoefficients, usize)> {
        let mc = orders.iter().find(|m| m.order == q)?;
        mc.find(e).map(|a| (mc, a))
    };
    match detected {
        Bifurcation::PeriodDoubling => {
            if let Some((mc, a)) = at(2, &[2]) {
                push("period_quadratic", mean(&mc.p[a]));
            }
            if let Some((mc, a)) = at(3, &[3]) {
                let c: Vec<f64> = mc.normal[a].iter().map(|v| v[0]).collect();
                diagnostics.push(("cubic_spread".to_string(), spread(&c)));
                push("cubic", mean(&c));
            }
        }
        Bifurcation::NeimarkSacker => {
            push("rotation", basis.block[(1, 0)]);
            if let Some((mc, a)) = at(3, &[3, 0]) {
                push("cubic_real", mc.normal[a][0][0]);
                push("cubic_imag", mc.normal[a][0][1]);
            }
        }
        Bifurcation::Fold => {
            if let Some((mc, a)) = at(2, &[2]) {
                let c: Vec<f64> = mc.normal[a].iter().map(|v| v[0]).collect();
                push("quadratic", mean(&c));
                push("period_quadratic", mean(&mc.p[a]));
            }
        }
        Bifurcation::Generic => {
            for mc in &orders {
                for a in 0..mc.monomials.len() {
                    let label = mc.monomials.label(a);
                    push(&format!("p[{label}]"), mc.p[a][0]);
                    for i in 0..basis.size() {
                        push(&format!("P{}[{label}]", i + 1), mc.normal[a][0][i]);
                    }
                }
            }
        }
    }
    Ok(NormalFormReport { bifurcation: detected, basis, orders, coefficients, diagnostics })
}

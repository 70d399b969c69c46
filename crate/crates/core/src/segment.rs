//! Piecewise Chebyshev functions, history segments on `[-h, 0]` and dual elements `(c, g)`.

use crate::cheb::ChebGrid;
use crate::error::{Error, Result};
use crate::prelude::*;
use alloc::sync::Arc;

/// Vector-valued piecewise polynomial with Lobatto nodes on every piece.
///
/// Values are laid out as `[piece][node][component]` with ascending nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct PwCheb {
    pub dim: usize,
    pub grid: Arc<ChebGrid>,
    pub breaks: Vec<f64>,
    pub values: Vec<f64>,
}

impl PwCheb {
    pub fn zeros(dim: usize, degree: usize, breaks: Vec<f64>) -> Self {
        let grid = Arc::new(ChebGrid::new(degree));
        let len = (breaks.len() - 1) * grid.len() * dim;
        PwCheb { dim, grid, breaks, values: vec![0.0; len] }
    }

    pub fn from_fn(
        dim: usize,
        degree: usize,
        breaks: Vec<f64>,
        mut f: impl FnMut(usize, f64, &mut [f64]),
    ) -> Self {
        let mut p = Self::zeros(dim, degree, breaks);
        for k in 0..p.pieces() {
            for j in 0..p.grid.len() {
                let x = p.node(k, j);
                let off = p.offset(k, j);
                f(k, x, &mut p.values[off..off + dim]);
            }
        }
        p
    }

    pub fn degree(&self) -> usize {
        self.grid.degree
    }

    pub fn pieces(&self) -> usize {
        self.breaks.len() - 1
    }

    pub fn start(&self) -> f64 {
        self.breaks[0]
    }

    pub fn end(&self) -> f64 {
        *self.breaks.last().unwrap()
    }

    pub fn offset(&self, piece: usize, node: usize) -> usize {
        (piece * self.grid.len() + node) * self.dim
    }

    pub fn node(&self, piece: usize, j: usize) -> f64 {
        let (a, b) = (self.breaks[piece], self.breaks[piece + 1]);
        if j == 0 {
            a
        } else if j == self.grid.degree {
            b
        } else {
            0.5 * (a + b) + 0.5 * (b - a) * self.grid.nodes[j]
        }
    }

    pub fn node_value(&self, piece: usize, j: usize) -> &[f64] {
        let o = self.offset(piece, j);
        &self.values[o..o + self.dim]
    }

    /// Piece containing `x`; at an interior break `right` selects the piece starting there.
    pub fn locate(&self, x: f64, right: bool) -> usize {
        let p = self.pieces();
        let mut k = self.breaks.partition_point(|&b| if right { b <= x } else { b < x });
        k = k.saturating_sub(1);
        k.min(p - 1)
    }

    pub fn eval_in_piece(&self, piece: usize, x: f64, out: &mut [f64]) {
        let (a, b) = (self.breaks[piece], self.breaks[piece + 1]);
        let t = if x == a {
            -1.0
        } else if x == b {
            1.0
        } else {
            (2.0 * x - a - b) / (b - a)
        };
        let g = &self.grid;
        out.iter_mut().for_each(|o| *o = 0.0);
        let base = piece * g.len() * self.dim;
        let mut den = 0.0;
        for k in 0..g.len() {
            let d = t - g.nodes[k];
            if d == 0.0 {
                out.copy_from_slice(&self.values[base + k * self.dim..base + (k + 1) * self.dim]);
                return;
            }
            let w = g.bary[k] / d;
            den += w;
            let v = &self.values[base + k * self.dim..base + (k + 1) * self.dim];
            for (o, vi) in out.iter_mut().zip(v) {
                *o += w * vi;
            }
        }
        out.iter_mut().for_each(|o| *o /= den);
    }

    pub fn eval_side(&self, x: f64, right: bool, out: &mut [f64]) {
        let k = self.locate(x, right);
        self.eval_in_piece(k, x, out)
    }

    pub fn eval(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.eval_side(x, false, &mut out);
        out
    }

    pub fn derivative(&self) -> PwCheb {
        let g = &self.grid;
        let m = g.len();
        let d = g.diff_matrix();
        let mut out = PwCheb { values: vec![0.0; self.values.len()], ..self.clone() };
        for k in 0..self.pieces() {
            let scale = 2.0 / (self.breaks[k + 1] - self.breaks[k]);
            for i in 0..m {
                let oi = self.offset(k, i);
                for j in 0..m {
                    let c = d[i * m + j] * scale;
                    let oj = self.offset(k, j);
                    for c_ in 0..self.dim {
                        out.values[oi + c_] += c * self.values[oj + c_];
                    }
                }
            }
        }
        out
    }

    /// Re-expresses the function on `breaks`, which must refine the current ones.
    pub fn resample(&self, breaks: &[f64]) -> PwCheb {
        let mut out = PwCheb::zeros(self.dim, self.degree(), breaks.to_vec());
        out.grid = self.grid.clone();
        let dim = self.dim;
        for k in 0..out.pieces() {
            let mid = 0.5 * (breaks[k] + breaks[k + 1]);
            let src = self.locate(mid, false);
            for j in 0..out.grid.len() {
                let x = out.node(k, j);
                let o = out.offset(k, j);
                let mut v = vec![0.0; dim];
                self.eval_in_piece(src, x, &mut v);
                out.values[o..o + dim].copy_from_slice(&v);
            }
        }
        out
    }

    pub fn same_layout(&self, other: &PwCheb) -> bool {
        self.dim == other.dim && self.degree() == other.degree() && self.breaks == other.breaks
    }

    /// `self + alpha * other`, merging breakpoints when needed.
    pub fn axpy(&self, alpha: f64, other: &PwCheb) -> PwCheb {
        if self.same_layout(other) {
            let mut out = self.clone();
            for (o, v) in out.values.iter_mut().zip(&other.values) {
                *o += alpha * v;
            }
            return out;
        }
        let br = merge_breaks(&self.breaks, &other.breaks);
        let a = self.resample(&br);
        let b = other.resample(&br);
        a.axpy(alpha, &b)
    }

    pub fn scale(&self, alpha: f64) -> PwCheb {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| *v *= alpha);
        out
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup norm estimated on a fine uniform sample in addition to the nodes.
    pub fn sampled_sup(&self, samples: usize) -> f64 {
        let mut m = self.sup_norm();
        let mut out = vec![0.0; self.dim];
        for k in 0..self.pieces() {
            for i in 0..=samples {
                let x = self.breaks[k] + (self.breaks[k + 1] - self.breaks[k]) * i as f64 / samples as f64;
                self.eval_in_piece(k, x, &mut out);
                m = out.iter().fold(m, |m, v| m.max(v.abs()));
            }
        }
        m
    }
}

/// Sorted union of two breakpoint lists with near-duplicates removed.
pub fn merge_breaks(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut all: Vec<f64> = a.iter().chain(b.iter()).copied().collect();
    all.sort_by(|x, y| x.partial_cmp(y).unwrap());
    dedup_breaks(all)
}

pub fn dedup_breaks(sorted: Vec<f64>) -> Vec<f64> {
    let span = (sorted.last().unwrap() - sorted[0]).abs().max(1e-300);
    let tol = 1e-12 * span;
    let mut out: Vec<f64> = Vec::with_capacity(sorted.len());
    for x in sorted {
        match out.last() {
            Some(&l) if (x - l).abs() <= tol => {}
            _ => out.push(x),
        }
    }
    out
}

/// Element of `C([-h, 0], R^n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySegment {
    pub h: f64,
    pub f: PwCheb,
}

impl HistorySegment {
    pub fn zeros(n: usize, h: f64, degree: usize) -> Self {
        HistorySegment { h, f: PwCheb::zeros(n, degree, vec![-h, 0.0]) }
    }

    pub fn from_fn(n: usize, h: f64, degree: usize, mut f: impl FnMut(f64) -> Vec<f64>) -> Self {
        Self::from_fn_pieces(n, h, degree, vec![-h, 0.0], |_, th, out| out.copy_from_slice(&f(th)))
    }

    pub fn from_fn_pieces(
        n: usize,
        h: f64,
        degree: usize,
        breaks: Vec<f64>,
        f: impl FnMut(usize, f64, &mut [f64]),
    ) -> Self {
        HistorySegment { h, f: PwCheb::from_fn(n, degree, breaks, f) }
    }

    pub fn constant(v: &[f64], h: f64, degree: usize) -> Self {
        Self::from_fn(v.len(), h, degree, |_| v.to_vec())
    }

    /// Single-piece segment from nodal values laid out `[node][component]`.
    pub fn from_nodal(n: usize, h: f64, degree: usize, values: Vec<f64>) -> Self {
        let mut s = Self::zeros(n, h, degree);
        assert_eq!(values.len(), s.f.values.len());
        s.f.values = values;
        s
    }

    pub fn dim(&self) -> usize {
        self.f.dim
    }

    pub fn degree(&self) -> usize {
        self.f.degree()
    }

    pub fn is_single_piece(&self) -> bool {
        self.f.pieces() == 1
    }

    pub fn eval(&self, theta: f64) -> Result<Vec<f64>> {
        let tol = 1e-12 * self.h.max(1.0);
        if !(theta >= -self.h - tol && theta <= tol) {
            return Err(Error::Domain(format!("theta = {theta} outside [-{}, 0]", self.h)));
        }
        Ok(self.f.eval(theta.clamp(-self.h, 0.0)))
    }

    pub fn eval_into(&self, theta: f64, out: &mut [f64]) {
        self.f.eval_side(theta.clamp(-self.h, 0.0), false, out)
    }

    pub fn head(&self) -> Vec<f64> {
        let k = self.f.pieces() - 1;
        self.f.node_value(k, self.f.degree()).to_vec()
    }

    pub fn derivative(&self) -> HistorySegment {
        HistorySegment { h: self.h, f: self.f.derivative() }
    }

    pub fn axpy(&self, alpha: f64, other: &HistorySegment) -> HistorySegment {
        HistorySegment { h: self.h, f: self.f.axpy(alpha, &other.f) }
    }

    pub fn sub(&self, other: &HistorySegment) -> HistorySegment {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, alpha: f64) -> HistorySegment {
        HistorySegment { h: self.h, f: self.f.scale(alpha) }
    }

    pub fn sup_norm(&self) -> f64 {
        self.f.sampled_sup(8)
    }

    /// Nodal vector of the single-piece resampling (interpolating across any breaks).
    pub fn to_single_nodal(&self) -> Vec<f64> {
        if self.is_single_piece() {
            return self.f.values.clone();
        }
        let deg = self.degree();
        let grid = ChebGrid::new(deg);
        let n = self.dim();
        let mut out = vec![0.0; grid.len() * n];
        for j in 0..grid.len() {
            let th = if j == 0 { -self.h } else if j == deg { 0.0 } else { 0.5 * self.h * (grid.nodes[j] - 1.0) };
            self.eval_into(th, &mut out[j * n..(j + 1) * n]);
        }
        out
    }
}

/// Element `(c, g)` of the sun dual with head row `c` and density `g` on `[0, h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualElement {
    pub h: f64,
    pub head: Vec<f64>,
    pub density: PwCheb,
}

impl DualElement {
    pub fn zeros(n: usize, h: f64, degree: usize) -> Self {
        DualElement { h, head: vec![0.0; n], density: PwCheb::zeros(n, degree, vec![0.0, h]) }
    }

    pub fn new(head: Vec<f64>, h: f64, degree: usize, breaks: Vec<f64>, g: impl FnMut(usize, f64, &mut [f64])) -> Self {
        let n = head.len();
        DualElement { h, head, density: PwCheb::from_fn(n, degree, breaks, g) }
    }

    pub fn dim(&self) -> usize {
        self.head.len()
    }

    pub fn axpy(&self, alpha: f64, other: &DualElement) -> DualElement {
        DualElement {
            h: self.h,
            head: self.head.iter().zip(&other.head).map(|(a, b)| a + alpha * b).collect(),
            density: self.density.axpy(alpha, &other.density),
        }
    }

    pub fn sub(&self, other: &DualElement) -> DualElement {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, alpha: f64) -> DualElement {
        DualElement { h: self.h, head: self.head.iter().map(|v| v * alpha).collect(), density: self.density.scale(alpha) }
    }

    /// Max of the head norm and `h` times the sampled density sup norm.
    pub fn norm(&self) -> f64 {
        let c = self.head.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        c.max(self.h * self.density.sampled_sup(8))
    }
}

/// `<(c, g), phi> = c . phi(0) + int_0^h g(theta) phi(-theta) d theta`.
pub fn pairing(f: &DualElement, phi: &HistorySegment) -> Result<f64> {
    if f.dim() != phi.dim() {
        return Err(Error::DimensionMismatch { expected: f.dim(), found: phi.dim() });
    }
    if (f.h - phi.h).abs() > 1e-12 * f.h.max(1.0) {
        return Err(Error::InvalidInput(format!("delay horizon mismatch: {} vs {}", f.h, phi.h)));
    }
    let n = f.dim();
    let head = phi.head();
    let mut s: f64 = f.head.iter().zip(&head).map(|(a, b)| a * b).sum();
    let reflected: Vec<f64> = phi.f.breaks.iter().rev().map(|b| -b).collect();
    let br = merge_breaks(&f.density.breaks, &reflected);
    let q = ChebGrid::new(2 * f.density.degree().max(phi.degree()));
    let mut gv = vec![0.0; n];
    let mut pv = vec![0.0; n];
    for k in 0..br.len() - 1 {
        let (a, b) = (br[k], br[k + 1]);
        let mid = 0.5 * (a + b);
        let gp = f.density.locate(mid, false);
        let pp = phi.f.locate(-mid, false);
        for (j, w) in q.quad.iter().enumerate() {
            let x = mid + 0.5 * (b - a) * q.nodes[j];
            f.density.eval_in_piece(gp, x, &mut gv);
            phi.f.eval_in_piece(pp, -x, &mut pv);
            let dot: f64 = gv.iter().zip(&pv).map(|(a, b)| a * b).sum();
            s += 0.5 * (b - a) * w * dot;
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::PI;

    #[test]
    fn constant_segment_evaluates_everywhere() {
        let s = HistorySegment::constant(&[2.0, -1.0], 1.5, 8);
        for th in [-1.5, -0.7, -0.1, 0.0] {
            let v = s.eval(th).unwrap();
            assert!((v[0] - 2.0).abs() < 1e-14 && (v[1] + 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn quadratic_segment_is_exact() {
        let h = 2.0;
        let s = HistorySegment::from_fn(1, h, 2, |th| vec![th * th]);
        assert!((s.eval(-h / 2.0).unwrap()[0] - h * h / 4.0).abs() < 1e-14);
    }

    #[test]
    fn sine_segment_interpolates_spectrally() {
        let s = HistorySegment::from_fn(1, PI / 2.0, 32, |th| vec![th.sin()]);
        assert!((s.eval(-1.0).unwrap()[0] - (-1f64).sin()).abs() < 1e-12);
    }

    #[test]
    fn evaluation_outside_domain_fails() {
        let s = HistorySegment::zeros(1, 1.0, 4);
        assert!(matches!(s.eval(0.5), Err(Error::Domain(_))));
        assert!(matches!(s.eval(-1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn pairing_head_only_and_constant_density() {
        let h = 1.3;
        let phi = HistorySegment::from_fn(2, h, 10, |th| vec![th.cos(), 1.0 + th]);
        let f = DualElement::zeros(2, h, 10);
        let f = DualElement { head: vec![0.5, -2.0], ..f };
        let expect = 0.5 * 1.0 - 2.0 * 1.0;
        assert!((pairing(&f, &phi).unwrap() - expect).abs() < 1e-14);
        let g = DualElement::new(vec![0.0, 0.0], h, 6, vec![0.0, h], |_, _, o| o.copy_from_slice(&[1.5, 0.25]));
        let c = HistorySegment::constant(&[2.0, 4.0], h, 6);
        assert!((pairing(&g, &c).unwrap() - h * (3.0 + 1.0)).abs() < 1e-13);
    }

    #[test]
    fn pairing_handles_breakpoints() {
        let h = 2.0;
        let phi = HistorySegment::from_fn_pieces(1, h, 6, vec![-h, -0.5, 0.0], |k, th, o| {
            o[0] = if k == 0 { 1.0 } else { th * th }
        });
        let f = DualElement::new(vec![0.0], h, 6, vec![0.0, 1.2, h], |k, x, o| o[0] = if k == 0 { x } else { 2.0 });
        // int_0^0.5 x*x^2 + int_0.5^1.2 x + int_1.2^2 2
        let expect = 0.5f64.powi(4) / 4.0 + (1.44 - 0.25) / 2.0 + 2.0 * 0.8;
        assert!((pairing(&f, &phi).unwrap() - expect).abs() < 1e-13);
    }

    #[test]
    fn resample_preserves_function() {
        let p = PwCheb::from_fn(1, 12, vec![0.0, 1.0], |_, x, o| o[0] = (3.0 * x).sin());
        let r = p.resample(&[0.0, 0.3, 0.55, 1.0]);
        for i in 0..30 {
            let x = i as f64 / 29.0;
            assert!((r.eval(x)[0] - p.eval(x)[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_of_monomial() {
        let s = HistorySegment::from_fn(1, 1.0, 5, |th| vec![th]);
        let d = s.derivative();
        assert!(d.f.values.iter().all(|v| (v - 1.0).abs() < 1e-13));
    }
}

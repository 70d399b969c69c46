//! Dense linear algebra helpers on top of nalgebra.

use crate::error::{Error, Result};
use crate::prelude::*;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub fn to_complex(m: &DMatrix<f64>) -> CMatrix {
    m.map(|v| Complex64::new(v, 0.0))
}

/// Eigenvalues of a real square matrix, sorted by decreasing modulus.
pub fn eigenvalues(m: &DMatrix<f64>) -> Vec<Complex64> {
    let mut ev: Vec<Complex64> = m.clone().complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.norm().partial_cmp(&a.norm()).unwrap_or(core::cmp::Ordering::Equal));
    ev
}

/// Singular values in decreasing order with the matching right singular vectors as columns.
pub fn svd_sorted(a: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.ok_or_else(|| Error::Numerical("singular value decomposition failed".into()))?;
    let mut idx: Vec<usize> = (0..svd.singular_values.len()).collect();
    idx.sort_by(|&i, &j| svd.singular_values[j].partial_cmp(&svd.singular_values[i]).unwrap());
    let k = idx.len();
    let mut v = CMatrix::zeros(a.ncols(), k);
    let mut s = Vec::with_capacity(k);
    for (c, &i) in idx.iter().enumerate() {
        s.push(svd.singular_values[i]);
        for r in 0..a.ncols() {
            v[(r, c)] = vt[(i, r)].conj();
        }
    }
    Ok((s, v))
}

/// Right singular vectors of the `k` smallest singular values (square `a`).
pub fn null_space(a: &CMatrix, k: usize) -> Result<CMatrix> {
    let (_, v) = svd_sorted(a)?;
    let nc = v.ncols();
    Ok(v.columns(nc - k, k).into_owned())
}

/// Number of singular values below `rel * s_max`.
pub fn numerical_nullity(a: &CMatrix, rel: f64) -> Result<usize> {
    let (s, _) = svd_sorted(a)?;
    let top = s.first().copied().unwrap_or(0.0);
    Ok(s.iter().filter(|&&v| v <= rel * top).count())
}

pub fn smallest_singular_value(a: &CMatrix) -> Result<f64> {
    let (s, _) = svd_sorted(a)?;
    Ok(s.last().copied().unwrap_or(0.0))
}

/// Spectral condition number of the columns of `a`.
pub fn condition(a: &CMatrix) -> Result<f64> {
    let (s, _) = svd_sorted(a)?;
    let lo = s.last().copied().unwrap_or(0.0);
    Ok(if lo == 0.0 { f64::INFINITY } else { s[0] / lo })
}

pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Singular("linear solve".into()))
}

pub fn solve_complex(a: &CMatrix, b: &CMatrix) -> Result<CMatrix> {
    a.clone().lu().solve(b).ok_or_else(|| Error::Singular("complex linear solve".into()))
}

pub fn inverse(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    a.clone().try_inverse().ok_or_else(|| Error::Singular("matrix inverse".into()))
}

/// `a^k`.
pub fn power(a: &CMatrix, k: usize) -> CMatrix {
    let mut out = CMatrix::identity(a.nrows(), a.ncols());
    for _ in 0..k {
        out = &out * a;
    }
    out
}

/// Scales `v` so that its largest entry is real and positive, then to unit max norm.
pub fn normalize_phase(v: &mut CVector) {
    let mut best = Complex64::new(0.0, 0.0);
    for z in v.iter() {
        if z.norm() > best.norm() * (1.0 + 1e-9) {
            best = *z;
        }
    }
    if best.norm() > 0.0 {
        let f = best.conj() / (best.norm() * best.norm());
        v.iter_mut().for_each(|z| *z *= f);
    }
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

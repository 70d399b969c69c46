//! Chebyshev–Gauss–Lobatto grids on `[-1, 1]`.

use crate::prelude::*;
use core::f64::consts::PI;

/// Lobatto grid of degree `n` with ascending nodes `x_k = -cos(k pi / n)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChebGrid {
    pub degree: usize,
    pub nodes: Vec<f64>,
    pub bary: Vec<f64>,
    pub quad: Vec<f64>,
}

impl ChebGrid {
    pub fn new(degree: usize) -> Self {
        assert!(degree >= 1, "Chebyshev degree must be positive");
        let nodes = (0..=degree)
            .map(|k| {
                let x = -(PI * k as f64 / degree as f64).cos();
                if 2 * k == degree {
                    0.0
                } else {
                    x
                }
            })
            .collect();
        let bary = (0..=degree)
            .map(|k| {
                let s = if k % 2 == 0 { 1.0 } else { -1.0 };
                if k == 0 || k == degree {
                    0.5 * s
                } else {
                    s
                }
            })
            .collect();
        ChebGrid { degree, nodes, bary, quad: clenshaw_curtis(degree) }
    }

    pub fn len(&self) -> usize {
        self.degree + 1
    }

    /// Barycentric cardinal values `l_k(x)` for all nodes.
    pub fn cardinals(&self, x: f64, out: &mut [f64]) {
        for (k, &xk) in self.nodes.iter().enumerate() {
            if x == xk {
                out.iter_mut().for_each(|o| *o = 0.0);
                out[k] = 1.0;
                return;
            }
        }
        let mut sum = 0.0;
        for k in 0..self.len() {
            let t = self.bary[k] / (x - self.nodes[k]);
            out[k] = t;
            sum += t;
        }
        out.iter_mut().for_each(|o| *o /= sum);
    }

    /// Interpolates scalar nodal values at `x`.
    pub fn interp(&self, values: &[f64], x: f64) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for k in 0..self.len() {
            let d = x - self.nodes[k];
            if d == 0.0 {
                return values[k];
            }
            let t = self.bary[k] / d;
            num += t * values[k];
            den += t;
        }
        num / den
    }

    /// Differentiation matrix on `[-1, 1]`, row-major.
    pub fn diff_matrix(&self) -> Vec<f64> {
        let m = self.len();
        let mut d = vec![0.0; m * m];
        for i in 0..m {
            let mut diag = 0.0;
            for j in 0..m {
                if i != j {
                    let v = (self.bary[j] / self.bary[i]) / (self.nodes[i] - self.nodes[j]);
                    d[i * m + j] = v;
                    diag -= v;
                }
            }
            d[i * m + i] = diag;
        }
        d
    }
}

/// Clenshaw–Curtis weights on `[-1, 1]` for the Lobatto nodes.
pub fn clenshaw_curtis(n: usize) -> Vec<f64> {
    let mut w = vec![0.0; n + 1];
    if n == 1 {
        w[0] = 1.0;
        w[1] = 1.0;
        return w;
    }
    let nf = n as f64;
    let mut v = vec![1.0; n - 1];
    if n % 2 == 0 {
        w[0] = 1.0 / (nf * nf - 1.0);
        w[n] = w[0];
        for k in 1..n / 2 {
            let kf = k as f64;
            for (i, vi) in v.iter_mut().enumerate() {
                let th = PI * (i + 1) as f64 / nf;
                *vi -= 2.0 * (2.0 * kf * th).cos() / (4.0 * kf * kf - 1.0);
            }
        }
        for (i, vi) in v.iter_mut().enumerate() {
            let th = PI * (i + 1) as f64 / nf;
            *vi -= (nf * th).cos() / (nf * nf - 1.0);
        }
    } else {
        w[0] = 1.0 / (nf * nf);
        w[n] = w[0];
        for k in 1..=(n - 1) / 2 {
            let kf = k as f64;
            for (i, vi) in v.iter_mut().enumerate() {
                let th = PI * (i + 1) as f64 / nf;
                *vi -= 2.0 * (2.0 * kf * th).cos() / (4.0 * kf * kf - 1.0);
            }
        }
    }
    for i in 0..n - 1 {
        w[i + 1] = 2.0 * v[i] / nf;
    }
    w
}

/// Gauss–Legendre nodes and weights on `[-1, 1]` by Newton iteration on `P_n`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        let mut z = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * z * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = p1;
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = pn / dp;
            z -= dz;
            if dz.abs() < 1e-15 {
                break;
            }
        }
        x[n - 1 - i] = z;
        w[n - 1 - i] = 2.0 / ((1.0 - z * z) * dp * dp);
    }
    (x, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_exact_under_interpolation() {
        let g = ChebGrid::new(12);
        let vals: Vec<f64> = g.nodes.iter().map(|x| x.sin()).collect();
        for (k, &x) in g.nodes.iter().enumerate() {
            assert_eq!(g.interp(&vals, x), vals[k]);
        }
    }

    #[test]
    fn polynomials_interpolate_exactly() {
        let g = ChebGrid::new(6);
        let p = |x: f64| 1.0 - 2.0 * x + 3.0 * x.powi(4) - x.powi(6);
        let vals: Vec<f64> = g.nodes.iter().map(|&x| p(x)).collect();
        for i in 0..50 {
            let x = -1.0 + 2.0 * i as f64 / 49.0;
            assert!((g.interp(&vals, x) - p(x)).abs() < 1e-13);
        }
    }

    #[test]
    fn differentiation_is_spectral() {
        let g = ChebGrid::new(24);
        let d = g.diff_matrix();
        let m = g.len();
        for i in 0..m {
            let s: f64 = (0..m).map(|j| d[i * m + j] * g.nodes[j].exp()).sum();
            assert!((s - g.nodes[i].exp()).abs() < 1e-11);
        }
    }

    #[test]
    fn clenshaw_curtis_integrates() {
        for n in [1usize, 2, 5, 8, 16, 33] {
            let g = ChebGrid::new(n);
            let s: f64 = g.quad.iter().sum();
            assert!((s - 2.0).abs() < 1e-13, "n={n}");
        }
        let g = ChebGrid::new(20);
        let s: f64 = g.quad.iter().zip(&g.nodes).map(|(w, x)| w * x.exp()).sum();
        assert!((s - (1f64.exp() - (-1f64).exp())).abs() < 1e-14);
    }

    #[test]
    fn gauss_legendre_is_exact_to_degree() {
        let (x, w) = gauss_legendre(5);
        let s: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(8)).sum();
        assert!((s - 2.0 / 9.0).abs() < 1e-14);
    }
}

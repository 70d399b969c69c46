//! Trigonometric interpolation of equispaced periodic samples.

use crate::prelude::*;
use core::f64::consts::PI;

/// Real trigonometric coefficients `[a0, a1, b1, ..., aK, bK]` of `M >= 2K + 1` samples over one period.
pub fn trig_fit(samples: &[f64], harmonics: usize) -> Vec<f64> {
    let m = samples.len();
    let mut c = vec![0.0; 2 * harmonics + 1];
    c[0] = samples.iter().sum::<f64>() / m as f64;
    for k in 1..=harmonics {
        let (mut a, mut b) = (0.0, 0.0);
        for (i, f) in samples.iter().enumerate() {
            let ph = 2.0 * PI * (k * i % m) as f64 / m as f64;
            a += f * ph.cos();
            b += f * ph.sin();
        }
        let scale = if 2 * k == m { 1.0 } else { 2.0 };
        c[2 * k - 1] = scale * a / m as f64;
        c[2 * k] = scale * b / m as f64;
    }
    c
}

/// Vector-valued samples `data[k]` at `start + k * period / M`, `k = 0..M`.
#[derive(Debug, Clone, PartialEq)]
pub struct PeriodicSamples {
    pub start: f64,
    pub period: f64,
    pub data: Vec<Vec<f64>>,
    cos: Vec<Vec<f64>>,
    sin: Vec<Vec<f64>>,
}

impl PeriodicSamples {
    pub fn new(start: f64, period: f64, data: Vec<Vec<f64>>) -> Self {
        let m = data.len();
        let d = data[0].len();
        let kmax = m / 2;
        let mut cos = vec![vec![0.0; d]; kmax + 1];
        let mut sin = vec![vec![0.0; d]; kmax + 1];
        for k in 0..=kmax {
            let nyquist = m % 2 == 0 && k == kmax;
            let scale = if k == 0 || nyquist { 1.0 } else { 2.0 } / m as f64;
            for (i, row) in data.iter().enumerate() {
                let ph = 2.0 * PI * ((k * i) % m) as f64 / m as f64;
                let (s, c) = ph.sin_cos();
                for j in 0..d {
                    cos[k][j] += scale * c * row[j];
                    sin[k][j] += scale * s * row[j];
                }
            }
            if nyquist {
                sin[k].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        PeriodicSamples { start, period, data, cos, sin }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn width(&self) -> usize {
        self.data[0].len()
    }

    pub fn time(&self, k: usize) -> f64 {
        self.start + self.period * k as f64 / self.len() as f64
    }

    pub fn eval(&self, t: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.width()];
        self.eval_into(t, &mut out);
        out
    }

    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        let w = 2.0 * PI / self.period;
        let x = (t - self.start) * w;
        out.copy_from_slice(&self.cos[0]);
        for k in 1..self.cos.len() {
            let (s, c) = (k as f64 * x).sin_cos();
            for j in 0..out.len() {
                out[j] += c * self.cos[k][j] + s * self.sin[k][j];
            }
        }
    }

    pub fn mean(&self) -> Vec<f64> {
        self.cos[0].clone()
    }

    /// Spectral derivative at the sample times.
    pub fn derivative(&self) -> Vec<Vec<f64>> {
        let w = 2.0 * PI / self.period;
        let m = self.len();
        let kmax = self.cos.len() - 1;
        (0..m)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / m as f64;
                let mut out = vec![0.0; self.width()];
                for k in 1..=kmax {
                    if m % 2 == 0 && k == kmax {
                        continue;
                    }
                    let (s, c) = (k as f64 * x).sin_cos();
                    let kw = k as f64 * w;
                    for j in 0..out.len() {
                        out[j] += kw * (-s * self.cos[k][j] + c * self.sin[k][j]);
                    }
                }
                out
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fit_recovers_coefficients() {
        let m = 11;
        let s: Vec<f64> = (0..m)
            .map(|i| {
                let x = 2.0 * PI * i as f64 / m as f64;
                1.5 + 0.5 * x.cos() - 2.0 * (3.0 * x).sin()
            })
            .collect();
        let c = trig_fit(&s, 5);
        let expect = [1.5, 0.5, 0.0, 0.0, 0.0, 0.0, -2.0, 0.0, 0.0, 0.0, 0.0];
        for (a, b) in c.iter().zip(expect) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn derivative_and_interpolation_are_spectral() {
        let period = 3.0;
        let f = |t: f64| (2.0 * PI * t / period).sin().exp();
        let df = |t: f64| f(t) * (2.0 * PI * t / period).cos() * 2.0 * PI / period;
        for m in [48usize, 49] {
            let data: Vec<Vec<f64>> = (0..m).map(|i| vec![f(0.5 + period * i as f64 / m as f64)]).collect();
            let p = PeriodicSamples::new(0.5, period, data);
            let d = p.derivative();
            for i in 0..m {
                assert!((d[i][0] - df(p.time(i))).abs() < 1e-11);
            }
            assert!((p.eval(1.234)[0] - f(1.234)).abs() < 1e-12);
        }
    }
}

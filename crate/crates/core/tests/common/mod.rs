#![allow(dead_code)]

use ddefloquet::model::{MackeyGlass, OdeRhs, Twist};
use ddefloquet::oracle::{orbit_from_trajectory, poincare_period, simulate};
use ddefloquet::orbit::{solve_periodic_orbit, OrbitSolveOptions};
use ddefloquet::{HistorySegment, PeriodicOrbit};
use std::f64::consts::PI;

/// Delay at which the Mackey-Glass cycle (beta 2, gamma 1, power 9.65) has a multiplier at -1.
pub const MG_CRITICAL_DELAY: f64 = 1.359650385351;

/// Stable unit circle in `(x, y)` times a Hopf normal form `z' = i w z + (a + i b)|z|^2 z` in `(u, v)`.
pub struct Rotor {
    pub w: f64,
    pub a: f64,
    pub b: f64,
}

impl Rotor {
    /// Symmetric trilinear form whose diagonal is the cubic part of the field.
    fn cubic(&self, p: &[f64], q: &[f64], s: &[f64]) -> [f64; 4] {
        let term = |x: &[f64], y: &[f64], z: &[f64]| {
            let r2 = x[0] * y[0] + x[1] * y[1];
            let s2 = x[2] * y[2] + x[3] * y[3];
            [-z[0] * r2, -z[1] * r2, (self.a * z[2] - self.b * z[3]) * s2, (self.b * z[2] + self.a * z[3]) * s2]
        };
        let v = [p, q, s];
        let mut out = [0.0; 4];
        for pm in [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]] {
            let t = term(v[pm[0]], v[pm[1]], v[pm[2]]);
            for i in 0..4 {
                out[i] += t[i] / 6.0;
            }
        }
        out
    }
}

impl OdeRhs for Rotor {
    fn name(&self) -> &str {
        "rotor"
    }
    fn dim(&self) -> usize {
        4
    }
    fn params(&self) -> Vec<(String, f64)> {
        Vec::new()
    }
    fn f(&self, x: &[f64], o: &mut [f64]) {
        let c = self.cubic(x, x, x);
        o[0] = x[0] - x[1] + c[0];
        o[1] = x[1] + x[0] + c[1];
        o[2] = -self.w * x[3] + c[2];
        o[3] = self.w * x[2] + c[3];
    }
    fn d1(&self, x: &[f64], a: &[f64], o: &mut [f64]) {
        let c = self.cubic(x, x, a);
        o[0] = a[0] - a[1] + 3.0 * c[0];
        o[1] = a[1] + a[0] + 3.0 * c[1];
        o[2] = -self.w * a[3] + 3.0 * c[2];
        o[3] = self.w * a[2] + 3.0 * c[3];
    }
    fn d2(&self, x: &[f64], a: &[f64], b: &[f64], o: &mut [f64]) {
        let c = self.cubic(x, a, b);
        for i in 0..4 {
            o[i] = 6.0 * c[i];
        }
    }
    fn d3(&self, _x: &[f64], a: &[f64], b: &[f64], c: &[f64], o: &mut [f64]) {
        let t = self.cubic(a, b, c);
        for i in 0..4 {
            o[i] = 6.0 * t[i];
        }
    }
}

/// Twist flow with a radial drift `c (r^2 - 1)^2 (x, y)`, so that `u = r^2 - 1` obeys `u' = 2 c u^2 (1 + u)`.
pub struct DriftingTwist {
    pub c: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

impl OdeRhs for DriftingTwist {
    fn name(&self) -> &str {
        "drifting_twist"
    }
    fn dim(&self) -> usize {
        2
    }
    fn params(&self) -> Vec<(String, f64)> {
        vec![("c".into(), self.c)]
    }
    fn f(&self, x: &[f64], o: &mut [f64]) {
        Twist.f(x, o);
        let u = dot(x, x) - 1.0;
        for i in 0..2 {
            o[i] += self.c * u * u * x[i];
        }
    }
    fn d1(&self, x: &[f64], a: &[f64], o: &mut [f64]) {
        Twist.d1(x, a, o);
        let u = dot(x, x) - 1.0;
        for i in 0..2 {
            o[i] += self.c * (u * u * a[i] + 4.0 * u * dot(x, a) * x[i]);
        }
    }
    fn d2(&self, x: &[f64], a: &[f64], b: &[f64], o: &mut [f64]) {
        Twist.d2(x, a, b, o);
        let u = dot(x, x) - 1.0;
        let (xa, xb, ab) = (dot(x, a), dot(x, b), dot(a, b));
        for i in 0..2 {
            o[i] += self.c * (4.0 * u * (xb * a[i] + xa * b[i] + ab * x[i]) + 8.0 * xa * xb * x[i]);
        }
    }
    fn d3(&self, x: &[f64], a: &[f64], b: &[f64], c: &[f64], o: &mut [f64]) {
        Twist.d3(x, a, b, c, o);
        let u = dot(x, x) - 1.0;
        let (xa, xb, xc) = (dot(x, a), dot(x, b), dot(x, c));
        let (ab, ac, bc) = (dot(a, b), dot(a, c), dot(b, c));
        for i in 0..2 {
            o[i] += self.c
                * (8.0 * xc * (xb * a[i] + xa * b[i] + ab * x[i])
                    + 4.0 * u * (bc * a[i] + ac * b[i] + ab * c[i])
                    + 8.0 * (ac * xb * x[i] + xa * bc * x[i] + xa * xb * c[i]));
        }
    }
}

pub fn unit_circle(n: usize) -> PeriodicOrbit {
    PeriodicOrbit::from_fn(n, 2.0 * PI, 8, 0.0, |t| {
        let mut v = vec![0.0; n];
        v[0] = t.cos();
        v[1] = t.sin();
        v
    })
}

/// Mackey-Glass (beta 2, gamma 1, power 9.65).
pub fn mackey_glass(tau: f64) -> MackeyGlass {
    MackeyGlass::new(2.0, 1.0, 9.65, tau)
}

pub fn mg_orbit_options() -> OrbitSolveOptions {
    OrbitSolveOptions { tolerance: 1e-10, harmonics: Some(60), ..Default::default() }
}

/// Cycle at delay 1.3 from a simulated attractor, refined by Newton.
pub fn mackey_glass_seed() -> PeriodicOrbit {
    let start = mackey_glass(1.3);
    let tr = simulate(&start, &HistorySegment::constant(&[0.5], 1.3, 4), 300.0).unwrap();
    let ret = poincare_period(&tr, 0, 200.0, 1.3, 4, 1e-4).unwrap();
    let t0 = *ret.crossings.last().unwrap() - ret.period;
    let guess = orbit_from_trajectory(&tr, t0, ret.period, 60).unwrap();
    solve_periodic_orbit(&start, &guess, &mg_orbit_options()).unwrap().orbit
}

/// Cycle at `tau` by continuation from the seed at 1.3.
pub fn mackey_glass_orbit(tau: f64) -> (MackeyGlass, PeriodicOrbit) {
    let model = mackey_glass(tau);
    let orbit = solve_periodic_orbit(&model, &mackey_glass_seed(), &mg_orbit_options()).unwrap().orbit;
    (model, orbit)
}

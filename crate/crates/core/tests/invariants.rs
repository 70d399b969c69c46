mod common;

use common::{mackey_glass, mackey_glass_seed, unit_circle, Rotor};
use ddefloquet::evolution::{monodromy_matrix, propagate, Discretization};
use ddefloquet::floquet::{floquet_multipliers, MultiplierOptions};
use ddefloquet::model::{builtin, Manufactured, ZeroDelay};
use ddefloquet::normalform::{normal_form_coefficients, Bifurcation, ExtendedSegment};
use ddefloquet::ops::{apply_generator, eval_linearization, eval_multilinear};
use ddefloquet::oracle::{decay_rate, simulate};
use ddefloquet::orbit::{orbit_derivative_segment, orbit_segment, solve_periodic_orbit, OrbitSolveOptions};
use ddefloquet::segment::pairing;
use ddefloquet::{DdeModel, DualElement, HistorySegment, PeriodicOrbit};
use nalgebra::DMatrix;
use num_complex::Complex64;
use proptest::prelude::*;
use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};

fn segment(c: &[f64], h: f64) -> HistorySegment {
    HistorySegment::from_fn(1, h, 24, |th| {
        let x = th / h;
        vec![c[0] + c[1] * (PI * x).cos() + c[2] * (2.0 * PI * x).sin() + c[3] * x * x]
    })
}

fn dual(c: &[f64], h: f64) -> DualElement {
    let c = c.to_vec();
    DualElement::new(vec![c[0]], h, 24, vec![0.0, 0.4 * h, h], move |k, th, out| {
        out[0] = c[1] + c[2] * (th / h).sin() + if k == 1 { c[3] } else { 0.0 };
    })
}

/// Every scalar builtin paired with a cycle of matching dimension.
fn models() -> Vec<(Box<dyn DdeModel>, PeriodicOrbit)> {
    let mut p = BTreeMap::new();
    p.insert("r".to_string(), 1.7);
    p.insert("c0".to_string(), -0.3);
    p.insert("c1".to_string(), -1.1);
    p.insert("c2".to_string(), 0.4);
    let scalar = PeriodicOrbit::from_fn(1, 3.0, 6, 0.0, |t| vec![1.0 + 0.3 * (2.0 * PI * t / 3.0).sin()]);
    vec![
        (builtin("manufactured", 1, &[FRAC_PI_2], &p).unwrap(), PeriodicOrbit::manufactured()),
        (builtin("mackey_glass", 1, &[1.3], &p).unwrap(), scalar.clone()),
        (builtin("hutchinson", 1, &[1.0], &p).unwrap(), scalar.clone()),
        (builtin("linear", 1, &[0.5, 1.2], &p).unwrap(), scalar),
        (builtin("ode:van_der_pol", 2, &[], &p).unwrap(), unit_circle(2)),
        (builtin("ode:twist", 2, &[], &p).unwrap(), unit_circle(2)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn pairing_is_bilinear(
        a in prop::collection::vec(-1.0..1.0f64, 4),
        b in prop::collection::vec(-1.0..1.0f64, 4),
        c in prop::collection::vec(-1.0..1.0f64, 4),
        d in prop::collection::vec(-1.0..1.0f64, 4),
        alpha in -2.0..2.0f64,
    ) {
        let h = 1.3;
        let (f1, f2) = (dual(&a, h), dual(&b, h));
        let (p1, p2) = (segment(&c, h), segment(&d, h));
        let lhs = pairing(&f2.axpy(alpha, &f1), &p1).unwrap();
        let rhs = alpha * pairing(&f1, &p1).unwrap() + pairing(&f2, &p1).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
        let lhs = pairing(&f1, &p2.axpy(alpha, &p1)).unwrap();
        let rhs = alpha * pairing(&f1, &p1).unwrap() + pairing(&f1, &p2).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn linearization_is_periodic(t in -10.0..10.0f64) {
        for (model, orbit) in models() {
            let a = eval_linearization(model.as_ref(), &orbit, t);
            let b = eval_linearization(model.as_ref(), &orbit, t + orbit.period);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).amax() <= 1e-10, "{}", model.name());
            }
        }
    }

    #[test]
    fn multilinear_forms_are_symmetric(
        t in 0.0..3.0f64,
        a in prop::collection::vec(-1.0..1.0f64, 4),
        b in prop::collection::vec(-1.0..1.0f64, 4),
        c in prop::collection::vec(-1.0..1.0f64, 4),
    ) {
        for (model, orbit) in models() {
            let h = model.max_delay();
            let n = model.dim();
            let dir = |v: &[f64]| {
                let v = v.to_vec();
                HistorySegment::from_fn(n, h, 16, move |th| (0..n).map(|i| v[i] + v[(i + 1) % 4] * th).collect())
            };
            let (x, y, z) = (dir(&a), dir(&b), dir(&c));
            let close = |u: &[f64], v: &[f64]| {
                let scale = u.iter().chain(v).fold(1e-300f64, |m, w| m.max(w.abs()));
                u.iter().zip(v).all(|(p, q)| (p - q).abs() <= 1e-14 * scale.max(1.0))
            };
            let g2 = eval_multilinear(model.as_ref(), &orbit, t, 2, &[&x, &y]).unwrap();
            let g2s = eval_multilinear(model.as_ref(), &orbit, t, 2, &[&y, &x]).unwrap();
            prop_assert!(close(&g2, &g2s), "{}", model.name());
            let g3 = eval_multilinear(model.as_ref(), &orbit, t, 3, &[&x, &y, &z]).unwrap();
            for perm in [[&y, &x, &z], [&z, &y, &x], [&x, &z, &y], [&y, &z, &x]] {
                let g = eval_multilinear(model.as_ref(), &orbit, t, 3, &perm).unwrap();
                prop_assert!(close(&g3, &g), "{}", model.name());
            }
        }
    }

    #[test]
    fn evolution_is_a_periodic_semigroup(
        c in prop::collection::vec(-1.0..1.0f64, 4),
        start in 0..40usize,
        mid in 1..30usize,
        end in 1..30usize,
    ) {
        let model = Manufactured::new(1.0);
        let orbit = PeriodicOrbit::manufactured();
        let disc = Discretization::new(24, PI / 40.0);
        let h = FRAC_PI_2;
        let phi = segment(&c, h);
        let s = start as f64 * disc.dt;
        let r = s + mid as f64 * disc.dt;
        let t = r + end as f64 * disc.dt;
        let direct = propagate(&model, &orbit, s, t, &phi, &disc).unwrap();
        let inner = propagate(&model, &orbit, s, r, &phi, &disc).unwrap();
        let chained = propagate(&model, &orbit, r, t, &inner, &disc).unwrap();
        let scale = phi.sup_norm();
        prop_assert!(chained.sub(&direct).sup_norm() <= 1e-8 * scale);
        let shifted = propagate(&model, &orbit, s + 2.0 * PI, t + 2.0 * PI, &phi, &disc).unwrap();
        prop_assert!(shifted.sub(&direct).sup_norm() <= 1e-8 * scale);
    }
}

#[test]
fn trivial_eigenfunction_satisfies_domain_condition() {
    for (model, orbit) in [
        (Box::new(Manufactured::new(1.0)) as Box<dyn DdeModel>, PeriodicOrbit::manufactured()),
        (Box::new(mackey_glass(1.3)), mackey_glass_seed()),
    ] {
        let h = model.max_delay();
        for tau in [0.0, 0.37, 1.9] {
            let phi = orbit_derivative_segment(&orbit, tau, h, 48);
            let (lin, deriv) = apply_generator(model.as_ref(), &orbit, tau, &phi);
            let slope = deriv.head();
            let err = (0..model.dim()).map(|i| (lin[i] - slope[i]).abs()).fold(0.0, f64::max);
            assert!(err < 1e-8, "{}: {err}", model.name());
        }
    }
}

#[test]
fn reported_multipliers_are_near_singular_values() {
    let model = Manufactured::new(1.0);
    let orbit = PeriodicOrbit::manufactured();
    let mono = monodromy_matrix(&model, &orbit, 0.0, &Discretization::new(24, PI / 40.0)).unwrap();
    let spec = floquet_multipliers(&mono, &MultiplierOptions::default()).unwrap();
    let m = mono.matrix.map(|x| Complex64::new(x, 0.0));
    let norm = mono.matrix.norm();
    for mult in &spec.multipliers {
        let shifted = DMatrix::from_diagonal_element(m.nrows(), m.ncols(), mult.value) - &m;
        let smin = shifted.singular_values().min();
        assert!(smin <= 1e-6 * norm, "{}: {smin}", mult.value);
    }
}

#[test]
fn orbit_solve_is_reproducible() {
    let model = mackey_glass(1.3);
    let guess = mackey_glass_seed();
    let opts = OrbitSolveOptions { tolerance: 1e-10, ..Default::default() };
    let a = solve_periodic_orbit(&model, &guess, &opts).unwrap().orbit;
    let b = solve_periodic_orbit(&model, &guess, &opts).unwrap().orbit;
    assert!((a.period - b.period).abs() <= 1e-10);
    for k in 0..50 {
        let t = a.period * k as f64 / 50.0;
        assert!((a.eval(t)[0] - b.eval(t)[0]).abs() <= 1e-10);
    }
}

#[test]
fn simulated_decay_matches_leading_multiplier() {
    let model = mackey_glass(1.3);
    let orbit = mackey_glass_seed();
    let mono = monodromy_matrix(&model, &orbit, 0.0, &Discretization::new(24, 1.3 / 20.0)).unwrap();
    let spec = floquet_multipliers(&mono, &MultiplierOptions::default()).unwrap();
    let lead = spec
        .multipliers
        .iter()
        .filter(|m| (m.value - 1.0).norm() > 1e-3)
        .map(|m| m.value.norm())
        .fold(0.0, f64::max);
    let start = orbit_segment(&orbit, 0.0, 1.3, 16).axpy(0.01, &HistorySegment::constant(&[1.0], 1.3, 16));
    let t0 = 6.0 * orbit.period;
    let tr = simulate(&model, &start, t0 + 12.0 * orbit.period).unwrap();
    let rate = decay_rate(&tr, &orbit, t0, 6, 1.3).unwrap();
    assert!((rate - lead).abs() <= 0.1 * lead, "simulated {rate} vs multiplier {lead}");
}

#[test]
fn center_and_complement_parts_reconstruct_forcing() {
    let model = ZeroDelay::new(Rotor { w: 0.3, a: -0.7, b: 0.4 }, 1.0);
    let disc = Discretization::new(16, 0.05).with_tau_mesh(32);
    let rep =
        normal_form_coefficients(&model, &unit_circle(4), Some(Bifurcation::NeimarkSacker), &disc, &Default::default())
            .unwrap();
    let basis = &rep.basis;
    for mc in &rep.orders {
        for a in 0..mc.monomials.len() {
            for k in (0..basis.samples()).step_by(5) {
                let r = &mc.forcing[a][k];
                let (c0, c) = basis.components(k, r).unwrap();
                let mut center = ExtendedSegment::embed(&basis.velocity[k]).scale(c0);
                for (i, ci) in c.iter().enumerate() {
                    center = center.axpy(*ci, &ExtendedSegment::embed(basis.column(i, k)));
                }
                let complement = r.axpy(-1.0, &center);
                let (d0, d) = basis.components(k, &complement).unwrap();
                let leak = d.iter().fold(d0.abs(), |m, x| m.max(x.abs()));
                let scale = r.norm().max(1.0);
                assert!(leak <= 1e-10 * scale, "order {} monomial {a}: {leak}", mc.order);
                let rebuilt = center.axpy(1.0, &complement);
                assert!(rebuilt.axpy(-1.0, r).norm() <= 1e-10 * scale);
            }
        }
    }
}

mod common;

use common::{mackey_glass_orbit, unit_circle, DriftingTwist, Rotor, MG_CRITICAL_DELAY};
use ddefloquet::evolution::Discretization;
use ddefloquet::model::{Manufactured, Twist, ZeroDelay};
use ddefloquet::normalform::{normal_form_coefficients, Bifurcation, NormalFormOptions};
use ddefloquet::{DdeModel, Error, PeriodicOrbit};
use std::f64::consts::PI;

#[test]
fn neimark_sacker_cubic_matches_hopf_block() {
    let (a, b) = (-0.7, 0.4);
    let model = ZeroDelay::new(Rotor { w: 0.3, a, b }, 1.0);
    let disc = Discretization::new(16, 0.05).with_tau_mesh(32);
    let rep = normal_form_coefficients(&model, &unit_circle(4), Some(Bifurcation::NeimarkSacker), &disc, &Default::default())
        .unwrap();
    assert_eq!(rep.bifurcation, Bifurcation::NeimarkSacker);
    let head = rep.basis.columns[0][0].head();
    let rho2 = head[2] * head[2] + head[3] * head[3];
    assert!((rep.coefficient("rotation").unwrap().abs() - 0.3).abs() < 1e-8);
    assert!((rep.coefficient("cubic_real").unwrap() - a * rho2).abs() < 1e-8);
    assert!((rep.coefficient("cubic_imag").unwrap() - b * rho2).abs() < 1e-8);
    for q in [2, 3] {
        assert!(rep.diagnostic(&format!("residual_order{q}")).unwrap() < 1e-6);
        assert!(rep.diagnostic(&format!("invariance_p_order{q}")).unwrap() < 1e-8);
        assert!(rep.diagnostic(&format!("invariance_P_order{q}")).unwrap() < 1e-8);
    }
}

#[test]
fn fold_quadratic_matches_radial_drift() {
    let c = 0.3;
    let model = ZeroDelay::new(DriftingTwist { c }, 1.0);
    let disc = Discretization::new(16, 0.05).with_tau_mesh(32);
    let rep =
        normal_form_coefficients(&model, &unit_circle(2), Some(Bifurcation::Fold), &disc, &Default::default()).unwrap();
    assert!(rep.basis.coupled);
    assert!((rep.coefficient("quadratic").unwrap() - 2.0 * c).abs() < 1e-6, "{:?}", rep.coefficients);
    assert!(rep.coefficient("period_quadratic").unwrap().abs() < 1e-6);
    assert!(rep.diagnostic("residual_order2").unwrap() < 1e-6);
    assert!(rep.diagnostic("linear_residual").unwrap() < 1e-6);
}

#[test]
fn twist_without_drift_has_no_quadratic_term() {
    let model = ZeroDelay::new(Twist, 1.0);
    let disc = Discretization::new(16, 0.05).with_tau_mesh(32);
    let rep = normal_form_coefficients(&model, &unit_circle(2), None, &disc, &Default::default()).unwrap();
    assert_eq!(rep.bifurcation, Bifurcation::Fold);
    assert!(rep.coefficient("quadratic").unwrap().abs() < 1e-8);
}

#[test]
fn type_mismatch_is_reported() {
    let model = ZeroDelay::new(Rotor { w: 0.3, a: -0.7, b: 0.4 }, 1.0);
    let disc = Discretization::new(12, 0.1).with_tau_mesh(16);
    let err = normal_form_coefficients(&model, &unit_circle(4), Some(Bifurcation::PeriodDoubling), &disc, &Default::default())
        .unwrap_err();
    assert!(matches!(err, Error::InvalidInput(ref m) if m.contains("near -1")), "{err:?}");
    let err = normal_form_coefficients(
        &Manufactured::new(-0.2),
        &PeriodicOrbit::manufactured(),
        Some(Bifurcation::PeriodDoubling),
        &Discretization::new(16, PI / 20.0),
        &Default::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::InvalidInput(ref m) if m.contains("no multiplier in the unit band near -1")), "{err:?}");
}

#[test]
fn quadratic_forcing_matches_finite_differences_on_period_doubling_cycle() {
    let tau = MG_CRITICAL_DELAY;
    let (model, orbit) = mackey_glass_orbit(tau);
    let disc = Discretization::new(32, tau / 20.0).with_tau_mesh(32);
    let rep = normal_form_coefficients(&model, &orbit, Some(Bifurcation::PeriodDoubling), &disc, &Default::default())
        .unwrap();
    let basis = &rep.basis;
    assert!(basis.antiperiodic[0]);
    let second = rep.orders.iter().find(|m| m.order == 2).unwrap();
    let delays = model.delays().to_vec();
    let eps = 1e-4;
    for k in (0..basis.samples()).step_by(7) {
        let t = basis.times[k];
        let phi = basis.column(0, k);
        let mut args = orbit.eval(t);
        for &d in &delays {
            args.extend(orbit.eval(t - d));
        }
        let mut dir = phi.head();
        for &d in &delays {
            dir.extend(phi.eval(-d).unwrap());
        }
        let shifted = |s: f64| {
            let v: Vec<f64> = args.iter().zip(&dir).map(|(x, y)| x + s * y).collect();
            let mut out = vec![0.0];
            model.rhs(&v, &mut out);
            out[0]
        };
        let fd = (shifted(eps) + shifted(-eps) - 2.0 * shifted(0.0)) / (2.0 * eps * eps);
        let r2 = second.forcing[0][k].head[0];
        assert!((fd - r2).abs() < 1e-6 * r2.abs().max(1.0), "k={k}: {fd} vs {r2}");
    }
    // coarse mesh: parity closes to the discretization error only
    assert!(rep.diagnostic("parity_order2").unwrap() < 1e-5);
    assert!(rep.diagnostic("parity_order3").unwrap() < 1e-5);
    assert!(rep.diagnostic("invariance_p_order3").unwrap() < 1e-8);
    assert!(rep.diagnostic("invariance_P_order3").unwrap() < 1e-8);
    assert!(rep.coefficient("cubic").unwrap() < 0.0);
}

#[test]
fn default_options_request_cubic_order() {
    assert_eq!(NormalFormOptions::default().order, 3);
}

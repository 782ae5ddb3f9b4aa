mod common;

use proptest::prelude::*;
use young_bsde::driver::AnalyticField;
use young_bsde::forward::{euler_maruyama, SdeSpec};
use young_bsde::paths::{p_variation, uniform_norm, ControlValue, SamplePath, TimeGrid};
use young_bsde::sewing::{
    nonlinear_young_integral, remainder_certificate, sew, young_constant, young_delta, young_integral, FnGerm,
};

fn brownian(cells: usize, seed: u64) -> SamplePath {
    let grid = TimeGrid::uniform(1.0, cells).unwrap();
    euler_maruyama(&SdeSpec::brownian(vec![0.0], 1.0), &grid, 1, seed).unwrap().sample_path(0)
}

/// `sin(x) t^0.8`: time, space (Lipschitz) and mixed terms each at most 1
/// on `[0, 1]`.
fn rough_field() -> AnalyticField {
    AnalyticField::scalar(1, 1.0, |t, x| x[0].sin() * t.powf(0.8))
}
const ROUGH_NORM_BOUND: f64 = 3.0;

#[test]
fn linear_germ_is_exact_at_every_level() {
    let grid = TimeGrid::uniform(2.5, 5).unwrap();
    let r = sew(&FnGerm(|s: f64, t: f64| 1.7 * (t - s)), &grid, 9).unwrap();
    for tot in &r.level_totals {
        assert!((tot[0] - 1.7 * 2.5).abs() < 1e-13);
    }
}

#[test]
fn trivial_young_examples() {
    let grid = TimeGrid::uniform(1.0, 64).unwrap();
    let x = brownian(64, 3);
    let time_only = AnalyticField::scalar(1, 1.0, |t, _| t);
    let y = SamplePath::from_scalar_fn(grid.clone(), |_| -0.4).unwrap();
    let r = nonlinear_young_integral(&y, &x, &time_only, Some((0.25, 0.75)), 2).unwrap();
    assert!((r.total1() + 0.4 * 0.5).abs() < 1e-14);

    let tx = AnalyticField::scalar(1, 1.0, |t, x| t * x[0]);
    let x0 = SamplePath::from_scalar_fn(grid.clone(), |_| 1.3).unwrap();
    let one = SamplePath::from_scalar_fn(grid, |_| 1.0).unwrap();
    let r = nonlinear_young_integral(&one, &x0, &tx, Some((0.5, 1.0)), 3).unwrap();
    assert!((r.total1() - 1.3 * 0.5).abs() < 1e-14);

    // ∫ r dr by left points on mesh 2^-16
    let fine = TimeGrid::uniform(1.0, 1 << 16).unwrap();
    let id = SamplePath::from_scalar_fn(fine.clone(), |t| t).unwrap();
    let one = SamplePath::from_scalar_fn(fine, |_| 1.0).unwrap();
    let r = nonlinear_young_integral(&one, &id, &tx, None, 16).unwrap();
    assert!((r.total1() - 0.5).abs() < 1e-5);
}

#[test]
fn stieltjes_examples() {
    let grid = TimeGrid::uniform(1.0, 1 << 20).unwrap();
    let m = SamplePath::from_scalar_fn(grid.clone(), |t| t * t).unwrap();
    let one = SamplePath::from_scalar_fn(grid, |_| 1.0).unwrap();
    let r = young_integral(&one, &m, None, 14).unwrap();
    for tot in &r.level_totals {
        assert!((tot[0] - 1.0).abs() < 1e-12);
    }
    let r = young_integral(&m, &m, None, 14).unwrap();
    assert!((r.total1() - 0.5).abs() < 1e-6);
}

#[test]
fn classical_integral_against_accumulated_driver_coincides() {
    let x = brownian(1 << 12, 5);
    let grid = x.grid().clone();
    let field = rough_field();
    let one = SamplePath::from_scalar_fn(grid.clone(), |_| 1.0).unwrap();
    let m = nonlinear_young_integral(&one, &x, &field, None, 12).unwrap().cumulative_path().unwrap();
    let y = x.map(1, |_, v, o| o[0] = v[0].cos()).unwrap();
    let a = young_integral(&y, &m, None, 12).unwrap().total1();
    let b = nonlinear_young_integral(&y, &x, &field, None, 12).unwrap().total1();
    assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
}

#[test]
fn certificate_trivial_cases() {
    let grid = TimeGrid::uniform(1.0, 4).unwrap();
    let w = ControlValue::time(grid.clone());
    let r = sew(&FnGerm(|s: f64, t: f64| 3.0 * (t - s)), &grid, 6).unwrap();
    assert!(remainder_certificate(&r, &[(w.clone(), 1.0)]).unwrap().iter().all(|c| c.holds));
    let r = sew(&FnGerm(|s: f64, t: f64| (t - s) * (t - s)), &grid, 10).unwrap();
    let cells = remainder_certificate(&r, &[(w, 1.0)]).unwrap();
    for c in &cells {
        assert!(c.holds);
        assert!((c.bound - 2.0 * (c.end - c.start).powi(2)).abs() < 1e-14);
    }
}

/// Controls dominating the defect of the Young germ, built from the
/// p-variations of `x`, `y` and the time control.
#[test]
fn certificate_for_the_young_germ() {
    let (tau, lambda, p) = (0.8, 1.0, 2.5);
    let x = brownian(512, 8);
    let grid = x.grid().clone();
    let y = x.map(1, |_, v, o| o[0] = v[0].cos()).unwrap();
    let r = nonlinear_young_integral(&y, &x, &rough_field(), None, 5).unwrap();
    let wt = ControlValue::time(grid);
    let wx = ControlValue::p_variation(&x, p).unwrap();
    let wy = ControlValue::p_variation(&y, p).unwrap();
    let y_sup = uniform_norm(&y, None).unwrap();
    // |δA| <= c1 w_y^{1/p} w_t^τ + c2 w_x^{λ/p} w_t^τ
    let (c1, c2) = (1.0, y_sup);
    let mut controls = Vec::new();
    for (w, a, c) in [(wy, 1.0 / p, c1), (wx, lambda / p, c2)] {
        let e = tau + a;
        let prod = ControlValue::product(&[(w, a / e), (wt.clone(), tau / e)]).unwrap();
        controls.push((prod.scaled_power(c.powf(1.0 / e), 1.0), e - 1.0));
    }
    let cells = remainder_certificate(&r, &controls).unwrap();
    assert_eq!(cells.len(), 16);
    assert!(cells.iter().all(|c| c.holds), "{cells:?}");
    assert!(cells.iter().any(|c| c.observed > 0.0));
}

fn integral_variation(y: &SamplePath, x: &SamplePath, lo: usize, hi: usize, tau: f64) -> (f64, f64, f64, f64) {
    let g = x.grid();
    let iv = Some((g.t(lo), g.t(hi)));
    let r = nonlinear_young_integral(y, x, &rough_field(), iv, 0).unwrap();
    let var = p_variation(&r.cumulative_path().unwrap(), 1.0 / tau, None).unwrap();
    (var, p_variation(x, 2.5, iv).unwrap(), p_variation(y, 2.5, iv).unwrap(), uniform_norm(y, iv).unwrap())
}

#[test]
fn variation_estimate_with_implementation_constant() {
    let (tau, lambda, p) = (0.8, 1.0, 2.5);
    let k = young_constant(young_delta(tau, lambda, p, p));
    let x = brownian(1024, 13);
    let y = x.map(1, |t, v, o| o[0] = 2.0 * v[0].sin() + t).unwrap();
    for (lo, hi) in [(0, 1024), (0, 100), (300, 700), (1000, 1024)] {
        let (var, xv, yv, ys) = integral_variation(&y, &x, lo, hi, tau);
        let len = (hi - lo) as f64 / 1024.0;
        let rhs = k * ROUGH_NORM_BOUND * len.powf(tau) * ((1.0 + xv.powf(lambda)) * ys + yv);
        assert!(var <= rhs, "[{lo},{hi}] {var} > {rhs}");
    }
}

#[test]
fn interpolation_estimate_with_implementation_constant() {
    let (tau, lambda, p, eps) = (0.8, 1.0, 2.5, 0.3);
    assert!(tau + (1.0 - eps) / p > 1.0);
    let k = young_constant(young_delta(tau, lambda, p, p / (1.0 - eps)));
    let x = brownian(1024, 21);
    // bounded integrand g(y) = tanh(3 y)
    let y = x.map(1, |_, v, o| o[0] = (3.0 * v[0]).tanh()).unwrap();
    for (lo, hi) in [(0, 1024), (0, 64), (512, 1024)] {
        let (var, xv, yv, ys) = integral_variation(&y, &x, lo, hi, tau);
        let len = (hi - lo) as f64 / 1024.0;
        let rhs = k * ROUGH_NORM_BOUND * len.powf(tau) * (xv.powf(lambda) * ys + ys + ys.powf(eps) * yv.powf(1.0 - eps));
        assert!(var <= rhs, "[{lo},{hi}] {var} > {rhs}");
    }
}

/// Covariation sum of two Young processes (no martingale part): the
/// product identity residual at level ℓ is `Σ ΔY¹ ΔY²`.
#[test]
fn product_rule_residual_shrinks() {
    let levels = 14u32;
    let x = brownian(1 << levels, 17);
    let grid = x.grid().clone();
    let field = AnalyticField::scalar(1, 1.0, |t, x| (2.0 + x[0].sin()) * t.powf(0.9));
    let h1 = x.map(1, |t, v, o| o[0] = 1.0 + 0.5 * (t + v[0]).cos()).unwrap();
    let h2 = SamplePath::from_scalar_fn(grid.clone(), |_| 2.0).unwrap();
    let y1 = nonlinear_young_integral(&h1, &x, &field, None, levels).unwrap().cumulative_path().unwrap();
    let y2 = nonlinear_young_integral(&h2, &x, &field, None, levels).unwrap().cumulative_path().unwrap();
    let y1 = y1.map(1, |t, v, o| o[0] = v[0] + t + 0.3).unwrap();
    let y2 = y2.map(1, |t, v, o| o[0] = v[0] - t * t + 1.0).unwrap();
    let n = grid.len() - 1;
    let lhs = y1.value(n)[0] * y2.value(n)[0] - y1.value(0)[0] * y2.value(0)[0];
    let a = young_integral(&y1, &y2, None, levels).unwrap();
    let b = young_integral(&y2, &y1, None, levels).unwrap();
    let res: Vec<f64> = (0..=levels as usize)
        .map(|l| (lhs - a.level_totals[l][0] - b.level_totals[l][0]).abs())
        .collect();
    for l in 4..levels as usize {
        assert!(res[l] / res[l + 1] >= 1.5, "level {l}: {:?}", &res[4..]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { failure_persistence: None, ..ProptestConfig::with_cases(48) })]

    #[test]
    fn additive_over_grid_splits(seed in 0u64..1000, split in 1usize..31, levels in 0u32..4) {
        let x = brownian(32 << levels, seed);
        let y = x.map(1, |t, v, o| o[0] = (v[0] + t).sin()).unwrap();
        let f = rough_field();
        let r = nonlinear_young_integral(&y, &x, &f, None, levels).unwrap();
        let whole = r.between_cells(0, 32)[0];
        let parts = r.between_cells(0, split)[0] + r.between_cells(split, 32)[0];
        prop_assert!((whole - parts).abs() <= 64.0 * f64::EPSILON * whole.abs().max(1.0));
        let last = r.cumulative.len() - 1;
        prop_assert!((r.cumulative[last] - r.total1()).abs() <= 64.0 * f64::EPSILON * whole.abs().max(1.0));
    }

    /// `‖g(x) - g(y)‖_p ≤ 4 (‖g'‖ ‖x - y‖_p + ‖g''‖ (‖x‖_p + ‖y‖_p) ‖x - y‖_∞)`
    /// with `g = sin`, implementation constant 4.
    #[test]
    fn composition_difference_bound(
        a in prop::collection::vec(-2.0f64..2.0, 2..40),
        shift in prop::collection::vec(-0.5f64..0.5, 40),
        p in 1.0f64..4.0,
    ) {
        let n = a.len();
        let grid = TimeGrid::uniform(1.0, n - 1).unwrap();
        let x = SamplePath::scalar(grid.clone(), a.clone()).unwrap();
        let y = SamplePath::scalar(grid.clone(), a.iter().zip(&shift).map(|(u, s)| u + s).collect()).unwrap();
        let diff = SamplePath::scalar(grid.clone(), a.iter().zip(&shift).map(|(_, s)| -s).collect()).unwrap();
        let gd = SamplePath::scalar(grid, a.iter().zip(&shift).map(|(u, s)| u.sin() - (u + s).sin()).collect()).unwrap();
        let lhs = p_variation(&gd, p, None).unwrap();
        let rhs = 4.0 * (p_variation(&diff, p, None).unwrap()
            + (p_variation(&x, p, None).unwrap() + p_variation(&y, p, None).unwrap()) * uniform_norm(&diff, None).unwrap());
        prop_assert!(lhs <= rhs + 1e-14);
    }
}

//! The named experiments. Each returns its results table and summary lines;
//! a few also write extra artifacts into the output directory.

use std::path::Path;
use std::sync::Arc;

use young_bsde::bsde::{
    backward_solve, comparison_experiment, diagnostics, linear_closed_form, localization_sweep, BsdeSpec, LinearSpec,
    RegressionBasis, StateTerminal,
};
use young_bsde::driver::{assumption_check, AnalyticField, DriverField, TensorFormat};
use young_bsde::flow::{exp_formula_1d, inverse_flow, solve_linear_yode};
use young_bsde::forward::{euler_maruyama, PathEnsemble, SdeSpec};
use young_bsde::io::{Csv, Field};
use young_bsde::paths::{SamplePath, TimeGrid};
use young_bsde::pde::{
    feynman_kac_cross_check, localization_error_experiment, mc_point_estimate, neumann_fk_estimate, young_pde_table,
    McOptions, PdeSpec,
};
use young_bsde::sewing::nonlinear_young_integral;
use young_bsde::stats::line_fit;

use crate::config::{need, Battery, BsdeSection, ExperimentConfig, Experiment, PdeSection};
use crate::CliError;

pub struct Report {
    pub csv: Csv,
    pub summary: Vec<String>,
}

fn pf(ok: bool) -> &'static str {
    if ok {
        "PASS"
    } else {
        "FAIL"
    }
}

/// Forward paths use a seed distinct from the driver's.
fn path_seed(seed: u64) -> u64 {
    seed.wrapping_add(1)
}

pub fn run(cfg: &ExperimentConfig, out: &Path) -> Result<Report, CliError> {
    match cfg.experiment {
        Experiment::Integrate => integrate(cfg),
        Experiment::Flow => flow(cfg),
        Experiment::LinearBsde => linear_bsde(cfg),
        Experiment::NonlinearBsde => nonlinear_bsde(cfg),
        Experiment::Localize => localize(cfg),
        Experiment::Compare => compare(cfg),
        Experiment::PdeTable => pde_table(cfg),
        Experiment::CrossCheck => cross_check(cfg),
        Experiment::LocalizationError => localization_error(cfg),
        Experiment::Neumann => neumann(cfg),
        Experiment::FbsGenerate => fbs_generate(cfg, out),
        Experiment::Assumptions => assumptions(cfg),
    }
}

/// Composite Simpson rule with `panels` (even) subintervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, panels: usize) -> f64 {
    let h = (b - a) / panels as f64;
    let mut s = f(a) + f(b);
    for k in 1..panels {
        s += f(a + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

type SmoothCase = (&'static str, AnalyticField, fn(f64, &mut [f64]), usize, fn(f64, &mut [f64]), usize, fn(f64) -> f64);

/// Drivers differentiable in time, with paths `x`, `y` and the Riemann
/// integrand `y_t · ∂_t η(t, x_t)` written out by hand.
fn smooth_cases() -> Vec<SmoothCase> {
    vec![
        (
            "sin(x) t^2, x = t, y = cos t",
            AnalyticField::scalar(1, 1.0, |t, x| x[0].sin() * t * t),
            |t, o| o[0] = t,
            1,
            |t, o| o[0] = t.cos(),
            1,
            |t| t.cos() * t.sin() * 2.0 * t,
        ),
        (
            "t x, x = sin 3t, y = 1 + t^2",
            AnalyticField::scalar(1, 1.0, |t, x| t * x[0]),
            |t, o| o[0] = (3.0 * t).sin(),
            1,
            |t, o| o[0] = 1.0 + t * t,
            1,
            |t| (1.0 + t * t) * (3.0 * t).sin(),
        ),
        (
            "exp(-t) cos x, x = t^2, y = exp t",
            AnalyticField::scalar(1, 1.0, |t, x| (-t).exp() * x[0].cos()),
            |t, o| o[0] = t * t,
            1,
            |t, o| o[0] = t.exp(),
            1,
            |t| -(t * t).cos(),
        ),
        (
            "t^2 (x1 + x2^2), x = (cos t, sin t), y = t",
            AnalyticField::scalar(2, 1.0, |t, x| t * t * (x[0] + x[1] * x[1])),
            |t, o| {
                o[0] = t.cos();
                o[1] = t.sin();
            },
            2,
            |t, o| o[0] = t,
            1,
            |t| t * 2.0 * t * (t.cos() + t.sin().powi(2)),
        ),
        (
            "(t sin x, t^2 x), x = t, y = (1, t)",
            AnalyticField::new(1, 2, 1.0, |t, x, o| {
                o[0] = t * x[0].sin();
                o[1] = t * t * x[0];
            }),
            |t, o| o[0] = t,
            1,
            |t, o| {
                o[0] = 1.0;
                o[1] = t;
            },
            2,
            |t| t.sin() + t * 2.0 * t * t,
        ),
    ]
}

fn integrate(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let s = need(&cfg.sewing, "sewing")?;
    let grid = TimeGrid::uniform(1.0, s.base_cells << s.levels)?;
    match s.battery {
        Battery::Smooth => {
            let mut csv = Csv::new(&["case", "young", "riemann", "abs_error"]);
            let mut worst = 0.0f64;
            for (name, field, xf, dx, yf, dy, integrand) in smooth_cases() {
                let x = SamplePath::from_fn(grid.clone(), dx, xf)?;
                let y = SamplePath::from_fn(grid.clone(), dy, yf)?;
                let r = nonlinear_young_integral(&y, &x, &field, None, s.levels)?;
                let exact = simpson(integrand, 0.0, 1.0, 2000);
                let err = (r.total1() - exact).abs();
                worst = worst.max(err);
                csv.row(&[name.into(), r.total1().into(), exact.into(), err.into()]);
            }
            Ok(Report {
                csv,
                summary: vec![format!(
                    "smooth reduction: max |young - riemann| = {worst:.3e} <= {:.1e}: {}",
                    cfg.tolerances.smooth,
                    pf(worst <= cfg.tolerances.smooth)
                )],
            })
        }
        Battery::Rough => {
            let driver = need(&cfg.driver, "driver")?;
            let field = driver.build(1, 1.0, cfg.seed, None)?;
            let ens = euler_maruyama(&SdeSpec::brownian(vec![0.0], 1.0), &grid, 1, path_seed(cfg.seed))?;
            let x = ens.sample_path(0);
            let y = SamplePath::from_scalar_fn(grid, |_| 1.0)?;
            let r = nonlinear_young_integral(&y, &x, field.as_ref(), None, s.levels)?;
            let mut csv = Csv::new(&["level", "total", "cauchy_increment"]);
            for (l, inc) in r.cauchy_increments.iter().enumerate() {
                csv.row(&[l.into(), r.level_totals[l][0].into(), (*inc).into()]);
            }
            let tail: Vec<usize> = (1..r.cauchy_increments.len()).filter(|&l| r.cauchy_increments[l] > 0.0).collect();
            let mut summary = vec![format!("integral {:.10e} at level {}", r.total1(), s.levels)];
            if tail.len() >= 2 {
                let ls: Vec<f64> = tail.iter().map(|&l| l as f64).collect();
                let logs: Vec<f64> = tail.iter().map(|&l| r.cauchy_increments[l].log2()).collect();
                summary.push(format!("dyadic convergence rate {:.4}", -line_fit(&ls, &logs).slope));
            }
            Ok(Report { csv, summary })
        }
    }
}

fn flow(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let f = need(&cfg.flow, "flow")?;
    let driver = need(&cfg.driver, "driver")?;
    let field = driver.build(1, 1.0, cfg.seed, None)?;
    let grid = TimeGrid::uniform(1.0, f.cells)?;
    let x = euler_maruyama(&SdeSpec::brownian(vec![0.0], 1.0), &grid, 1, path_seed(cfg.seed))?.sample_path(0);
    let a = f.alpha.clone();
    let alpha = SamplePath::from_fn(grid.clone(), a.len(), |_, o| o.copy_from_slice(&a))?;
    let flows = (0..grid.cells())
        .map(|b| solve_linear_yode(&alpha, &x, field.as_ref(), b, 1))
        .collect::<Result<Vec<_>, _>>()?;
    let n = grid.cells();
    let mut cocycle = 0.0f64;
    let mut inverse = 0.0f64;
    for t in 0..n {
        for s in t..n {
            let direct = flows[t].last();
            let e = (flows[s].last() * flows[t].matrix(s - t) - &direct).norm() / direct.norm();
            cocycle = cocycle.max(e);
        }
        let inv = inverse_flow(&flows[t])?;
        for k in 0..flows[t].len() {
            let dim = flows[t].matrix(k).nrows();
            let p = flows[t].matrix(k) * inv.matrix(k) - nalgebra::DMatrix::<f64>::identity(dim, dim);
            inverse = inverse.max(p.norm());
        }
    }
    let mut csv = Csv::new(&["check", "stride", "value"]);
    csv.row(&["cocycle_relative".into(), Field::Empty, cocycle.into()]);
    csv.row(&["inverse".into(), Field::Empty, inverse.into()]);
    let mut summary = vec![
        format!("cocycle {cocycle:.3e} <= {:.0e}: {}", cfg.tolerances.cocycle, pf(cocycle <= cfg.tolerances.cocycle)),
        format!("inverse {inverse:.3e} <= {:.0e}: {}", cfg.tolerances.inverse, pf(inverse <= cfg.tolerances.inverse)),
    ];
    if !f.strides.is_empty() {
        let mut errs = Vec::new();
        for &stride in &f.strides {
            let euler = solve_linear_yode(&alpha, &x, field.as_ref(), 0, stride)?;
            let expf = exp_formula_1d(&alpha, &x, field.as_ref(), 0, stride)?;
            let e = (0..euler.len()).map(|k| (euler.slice(k)[0] - expf[k]).abs()).fold(0.0, f64::max);
            csv.row(&["exponential_formula".into(), stride.into(), e.into()]);
            errs.push(e);
        }
        let ratios: Vec<String> = errs.windows(2).map(|w| format!("{:.3}", w[0] / w[1])).collect();
        summary.push(format!("exponential formula discrepancy ratios [{}]", ratios.join(", ")));
    }
    Ok(Report { csv, summary })
}

struct BsdeSetup {
    spec: BsdeSpec,
    ens: PathEnsemble,
    basis: RegressionBasis,
    field: Arc<dyn DriverField>,
}

fn bsde_spec(b: &BsdeSection, field: Arc<dyn DriverField>, x0: Vec<f64>, sigma: f64, shift: f64) -> young_bsde::Result<BsdeSpec> {
    let h = b.terminal.function();
    BsdeSpec::new(
        SdeSpec::brownian(x0, sigma),
        field,
        b.generator.function(),
        b.coupling.function(),
        Arc::new(StateTerminal::scalar(move |x| h(x) + shift)),
    )
}

fn bsde_setup(cfg: &ExperimentConfig) -> Result<BsdeSetup, CliError> {
    let fw = need(&cfg.forward, "forward")?;
    let b = need(&cfg.bsde, "bsde")?;
    let d = fw.x0.len();
    let field = need(&cfg.driver, "driver")?.build(d, fw.horizon, cfg.seed, None)?;
    let spec = bsde_spec(b, field.clone(), fw.x0.clone(), fw.sigma, 0.0)?;
    let grid = TimeGrid::uniform(fw.horizon, fw.steps)?;
    let ens = euler_maruyama(&spec.forward, &grid, fw.paths, path_seed(cfg.seed))?;
    Ok(BsdeSetup { spec, ens, basis: cfg.basis.clone().unwrap_or_default(), field })
}

fn linear_bsde(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let b = need(&cfg.bsde, "bsde")?;
    let s = bsde_setup(cfg)?;
    let sol = backward_solve(&s.spec, &s.ens, &s.basis, b.picard)?;
    let (a, bt, c) = match b.generator {
        crate::config::GeneratorSection::Affine { a, b, c, .. } => (a, b, c),
        _ => (0.0, 0.0, 0.0),
    };
    let alpha = match b.coupling {
        crate::config::CouplingSection::Linear { alpha } => alpha,
        _ => 0.0,
    };
    let h = b.terminal.function();
    let lin = LinearSpec {
        n: 1,
        field: s.field.clone(),
        alpha: Arc::new(move |_, _, o| o[0] = alpha),
        drift: Arc::new(move |t, x, o| o[0] = a * x[0].cos() + bt * t),
        girsanov: Arc::new(move |_, _, o| {
            o.fill(0.0);
            o[0] = c;
        }),
        terminal: Arc::new(StateTerminal::scalar(h)),
    };
    let cf = linear_closed_form(&lin, &s.ens)?;
    let mut csv = Csv::new(&["method", "y0", "se"]);
    csv.row(&["regression".into(), sol.y0[0].into(), sol.y0_se[0].into()]);
    csv.row(&["closed_form".into(), cf.y0[0].into(), cf.se[0].into()]);
    let diff = (sol.y0[0] - cf.y0[0]).abs();
    let se = sol.y0_se[0].hypot(cf.se[0]);
    let k = cfg.tolerances.standard_errors;
    Ok(Report {
        csv,
        summary: vec![
            format!("regression Y0 {:.6} (SE {:.2e})", sol.y0[0], sol.y0_se[0]),
            format!("closed form Y0 {:.6} (SE {:.2e})", cf.y0[0], cf.se[0]),
            format!("agreement |diff| {diff:.3e} <= {k} SE {:.3e}: {}", k * se, pf(diff <= k * se)),
        ],
    })
}

fn nonlinear_bsde(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let b = need(&cfg.bsde, "bsde")?;
    let s = bsde_setup(cfg)?;
    let sol = backward_solve(&s.spec, &s.ens, &s.basis, b.picard)?;
    let np = s.ens.n_paths;
    let d = s.ens.d;
    let mut csv = Csv::new(&["t", "mean_y", "sd_y", "mean_z1"]);
    for i in 0..s.ens.grid.len() {
        let ys: Vec<f64> = (0..np).map(|p| sol.y(p, i)[0]).collect();
        let m = ys.iter().sum::<f64>() / np as f64;
        let sd = (ys.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / np as f64).sqrt();
        let z = if i < s.ens.grid.cells() {
            Field::Num((0..np).map(|p| sol.z(p, i)[0]).sum::<f64>() / np as f64)
        } else {
            Field::Empty
        };
        csv.row(&[s.ens.time(i).into(), m.into(), sd.into(), z]);
    }
    let mut summary = vec![
        format!("Y0 {:.6} (SE {:.2e}), {np} paths, {} steps, d = {d}", sol.y0[0], sol.y0_se[0], s.ens.grid.cells()),
        format!(
            "picard iterations {}, final residual {:.2e}, contraction factor {:.3}",
            sol.picard_residuals.len(),
            sol.picard_residuals.last().copied().unwrap_or(0.0),
            sol.contraction_factor
        ),
        format!("step halvings {}", sol.schedule.len()),
    ];
    if let Some(dg) = b.diagnostics {
        let r = diagnostics(&sol, &s.ens, &s.basis, dg.p, dg.k)?;
        summary.push(format!("m_(p,k) {:.4}, Z BMO {:.4}, sup |Y| {:.4}", r.m_pk, r.z_bmo, r.y_sup));
    }
    Ok(Report { csv, summary })
}

fn localize(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let b = need(&cfg.bsde, "bsde")?;
    let s = bsde_setup(cfg)?;
    let rows = localization_sweep(&s.spec, &s.ens, &b.radii, &s.basis, b.picard)?;
    let mut csv = Csv::new(&["n", "y0", "y0_se", "exit_probability", "exit_se", "diff_next"]);
    for r in &rows {
        csv.row(&[
            r.n.into(),
            r.y0.into(),
            r.y0_se.into(),
            r.exit_probability.mean.into(),
            r.exit_probability.se.into(),
            r.diff_next.map_or(Field::Empty, Field::Num),
        ]);
    }
    let diffs: Vec<f64> = rows.iter().filter_map(|r| r.diff_next).collect();
    let decreasing = diffs.windows(2).all(|w| w[1] < w[0]);
    Ok(Report {
        csv,
        summary: vec![
            format!("Y0 at largest radius {:.6}", rows.last().map_or(f64::NAN, |r| r.y0)),
            format!("successive differences decreasing: {}", pf(decreasing)),
        ],
    })
}

fn compare(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let b = need(&cfg.bsde, "bsde")?;
    let fw = need(&cfg.forward, "forward")?;
    let s = bsde_setup(cfg)?;
    let shift = b.shift.unwrap_or(0.0);
    let upper = bsde_spec(b, s.field.clone(), fw.x0.clone(), fw.sigma, shift)?;
    let r = comparison_experiment(&upper, &s.spec, &s.ens, &s.basis, b.picard, cfg.tolerances.ordered)?;
    let mut csv = Csv::new(&["fraction_ordered", "tolerance", "y0_a", "y0_b", "diff", "diff_se", "min_gap"]);
    csv.row(&[
        r.fraction_ordered.into(),
        r.tolerance.into(),
        r.y0_a.into(),
        r.y0_b.into(),
        r.diff.into(),
        r.diff_se.into(),
        r.min_gap.into(),
    ]);
    let k = cfg.tolerances.standard_errors;
    Ok(Report {
        csv,
        summary: vec![
            format!("ordered cells {:.4}: {}", r.fraction_ordered, pf(r.fraction_ordered >= 0.99)),
            format!("Y_A(0) - Y_B(0) = {:.4e} > {k} SE: {}", r.diff, pf(r.diff > k * r.diff_se)),
        ],
    })
}

fn pde_spec(p: &PdeSection, n: f64, field: Option<Arc<dyn DriverField>>, label: &str) -> PdeSpec {
    let mut s = PdeSpec::heat(p.d, n, p.horizon, p.sigma, p.terminal.function())
        .with_generator(p.generator.function())
        .with_coupling(p.coupling.function())
        .with_label(label);
    if let Some(f) = field {
        s = s.with_field(f);
    }
    s
}

fn points(p: &PdeSection) -> Vec<Vec<f64>> {
    p.points
        .iter()
        .map(|x| {
            let mut v = vec![0.0; p.d];
            v[0] = *x;
            v
        })
        .collect()
}

fn pde_table(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let p = need(&cfg.pde, "pde")?;
    let driver = need(&cfg.driver, "driver")?;
    let raw = driver.build(p.d, p.horizon, cfg.seed, None)?;
    let family = |n: f64, m: f64| -> young_bsde::Result<PdeSpec> {
        let f: Arc<dyn DriverField> = Arc::new(young_bsde::driver::MollifiedField::new(raw.clone(), m)?);
        Ok(pde_spec(p, n, Some(f), "pde-table"))
    };
    let t = young_pde_table(
        &family,
        &p.n_list,
        &p.m_list,
        &points(p),
        p.time_steps.unwrap_or(100),
        p.dx.unwrap_or(0.05),
        cfg.tolerances.table,
    )?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ");
    let mut summary = Vec::new();
    for (mi, m) in t.m_list.iter().enumerate() {
        summary.push(format!("m = {m}: differences in n [{}]", fmt(&t.n_differences[mi])));
    }
    for (ni, n) in t.n_list.iter().enumerate() {
        summary.push(format!("n = {n}: differences in m [{}]", fmt(&t.m_differences[ni])));
    }
    summary.push(format!("converged below {:.1e}: {}", t.threshold, pf(t.converged)));
    Ok(Report { csv: t.to_csv(), summary })
}

fn cross_check(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let p = need(&cfg.pde, "pde")?;
    let mc = need(&p.mc, "pde.mc")?;
    let field = need(&cfg.driver, "driver")?.build(p.d, p.horizon, cfg.seed, None)?;
    let n = p.n.unwrap_or(3.0);
    let spec = pde_spec(p, n, Some(field), "cross-check");
    let picard = cfg.bsde.as_ref().map(|b| b.picard).unwrap_or_default();
    let opts = McOptions {
        n_paths: mc.paths,
        time_steps: mc.steps,
        seed: path_seed(cfg.seed),
        basis: cfg.basis.clone().unwrap_or_default(),
        picard,
    };
    let pts = points(p)
        .iter()
        .map(|x| mc_point_estimate(&spec, 0.0, x, &opts))
        .collect::<Result<Vec<_>, _>>()?;
    let fd = young_bsde::pde::FdOptions::with_dx(p.time_steps.unwrap_or(100), n, p.dx.unwrap_or(0.05));
    let rows = feynman_kac_cross_check(&spec, &pts, fd)?;
    let mut csv = Csv::new(&["x", "u_fd", "fd_error", "u_mc", "se", "discrepancy", "tolerance", "pass"]);
    for r in &rows {
        csv.row(&[
            r.x[0].into(),
            r.u_fd.into(),
            r.fd_error.into(),
            r.u_mc.into(),
            r.se.into(),
            r.discrepancy.into(),
            r.tolerance.into(),
            r.pass.into(),
        ]);
    }
    let worst = rows.iter().map(|r| r.discrepancy).fold(0.0, f64::max);
    Ok(Report {
        csv,
        summary: vec![
            format!("max |u_FD - u_MC| = {worst:.3e} over {} points", rows.len()),
            format!("within FD error + 3 SE at every point: {}", pf(rows.iter().all(|r| r.pass))),
        ],
    })
}

fn localization_error(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let p = need(&cfg.pde, "pde")?;
    let field = match &cfg.driver {
        Some(d) => Some(d.build(p.d, p.horizon, cfg.seed, None)?),
        None => None,
    };
    let family = |n: f64| Ok(pde_spec(p, n, field.clone(), "localization-error"));
    let t = localization_error_experiment(
        &family,
        &p.n_list,
        p.n_max.unwrap_or(10.0),
        &points(p),
        p.time_steps.unwrap_or(100),
        p.dx.unwrap_or(0.05),
    )?;
    let mut csv = Csv::new(&["n", "difference"]);
    for (n, d) in t.n_list.iter().zip(&t.differences) {
        csv.row(&[(*n).into(), (*d).into()]);
    }
    Ok(Report {
        csv,
        summary: vec![
            format!("monotone decrease: {}", pf(t.monotone)),
            format!(
                "log-difference vs n^2: slope {:.4}, R^2 {:.4}: {}",
                t.fit.slope,
                t.fit.r_squared,
                pf(t.fit.slope < 0.0 && t.fit.r_squared >= 0.8)
            ),
        ],
    })
}

/// `E h(X_t)` for Brownian motion reflected in `[a, b]`, from the
/// method-of-images density.
fn reflected_expectation(h: impl Fn(f64) -> f64, x: f64, t: f64, a: f64, b: f64) -> f64 {
    let l = b - a;
    let g = |u: f64| (-(u * u) / (2.0 * t)).exp() / (2.0 * std::f64::consts::PI * t).sqrt();
    let density = |y: f64| {
        (-40i32..=40)
            .map(|k| {
                let shift = 2.0 * k as f64 * l;
                g(y - x - shift) + g(y - (2.0 * a - x) - shift)
            })
            .sum::<f64>()
    };
    simpson(|y| h(y) * density(y), a, b, 4000)
}

fn neumann(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let p = need(&cfg.pde, "pde")?;
    let mc = need(&p.mc, "pde.mc")?;
    let [a, b] = p.interval.expect("validated");
    let [t, x] = p.start.expect("validated");
    let driver = need(&cfg.driver, "driver")?;
    let field = driver.build(1, p.horizon, cfg.seed, None)?;
    let h = p.terminal.function();
    let hs = move |v: f64| h(&[v]);
    let est = neumann_fk_estimate(&hs, field, a, b, t, x, mc.paths, path_seed(cfg.seed), mc.steps)?;
    let mut csv = Csv::new(&["t", "x", "estimate", "se", "oracle"]);
    let mut summary = vec![format!("estimate {:.6} (SE {:.2e}), {} paths", est.mean, est.se, mc.paths)];
    let oracle = matches!(driver, crate::config::DriverSection::Zero).then(|| reflected_expectation(hs, x, p.horizon - t, a, b));
    csv.row(&[t.into(), x.into(), est.mean.into(), est.se.into(), oracle.map_or(Field::Empty, Field::Num)]);
    if let Some(o) = oracle {
        let k = cfg.tolerances.standard_errors;
        let dev = (est.mean - o).abs();
        summary.push(format!("reflected-density oracle {o:.6}, |diff| {dev:.2e} <= {k} SE: {}", pf(dev <= k * est.se)));
    }
    Ok(Report { csv, summary })
}

fn fbs_generate(cfg: &ExperimentConfig, out: &Path) -> Result<Report, CliError> {
    let driver = need(&cfg.driver, "driver")?;
    let horizon = cfg.forward.as_ref().map_or(1.0, |f| f.horizon);
    let field = driver.sample(horizon, cfg.seed)?.expect("validated");
    let sidecar = field.write(out, "field", TensorFormat::Binary)?;
    let meta = field.meta();
    let mut h = vec!["t".to_string()];
    h.extend((1..=meta.space.len()).map(|i| format!("x{i}")));
    h.push("value".into());
    let mut csv = Csv::new(&h);
    let shape = field.shape().to_vec();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..total {
        let mut rem = flat;
        for a in (0..shape.len()).rev() {
            idx[a] = rem % shape[a];
            rem /= shape[a];
        }
        let mut row = vec![Field::Num(meta.time[idx[0]])];
        row.extend((0..meta.space.len()).map(|a| Field::Num(meta.space[a][idx[a + 1]])));
        row.push(Field::Num(field.at(&idx)));
        csv.row(&row);
    }
    Ok(Report {
        csv,
        summary: vec![
            format!("sheet H0 = {}, H = {}, shape {shape:?}", meta.hurst.h0, meta.hurst.h),
            format!("tensor sidecar {}", sidecar.file_name().map_or_else(String::new, |s| s.to_string_lossy().into())),
        ],
    })
}

fn assumptions(cfg: &ExperimentConfig) -> Result<Report, CliError> {
    let a = &cfg.assumptions;
    let hurst = cfg.driver.as_ref().and_then(|d| d.hurst());
    let params = match (a.regularity, hurst) {
        (Some(r), _) => r,
        (None, Some((h, d))) => h.regularity(d, a.theta, a.p),
        (None, None) => return Err(CliError::Config("missing required key `driver`".into())),
    };
    let r = assumption_check(&params, hurst);
    let mut csv = Csv::new(&["check", "result"]);
    csv.row(&["bounded".into(), r.bounded.into()]);
    csv.row(&["bounded_p2".into(), r.bounded_p2.into()]);
    csv.row(&["unbounded".into(), r.unbounded.into()]);
    csv.row(&["epsilon_witness".into(), r.epsilon_witness.map_or(Field::Empty, Field::Num)]);
    if let Some(h) = r.hurst_region {
        csv.row(&["hurst_region".into(), h.into()]);
    }
    let mut summary = vec![format!(
        "exponents tau {:.4}, lambda {:.4}, beta {:.4}, p {}",
        params.tau, params.lambda, params.beta, params.p
    )];
    summary.extend(r.summary_lines());
    Ok(Report { csv, summary })
}

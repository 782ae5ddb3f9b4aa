//! Backward equations
//! `Y_t = ξ + ∫_t^T f(r, X_r, Y_r, Z_r) dr + Σ_i ∫_t^T g_i(Y_r) η_i(dr, X_r) - ∫_t^T Z_r dW_r`
//! solved by least-squares Monte Carlo on a forward ensemble.
//!
//! Backward step on `[t_i, t_{i+1}]`:
//!
//! * `Z_i = E_i[Y_{i+1} ΔW_i^⊤] / Δt_i`,
//! * `Y_i = E_i[Y_{i+1} + f(t_i, X_i, Y_i, Z_i) Δt_i + g(Y_{i+1}) δη_i(X_i)]`,
//!   with `δη_i(x) = η(t_{i+1}, x) - η(t_i, x)`. The implicit `Y_i` inside
//!   `f` is resolved by Picard iteration; if that stalls the step is split
//!   in two halves once.
//!
//! `E_i` is a ridge regression on polynomial features of `X_i`; the
//! intercept is not penalized, so fitted values keep the sample mean of the
//! targets.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::driver::DriverField;
use crate::forward::{exit_index, Domain, PathEnsemble, SdeSpec, VecFn};
use crate::io::{Csv, Field};
use crate::paths::{p_variation_power_tails, TimeGrid};
use crate::stats::{self, MeanSe};
use crate::{par, Error, Result};

/// `f(t, x, y, z, out)` with `z` row-major `N × d`.
pub type GeneratorFn = Arc<dyn Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `g(y, out)` with `out` row-major `N × M`.
pub type CouplingFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// Running terminal value `Ξ_t`, a functional of the path up to `t`.
/// `Ξ_T = ξ`.
pub trait Terminal: Send + Sync {
    fn dim(&self) -> usize;
    /// `Ξ` at grid index `upto`; `path` holds all grid points (`len × d`).
    fn running(&self, grid: &TimeGrid, path: &[f64], d: usize, upto: usize, out: &mut [f64]);
}

/// `Ξ_t = h(π(X_t))`, with `π` the projection onto an optional domain.
#[derive(Clone)]
pub struct StateTerminal {
    n: usize,
    h: VecFn,
    project: Option<Domain>,
}

impl StateTerminal {
    pub fn new(n: usize, h: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        StateTerminal { n, h: Arc::new(h), project: None }
    }

    /// Scalar `Ξ_t = h(X_t)`.
    pub fn scalar(h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self::new(1, move |_, x, o| o[0] = h(x))
    }

    /// Evaluates `h` at the nearest point of `domain`, so that exits are
    /// read off on the boundary.
    pub fn projected(mut self, domain: Domain) -> Self {
        self.project = Some(domain);
        self
    }
}

impl Terminal for StateTerminal {
    fn dim(&self) -> usize {
        self.n
    }
    fn running(&self, grid: &TimeGrid, path: &[f64], d: usize, upto: usize, out: &mut [f64]) {
        let x = &path[upto * d..(upto + 1) * d];
        match self.project {
            Some(dom) => {
                let mut p = vec![0.0; d];
                dom.project(x, &mut p);
                (self.h)(grid.t(upto), &p, out)
            }
            None => (self.h)(grid.t(upto), x, out),
        }
    }
}

/// `Ξ_t = φ(sup_{s <= t} X^c_s)`.
#[derive(Clone)]
pub struct RunningMaxTerminal {
    pub coordinate: usize,
    phi: Arc<dyn Fn(f64) -> f64 + Send + Sync>,
}

impl RunningMaxTerminal {
    pub fn new(coordinate: usize, phi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> Self {
        RunningMaxTerminal { coordinate, phi: Arc::new(phi) }
    }
}

impl Terminal for RunningMaxTerminal {
    fn dim(&self) -> usize {
        1
    }
    fn running(&self, _: &TimeGrid, path: &[f64], d: usize, upto: usize, out: &mut [f64]) {
        let m = (0..=upto)
            .map(|i| path[i * d + self.coordinate])
            .fold(f64::NEG_INFINITY, f64::max);
        out[0] = (self.phi)(m);
    }
}

/// Declared structural constants of a spec.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SpecConstants {
    /// bound on `|g(0)|`, `|∇g|`, `|∇²g|`
    pub c1: Option<f64>,
    /// Lipschitz constant of `f` in `(y, z)`
    pub c_lip: Option<f64>,
}

/// Full description of a backward equation with its forward process.
#[derive(Clone)]
pub struct BsdeSpec {
    /// number of equations `N`
    pub n: usize,
    pub forward: SdeSpec,
    pub field: Arc<dyn DriverField>,
    pub generator: GeneratorFn,
    pub coupling: CouplingFn,
    pub terminal: Arc<dyn Terminal>,
    pub constants: SpecConstants,
}

impl BsdeSpec {
    pub fn new(
        forward: SdeSpec,
        field: Arc<dyn DriverField>,
        generator: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        coupling: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        terminal: Arc<dyn Terminal>,
    ) -> Result<Self> {
        let s = BsdeSpec {
            n: terminal.dim(),
            forward,
            field,
            generator: Arc::new(generator),
            coupling: Arc::new(coupling),
            terminal,
            constants: SpecConstants::default(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn with_constants(mut self, c: SpecConstants) -> Self {
        self.constants = c;
        self
    }

    pub fn d(&self) -> usize {
        self.forward.d
    }

    pub fn m(&self) -> usize {
        self.field.channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.field.space_dim() != self.forward.d {
            return Err(Error::DimensionMismatch(format!(
                "field has {} space dimensions, forward process {}",
                self.field.space_dim(),
                self.forward.d
            )));
        }
        if self.n == 0 {
            return Err(Error::DimensionMismatch("terminal value has dimension 0".into()));
        }
        Ok(())
    }
}

/// Regression features: all monomials of total degree `<= degree` in the
/// standardized state, plus indicators `1{|x| <= r}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegressionBasis {
    #[serde(default = "default_degree")]
    pub degree: usize,
    #[serde(default)]
    pub ball_radii: Vec<f64>,
    #[serde(default = "default_ridge")]
    pub ridge: f64,
}

fn default_degree() -> usize {
    3
}

fn default_ridge() -> f64 {
    1e-8
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis { degree: 3, ball_radii: Vec::new(), ridge: 1e-8 }
    }
}

fn exponents(d: usize, degree: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            out.push(cur.clone());
            return;
        }
        for e in 0..=left {
            cur.push(e);
            rec(d, left - e, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, degree, &mut Vec::new(), &mut out);
    out.retain(|e| e.iter().sum::<usize>() > 0);
    out.sort_by_key(|e| (e.iter().sum::<usize>(), std::cmp::Reverse(e.clone())));
    out
}

/// Least-squares projection onto the basis at one time step.
pub struct Regressor {
    k: usize,
    phi: Vec<f64>,
    gram: nalgebra::DMatrix<f64>,
    step: usize,
}

impl Regressor {
    /// Features for the states `xs` (`rows × d`).
    pub fn new(basis: &RegressionBasis, xs: &[f64], d: usize, step: usize) -> Result<Self> {
        let rows = xs.len() / d;
        if rows == 0 {
            return Err(Error::SingularRegression { step });
        }
        let mut mean = vec![0.0; d];
        let mut sd = vec![0.0; d];
        for r in 0..rows {
            for c in 0..d {
                mean[c] += xs[r * d + c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for r in 0..rows {
            for c in 0..d {
                sd[c] += (xs[r * d + c] - mean[c]).powi(2);
            }
        }
        let live: Vec<bool> = sd
            .iter_mut()
            .zip(&mean)
            .map(|(s, m)| {
                *s = (*s / rows as f64).sqrt();
                *s > 1e-12 * (1.0 + m.abs())
            })
            .collect();
        let exps: Vec<Vec<usize>> = exponents(d, basis.degree)
            .into_iter()
            .filter(|e| e.iter().zip(&live).all(|(p, l)| *p == 0 || *l))
            .collect();
        let k = 1 + exps.len() + basis.ball_radii.len();
        let mut phi = vec![0.0; rows * k];
        par::for_each_chunk_mut(&mut phi, k, |r, row| {
            let x = &xs[r * d..(r + 1) * d];
            row[0] = 1.0;
            for (j, e) in exps.iter().enumerate() {
                let mut v = 1.0;
                for c in 0..d {
                    if e[c] > 0 {
                        v *= ((x[c] - mean[c]) / sd[c]).powi(e[c] as i32);
                    }
                }
                row[1 + j] = v;
            }
            let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            for (j, rad) in basis.ball_radii.iter().enumerate() {
                row[1 + exps.len() + j] = f64::from(u8::from(norm <= *rad));
            }
        });
        let g = par::sum_vec(rows, k * k, |r, acc| {
            let row = &phi[r * k..(r + 1) * k];
            for a in 0..k {
                for b in 0..k {
                    acc[a * k + b] += row[a] * row[b];
                }
            }
        });
        let mut gram = nalgebra::DMatrix::from_row_slice(k, k, &g);
        for a in 1..k {
            gram[(a, a)] += basis.ridge * rows as f64;
        }
        Ok(Regressor { k, phi, gram, step })
    }

    pub fn rows(&self) -> usize {
        self.phi.len() / self.k
    }

    pub fn features(&self) -> usize {
        self.k
    }

    /// Fitted values for targets `rows × w`.
    pub fn fit(&self, targets: &[f64], w: usize) -> Result<Vec<f64>> {
        let k = self.k;
        let rows = self.rows();
        let rhs = par::sum_vec(rows, k * w, |r, acc| {
            let row = &self.phi[r * k..(r + 1) * k];
            let t = &targets[r * w..(r + 1) * w];
            for a in 0..k {
                for c in 0..w {
                    acc[a * w + c] += row[a] * t[c];
                }
            }
        });
        let b = nalgebra::DMatrix::from_row_slice(k, w, &rhs);
        let coef = crate::linalg::solve_spd(&self.gram, &b)
            .ok_or(Error::SingularRegression { step: self.step })?;
        let mut out = vec![0.0; rows * w];
        par::for_each_chunk_mut(&mut out, w, |r, o| {
            let row = &self.phi[r * k..(r + 1) * k];
            for c in 0..w {
                o[c] = (0..k).map(|a| row[a] * coef[(a, c)]).sum();
            }
        });
        Ok(out)
    }
}

/// Picard iteration controls.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PicardOptions {
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_true")]
    pub allow_halving: bool,
}

fn default_max_iter() -> usize {
    50
}

fn default_tol() -> f64 {
    1e-10
}

fn default_true() -> bool {
    true
}

impl Default for PicardOptions {
    fn default() -> Self {
        PicardOptions { max_iter: 50, tol: 1e-10, allow_halving: true }
    }
}

/// A step whose Picard loop stalled and was split in two.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleEvent {
    pub step: usize,
    pub action: String,
}

/// Solution arrays and solver diagnostics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BsdeSolution {
    pub n: usize,
    pub d: usize,
    pub grid: TimeGrid,
    pub time_offset: f64,
    pub n_paths: usize,
    y: Vec<f64>,
    z: Vec<f64>,
    /// regression targets of the first step (`paths × N`)
    y0_targets: Vec<f64>,
    /// `Y_0` averaged over paths, per component
    pub y0: Vec<f64>,
    /// standard error of `y0` from the first-step targets
    pub y0_se: Vec<f64>,
    /// largest Picard residual at iteration `k` over all steps
    pub picard_residuals: Vec<f64>,
    /// largest ratio of successive Picard residuals (iterations >= 2)
    pub contraction_factor: f64,
    pub schedule: Vec<ScheduleEvent>,
    /// per-path exit index of a localized solve
    pub exit_index: Option<Vec<usize>>,
}

impl BsdeSolution {
    /// Builds a solution from raw arrays (`y`: paths × points × N,
    /// `z`: paths × cells × N·d).
    pub fn from_arrays(grid: TimeGrid, n: usize, d: usize, y: Vec<f64>, z: Vec<f64>) -> Result<Self> {
        let len = grid.len();
        if y.len() % (len * n) != 0 {
            return Err(Error::DimensionMismatch("Y array does not match grid".into()));
        }
        let n_paths = y.len() / (len * n);
        if z.len() != n_paths * grid.cells() * n * d {
            return Err(Error::DimensionMismatch("Z array does not match grid".into()));
        }
        let y0_targets: Vec<f64> = (0..n_paths).flat_map(|p| y[p * len * n..p * len * n + n].to_vec()).collect();
        let (y0, y0_se) = component_stats(&y0_targets, n);
        Ok(BsdeSolution {
            n,
            d,
            grid,
            time_offset: 0.0,
            n_paths,
            y,
            z,
            y0_targets,
            y0,
            y0_se,
            picard_residuals: Vec::new(),
            contraction_factor: 0.0,
            schedule: Vec::new(),
            exit_index: None,
        })
    }

    pub fn y(&self, p: usize, i: usize) -> &[f64] {
        let o = (p * self.grid.len() + i) * self.n;
        &self.y[o..o + self.n]
    }

    pub fn z(&self, p: usize, i: usize) -> &[f64] {
        let w = self.n * self.d;
        let o = (p * self.grid.cells() + i) * w;
        &self.z[o..o + w]
    }

    /// `Y` along path `p` (`points × N`).
    pub fn y_path(&self, p: usize) -> &[f64] {
        let w = self.grid.len() * self.n;
        &self.y[p * w..(p + 1) * w]
    }

    pub fn y0_targets(&self) -> &[f64] {
        &self.y0_targets
    }

    /// Rows `path, t, Y1..YN, Z11..ZNd` for the selected paths (all when
    /// `None`). `Z` is empty on the last grid point.
    pub fn to_csv(&self, selected: Option<&[usize]>) -> Csv {
        let mut h = vec!["path".to_string(), "t".to_string()];
        h.extend((1..=self.n).map(|i| format!("Y{i}")));
        for i in 1..=self.n {
            for j in 1..=self.d {
                h.push(format!("Z{i}{j}"));
            }
        }
        let mut csv = Csv::new(&h);
        let all: Vec<usize> = (0..self.n_paths).collect();
        for &p in selected.unwrap_or(&all) {
            for i in 0..self.grid.len() {
                let mut row = vec![Field::from(p), Field::Num(self.time_offset + self.grid.t(i))];
                row.extend(self.y(p, i).iter().map(|v| Field::Num(*v)));
                if i < self.grid.cells() {
                    row.extend(self.z(p, i).iter().map(|v| Field::Num(*v)));
                } else {
                    row.extend(std::iter::repeat_n(Field::Empty, self.n * self.d));
                }
                csv.row(&row);
            }
        }
        csv
    }

    /// Writes `<stem>.csv` and the run manifest `<stem>.json`.
    pub fn export(&self, dir: &Path, stem: &str, selected: Option<&[usize]>, extra: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.to_csv(selected).write(&dir.join(format!("{stem}.csv")))?;
        let manifest = serde_json::json!({
            "n": self.n,
            "d": self.d,
            "paths": self.n_paths,
            "grid": self.grid.points(),
            "time_offset": self.time_offset,
            "y0": self.y0,
            "y0_se": self.y0_se,
            "picard_residuals": self.picard_residuals,
            "contraction_factor": self.contraction_factor,
            "schedule": self.schedule,
            "run": extra,
        });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn component_stats(rows: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = Vec::with_capacity(n);
    let mut se = Vec::with_capacity(n);
    for c in 0..n {
        let v: Vec<f64> = rows.iter().skip(c).step_by(n).copied().collect();
        let m = stats::mean_se(&v);
        mean.push(m.mean);
        se.push(m.se);
    }
    (mean, se)
}

struct StepContext<'a> {
    spec: &'a BsdeSpec,
    ens: &'a PathEnsemble,
    rows: &'a [usize],
    reg: &'a Regressor,
    z: &'a [f64],
    opts: PicardOptions,
    step: usize,
}

enum PicardOutcome {
    Converged { y: Vec<f64>, targets: Vec<f64>, residuals: Vec<f64> },
    Stalled,
}

impl StepContext<'_> {
    /// Rows of `g(y) δη` over `[s, t]` at the step's states.
    fn young(&self, ys: &[f64], s: f64, t: f64) -> Vec<f64> {
        let n = self.spec.n;
        let m = self.spec.m();
        let mut out = vec![0.0; self.rows.len() * n];
        par::for_each_chunk_mut(&mut out, n, |r, o| {
            let x = self.ens.x(self.rows[r], self.step);
            let mut de = vec![0.0; m];
            self.spec.field.increment(s, t, x, &mut de);
            let mut g = vec![0.0; n * m];
            (self.spec.coupling)(&ys[r * n..(r + 1) * n], &mut g);
            for (i, oi) in o.iter_mut().enumerate() {
                *oi = (0..m).map(|c| g[i * m + c] * de[c]).sum();
            }
        });
        out
    }

    fn picard(&self, base: &[f64], t: f64, dt: f64, init: &[f64]) -> Result<PicardOutcome> {
        let n = self.spec.n;
        let d = self.spec.d();
        let mut guess = init.to_vec();
        let mut residuals = Vec::new();
        let mut stalls = 0;
        let mut targets = vec![0.0; base.len()];
        for _ in 0..self.opts.max_iter {
            par::for_each_chunk_mut(&mut targets, n, |r, o| {
                let x = self.ens.x(self.rows[r], self.step);
                let mut f = vec![0.0; n];
                (self.spec.generator)(t, x, &guess[r * n..(r + 1) * n], &self.z[r * n * d..(r + 1) * n * d], &mut f);
                for i in 0..n {
                    o[i] = base[r * n + i] + f[i] * dt;
                }
            });
            if let Some(k) = targets.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { path: self.rows[k / n], step: self.step });
            }
            let y = self.reg.fit(&targets, n)?;
            let res = y.iter().zip(&guess).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if let Some(&prev) = residuals.last() {
                if res >= prev && res > self.opts.tol {
                    stalls += 1;
                } else {
                    stalls = 0;
                }
            }
            residuals.push(res);
            guess = y;
            if res <= self.opts.tol {
                return Ok(PicardOutcome::Converged { y: guess, targets, residuals });
            }
            if stalls >= 3 {
                return Ok(PicardOutcome::Stalled);
            }
        }
        Ok(PicardOutcome::Converged { y: guess, targets, residuals })
    }
}

struct Solver<'a> {
    spec: &'a BsdeSpec,
    ens: &'a PathEnsemble,
    basis: &'a RegressionBasis,
    opts: PicardOptions,
}

impl Solver<'_> {
    fn run(&self, exits: Option<Vec<usize>>) -> Result<BsdeSolution> {
        let spec = self.spec;
        let ens = self.ens;
        spec.validate()?;
        if ens.d != spec.d() {
            return Err(Error::DimensionMismatch(format!(
                "ensemble dimension {} vs spec dimension {}",
                ens.d,
                spec.d()
            )));
        }
        let (n, d) = (spec.n, spec.d());
        let len = ens.grid.len();
        let last = len - 1;
        let np = ens.n_paths;
        let stop: Vec<usize> = exits.clone().unwrap_or_else(|| vec![last; np]);
        let mut y = vec![0.0; np * len * n];
        let mut z = vec![0.0; np * (len - 1) * n * d];
        // terminal (or exit) values, frozen afterwards
        par::for_each_chunk_mut(&mut y, len * n, |p, yp| {
            let e = stop[p];
            let mut xi = vec![0.0; n];
            spec.terminal.running(&ens.grid, ens.path(p), d, e, &mut xi);
            for i in e..len {
                yp[i * n..(i + 1) * n].copy_from_slice(&xi);
            }
        });
        let mut trace: Vec<Vec<f64>> = Vec::new();
        let mut schedule = Vec::new();
        let mut y0_targets: Vec<f64> = (0..np).flat_map(|p| y[p * len * n..p * len * n + n].to_vec()).collect();
        for i in (0..last).rev() {
            let rows: Vec<usize> = (0..np).filter(|&p| i < stop[p]).collect();
            if rows.is_empty() {
                continue;
            }
            let xs: Vec<f64> = rows.iter().flat_map(|&p| ens.x(p, i).to_vec()).collect();
            let reg = Regressor::new(self.basis, &xs, d, i)?;
            let dt = ens.grid.dt(i);
            let ynext: Vec<f64> = rows
                .iter()
                .flat_map(|&p| y[(p * len + i + 1) * n..(p * len + i + 2) * n].to_vec())
                .collect();
            // centring by E[Y_{i+1} | X_i] leaves the estimator unbiased and makes Z of a constant exact
            let ymean = reg.fit(&ynext, n)?;
            let mut zt = vec![0.0; rows.len() * n * d];
            par::for_each_chunk_mut(&mut zt, n * d, |r, o| {
                let w = ens.dw(rows[r], i);
                for a in 0..n {
                    for b in 0..d {
                        o[a * d + b] = (ynext[r * n + a] - ymean[r * n + a]) * w[b] / dt;
                    }
                }
            });
            let zfit = reg.fit(&zt, n * d)?;
            let ctx = StepContext { spec, ens, rows: &rows, reg: &reg, z: &zfit, opts: self.opts, step: i };
            let (t0, t1) = (ens.time(i), ens.time(i + 1));
            let young = ctx.young(&ynext, t0, t1);
            let base: Vec<f64> = ynext.iter().zip(&young).map(|(a, b)| a + b).collect();
            let outcome = match ctx.picard(&base, t0, dt, &ynext)? {
                PicardOutcome::Converged { y, targets, residuals } => (y, targets, residuals),
                PicardOutcome::Stalled if self.opts.allow_halving => {
                    schedule.push(ScheduleEvent { step: i, action: "halved".into() });
                    let tm = t0 + 0.5 * dt;
                    let ya = ctx.young(&ynext, tm, t1);
                    let base_a: Vec<f64> = ynext.iter().zip(&ya).map(|(a, b)| a + b).collect();
                    let ymid = match ctx.picard(&base_a, tm, 0.5 * dt, &ynext)? {
                        PicardOutcome::Converged { y, .. } => y,
                        PicardOutcome::Stalled => return Err(Error::NoContraction { step: i }),
                    };
                    let yb = ctx.young(&ymid, t0, tm);
                    let base_b: Vec<f64> = ymid.iter().zip(&yb).map(|(a, b)| a + b).collect();
                    match ctx.picard(&base_b, t0, 0.5 * dt, &ymid)? {
                        PicardOutcome::Converged { y, targets, residuals } => (y, targets, residuals),
                        PicardOutcome::Stalled => return Err(Error::NoContraction { step: i }),
                    }
                }
                PicardOutcome::Stalled => return Err(Error::NoContraction { step: i }),
            };
            let (yi, targets, residuals) = outcome;
            for (r, &p) in rows.iter().enumerate() {
                y[(p * len + i) * n..(p * len + i + 1) * n].copy_from_slice(&yi[r * n..(r + 1) * n]);
                let zo = (p * (len - 1) + i) * n * d;
                z[zo..zo + n * d].copy_from_slice(&zfit[r * n * d..(r + 1) * n * d]);
                if i == 0 {
                    y0_targets[p * n..(p + 1) * n].copy_from_slice(&targets[r * n..(r + 1) * n]);
                }
            }
            trace.push(residuals);
        }
        let depth = trace.iter().map(|t| t.len()).max().unwrap_or(0);
        let picard_residuals: Vec<f64> = (0..depth)
            .map(|k| trace.iter().filter_map(|t| t.get(k)).fold(0.0, |a: f64, b| a.max(*b)))
            .collect();
        let mut contraction_factor = 0.0f64;
        for t in &trace {
            for w in t.windows(2).skip(1) {
                if w[0] > 0.0 {
                    contraction_factor = contraction_factor.max(w[1] / w[0]);
                }
            }
        }
        let (y0, _) = component_stats(&y0_targets, n);
        let y0_se = self.pathwise_se(&y, &z, &stop);
        Ok(BsdeSolution {
            n,
            d,
            grid: ens.grid.clone(),
            time_offset: ens.time_offset,
            n_paths: np,
            y,
            z,
            y0_targets,
            y0,
            y0_se,
            picard_residuals,
            contraction_factor,
            schedule,
            exit_index: exits,
        })
    }
}

impl Solver<'_> {
    /// Standard error of `ξ + Σ (f Δt + g(Y) δη)` along each path. The
    /// step-0 targets are already conditional means and understate the
    /// Monte Carlo error; this sum carries the full path noise.
    fn pathwise_se(&self, y: &[f64], z: &[f64], stop: &[usize]) -> Vec<f64> {
        let spec = self.spec;
        let ens = self.ens;
        let (n, d, m) = (spec.n, spec.d(), spec.m());
        let len = ens.grid.len();
        let mut sums = vec![0.0; ens.n_paths * n];
        par::for_each_chunk_mut(&mut sums, n, |p, o| {
            let yp = &y[p * len * n..(p + 1) * len * n];
            o.copy_from_slice(&yp[stop[p] * n..(stop[p] + 1) * n]);
            let mut f = vec![0.0; n];
            let mut g = vec![0.0; n * m];
            let mut de = vec![0.0; m];
            for i in 0..stop[p] {
                let (t0, t1) = (ens.time(i), ens.time(i + 1));
                let x = ens.x(p, i);
                let zo = (p * (len - 1) + i) * n * d;
                (spec.generator)(t0, x, &yp[i * n..(i + 1) * n], &z[zo..zo + n * d], &mut f);
                spec.field.increment(t0, t1, x, &mut de);
                (spec.coupling)(&yp[(i + 1) * n..(i + 2) * n], &mut g);
                for a in 0..n {
                    o[a] += f[a] * (t1 - t0) + (0..m).map(|c| g[a * m + c] * de[c]).sum::<f64>();
                }
            }
        });
        component_stats(&sums, n).1
    }
}

/// Solves the backward equation on the whole horizon.
pub fn backward_solve(
    spec: &BsdeSpec,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    picard: PicardOptions,
) -> Result<BsdeSolution> {
    Solver { spec, ens, basis, opts: picard }.run(None)
}

/// Solves up to the exit time `T_n` from `domain`: each path takes the
/// terminal value `Ξ_{T_n}` at its first grid point outside the domain
/// (or at `T`), and `Y` is frozen, `Z = 0`, afterwards.
pub fn localized_solve(
    spec: &BsdeSpec,
    ens: &PathEnsemble,
    domain: Domain,
    basis: &RegressionBasis,
    picard: PicardOptions,
) -> Result<BsdeSolution> {
    let last = ens.grid.len() - 1;
    let exits: Vec<usize> = (0..ens.n_paths)
        .map(|p| exit_index(ens.path(p), ens.d, domain).unwrap_or(last).min(last))
        .collect();
    Solver { spec, ens, basis, opts: picard }.run(Some(exits))
}

/// Linear equation `f = F_t + Z_t G_t`, `g_i(y) = α^i_t y` in closed form.
#[derive(Clone)]
pub struct LinearSpec {
    pub n: usize,
    pub field: Arc<dyn DriverField>,
    /// `α(t, x, out)`, `out` is `M × N × N`
    pub alpha: VecFn,
    /// `F(t, x, out)`, `out` has length `N`
    pub drift: VecFn,
    /// `G(t, x, out)`, `out` has length `d`
    pub girsanov: VecFn,
    pub terminal: Arc<dyn Terminal>,
}

/// `Y_0` from the closed form with its standard error, and the per-path
/// weights `(Γ_T^0)^⊤ ξ M_T + ∫_0^T (Γ_s^0)^⊤ F_s ds M_T`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LinearClosedForm {
    pub y0: Vec<f64>,
    pub se: Vec<f64>,
    pub weights: Vec<f64>,
}

/// Per-path quantities of the closed form started at grid index `from`.
fn linear_weight(spec: &LinearSpec, ens: &PathEnsemble, p: usize, from: usize) -> Vec<f64> {
    let n = spec.n;
    let m = spec.field.channels();
    let d = ens.d;
    let q = n * n;
    let mut gamma = vec![0.0; q];
    for i in 0..n {
        gamma[i * n + i] = 1.0;
    }
    let mut acc = vec![0.0; n];
    let mut log_m = 0.0;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; d];
    let mut a = vec![0.0; m * q];
    let mut de = vec![0.0; m];
    let mut e = vec![0.0; q];
    let mut next = vec![0.0; q];
    for j in from..ens.grid.cells() {
        let (t, t1) = (ens.time(j), ens.time(j + 1));
        let h = ens.grid.dt(j);
        let x = ens.x(p, j);
        (spec.drift)(t, x, &mut f);
        for r in 0..n {
            // (Γ^⊤ F)_r = Σ_k Γ_{kr} F_k
            acc[r] += (0..n).map(|k| gamma[k * n + r] * f[k]).sum::<f64>() * h;
        }
        (spec.girsanov)(t, x, &mut g);
        let w = ens.dw(p, j);
        log_m += (0..d).map(|c| g[c] * w[c]).sum::<f64>() - 0.5 * g.iter().map(|v| v * v).sum::<f64>() * h;
        (spec.alpha)(t, x, &mut a);
        spec.field.increment(t, t1, x, &mut de);
        crate::flow::euler_factor(n, &a, &de, 1.0, &mut e);
        crate::flow::matmul(n, &e, &gamma, &mut next);
        std::mem::swap(&mut gamma, &mut next);
    }
    let mut xi = vec![0.0; n];
    spec.terminal.running(&ens.grid, ens.path(p), d, ens.grid.len() - 1, &mut xi);
    let mt = log_m.exp();
    (0..n)
        .map(|r| ((0..n).map(|k| gamma[k * n + r] * xi[k]).sum::<f64>() + acc[r]) * mt)
        .collect()
}

/// Monte Carlo evaluation of the closed-form solution at time 0.
pub fn linear_closed_form(spec: &LinearSpec, ens: &PathEnsemble) -> Result<LinearClosedForm> {
    if spec.terminal.dim() != spec.n {
        return Err(Error::DimensionMismatch("terminal dimension differs from N".into()));
    }
    let rows = par::map_range(ens.n_paths, |p| linear_weight(spec, ens, p, 0));
    let weights: Vec<f64> = rows.concat();
    if let Some(k) = weights.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { path: k / spec.n, step: 0 });
    }
    let (y0, se) = component_stats(&weights, spec.n);
    Ok(LinearClosedForm { y0, se, weights })
}

/// Closed-form `Y` at grid index `index` on every path: the weights are
/// built with `Γ_s^t = Γ_s^0 (Γ_t^0)^{-1}` and `M_T / M_t`, then projected
/// on the regression basis at `X_t`.
pub fn linear_closed_form_at(
    spec: &LinearSpec,
    ens: &PathEnsemble,
    index: usize,
    basis: &RegressionBasis,
) -> Result<Vec<f64>> {
    let n = spec.n;
    // restarting the flow at `index` gives Γ_s^t = Γ_s^0 (Γ_t^0)^{-1} and M_T / M_t
    let rows = par::map_range(ens.n_paths, |p| linear_weight(spec, ens, p, index));
    let targets: Vec<f64> = rows.concat();
    let xs: Vec<f64> = (0..ens.n_paths).flat_map(|p| ens.x(p, index).to_vec()).collect();
    let reg = Regressor::new(basis, &xs, ens.d, index)?;
    reg.fit(&targets, n)
}

/// Outcome of a comparison run between specs `A` and `B`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ComparisonReport {
    /// share of `(path, time)` cells with `Y_A >= Y_B - tolerance`
    pub fraction_ordered: f64,
    pub tolerance: f64,
    pub y0_a: f64,
    pub y0_b: f64,
    pub diff: f64,
    pub diff_se: f64,
    /// smallest `Y_A - Y_B` over all cells
    pub min_gap: f64,
}

/// Solves both specs on one ensemble and measures ordering of the first
/// component. Inputs must satisfy `ξ_A >= ξ_B` and `f_A >= f_B` on the
/// sampled arguments.
pub fn comparison_experiment(
    spec_a: &BsdeSpec,
    spec_b: &BsdeSpec,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    picard: PicardOptions,
    tolerance: f64,
) -> Result<ComparisonReport> {
    let last = ens.grid.len() - 1;
    let d = ens.d;
    let (n, na) = (spec_b.n, spec_a.n);
    if n != na {
        return Err(Error::DimensionMismatch("specs have different N".into()));
    }
    for p in 0..ens.n_paths {
        let mut a = vec![0.0; n];
        let mut b = vec![0.0; n];
        spec_a.terminal.running(&ens.grid, ens.path(p), d, last, &mut a);
        spec_b.terminal.running(&ens.grid, ens.path(p), d, last, &mut b);
        if a.iter().zip(&b).any(|(x, y)| x < &(y - 1e-12)) {
            return Err(Error::InputsNotOrdered(format!("terminal values on path {p}")));
        }
    }
    let sb = backward_solve(spec_b, ens, basis, picard)?;
    let check_f = |p: usize, i: usize| {
        let mut fa = vec![0.0; n];
        let mut fb = vec![0.0; n];
        let (y, z) = (sb.y(p, i), sb.z(p, i));
        (spec_a.generator)(ens.time(i), ens.x(p, i), y, z, &mut fa);
        (spec_b.generator)(ens.time(i), ens.x(p, i), y, z, &mut fb);
        fa.iter().zip(&fb).all(|(a, b)| *a >= b - 1e-12)
    };
    for p in 0..ens.n_paths {
        for i in 0..last {
            if !check_f(p, i) {
                return Err(Error::InputsNotOrdered(format!("generators at path {p}, step {i}")));
            }
        }
    }
    let sa = backward_solve(spec_a, ens, basis, picard)?;
    let mut ordered = 0usize;
    let mut min_gap = f64::INFINITY;
    for p in 0..ens.n_paths {
        for i in 0..=last {
            let gap = sa.y(p, i)[0] - sb.y(p, i)[0];
            min_gap = min_gap.min(gap);
            if gap >= -tolerance {
                ordered += 1;
            }
        }
    }
    let diffs: Vec<f64> = (0..ens.n_paths)
        .map(|p| sa.y0_targets()[p * n] - sb.y0_targets()[p * n])
        .collect();
    let ds = stats::mean_se(&diffs);
    Ok(ComparisonReport {
        fraction_ordered: ordered as f64 / (ens.n_paths * (last + 1)) as f64,
        tolerance,
        y0_a: sa.y0[0],
        y0_b: sb.y0[0],
        diff: sa.y0[0] - sb.y0[0],
        diff_se: ds.se,
        min_gap,
    })
}

/// One row of a localization sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepRow {
    pub n: f64,
    pub y0: f64,
    pub y0_se: f64,
    pub exit_probability: MeanSe,
    /// `|Y^{n_next}_0 - Y^n_0|` for the next radius in the sweep
    pub diff_next: Option<f64>,
}

/// Localized solves for each radius in `radii` (ball domains).
pub fn localization_sweep(
    spec: &BsdeSpec,
    ens: &PathEnsemble,
    radii: &[f64],
    basis: &RegressionBasis,
    picard: PicardOptions,
) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &r in radii {
        let s = localized_solve(spec, ens, Domain::Ball(r), basis, picard)?;
        rows.push(SweepRow {
            n: r,
            y0: s.y0[0],
            y0_se: s.y0_se[0],
            exit_probability: crate::forward::exit_probability(ens, Domain::Ball(r)),
            diff_next: None,
        });
    }
    for k in 0..rows.len().saturating_sub(1) {
        rows[k].diff_next = Some((rows[k + 1].y0 - rows[k].y0).abs());
    }
    Ok(rows)
}

/// Regression estimates of the path-regularity quantities of a solution.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Diagnostics {
    /// `sup_u ess sup (E_u ‖Y‖^k_{p-var;[u,T]})^{1/k}`
    pub m_pk: f64,
    /// `sup_u ess sup (E_u (∫_u^T |Z_r|² dr)^{k/2})^{1/k}`
    pub z_bmo: f64,
    /// `max |Y|` over all cells
    pub y_sup: f64,
}

/// Computes [`Diagnostics`]; conditional expectations are regressions on
/// the ensemble states, suprema run over grid times and paths.
pub fn diagnostics(
    sol: &BsdeSolution,
    ens: &PathEnsemble,
    basis: &RegressionBasis,
    p: f64,
    k: f64,
) -> Result<Diagnostics> {
    if !(p >= 1.0) || !(k > 0.0) {
        return Err(Error::InvalidExponent { value: p, requirement: "p >= 1 and k > 0" });
    }
    let len = sol.grid.len();
    let np = sol.n_paths;
    let tails: Vec<Vec<f64>> = par::map_range(np, |q| {
        p_variation_power_tails(sol.y_path(q), sol.n, p).iter().map(|v| v.powf(k / p)).collect()
    });
    let zq: Vec<Vec<f64>> = par::map_range(np, |q| {
        let mut acc = vec![0.0; len];
        for i in (0..len - 1).rev() {
            let z2: f64 = sol.z(q, i).iter().map(|v| v * v).sum();
            acc[i] = acc[i + 1] + z2 * sol.grid.dt(i);
        }
        acc.iter().map(|v| v.powf(k / 2.0)).collect()
    });
    let mut m_sup = 0.0f64;
    let mut z_sup = 0.0f64;
    for i in 0..len - 1 {
        let xs: Vec<f64> = (0..np).flat_map(|q| ens.x(q, i).to_vec()).collect();
        let reg = Regressor::new(basis, &xs, ens.d, i)?;
        let a: Vec<f64> = tails.iter().map(|t| t[i]).collect();
        let b: Vec<f64> = zq.iter().map(|t| t[i]).collect();
        m_sup = m_sup.max(reg.fit(&a, 1)?.into_iter().fold(0.0, f64::max));
        z_sup = z_sup.max(reg.fit(&b, 1)?.into_iter().fold(0.0, f64::max));
    }
    let y_sup = sol.y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(Diagnostics { m_pk: m_sup.powf(1.0 / k), z_bmo: z_sup.powf(1.0 / k), y_sup })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::driver::AnalyticField;
    use crate::forward::euler_maruyama;

    fn zero_field(d: usize) -> Arc<dyn DriverField> {
        Arc::new(AnalyticField::scalar(d, 1.0, |_, _| 0.0))
    }

    #[test]
    fn exponents_count() {
        assert_eq!(exponents(1, 3).len(), 3);
        assert_eq!(exponents(2, 3).len(), 9);
    }

    #[test]
    fn regression_preserves_mean() {
        let xs: Vec<f64> = (0..500).map(|i| ((i * 37) % 101) as f64 / 50.0 - 1.0).collect();
        let t: Vec<f64> = xs.iter().map(|x| (3.0 * x).sin() + 0.1 * x * x * x * x).collect();
        let reg = Regressor::new(&RegressionBasis::default(), &xs, 1, 0).unwrap();
        let fit = reg.fit(&t, 1).unwrap();
        let m1: f64 = fit.iter().sum::<f64>() / 500.0;
        let m2: f64 = t.iter().sum::<f64>() / 500.0;
        assert!((m1 - m2).abs() < 1e-10 * (1.0 + m2.abs()));
    }

    #[test]
    fn linear_generator_gives_exponential() {
        let lam = 0.5;
        let spec = BsdeSpec::new(
            SdeSpec::brownian(vec![0.0], 1.0),
            zero_field(1),
            move |_, _, y, _, o| o[0] = lam * y[0],
            |_, o| o[0] = 0.0,
            Arc::new(StateTerminal::scalar(|_| 1.0)),
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 256).unwrap();
        let ens = euler_maruyama(&spec.forward, &grid, 200, 1).unwrap();
        let sol = backward_solve(&spec, &ens, &RegressionBasis::default(), PicardOptions::default()).unwrap();
        for i in [0, 64, 128, 255] {
            let exact = (lam * (1.0 - grid.t(i))).exp();
            assert!((sol.y(7, i)[0] - exact).abs() <= 1e-3, "i={i}");
        }
        assert_eq!(sol.y(3, 256)[0], 1.0);
    }

    #[test]
    fn localized_deterministic_drift() {
        // X_t = t, Ξ_t = X_t, exit from the ball of radius 1/2
        let fwd = SdeSpec::new(vec![0.0], |_, _, o| o[0] = 1.0, |_, _, o| o[0] = 0.0);
        let spec = BsdeSpec::new(
            fwd,
            zero_field(1),
            |_, _, _, _, o| o[0] = 0.0,
            |_, o| o[0] = 0.0,
            Arc::new(StateTerminal::scalar(|x| x[0]).projected(Domain::Ball(0.5))),
        )
        .unwrap();
        let grid = TimeGrid::uniform(1.0, 100).unwrap();
        let ens = euler_maruyama(&spec.forward, &grid, 4, 0).unwrap();
        let sol = localized_solve(&spec, &ens, Domain::Ball(0.5), &RegressionBasis::default(), PicardOptions::default()).unwrap();
        for i in 0..=100 {
            assert!((sol.y(0, i)[0] - 0.5).abs() < 1e-12, "i={i} {}", sol.y(0, i)[0]);
        }
    }
}

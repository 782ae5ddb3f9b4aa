//! Finite differences for the terminal–boundary problem
//!
//! ```text
//! ∂_t u + ½ tr[σσ^⊤ ∇²u] + b^⊤∇u + f(t, x, u, σ^⊤∇u) + Σ_i g_i(u) ∂_t η_i(t, x) = 0,
//! u(T, x) = h(x) on [-n, n]^d,  u(t, x) = h(x) on the boundary,
//! ```
//!
//! for a driver that is differentiable in time, and the Monte Carlo
//! experiments built around it.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bsde::{self, BsdeSpec, CouplingFn, GeneratorFn, PicardOptions, RegressionBasis, StateTerminal};
use crate::driver::{DriverField, ShiftedField};
use crate::forward::{euler_maruyama, reflected_bm_path, Domain, SdeSpec, VecFn};
use crate::io::{self, Csv, Field};
use crate::paths::{SamplePath, TimeGrid};
use crate::sewing::nonlinear_young_integral;
use crate::stats::{self, LineFit, MeanSe};
use crate::{linalg, par, Error, Result};

/// Scalar terminal and boundary data.
pub type ScalarFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A bounded-domain problem on `[0, T] × [-n, n]^d`, `d ∈ {1, 2}`.
#[derive(Clone)]
pub struct PdeSpec {
    pub d: usize,
    /// half-width of the box
    pub n: f64,
    pub horizon: f64,
    pub terminal: ScalarFn,
    /// `b(x)`; the time argument is ignored
    pub drift: VecFn,
    /// `σ(x)`, `d × d` row-major; the time argument is ignored
    pub diffusion: VecFn,
    /// scalar generator `f(t, x, y, z)` with `z = σ^⊤∇u`
    pub generator: GeneratorFn,
    /// `g(y)`, `1 × M`
    pub coupling: CouplingFn,
    pub field: Arc<dyn DriverField>,
    /// ellipticity floor: `σσ^⊤ >= ν I`
    pub nu: f64,
    /// description used in the spec hash
    pub label: String,
}

impl PdeSpec {
    /// Heat-type problem with constant `σ = sigma·I`, `b = 0`, `f = g = 0`.
    pub fn heat(d: usize, n: f64, horizon: f64, sigma: f64, h: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        let field: Arc<dyn DriverField> = Arc::new(
            crate::driver::AnalyticField::scalar(d, horizon, |_, _| 0.0).with_time_derivative(|_, _, o| o[0] = 0.0),
        );
        PdeSpec {
            d,
            n,
            horizon,
            terminal: Arc::new(h),
            drift: Arc::new(|_, _, o| o.iter_mut().for_each(|v| *v = 0.0)),
            diffusion: Arc::new(move |_, _, o| {
                o.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..d {
                    o[i * d + i] = sigma;
                }
            }),
            generator: Arc::new(|_, _, _, _, o| o[0] = 0.0),
            coupling: Arc::new(|_, o| o.iter_mut().for_each(|v| *v = 0.0)),
            field,
            nu: 0.5 * sigma * sigma,
            label: format!("heat(sigma={sigma})"),
        }
    }

    pub fn with_field(mut self, field: Arc<dyn DriverField>) -> Self {
        self.field = field;
        self
    }

    pub fn with_generator(mut self, f: impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.generator = Arc::new(f);
        self
    }

    pub fn with_coupling(mut self, g: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.coupling = Arc::new(g);
        self
    }

    pub fn with_box(mut self, n: f64) -> Self {
        self.n = n;
        self
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    /// Fingerprint of the declared problem data.
    pub fn spec_hash(&self) -> String {
        io::fingerprint(&format!(
            "{}|{}|{}|{}|{}|{:?}|{}",
            self.label,
            self.d,
            self.n,
            self.horizon,
            self.nu,
            self.field.kind(),
            self.field.channels()
        ))
    }

    fn validate(&self) -> Result<()> {
        if !(self.d == 1 || self.d == 2) {
            return Err(Error::arg(format!("finite differences need d in {{1, 2}}, got {}", self.d)));
        }
        if self.field.space_dim() != self.d {
            return Err(Error::DimensionMismatch("driver and domain dimensions differ".into()));
        }
        if !(self.n > 0.0) || !(self.horizon > 0.0) {
            return Err(Error::arg("box half-width and horizon must be positive"));
        }
        Ok(())
    }

    /// `x ↦ σ(x)^⊤ ∇u` contracted with a gradient.
    fn z_of(&self, sigma: &[f64], grad: &[f64], z: &mut [f64]) {
        let d = self.d;
        for j in 0..d {
            z[j] = (0..d).map(|k| sigma[k * d + j] * grad[k]).sum();
        }
    }
}

/// Time and space resolution of [`fd_dirichlet_solve`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdOptions {
    pub time_steps: usize,
    /// intervals per axis over `[-n, n]`
    pub space_steps: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// keep every `store_every`-th time level (and always `t = 0`, `t = T`)
    #[serde(default = "default_store")]
    pub store_every: usize,
}

fn default_theta() -> f64 {
    0.5
}

fn default_store() -> usize {
    1
}

impl FdOptions {
    pub fn new(time_steps: usize, space_steps: usize) -> Self {
        FdOptions { time_steps, space_steps, theta: 0.5, store_every: 1 }
    }

    /// Space steps giving mesh `dx` on `[-n, n]`.
    pub fn with_dx(time_steps: usize, n: f64, dx: f64) -> Self {
        Self::new(time_steps, (2.0 * n / dx).round().max(2.0) as usize)
    }

    pub fn theta(mut self, theta: f64) -> Self {
        self.theta = theta;
        self
    }

    pub fn store_every(mut self, k: usize) -> Self {
        self.store_every = k.max(1);
        self
    }

    /// Twice the resolution in time and space.
    pub fn refined(&self) -> Self {
        FdOptions { time_steps: 2 * self.time_steps, space_steps: 2 * self.space_steps, ..*self }
    }
}

/// Grid solution with scheme metadata.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PdeSolution {
    pub d: usize,
    pub n: f64,
    /// stored time levels, increasing
    pub times: Vec<f64>,
    /// node coordinates, one axis per dimension
    pub axes: Vec<Vec<f64>>,
    /// `times × nodes`, nodes row-major (last axis fastest)
    values: Vec<f64>,
    pub dt: f64,
    pub dx: f64,
    pub theta: f64,
}

impl PdeSolution {
    pub fn nodes(&self) -> usize {
        self.axes.iter().map(|a| a.len()).product()
    }

    /// Values at stored level `k`.
    pub fn level(&self, k: usize) -> &[f64] {
        let w = self.nodes();
        &self.values[k * w..(k + 1) * w]
    }

    /// Index of the stored level at time `t`, if any.
    pub fn level_of(&self, t: f64) -> Option<usize> {
        self.times.iter().position(|s| (s - t).abs() <= 1e-12 * (1.0 + t.abs()))
    }

    /// Multilinear interpolation of level `k` at `x` (clamped to the box).
    pub fn interpolate(&self, k: usize, x: &[f64]) -> f64 {
        let u = self.level(k);
        let mut lo = [0usize; 2];
        let mut frac = [0.0; 2];
        for (a, axis) in self.axes.iter().enumerate() {
            let m = axis.len() - 1;
            let s = ((x[a] - axis[0]) / self.dx).clamp(0.0, m as f64);
            let i = (s.floor() as usize).min(m - 1);
            lo[a] = i;
            frac[a] = s - i as f64;
        }
        match self.d {
            1 => u[lo[0]] * (1.0 - frac[0]) + u[lo[0] + 1] * frac[0],
            _ => {
                let ny = self.axes[1].len();
                let at = |i: usize, j: usize| u[i * ny + j];
                let (i, j, fx, fy) = (lo[0], lo[1], frac[0], frac[1]);
                (1.0 - fx) * ((1.0 - fy) * at(i, j) + fy * at(i, j + 1))
                    + fx * ((1.0 - fy) * at(i + 1, j) + fy * at(i + 1, j + 1))
            }
        }
    }

    /// `u(0, x)`.
    pub fn value_at_zero(&self, x: &[f64]) -> f64 {
        self.interpolate(0, x)
    }

    fn node(&self, idx: usize, out: &mut [f64]) {
        match self.d {
            1 => out[0] = self.axes[0][idx],
            _ => {
                let ny = self.axes[1].len();
                out[0] = self.axes[0][idx / ny];
                out[1] = self.axes[1][idx % ny];
            }
        }
    }

    /// Rows `t, x1[, x2], u` for the stored levels.
    pub fn to_csv(&self) -> Csv {
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.d).map(|i| format!("x{i}")));
        h.push("u".into());
        let mut csv = Csv::new(&h);
        let mut x = vec![0.0; self.d];
        for (k, t) in self.times.iter().enumerate() {
            for (idx, v) in self.level(k).iter().enumerate() {
                self.node(idx, &mut x);
                let mut row = vec![Field::Num(*t)];
                row.extend(x.iter().map(|c| Field::Num(*c)));
                row.push(Field::Num(*v));
                csv.row(&row);
            }
        }
        csv
    }

    /// Writes `<stem>.csv` and `<stem>.json` (scheme metadata).
    pub fn export(&self, dir: &Path, stem: &str, spec_hash: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.to_csv().write(&dir.join(format!("{stem}.csv")))?;
        let m = serde_json::json!({
            "d": self.d,
            "n": self.n,
            "dt": self.dt,
            "dx": self.dx,
            "theta": self.theta,
            "levels": self.times.len(),
            "nodes_per_axis": self.axes.iter().map(|a| a.len()).collect::<Vec<_>>(),
            "spec_hash": spec_hash,
        });
        std::fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&m)?)?;
        Ok(())
    }
}

/// Node geometry and frozen coefficients.
struct Mesh {
    d: usize,
    k: usize,
    dx: f64,
    axis: Vec<f64>,
    coords: Vec<f64>,
    boundary: Vec<bool>,
    sigma: Vec<f64>,
    /// `a = ½σσ^⊤`, `d × d` per node
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Mesh {
    fn new(spec: &PdeSpec, k: usize) -> Result<Self> {
        let d = spec.d;
        let dx = 2.0 * spec.n / k as f64;
        let axis: Vec<f64> = (0..=k).map(|i| if i == k { spec.n } else { -spec.n + i as f64 * dx }).collect();
        let nodes = (k + 1).pow(d as u32);
        let mut coords = vec![0.0; nodes * d];
        let mut boundary = vec![false; nodes];
        for idx in 0..nodes {
            let ij = if d == 1 { [idx, 0] } else { [idx / (k + 1), idx % (k + 1)] };
            for c in 0..d {
                coords[idx * d + c] = axis[ij[c]];
                if ij[c] == 0 || ij[c] == k {
                    boundary[idx] = true;
                }
            }
        }
        let mut sigma = vec![0.0; nodes * d * d];
        let mut a = vec![0.0; nodes * d * d];
        let mut b = vec![0.0; nodes * d];
        for idx in 0..nodes {
            let x = &coords[idx * d..(idx + 1) * d];
            let s = &mut sigma[idx * d * d..(idx + 1) * d * d];
            (spec.diffusion)(0.0, x, s);
            (spec.drift)(0.0, x, &mut b[idx * d..(idx + 1) * d]);
            let ai = &mut a[idx * d * d..(idx + 1) * d * d];
            for r in 0..d {
                for c in 0..d {
                    ai[r * d + c] = 0.5 * (0..d).map(|q| s[r * d + q] * s[c * d + q]).sum::<f64>();
                }
            }
            // smallest eigenvalue of σσ^⊤ = 2a
            let ev = if d == 1 {
                2.0 * ai[0]
            } else {
                let (p, q, r) = (2.0 * ai[0], 2.0 * ai[1], 2.0 * ai[3]);
                0.5 * (p + r) - (0.25 * (p - r) * (p - r) + q * q).sqrt()
            };
            if !(ev >= spec.nu) {
                return Err(Error::Ellipticity { x: x.to_vec(), eigenvalue: ev, nu: spec.nu });
            }
        }
        Ok(Mesh { d, k, dx, axis, coords, boundary, sigma, a, b })
    }

    fn nodes(&self) -> usize {
        self.boundary.len()
    }

    fn a_max(&self) -> f64 {
        (0..self.nodes())
            .map(|i| (0..self.d).map(|c| self.a[i * self.d * self.d + c * self.d + c]).fold(0.0, f64::max))
            .fold(0.0, f64::max)
    }

    /// `(Lu)` at an interior node.
    fn apply_l(&self, u: &[f64], idx: usize) -> f64 {
        let h = self.dx;
        let d = self.d;
        let a = &self.a[idx * d * d..(idx + 1) * d * d];
        let b = &self.b[idx * d..(idx + 1) * d];
        if d == 1 {
            let (l, c, r) = (u[idx - 1], u[idx], u[idx + 1]);
            a[0] * (r - 2.0 * c + l) / (h * h) + b[0] * (r - l) / (2.0 * h)
        } else {
            let s = self.k + 1;
            let at = |di: isize, dj: isize| u[(idx as isize + di * s as isize + dj) as usize];
            let c = at(0, 0);
            let uxx = (at(1, 0) - 2.0 * c + at(-1, 0)) / (h * h);
            let uyy = (at(0, 1) - 2.0 * c + at(0, -1)) / (h * h);
            let uxy = (at(1, 1) - at(1, -1) - at(-1, 1) + at(-1, -1)) / (4.0 * h * h);
            let ux = (at(1, 0) - at(-1, 0)) / (2.0 * h);
            let uy = (at(0, 1) - at(0, -1)) / (2.0 * h);
            a[0] * uxx + 2.0 * a[1] * uxy + a[3] * uyy + b[0] * ux + b[1] * uy
        }
    }

    fn gradient(&self, u: &[f64], idx: usize, g: &mut [f64]) {
        let h = self.dx;
        if self.d == 1 {
            g[0] = (u[idx + 1] - u[idx - 1]) / (2.0 * h);
        } else {
            let s = self.k + 1;
            g[0] = (u[idx + s] - u[idx - s]) / (2.0 * h);
            g[1] = (u[idx + 1] - u[idx - 1]) / (2.0 * h);
        }
    }
}

/// Right-preconditioned BiCGSTAB for `A x = rhs` with diagonal
/// preconditioner `diag`.
fn bicgstab(
    apply: impl Fn(&[f64], &mut [f64]),
    diag: &[f64],
    rhs: &[f64],
    x: &mut [f64],
    tol: f64,
    max_iter: usize,
) -> Result<usize> {
    let n = rhs.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    let mut r = vec![0.0; n];
    apply(x, &mut r);
    for i in 0..n {
        r[i] = rhs[i] - r[i];
    }
    let bnorm = dot(rhs, rhs).sqrt().max(1e-300);
    if dot(&r, &r).sqrt() <= tol * bnorm {
        return Ok(0);
    }
    let r0 = r.clone();
    let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut v = vec![0.0; n];
    let mut p = vec![0.0; n];
    let mut ph = vec![0.0; n];
    let mut s = vec![0.0; n];
    let mut sh = vec![0.0; n];
    let mut t = vec![0.0; n];
    for it in 1..=max_iter {
        let rho_new = dot(&r0, &r);
        if rho_new == 0.0 {
            break;
        }
        let beta = (rho_new / rho) * (alpha / omega);
        rho = rho_new;
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
            ph[i] = p[i] / diag[i];
        }
        apply(&ph, &mut v);
        alpha = rho / dot(&r0, &v);
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        if dot(&s, &s).sqrt() <= tol * bnorm {
            for i in 0..n {
                x[i] += alpha * ph[i];
            }
            return Ok(it);
        }
        for i in 0..n {
            sh[i] = s[i] / diag[i];
        }
        apply(&sh, &mut t);
        omega = dot(&t, &s) / dot(&t, &t);
        for i in 0..n {
            x[i] += alpha * ph[i] + omega * sh[i];
            r[i] = s[i] - omega * t[i];
        }
        if dot(&r, &r).sqrt() <= tol * bnorm {
            return Ok(it);
        }
        if omega == 0.0 {
            break;
        }
    }
    Err(Error::LinearSolver(format!("BiCGSTAB stalled after {max_iter} iterations")))
}

/// Backward θ-scheme. Each step solves
/// `(I - θΔt L) u^k = (I + (1-θ)Δt L) u^{k+1} + Δt N`, first with the
/// nonlinear term `N = f + g(u) ∂_t η` at `u^{k+1}`, then once more at the
/// average of the prediction and `u^{k+1}`; both at the mid time.
pub fn fd_dirichlet_solve(spec: &PdeSpec, opts: FdOptions) -> Result<PdeSolution> {
    spec.validate()?;
    if opts.time_steps == 0 || opts.space_steps < 2 {
        return Err(Error::arg("need at least one time step and two space steps"));
    }
    if !(0.0..=1.0).contains(&opts.theta) {
        return Err(Error::arg(format!("theta = {} outside [0, 1]", opts.theta)));
    }
    let mesh = Mesh::new(spec, opts.space_steps)?;
    let d = spec.d;
    let nodes = mesh.nodes();
    let dt = spec.horizon / opts.time_steps as f64;
    let theta = opts.theta;
    if theta < 0.5 {
        let limit = mesh.dx * mesh.dx / (2.0 * d as f64 * mesh.a_max() * (1.0 - 2.0 * theta));
        if dt > limit {
            return Err(Error::Cfl { dt, suggested: limit });
        }
    }
    let mc = spec.field.channels();
    let h: Vec<f64> = (0..nodes).map(|i| (spec.terminal)(&mesh.coords[i * d..(i + 1) * d])).collect();
    let mut u = h.clone();
    let mut stored = vec![u.clone()];
    let mut times = vec![spec.horizon];
    let mut deta = vec![0.0; nodes * mc];
    let mut rhs = vec![0.0; nodes];
    let ts = |k: usize| if k == opts.time_steps { spec.horizon } else { k as f64 * dt };
    for k in (0..opts.time_steps).rev() {
        let (t0, t1) = (ts(k), ts(k + 1));
        let tm = 0.5 * (t0 + t1);
        par::for_each_chunk_mut(&mut deta, mc, |i, o| {
            if !mesh.boundary[i] && !spec.field.time_derivative(tm, &mesh.coords[i * d..(i + 1) * d], o) {
                o.iter_mut().for_each(|v| *v = f64::NAN);
            }
        });
        if deta.iter().any(|v| v.is_nan()) {
            return Err(Error::arg("driver has no time derivative; mollify it first"));
        }
        let explicit: Vec<f64> = par::map_range(nodes, |i| {
            if mesh.boundary[i] {
                0.0
            } else {
                u[i] + (1.0 - theta) * dt * mesh.apply_l(&u, i)
            }
        });
        let mut prev = u.clone();
        let mut pred = u.clone();
        for sweep in 0..2 {
            let eval_at: Vec<f64> = if sweep == 0 {
                u.clone()
            } else {
                u.iter().zip(&pred).map(|(a, b)| 0.5 * (a + b)).collect()
            };
            let nl: Vec<f64> = par::map_range(nodes, |i| {
                if mesh.boundary[i] {
                    return 0.0;
                }
                let x = &mesh.coords[i * d..(i + 1) * d];
                let mut grad = [0.0; 2];
                let mut z = [0.0; 2];
                mesh.gradient(&eval_at, i, &mut grad);
                spec.z_of(&mesh.sigma[i * d * d..(i + 1) * d * d], &grad[..d], &mut z[..d]);
                let mut f = [0.0];
                (spec.generator)(tm, x, &eval_at[i..=i], &z[..d], &mut f);
                let mut g = vec![0.0; mc];
                (spec.coupling)(&eval_at[i..=i], &mut g);
                f[0] + (0..mc).map(|c| g[c] * deta[i * mc + c]).sum::<f64>()
            });
            for i in 0..nodes {
                rhs[i] = if mesh.boundary[i] { h[i] } else { explicit[i] + dt * nl[i] };
            }
            let next = solve_implicit(&mesh, theta * dt, &rhs, &prev)?;
            if let Some(i) = next.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { path: i, step: k });
            }
            prev = next.clone();
            pred = next;
        }
        u = pred;
        if k == 0 || k % opts.store_every == 0 {
            stored.push(u.clone());
            times.push(t0);
        }
    }
    stored.reverse();
    times.reverse();
    Ok(PdeSolution {
        d,
        n: spec.n,
        times,
        axes: vec![mesh.axis.clone(); d],
        values: stored.concat(),
        dt,
        dx: mesh.dx,
        theta,
    })
}

/// Solves `(I - c L) v = rhs` on interior nodes, boundary rows `v = rhs`.
fn solve_implicit(mesh: &Mesh, c: f64, rhs: &[f64], guess: &[f64]) -> Result<Vec<f64>> {
    let nodes = mesh.nodes();
    if c == 0.0 {
        return Ok(rhs.to_vec());
    }
    let h = mesh.dx;
    if mesh.d == 1 {
        let m = nodes - 2;
        let mut lo = vec![0.0; m];
        let mut di = vec![0.0; m];
        let mut up = vec![0.0; m];
        let mut r = vec![0.0; m];
        for j in 0..m {
            let i = j + 1;
            let (a, b) = (mesh.a[i], mesh.b[i]);
            let wl = a / (h * h) - b / (2.0 * h);
            let wr = a / (h * h) + b / (2.0 * h);
            lo[j] = -c * wl;
            up[j] = -c * wr;
            di[j] = 1.0 + c * 2.0 * a / (h * h);
            r[j] = rhs[i];
        }
        r[0] -= lo[0] * rhs[0];
        r[m - 1] -= up[m - 1] * rhs[nodes - 1];
        if !linalg::solve_tridiagonal(&lo, &di, &up, &mut r) {
            return Err(Error::LinearSolver("tridiagonal system singular".into()));
        }
        let mut v = rhs.to_vec();
        v[1..nodes - 1].copy_from_slice(&r);
        return Ok(v);
    }
    // 2-D: unknowns on all nodes, boundary rows identity
    let apply = |v: &[f64], out: &mut [f64]| {
        for i in 0..nodes {
            out[i] = if mesh.boundary[i] { v[i] } else { v[i] - c * mesh.apply_l(v, i) };
        }
    };
    let diag: Vec<f64> = (0..nodes)
        .map(|i| if mesh.boundary[i] { 1.0 } else { 1.0 + c * 2.0 * (mesh.a[i * 4] + mesh.a[i * 4 + 3]) / (h * h) })
        .collect();
    let mut x = guess.to_vec();
    for i in 0..nodes {
        if mesh.boundary[i] {
            x[i] = rhs[i];
        }
    }
    bicgstab(apply, &diag, rhs, &mut x, 1e-12, 2000)?;
    Ok(x)
}

/// `u^{n,m}(0, x)` over box sizes and mollification indices.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PdeTable {
    pub n_list: Vec<f64>,
    pub m_list: Vec<f64>,
    pub points: Vec<Vec<f64>>,
    /// `values[point][n index][m index]`
    pub values: Vec<Vec<Vec<f64>>>,
    /// `max_x |u^{n_{i+1},m} - u^{n_i,m}|`, indexed `[m][i]`
    pub n_differences: Vec<Vec<f64>>,
    /// `max_x |u^{n,m_{j+1}} - u^{n,m_j}|`, indexed `[n][j]`
    pub m_differences: Vec<Vec<f64>>,
    pub threshold: f64,
    /// both last differences at the largest other index are below threshold
    pub converged: bool,
}

impl PdeTable {
    pub fn to_csv(&self) -> Csv {
        let d = self.points.first().map_or(1, |p| p.len());
        let mut h: Vec<String> = vec!["n".into(), "m".into()];
        h.extend((1..=d).map(|i| format!("x{i}")));
        h.push("u".into());
        let mut csv = Csv::new(&h);
        for (pi, x) in self.points.iter().enumerate() {
            for (ni, n) in self.n_list.iter().enumerate() {
                for (mi, m) in self.m_list.iter().enumerate() {
                    let mut row = vec![Field::Num(*n), Field::Num(*m)];
                    row.extend(x.iter().map(|c| Field::Num(*c)));
                    row.push(Field::Num(self.values[pi][ni][mi]));
                    csv.row(&row);
                }
            }
        }
        csv
    }
}

/// Solves `family(n, m)` with fixed mesh `dx` for every pair and tabulates
/// `u(0, x)` at `points`.
pub fn young_pde_table(
    family: &dyn Fn(f64, f64) -> Result<PdeSpec>,
    n_list: &[f64],
    m_list: &[f64],
    points: &[Vec<f64>],
    time_steps: usize,
    dx: f64,
    threshold: f64,
) -> Result<PdeTable> {
    if n_list.is_empty() || m_list.is_empty() {
        return Err(Error::arg("empty index lists"));
    }
    let mut values = vec![vec![vec![0.0; m_list.len()]; n_list.len()]; points.len()];
    for (ni, &n) in n_list.iter().enumerate() {
        for (mi, &m) in m_list.iter().enumerate() {
            let spec = family(n, m)?;
            let sol = fd_dirichlet_solve(&spec, FdOptions::with_dx(time_steps, n, dx).store_every(time_steps))?;
            for (pi, x) in points.iter().enumerate() {
                values[pi][ni][mi] = sol.value_at_zero(x);
            }
        }
    }
    let maxdiff = |f: &dyn Fn(usize) -> f64| (0..points.len()).map(f).fold(0.0, f64::max);
    let n_differences: Vec<Vec<f64>> = (0..m_list.len())
        .map(|mi| {
            (0..n_list.len() - 1)
                .map(|ni| maxdiff(&|pi| (values[pi][ni + 1][mi] - values[pi][ni][mi]).abs()))
                .collect()
        })
        .collect();
    let m_differences: Vec<Vec<f64>> = (0..n_list.len())
        .map(|ni| {
            (0..m_list.len() - 1)
                .map(|mi| maxdiff(&|pi| (values[pi][ni][mi + 1] - values[pi][ni][mi]).abs()))
                .collect()
        })
        .collect();
    let tail_ok = |v: Option<&Vec<f64>>| v.and_then(|r| r.last()).is_none_or(|x| *x < threshold);
    let converged = tail_ok(n_differences.last()) && tail_ok(m_differences.last());
    Ok(PdeTable {
        n_list: n_list.to_vec(),
        m_list: m_list.to_vec(),
        points: points.to_vec(),
        values,
        n_differences,
        m_differences,
        threshold,
        converged,
    })
}

/// Monte Carlo value `Y_t^{t,x}` of the localized backward equation
/// attached to a PDE spec.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct McPoint {
    pub t: f64,
    pub x: Vec<f64>,
    pub value: f64,
    pub se: f64,
    pub spec_hash: String,
}

/// Monte Carlo settings for [`mc_point_estimate`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McOptions {
    pub n_paths: usize,
    pub time_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub basis: RegressionBasis,
    #[serde(default)]
    pub picard: PicardOptions,
}

/// The backward equation of `spec` started at `(t, x)`, solved up to the
/// exit from `[-n, n]^d`, with `h` read at the projected exit point.
pub fn pde_bsde_spec(spec: &PdeSpec, t: f64, x: &[f64]) -> Result<BsdeSpec> {
    spec.validate()?;
    if x.len() != spec.d {
        return Err(Error::DimensionMismatch("start point dimension".into()));
    }
    let (b, s) = (spec.drift.clone(), spec.diffusion.clone());
    let fwd = SdeSpec::new(x.to_vec(), move |t, x, o| b(t, x, o), move |t, x, o| s(t, x, o))
        .with_time_offset(t)
        .with_label(format!("pde:{}", spec.spec_hash()));
    let h = spec.terminal.clone();
    let terminal = StateTerminal::scalar(move |x| h(x)).projected(Domain::Cube(spec.n));
    // Z of the backward equation is (σ^⊤∇u)^⊤, so f takes it unchanged
    let f = spec.generator.clone();
    let d = spec.d;
    let g = spec.coupling.clone();
    BsdeSpec::new(fwd, spec.field.clone(), move |t, x, y, z, o| f(t, x, y, &z[..d], o), move |y, o| g(y, o), Arc::new(terminal))
}

pub fn mc_point_estimate(spec: &PdeSpec, t: f64, x: &[f64], opts: &McOptions) -> Result<McPoint> {
    if !(0.0..spec.horizon).contains(&t) {
        return Err(Error::arg(format!("start time {t} outside [0, T)")));
    }
    let bs = pde_bsde_spec(spec, t, x)?;
    let grid = TimeGrid::uniform(spec.horizon - t, opts.time_steps)?;
    let ens = euler_maruyama(&bs.forward, &grid, opts.n_paths, opts.seed)?;
    let sol = bsde::localized_solve(&bs, &ens, Domain::Cube(spec.n), &opts.basis, opts.picard)?;
    Ok(McPoint { t, x: x.to_vec(), value: sol.y0[0], se: sol.y0_se[0], spec_hash: spec.spec_hash() })
}

/// One row of a cross-check report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CrossCheckRow {
    pub t: f64,
    pub x: Vec<f64>,
    pub u_fd: f64,
    /// `|u_fd(fine) - u_fd(coarse)|`
    pub fd_error: f64,
    pub u_mc: f64,
    pub se: f64,
    pub discrepancy: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Finite differences at `opts` and twice finer against Monte Carlo
/// points; tolerance per point is the FD error estimate plus 3 SE.
pub fn feynman_kac_cross_check(spec: &PdeSpec, mc: &[McPoint], opts: FdOptions) -> Result<Vec<CrossCheckRow>> {
    let hash = spec.spec_hash();
    if let Some(p) = mc.iter().find(|p| p.spec_hash != hash) {
        return Err(Error::SpecMismatch(format!("Monte Carlo spec {} vs PDE spec {hash}", p.spec_hash)));
    }
    let coarse = fd_dirichlet_solve(spec, opts)?;
    let fine = fd_dirichlet_solve(spec, opts.refined())?;
    mc.iter()
        .map(|p| {
            let k0 = coarse
                .level_of(p.t)
                .ok_or_else(|| Error::MisalignedInterval { start: p.t, end: spec.horizon })?;
            let k1 = fine.level_of(p.t).ok_or_else(|| Error::MisalignedInterval { start: p.t, end: spec.horizon })?;
            let uc = coarse.interpolate(k0, &p.x);
            let uf = fine.interpolate(k1, &p.x);
            let fd_error = (uf - uc).abs();
            let discrepancy = (uf - p.value).abs();
            let tolerance = fd_error + 3.0 * p.se;
            Ok(CrossCheckRow {
                t: p.t,
                x: p.x.clone(),
                u_fd: uf,
                fd_error,
                u_mc: p.value,
                se: p.se,
                discrepancy,
                tolerance,
                pass: discrepancy <= tolerance,
            })
        })
        .collect()
}

/// Decay of `|u^n(0, x) - u^{n_max}(0, x)|` in the box size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LocalizationErrorTable {
    pub n_list: Vec<f64>,
    pub n_max: f64,
    /// `max_x |u^n - u^{n_max}|` per `n`
    pub differences: Vec<f64>,
    pub monotone: bool,
    /// `log difference ≈ intercept + slope · n²`
    pub fit: LineFit,
}

/// Solves `family(n)` for each `n` and for `n_max` on a common mesh.
pub fn localization_error_experiment(
    family: &dyn Fn(f64) -> Result<PdeSpec>,
    n_list: &[f64],
    n_max: f64,
    points: &[Vec<f64>],
    time_steps: usize,
    dx: f64,
) -> Result<LocalizationErrorTable> {
    if n_list.len() < 2 {
        return Err(Error::arg("need at least two box sizes"));
    }
    let solve = |n: f64| -> Result<Vec<f64>> {
        let s = fd_dirichlet_solve(&family(n)?, FdOptions::with_dx(time_steps, n, dx).store_every(time_steps))?;
        Ok(points.iter().map(|x| s.value_at_zero(x)).collect())
    };
    let reference = solve(n_max)?;
    let mut differences = Vec::new();
    for &n in n_list {
        let v = solve(n)?;
        differences.push(v.iter().zip(&reference).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
    }
    let monotone = differences.windows(2).all(|w| w[1] < w[0]);
    let xs: Vec<f64> = n_list.iter().map(|n| n * n).collect();
    let ys: Vec<f64> = differences.iter().map(|v| v.max(f64::MIN_POSITIVE).ln()).collect();
    Ok(LocalizationErrorTable {
        n_list: n_list.to_vec(),
        n_max,
        differences,
        monotone,
        fit: stats::line_fit(&xs, &ys),
    })
}

/// Monte Carlo estimate of `E[h(X_T) exp(∫_t^T B(dr, X_r))]` for Brownian
/// motion reflected in `[a, b]` started at `x` at time `t`.
#[allow(clippy::too_many_arguments)]
pub fn neumann_fk_estimate(
    h: &(dyn Fn(f64) -> f64 + Sync),
    field: Arc<dyn DriverField>,
    a: f64,
    b: f64,
    t: f64,
    x: f64,
    n_paths: usize,
    seed: u64,
    time_steps: usize,
) -> Result<MeanSe> {
    if field.space_dim() != 1 || field.channels() != 1 {
        return Err(Error::DimensionMismatch("reflected estimate needs a scalar driver on R".into()));
    }
    if n_paths == 0 {
        return Err(Error::arg("need at least one path"));
    }
    let shifted: Arc<dyn DriverField> = if t > 0.0 { Arc::new(ShiftedField::new(field.clone(), t)?) } else { field.clone() };
    let grid = TimeGrid::uniform(field.horizon() - t, time_steps)?;
    let ones = SamplePath::from_scalar_fn(grid.clone(), |_| 1.0)?;
    let vals = par::try_map_range(n_paths, |p| {
        let r = reflected_bm_path(&grid, seed, p, a, b, x)?;
        let xt = *r.x.last().unwrap();
        let path = SamplePath::scalar(grid.clone(), r.x)?;
        let integral = nonlinear_young_integral(&ones, &path, shifted.as_ref(), None, 0)?.total1();
        let v = h(xt) * integral.exp();
        if !v.is_finite() {
            return Err(Error::NonFinite { path: p, step: time_steps });
        }
        Ok(v)
    })?;
    Ok(stats::mean_se(&vals))
}

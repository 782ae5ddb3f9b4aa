//! Sewing of two-parameter germs by dyadic refinement.
//!
//! At level `ℓ` every base cell is split into `2^ℓ` equal pieces and the
//! germ is summed over the pieces. The differences of successive level
//! totals (Cauchy increments) are recorded so that convergence can be read
//! off directly.
//!
//! For integrals of sampled paths the finest partition is the sampling grid
//! itself and level `ℓ` uses every `2^{L-ℓ}`-th sample point, so no values
//! are ever invented between samples.

use serde::{Deserialize, Serialize};

use crate::driver::DriverField;
use crate::paths::{ControlValue, SamplePath, TimeGrid};
use crate::{Error, Result};

/// A germ `A(s, t)` with values in `R^channels`.
pub trait Germ: Sync {
    fn channels(&self) -> usize {
        1
    }
    fn eval(&self, s: f64, t: f64, out: &mut [f64]);
}

/// Scalar germ from a closure.
pub struct FnGerm<F>(pub F);

impl<F: Fn(f64, f64) -> f64 + Sync> Germ for FnGerm<F> {
    fn eval(&self, s: f64, t: f64, out: &mut [f64]) {
        out[0] = (self.0)(s, t);
    }
}

/// Output of a sewing computation.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct IntegralResult {
    /// times at which `cumulative` is reported
    pub times: Vec<f64>,
    /// indices (into `times`) of the base partition
    pub base: Vec<usize>,
    pub channels: usize,
    pub levels: u32,
    /// `I_ℓ` over the whole interval, per level (`levels + 1` rows)
    pub level_totals: Vec<Vec<f64>>,
    /// `|I_{ℓ+1} - I_ℓ|`, Euclidean over channels (`levels` entries)
    pub cauchy_increments: Vec<f64>,
    /// per level, the sum over each base cell (`cells × channels`)
    pub cell_values: Vec<Vec<f64>>,
    /// `t ↦ ∫_a^t` at the finest level (`times.len() × channels`)
    pub cumulative: Vec<f64>,
    /// mesh of the finest partition
    pub mesh: f64,
}

impl IntegralResult {
    /// Value over the whole interval at the finest level.
    pub fn total(&self) -> &[f64] {
        self.level_totals.last().unwrap()
    }

    pub fn total1(&self) -> f64 {
        self.total()[0]
    }

    /// Cumulative value at `times[i]`.
    pub fn at(&self, i: usize) -> &[f64] {
        &self.cumulative[i * self.channels..(i + 1) * self.channels]
    }

    /// Finest-level value over base cells `i..j` summed in order.
    pub fn between_cells(&self, i: usize, j: usize) -> Vec<f64> {
        let m = self.channels;
        let fin = self.cell_values.last().unwrap();
        let mut acc = vec![0.0; m];
        for k in i..j {
            for c in 0..m {
                acc[c] += fin[k * m + c];
            }
        }
        acc
    }

    /// The cumulative integral as a path (times shifted so they start at 0).
    pub fn cumulative_path(&self) -> Result<SamplePath> {
        let t0 = self.times[0];
        let g = TimeGrid::new(self.times.iter().map(|t| t - t0).collect())?;
        SamplePath::new(g, self.channels, self.cumulative.clone())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Shared driver: `cell_sum(cell, level, out)` adds the level-`level` sum
/// of one base cell into `out`.
fn sew_cells<F>(n_cells: usize, m: usize, levels: u32, cell_sum: F) -> Result<Vec<Vec<f64>>>
where
    F: Fn(usize, u32, &mut [f64]) -> Result<()> + Sync + Send,
{
    let per_cell = crate::par::try_map_range(n_cells, |k| {
        let mut rows = vec![0.0; (levels as usize + 1) * m];
        for l in 0..=levels {
            let lo = l as usize * m;
            cell_sum(k, l, &mut rows[lo..lo + m])?;
        }
        Ok(rows)
    })?;
    let mut cells = vec![vec![0.0; n_cells * m]; levels as usize + 1];
    for (k, rows) in per_cell.iter().enumerate() {
        for l in 0..=levels as usize {
            cells[l][k * m..(k + 1) * m].copy_from_slice(&rows[l * m..(l + 1) * m]);
        }
    }
    Ok(cells)
}

fn totals(cells: &[Vec<f64>], m: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let totals: Vec<Vec<f64>> = cells
        .iter()
        .map(|row| {
            let mut acc = vec![0.0; m];
            for chunk in row.chunks(m) {
                for c in 0..m {
                    acc[c] += chunk[c];
                }
            }
            acc
        })
        .collect();
    let inc = totals
        .windows(2)
        .map(|w| {
            let d: Vec<f64> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
            norm(&d)
        })
        .collect();
    (totals, inc)
}

fn check_finite(v: &[f64], s: f64, t: f64) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteGerm { s, t })
    }
}

const MAX_LEVELS: u32 = 30;

/// Sews `germ` over `grid`, refining every cell dyadically `levels` times.
/// The cumulative integral is reported at the grid points.
pub fn sew(germ: &dyn Germ, grid: &TimeGrid, levels: u32) -> Result<IntegralResult> {
    if levels > MAX_LEVELS {
        return Err(Error::arg(format!("levels {levels} exceeds {MAX_LEVELS}")));
    }
    let m = germ.channels();
    let n = grid.cells();
    let cells = sew_cells(n, m, levels, |k, l, out| {
        let mut buf = vec![0.0; m];
        for j in 0..1usize << l {
            let s = grid.refined_point(k, j, l);
            let t = grid.refined_point(k, j + 1, l);
            germ.eval(s, t, &mut buf);
            check_finite(&buf, s, t)?;
            for c in 0..m {
                out[c] += buf[c];
            }
        }
        Ok(())
    })?;
    let (level_totals, cauchy_increments) = totals(&cells, m);
    let mut cumulative = vec![0.0; grid.len() * m];
    let fin = cells.last().unwrap();
    for k in 0..n {
        for c in 0..m {
            cumulative[(k + 1) * m + c] = cumulative[k * m + c] + fin[k * m + c];
        }
    }
    Ok(IntegralResult {
        times: grid.points().to_vec(),
        base: (0..grid.len()).collect(),
        channels: m,
        levels,
        level_totals,
        cauchy_increments,
        cell_values: cells,
        cumulative,
        mesh: grid.mesh() / (1u64 << levels) as f64,
    })
}

/// Like [`sew`] but stops at the first level whose Cauchy increment falls
/// below `tol`.
pub fn sew_until(germ: &dyn Germ, grid: &TimeGrid, max_levels: u32, tol: f64) -> Result<IntegralResult> {
    let mut l = 0;
    loop {
        let r = sew(germ, grid, l)?;
        let done = r.cauchy_increments.last().is_some_and(|&d| d < tol);
        if done || l >= max_levels {
            return Ok(r);
        }
        l += 1;
    }
}

/// Sews an index germ `A(i, j)` over sample points `i0..=i1` of `times`;
/// the finest level is the sampling grid and level `ℓ` has stride
/// `2^{levels-ℓ}`.
pub fn sew_sampled<G>(
    times: &[f64],
    (i0, i1): (usize, usize),
    levels: u32,
    m: usize,
    germ: G,
) -> Result<IntegralResult>
where
    G: Fn(usize, usize, &mut [f64]) + Sync + Send,
{
    let span = i1 - i0;
    let stride = 1usize << levels;
    if levels > MAX_LEVELS || span == 0 || span % stride != 0 {
        return Err(Error::arg(format!(
            "{span} sample cells cannot be split into dyadic blocks of {stride}"
        )));
    }
    let n_cells = span / stride;
    let cells = sew_cells(n_cells, m, levels, |k, l, out| {
        let step = 1usize << (levels - l);
        let start = i0 + k * stride;
        let mut buf = vec![0.0; m];
        for j in 0..1usize << l {
            let (a, b) = (start + j * step, start + (j + 1) * step);
            germ(a, b, &mut buf);
            check_finite(&buf, times[a], times[b])?;
            for c in 0..m {
                out[c] += buf[c];
            }
        }
        Ok(())
    })?;
    let (level_totals, cauchy_increments) = totals(&cells, m);
    // cumulative on every sample point: the finest cells are sample cells
    let mut cumulative = vec![0.0; (span + 1) * m];
    let mut buf = vec![0.0; m];
    for k in 0..span {
        germ(i0 + k, i0 + k + 1, &mut buf);
        for c in 0..m {
            cumulative[(k + 1) * m + c] = cumulative[k * m + c] + buf[c];
        }
    }
    let ts = &times[i0..=i1];
    let mesh = ts.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
    Ok(IntegralResult {
        times: ts.to_vec(),
        base: (0..=n_cells).map(|k| k * stride).collect(),
        channels: m,
        levels,
        level_totals,
        cauchy_increments,
        cell_values: cells,
        cumulative,
        mesh,
    })
}

fn interval_of(path: &SamplePath, interval: Option<(f64, f64)>) -> Result<(usize, usize)> {
    match interval {
        None => Ok((0, path.len() - 1)),
        Some((a, b)) => path.grid().interval(a, b),
    }
}

/// Nonlinear Young integral `∫_a^t y_r η(dr, x_r)` of sampled paths.
///
/// `y` has dimension `N·M` (row-major `N × M`, `M` = field channels) and
/// the result has `N` channels; the germ is
/// `A(s, t) = y_s (η(t, x_s) - η(s, x_s))`.
pub fn nonlinear_young_integral(
    y: &SamplePath,
    x: &SamplePath,
    field: &dyn DriverField,
    interval: Option<(f64, f64)>,
    levels: u32,
) -> Result<IntegralResult> {
    let mc = field.channels();
    if x.dim() != field.space_dim() {
        return Err(Error::DimensionMismatch(format!(
            "path dimension {} vs field dimension {}",
            x.dim(),
            field.space_dim()
        )));
    }
    if y.dim() % mc != 0 {
        return Err(Error::DimensionMismatch(format!(
            "integrand dimension {} is not a multiple of {mc} channels",
            y.dim()
        )));
    }
    if y.grid() != x.grid() {
        return Err(Error::arg("integrand and path must share a grid"));
    }
    let n_out = y.dim() / mc;
    let times = x.grid().points();
    let range = interval_of(x, interval)?;
    sew_sampled(times, range, levels, n_out, |i, j, out| {
        let mut inc = vec![0.0; mc];
        field.increment(times[i], times[j], x.value(i), &mut inc);
        let yi = y.value(i);
        for (r, o) in out.iter_mut().enumerate() {
            *o = (0..mc).map(|c| yi[r * mc + c] * inc[c]).sum();
        }
    })
}

/// Classical Young integral `∫ y dm` of sampled paths with germ
/// `y_s (m_t - m_s)`. A scalar `y` multiplies every component of `m`;
/// otherwise `y` and `m` must have equal dimension and the result is the
/// scalar product.
pub fn young_integral(
    y: &SamplePath,
    m: &SamplePath,
    interval: Option<(f64, f64)>,
    levels: u32,
) -> Result<IntegralResult> {
    if y.grid() != m.grid() {
        return Err(Error::arg("integrand and integrator must share a grid"));
    }
    let scalar = y.dim() == 1;
    if !scalar && y.dim() != m.dim() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", y.dim(), m.dim())));
    }
    let out_dim = if scalar { m.dim() } else { 1 };
    let range = interval_of(m, interval)?;
    sew_sampled(m.grid().points(), range, levels, out_dim, |i, j, out| {
        let (yi, mi, mj) = (y.value(i), m.value(i), m.value(j));
        if scalar {
            for c in 0..out_dim {
                out[c] = yi[0] * (mj[c] - mi[c]);
            }
        } else {
            out[0] = (0..mi.len()).map(|c| yi[c] * (mj[c] - mi[c])).sum();
        }
    })
}

/// `l^{ε₀} / (1 - 2^{-ε₀})`, the constant of the sewing bound with `l`
/// controls and smallest excess exponent `ε₀`.
pub fn sewing_constant(l: usize, eps0: f64) -> f64 {
    (l as f64).powf(eps0) / (1.0 - 2f64.powf(-eps0))
}

/// `2^δ / (1 - 2^{-δ})`.
pub fn young_constant(delta: f64) -> f64 {
    2f64.powf(delta) / (1.0 - 2f64.powf(-delta))
}

/// `min(τ + 1/p2 - 1, τ + λ/p1 - 1)`.
pub fn young_delta(tau: f64, lambda: f64, p1: f64, p2: f64) -> f64 {
    (tau + 1.0 / p2 - 1.0).min(tau + lambda / p1 - 1.0)
}

/// Remainder check on one base cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateCell {
    pub start: f64,
    pub end: f64,
    /// `|𝒜_{s,t} - A(s,t)|` at the finest level
    pub observed: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Checks `|𝒜_{s,t} - A(s,t)| <= l^{ε₀}/(1-2^{-ε₀}) Σ w_i(s,t)^{1+ε_i}` on
/// every base cell, given controls `w_i` with `|δA_{s,u,t}| <= Σ w_i^{1+ε_i}`.
pub fn remainder_certificate(
    result: &IntegralResult,
    controls: &[(ControlValue, f64)],
) -> Result<Vec<CertificateCell>> {
    if controls.is_empty() || controls.iter().any(|(_, e)| *e <= 0.0) {
        return Err(Error::arg("need at least one control with positive excess exponent"));
    }
    let eps0 = controls.iter().map(|(_, e)| *e).fold(f64::INFINITY, f64::min);
    let k = sewing_constant(controls.len(), eps0);
    let m = result.channels;
    let coarse = &result.cell_values[0];
    let fine = result.cell_values.last().unwrap();
    let mut out = Vec::new();
    for c in 0..result.base.len() - 1 {
        let s = result.times[result.base[c]];
        let t = result.times[result.base[c + 1]];
        let d: Vec<f64> = (0..m).map(|i| fine[c * m + i] - coarse[c * m + i]).collect();
        let observed = norm(&d);
        let mut sum = 0.0;
        for (w, e) in controls {
            sum += w.eval_times(s, t)?.powf(1.0 + e);
        }
        let bound = k * sum;
        out.push(CertificateCell {
            start: s,
            end: t,
            observed,
            bound,
            holds: observed <= bound * (1.0 + 1e-12) + 1e-15,
        });
    }
    Ok(out)
}

//! Time grids, sampled paths and path norms.
//!
//! Norms are suprema over partitions drawn from the sampling grid; a grid
//! path carries no information between its nodes.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Strictly increasing time points `0 = t_0 < ... < t_n = T`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TimeGrid {
    points: Vec<f64>,
    #[serde(default)]
    uniform: bool,
}

/// Grids are equal when their points are; the uniform flag is a cache.
impl PartialEq for TimeGrid {
    fn eq(&self, other: &Self) -> bool {
        self.points == other.points
    }
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least two points".into()));
        }
        if points[0] != 0.0 {
            return Err(Error::InvalidGrid(format!("first point is {}, not 0", points[0])));
        }
        for w in points.windows(2) {
            if !(w[1] > w[0]) || !w[1].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "points not strictly increasing at {} -> {}",
                    w[0], w[1]
                )));
            }
        }
        Ok(TimeGrid { points, uniform: false })
    }

    /// `t_j = T * (j / n)`. Dyadic refinements of a uniform grid reproduce
    /// these values bit for bit.
    pub fn uniform(horizon: f64, cells: usize) -> Result<Self> {
        if cells == 0 || !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!(
                "uniform grid needs cells > 0 and T > 0 (got {cells}, {horizon})"
            )));
        }
        let n = cells as f64;
        let points = (0..=cells).map(|j| horizon * (j as f64 / n)).collect();
        Ok(TimeGrid { points, uniform: true })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn cells(&self) -> usize {
        self.points.len() - 1
    }

    pub fn horizon(&self) -> f64 {
        *self.points.last().unwrap()
    }

    pub fn is_uniform(&self) -> bool {
        self.uniform
    }

    pub fn t(&self, i: usize) -> f64 {
        self.points[i]
    }

    /// `t_{i+1} - t_i`.
    pub fn dt(&self, i: usize) -> f64 {
        self.points[i + 1] - self.points[i]
    }

    pub fn mesh(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| w[1] - w[0])
            .fold(0.0, f64::max)
    }

    /// Index of a grid point equal to `t` up to `1e-12 * max(1, T)`.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        let tol = 1e-12 * self.horizon().max(1.0);
        let i = self.points.partition_point(|&p| p < t - tol);
        (i < self.points.len() && (self.points[i] - t).abs() <= tol).then_some(i)
    }

    /// Grid indices of the interval `[a, b]`.
    pub fn interval(&self, a: f64, b: f64) -> Result<(usize, usize)> {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) if i < j => Ok((i, j)),
            _ => Err(Error::MisalignedInterval { start: a, end: b }),
        }
    }

    /// Point `j` of the level-`level` dyadic refinement of cell `cell`.
    pub fn refined_point(&self, cell: usize, j: usize, level: u32) -> f64 {
        let k = 1usize << level;
        if j == 0 {
            return self.points[cell];
        }
        if j == k {
            return self.points[cell + 1];
        }
        if self.uniform {
            let n = self.cells();
            self.horizon() * (((cell << level) + j) as f64 / ((n << level) as f64))
        } else {
            let (a, b) = (self.points[cell], self.points[cell + 1]);
            a + (b - a) * (j as f64 / k as f64)
        }
    }

    /// Grid with every cell split into `2^levels` equal cells.
    pub fn refine(&self, levels: u32) -> TimeGrid {
        if self.uniform {
            return TimeGrid::uniform(self.horizon(), self.cells() << levels).unwrap();
        }
        let k = 1usize << levels;
        let mut points = Vec::with_capacity(self.cells() * k + 1);
        for c in 0..self.cells() {
            for j in 0..k {
                points.push(self.refined_point(c, j, levels));
            }
        }
        points.push(self.horizon());
        TimeGrid { points, uniform: false }
    }

    /// Every `stride`-th point; `stride` must divide the number of cells.
    pub fn coarsen(&self, stride: usize) -> Result<TimeGrid> {
        if stride == 0 || self.cells() % stride != 0 {
            return Err(Error::arg(format!(
                "stride {stride} does not divide {} cells",
                self.cells()
            )));
        }
        let points = self.points.iter().step_by(stride).copied().collect();
        Ok(TimeGrid { points, uniform: self.uniform })
    }
}

/// A path sampled on a [`TimeGrid`]; values are stored row-major
/// (`len × dim`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl SamplePath {
    pub fn new(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 || values.len() != grid.len() * dim {
            return Err(Error::DimensionMismatch(format!(
                "{} values for {} points of dimension {dim}",
                values.len(),
                grid.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { path: 0, step: k / dim });
        }
        Ok(SamplePath { grid, dim, values })
    }

    pub fn scalar(grid: TimeGrid, values: Vec<f64>) -> Result<Self> {
        Self::new(grid, 1, values)
    }

    /// Samples `f(t, out)` at every grid point.
    pub fn from_fn(grid: TimeGrid, dim: usize, f: impl Fn(f64, &mut [f64])) -> Result<Self> {
        let mut values = vec![0.0; grid.len() * dim];
        for (i, chunk) in values.chunks_mut(dim).enumerate() {
            f(grid.t(i), chunk);
        }
        Self::new(grid, dim, values)
    }

    pub fn from_scalar_fn(grid: TimeGrid, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::from_fn(grid, 1, |t, o| o[0] = f(t))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Linear interpolation between nodes, exact node values on the grid,
    /// constant beyond the ends.
    pub fn value_at(&self, t: f64, out: &mut [f64]) {
        let pts = self.grid.points();
        let n = pts.len();
        let i = pts.partition_point(|&p| p <= t);
        if i == 0 {
            out.copy_from_slice(self.value(0));
            return;
        }
        if i == n {
            out.copy_from_slice(self.value(n - 1));
            return;
        }
        let k = i - 1;
        if pts[k] == t {
            out.copy_from_slice(self.value(k));
            return;
        }
        let w = (t - pts[k]) / (pts[i] - pts[k]);
        let (a, b) = (self.value(k), self.value(i));
        for c in 0..self.dim {
            out[c] = a[c] + w * (b[c] - a[c]);
        }
    }

    pub fn component(&self, c: usize) -> SamplePath {
        let values = self.values.iter().skip(c).step_by(self.dim).copied().collect();
        SamplePath { grid: self.grid.clone(), dim: 1, values }
    }

    /// Pointwise map to a path of dimension `dim`.
    pub fn map(&self, dim: usize, f: impl Fn(f64, &[f64], &mut [f64])) -> Result<SamplePath> {
        let mut values = vec![0.0; self.len() * dim];
        for i in 0..self.len() {
            f(self.grid.t(i), self.value(i), &mut values[i * dim..(i + 1) * dim]);
        }
        SamplePath::new(self.grid.clone(), dim, values)
    }

    /// Restriction to every `stride`-th grid point.
    pub fn coarsen(&self, stride: usize) -> Result<SamplePath> {
        let grid = self.grid.coarsen(stride)?;
        let mut values = Vec::with_capacity(grid.len() * self.dim);
        for i in (0..self.len()).step_by(stride) {
            values.extend_from_slice(self.value(i));
        }
        Ok(SamplePath { grid, dim: self.dim, values })
    }

    /// Grid indices of `interval`; a single grid point gives `None`, for
    /// which every norm is zero.
    fn range(&self, interval: Option<(f64, f64)>) -> Result<Option<(usize, usize)>> {
        match interval {
            None => Ok(Some((0, self.len() - 1))),
            Some((a, b)) => match self.grid.index_of(a) {
                Some(_) if a == b => Ok(None),
                _ => self.grid.interval(a, b).map(Some),
            },
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    if a.len() == 1 {
        return (a[0] - b[0]).abs();
    }
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0) || !p.is_finite() {
        return Err(Error::InvalidExponent { value: p, requirement: "p >= 1" });
    }
    Ok(())
}

/// `sup Σ |x_{t_{k+1}} - x_{t_k}|^p` over partitions of `values` (rows of
/// length `dim`) that start at the first row and end at the last.
///
/// Dynamic programme `V(j) = max_{i<j} V(i) + |x_j - x_i|^p`, O(n²).
pub fn p_variation_power_slice(values: &[f64], dim: usize, p: f64) -> f64 {
    let n = values.len() / dim;
    if n < 2 {
        return 0.0;
    }
    let row = |i: usize| &values[i * dim..(i + 1) * dim];
    let mut v = vec![0.0f64; n];
    for j in 1..n {
        let xj = row(j);
        let mut best = 0.0f64;
        for i in 0..j {
            let cand = v[i] + dist(xj, row(i)).powf(p);
            if cand > best {
                best = cand;
            }
        }
        v[j] = best;
    }
    v[n - 1]
}

/// For every start row `i`, the p-variation power of rows `i..n`.
/// One backward DP pass, O(n²).
pub fn p_variation_power_tails(values: &[f64], dim: usize, p: f64) -> Vec<f64> {
    let n = values.len() / dim;
    let row = |i: usize| &values[i * dim..(i + 1) * dim];
    let mut v = vec![0.0f64; n];
    for i in (0..n.saturating_sub(1)).rev() {
        let xi = row(i);
        let mut best = 0.0f64;
        for j in i + 1..n {
            let cand = v[j] + dist(row(j), xi).powf(p);
            if cand > best {
                best = cand;
            }
        }
        v[i] = best;
    }
    v
}

/// For a fixed start row `i`, the p-variation power of rows `i..=j` for
/// every `j >= i` (entry `j - i`).
pub fn p_variation_power_heads(values: &[f64], dim: usize, p: f64, i: usize) -> Vec<f64> {
    let n = values.len() / dim;
    let row = |k: usize| &values[k * dim..(k + 1) * dim];
    let m = n - i;
    let mut v = vec![0.0f64; m];
    for j in 1..m {
        let xj = row(i + j);
        let mut best = 0.0f64;
        for k in 0..j {
            let cand = v[k] + dist(xj, row(i + k)).powf(p);
            if cand > best {
                best = cand;
            }
        }
        v[j] = best;
    }
    v
}

/// `‖x‖_{p-var;[a,b]}` with partitions drawn from the sampling grid.
/// `interval = None` means the whole grid.
pub fn p_variation(path: &SamplePath, p: f64, interval: Option<(f64, f64)>) -> Result<f64> {
    check_p(p)?;
    let Some((i, j)) = path.range(interval)? else { return Ok(0.0) };
    let slice = &path.values[i * path.dim..(j + 1) * path.dim];
    Ok(p_variation_power_slice(slice, path.dim, p).powf(1.0 / p))
}

/// p-variation between grid indices `i <= j`.
pub fn p_variation_idx(path: &SamplePath, p: f64, i: usize, j: usize) -> f64 {
    let slice = &path.values[i * path.dim..(j + 1) * path.dim];
    p_variation_power_slice(slice, path.dim, p).powf(1.0 / p)
}

/// `sup |x_t - x_s| / |t - s|^γ` over grid pairs in the interval.
pub fn holder_norm(path: &SamplePath, gamma: f64, interval: Option<(f64, f64)>) -> Result<f64> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidExponent { value: gamma, requirement: "0 < gamma <= 1" });
    }
    let Some((i0, i1)) = path.range(interval)? else { return Ok(0.0) };
    let g = path.grid.points();
    let mut best = 0.0f64;
    for s in i0..i1 {
        for t in s + 1..=i1 {
            let q = dist(path.value(t), path.value(s)) / (g[t] - g[s]).powf(gamma);
            best = best.max(q);
        }
    }
    Ok(best)
}

/// `sup |x_t|` over grid points in the interval.
pub fn uniform_norm(path: &SamplePath, interval: Option<(f64, f64)>) -> Result<f64> {
    let Some((i0, i1)) = path.range(interval)? else { return Ok(0.0) };
    let zero = vec![0.0; path.dim];
    Ok((i0..=i1).map(|i| dist(path.value(i), &zero)).fold(0.0, f64::max))
}

/// Oscillation `sup |x_t - x_s|` over grid pairs in the interval.
pub fn oscillation(path: &SamplePath, interval: Option<(f64, f64)>) -> Result<f64> {
    let Some((i0, i1)) = path.range(interval)? else { return Ok(0.0) };
    let mut best = 0.0f64;
    for s in i0..=i1 {
        for t in s + 1..=i1 {
            best = best.max(dist(path.value(t), path.value(s)));
        }
    }
    Ok(best)
}

type ControlFn = dyn Fn(usize, usize) -> f64 + Send + Sync;

#[derive(Clone)]
enum ControlEval {
    Table(Arc<Vec<f64>>),
    Func(Arc<ControlFn>),
}

/// A control `w(s, t)` evaluated on pairs of grid indices `s <= t`.
#[derive(Clone)]
pub struct ControlValue {
    grid: TimeGrid,
    eval: ControlEval,
}

impl std::fmt::Debug for ControlValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let kind = match self.eval {
            ControlEval::Table(_) => "table",
            ControlEval::Func(_) => "function",
        };
        f.debug_struct("ControlValue")
            .field("points", &self.grid.len())
            .field("kind", &kind)
            .finish()
    }
}

impl ControlValue {
    pub fn from_fn(
        grid: TimeGrid,
        f: impl Fn(usize, usize) -> f64 + Send + Sync + 'static,
    ) -> Self {
        ControlValue { grid, eval: ControlEval::Func(Arc::new(f)) }
    }

    /// `w(s, t) = t - s`.
    pub fn time(grid: TimeGrid) -> Self {
        let g = grid.clone();
        Self::from_fn(grid, move |i, j| g.t(j) - g.t(i))
    }

    /// `w(s, t) = ‖x‖^p_{p-var;[s,t]}`, tabulated for all pairs (O(n³)).
    pub fn p_variation(path: &SamplePath, p: f64) -> Result<Self> {
        check_p(p)?;
        let n = path.len();
        let rows = crate::par::map_range(n, |i| p_variation_power_heads(&path.values, path.dim, p, i));
        let mut table = vec![0.0; n * n];
        for (i, r) in rows.into_iter().enumerate() {
            table[i * n + i..i * n + n].copy_from_slice(&r);
        }
        Ok(ControlValue { grid: path.grid.clone(), eval: ControlEval::Table(Arc::new(table)) })
    }

    /// `w = Π w_k^{α_k}`; superadditive when `Σ α_k >= 1`.
    pub fn product(factors: &[(ControlValue, f64)]) -> Result<Self> {
        let first = factors.first().ok_or_else(|| Error::arg("empty product"))?;
        let total: f64 = factors.iter().map(|(_, a)| a).sum();
        if factors.iter().any(|(_, a)| *a <= 0.0) || total < 1.0 - 1e-12 {
            return Err(Error::InvalidExponent {
                value: total,
                requirement: "positive exponents summing to at least 1",
            });
        }
        if factors.iter().any(|(c, _)| c.grid != first.0.grid) {
            return Err(Error::arg("controls live on different grids"));
        }
        let parts: Vec<(ControlValue, f64)> = factors.to_vec();
        Ok(Self::from_fn(first.0.grid.clone(), move |i, j| {
            parts.iter().map(|(c, a)| c.eval(i, j).powf(*a)).product()
        }))
    }

    /// `c · w^a`.
    pub fn scaled_power(&self, c: f64, a: f64) -> Self {
        let inner = self.clone();
        Self::from_fn(self.grid.clone(), move |i, j| c * inner.eval(i, j).powf(a))
    }

    /// Sum of controls (superadditive if each term is).
    pub fn sum(&self, other: &ControlValue) -> Self {
        let (a, b) = (self.clone(), other.clone());
        Self::from_fn(self.grid.clone(), move |i, j| a.eval(i, j) + b.eval(i, j))
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn eval(&self, i: usize, j: usize) -> f64 {
        match &self.eval {
            ControlEval::Table(t) => t[i * self.grid.len() + j],
            ControlEval::Func(f) => f(i, j),
        }
    }

    pub fn eval_times(&self, s: f64, t: f64) -> Result<f64> {
        let (i, j) = self.grid.interval(s, t)?;
        Ok(self.eval(i, j))
    }

    /// Materializes every pair into a table.
    pub fn tabulate(&self) -> Self {
        if let ControlEval::Table(_) = self.eval {
            return self.clone();
        }
        let n = self.grid.len();
        let rows = crate::par::map_range(n, |i| (0..n).map(|j| if j >= i { self.eval(i, j) } else { 0.0 }).collect::<Vec<_>>());
        ControlValue { grid: self.grid.clone(), eval: ControlEval::Table(Arc::new(rows.concat())) }
    }

    /// `max (w(s,u) + w(u,t) - w(s,t))` over grid triples; `<= 0` for a
    /// superadditive control.
    pub fn superadditivity_defect(&self) -> f64 {
        let n = self.grid.len();
        let worst = crate::par::map_range(n, |s| {
            let mut worst = f64::NEG_INFINITY;
            for u in s..n {
                let su = self.eval(s, u);
                for t in u..n {
                    worst = worst.max(su + self.eval(u, t) - self.eval(s, t));
                }
            }
            worst
        });
        worst.into_iter().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_superadditive(&self, rel_tol: f64) -> bool {
        let scale = self.eval(0, self.grid.len() - 1).abs().max(1e-300);
        self.superadditivity_defect() <= rel_tol * scale
    }
}

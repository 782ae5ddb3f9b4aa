//! Space-time driver fields `η(t, x)`.
//!
//! Every field is normalized so that `η(0, x) = 0`. Four kinds exist:
//! closed-form analytic fields, fractional Brownian sheet realizations on a
//! lattice (multilinear interpolation off the lattice), time mollifications
//! of another field, and time shifts of another field.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::io::{self, Csv, Field};
use crate::paths::TimeGrid;
use crate::rng::NormalStream;
use crate::{Error, Result};

/// Weighted Hölder exponents `(τ, λ, β)` of a driver, with the path
/// exponent `p` of the forward process and optional `ε`, `k`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegularityParams {
    pub tau: f64,
    pub lambda: f64,
    #[serde(default)]
    pub beta: f64,
    pub p: f64,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub k: Option<f64>,
}

/// Hurst indices of a fractional Brownian sheet: `h0` in time, `h` in
/// every spatial direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HurstParams {
    pub h0: f64,
    pub h: f64,
}

impl HurstParams {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [(self.h0, "h0"), (self.h, "h")] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::InvalidExponent { value: v, requirement: name_req(name) });
            }
        }
        Ok(())
    }

    /// Hölder exponents of a realization on bounded time, losing `θ`:
    /// `τ = H0 - θ`, `λ = H - θ`, `β = (d-1)H + 2θ`.
    pub fn regularity(&self, d: usize, theta: f64, p: f64) -> RegularityParams {
        RegularityParams {
            tau: self.h0 - theta,
            lambda: self.h - theta,
            beta: (d as f64 - 1.0) * self.h + 2.0 * theta,
            p,
            epsilon: None,
            k: None,
        }
    }
}

fn name_req(name: &str) -> &'static str {
    if name == "h0" {
        "0 < h0 < 1"
    } else {
        "0 < h < 1"
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldKind {
    Analytic,
    FbsGrid,
    Mollified,
    Shifted,
}

/// A driver `η : [0, T] × R^d → R^M`.
pub trait DriverField: Send + Sync {
    fn space_dim(&self) -> usize;
    fn channels(&self) -> usize;
    fn horizon(&self) -> f64;
    fn kind(&self) -> FieldKind;

    /// Declared regularity, if known.
    fn regularity(&self) -> Option<RegularityParams> {
        None
    }

    /// `η(t, x)` into `out` (length [`channels`](Self::channels)).
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]);

    /// `∂_t η(t, x)` when the field is differentiable in time; returns
    /// `false` otherwise.
    fn time_derivative(&self, _t: f64, _x: &[f64], _out: &mut [f64]) -> bool {
        false
    }

    /// `η(t, x) - η(s, x)`.
    fn increment(&self, s: f64, t: f64, x: &[f64], out: &mut [f64]) {
        let m = self.channels();
        let mut buf = [0.0; 8];
        let mut heap;
        let tmp: &mut [f64] = if m <= 8 {
            &mut buf[..m]
        } else {
            heap = vec![0.0; m];
            &mut heap
        };
        self.eval(t, x, out);
        self.eval(s, x, tmp);
        for (o, v) in out.iter_mut().zip(tmp.iter()) {
            *o -= v;
        }
    }

    /// Scalar convenience for single-channel fields.
    fn eval1(&self, t: f64, x: &[f64]) -> f64 {
        let mut o = [0.0];
        self.eval(t, x, &mut o);
        o[0]
    }
}

impl fmt::Debug for dyn DriverField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DriverField")
            .field("kind", &self.kind())
            .field("d", &self.space_dim())
            .field("m", &self.channels())
            .finish()
    }
}

type FieldFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Field given by a closure `raw(t, x, out)`; evaluation returns
/// `raw(t, x) - raw(0, x)`.
#[derive(Clone)]
pub struct AnalyticField {
    d: usize,
    m: usize,
    horizon: f64,
    raw: Arc<FieldFn>,
    dt: Option<Arc<FieldFn>>,
    params: Option<RegularityParams>,
}

impl AnalyticField {
    pub fn new(
        d: usize,
        m: usize,
        horizon: f64,
        raw: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        AnalyticField { d, m, horizon, raw: Arc::new(raw), dt: None, params: None }
    }

    /// Scalar field `η(t, x) = f(t, x)`.
    pub fn scalar(
        d: usize,
        horizon: f64,
        f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        Self::new(d, 1, horizon, move |t, x, o| o[0] = f(t, x))
    }

    pub fn with_time_derivative(
        mut self,
        dt: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dt = Some(Arc::new(dt));
        self
    }

    pub fn with_regularity(mut self, params: RegularityParams) -> Self {
        self.params = Some(params);
        self
    }
}

impl DriverField for AnalyticField {
    fn space_dim(&self) -> usize {
        self.d
    }
    fn channels(&self) -> usize {
        self.m
    }
    fn horizon(&self) -> f64 {
        self.horizon
    }
    fn kind(&self) -> FieldKind {
        FieldKind::Analytic
    }
    fn regularity(&self) -> Option<RegularityParams> {
        self.params
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.raw)(t, x, out);
        let mut z = vec![0.0; self.m];
        (self.raw)(0.0, x, &mut z);
        for (o, v) in out.iter_mut().zip(z) {
            *o -= v;
        }
    }
    fn time_derivative(&self, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        match &self.dt {
            Some(f) => {
                f(t, x, out);
                true
            }
            None => false,
        }
    }
}

/// Sorted coordinate axes of a spatial lattice; each contains 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceLattice {
    pub axes: Vec<Vec<f64>>,
}

impl SpaceLattice {
    /// Validates, sorts and inserts the origin on every axis if missing.
    pub fn new(mut axes: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::arg("spatial lattice needs at least one axis"));
        }
        for a in axes.iter_mut() {
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidGrid("non-finite lattice coordinate".into()));
            }
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            a.dedup();
            if !a.contains(&0.0) {
                let pos = a.partition_point(|&v| v < 0.0);
                a.insert(pos, 0.0);
            }
        }
        Ok(SpaceLattice { axes })
    }

    /// `d` identical uniform axes on `[lo, hi]` with `points` nodes.
    pub fn uniform(d: usize, lo: f64, hi: f64, points: usize) -> Result<Self> {
        if points < 2 || !(hi > lo) {
            return Err(Error::InvalidGrid(format!("bad axis [{lo}, {hi}] with {points} points")));
        }
        let axis: Vec<f64> = (0..points)
            .map(|i| lo + (hi - lo) * (i as f64 / (points - 1) as f64))
            .collect();
        Self::new(vec![axis; d])
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }
}

/// Axis covariance `½(|a|^{2H} + |b|^{2H} - |a-b|^{2H})`.
pub fn fbm_covariance(a: f64, b: f64, h: f64) -> f64 {
    let e = 2.0 * h;
    0.5 * (a.abs().powf(e) + b.abs().powf(e) - (a - b).abs().powf(e))
}

/// Covariance of the fractional Brownian sheet,
/// `Π_axes ½(|a_i|^{2H_i} + |b_i|^{2H_i} - |a_i-b_i|^{2H_i})` over time and space.
pub fn fbs_covariance(hurst: HurstParams, t: f64, x: &[f64], s: f64, y: &[f64]) -> f64 {
    let mut c = fbm_covariance(t, s, hurst.h0);
    for (a, b) in x.iter().zip(y) {
        c *= fbm_covariance(*a, *b, hurst.h);
    }
    c
}

const MAX_AXIS_POINTS: usize = 4096;
const MAX_LATTICE_POINTS: usize = 1 << 23;
const COVARIANCE_JITTER: f64 = 1e-10;

/// Factorized sampler for fractional Brownian sheets on a fixed lattice.
///
/// The covariance is a product over axes, so each axis is factorized
/// separately (Cholesky of the axis covariance on its non-zero nodes) and a
/// sample is the tensor contraction of the factors with an i.i.d. Gaussian
/// array.
#[derive(Clone, Debug)]
pub struct FbsSampler {
    hurst: HurstParams,
    time: Vec<f64>,
    space: SpaceLattice,
    /// factor per axis (time first), acting on the non-zero nodes
    factors: Vec<DMatrix<f64>>,
    /// per axis, the position of the zero node
    zero_index: Vec<usize>,
}

impl FbsSampler {
    pub fn new(hurst: HurstParams, time: &TimeGrid, space: &SpaceLattice) -> Result<Self> {
        hurst.validate()?;
        let mut axes: Vec<(&[f64], f64)> = vec![(time.points(), hurst.h0)];
        for a in &space.axes {
            axes.push((a, hurst.h));
        }
        let mut total = 1usize;
        for (a, _) in &axes {
            if a.len() > MAX_AXIS_POINTS {
                return Err(Error::OversizeGrid(format!(
                    "axis with {} points exceeds {MAX_AXIS_POINTS}",
                    a.len()
                )));
            }
            total = total.saturating_mul(a.len());
        }
        if total > MAX_LATTICE_POINTS {
            return Err(Error::OversizeGrid(format!(
                "{total} lattice points exceed {MAX_LATTICE_POINTS}"
            )));
        }
        let mut factors = Vec::new();
        let mut zero_index = Vec::new();
        for (k, (a, h)) in axes.iter().enumerate() {
            let z = a.iter().position(|&v| v == 0.0).ok_or(Error::CovarianceFactorization { axis: k })?;
            let nodes: Vec<f64> = a.iter().copied().filter(|&v| v != 0.0).collect();
            let n = nodes.len();
            let cov = DMatrix::from_fn(n, n, |i, j| fbm_covariance(nodes[i], nodes[j], *h));
            let l = crate::linalg::cholesky_jitter(&cov, COVARIANCE_JITTER)
                .ok_or(Error::CovarianceFactorization { axis: k })?;
            factors.push(l);
            zero_index.push(z);
        }
        Ok(FbsSampler {
            hurst,
            time: time.points().to_vec(),
            space: space.clone(),
            factors,
            zero_index,
        })
    }

    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.time.len()];
        s.extend(self.space.axes.iter().map(|a| a.len()));
        s
    }

    /// One realization; draws come from `NormalStream::new(seed, 0)`.
    pub fn sample(&self, seed: u64) -> FbsField {
        let inner: Vec<usize> = self.factors.iter().map(|f| f.nrows()).collect();
        let count: usize = inner.iter().product();
        let mut data = vec![0.0; count];
        NormalStream::new(seed, 0).fill(&mut data);
        for (axis, l) in self.factors.iter().enumerate() {
            data = mode_product(&data, &inner, axis, l);
        }
        // embed into the full lattice, zero on every coordinate hyperplane
        let shape = self.shape();
        let total: usize = shape.iter().product();
        let mut values = vec![0.0; total];
        let mut idx = vec![0usize; shape.len()];
        for (flat, v) in values.iter_mut().enumerate() {
            let mut rem = flat;
            for k in (0..shape.len()).rev() {
                idx[k] = rem % shape[k];
                rem /= shape[k];
            }
            if idx.iter().zip(&self.zero_index).any(|(i, z)| i == z) {
                continue;
            }
            let mut src = 0usize;
            for k in 0..shape.len() {
                let j = if idx[k] > self.zero_index[k] { idx[k] - 1 } else { idx[k] };
                src = src * inner[k] + j;
            }
            *v = data[src];
        }
        FbsField::from_parts(
            FbsMeta {
                hurst: self.hurst,
                time: self.time.clone(),
                space: self.space.axes.clone(),
                seed,
            },
            values,
        )
        .expect("sampler shapes are consistent")
    }
}

/// `out[.., i, ..] = Σ_a l[i, a] · data[.., a, ..]` along `axis`.
fn mode_product(data: &[f64], shape: &[usize], axis: usize, l: &DMatrix<f64>) -> Vec<f64> {
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = vec![0.0; data.len()];
    let mut col = vec![0.0; len];
    for o in 0..outer {
        for r in 0..inner {
            for (a, c) in col.iter_mut().enumerate() {
                *c = data[(o * len + a) * inner + r];
            }
            for i in 0..len {
                let mut acc = 0.0;
                for a in 0..=i {
                    acc += l[(i, a)] * col[a];
                }
                out[(o * len + i) * inner + r] = acc;
            }
        }
    }
    out
}

/// Description of an fBs realization: Hurst indices, lattice and seed.
/// This is the JSON sidecar of exported realizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbsMeta {
    pub hurst: HurstParams,
    pub time: Vec<f64>,
    pub space: Vec<Vec<f64>>,
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FbsSidecar {
    #[serde(flatten)]
    meta: FbsMeta,
    shape: Vec<usize>,
    layout: String,
    format: String,
    data_file: String,
}

/// A fractional Brownian sheet realization on a product lattice, row-major
/// with time as the slowest index.
#[derive(Clone, Debug)]
pub struct FbsField {
    meta: FbsMeta,
    values: Vec<f64>,
    shape: Vec<usize>,
}

/// On-disk encodings of a realization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorFormat {
    Binary,
    Csv,
}

impl FbsField {
    pub fn from_parts(meta: FbsMeta, values: Vec<f64>) -> Result<Self> {
        let mut shape = vec![meta.time.len()];
        shape.extend(meta.space.iter().map(|a| a.len()));
        if shape.iter().product::<usize>() != values.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} values for lattice shape {shape:?}",
                values.len()
            )));
        }
        if meta.time.first() != Some(&0.0) {
            return Err(Error::InvalidGrid("fBs time axis must start at 0".into()));
        }
        Ok(FbsField { meta, values, shape })
    }

    pub fn meta(&self) -> &FbsMeta {
        &self.meta
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Value at lattice indices `(time index, space indices...)`.
    pub fn at(&self, idx: &[usize]) -> f64 {
        let mut flat = 0;
        for (i, n) in idx.iter().zip(&self.shape) {
            flat = flat * n + i;
        }
        self.values[flat]
    }

    /// Writes `<stem>.bin` (or `<stem>.csv`) and the sidecar `<stem>.json`.
    /// Returns the sidecar path.
    pub fn write(&self, dir: &Path, stem: &str, format: TensorFormat) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let data_file = match format {
            TensorFormat::Binary => {
                let f = format!("{stem}.bin");
                io::write_f64_le(&dir.join(&f), &self.values)?;
                f
            }
            TensorFormat::Csv => {
                let d = self.meta.space.len();
                let mut header = vec!["t".to_string()];
                header.extend((1..=d).map(|i| format!("x{i}")));
                header.push("value".into());
                let mut csv = Csv::new(&header);
                let mut idx = vec![0usize; self.shape.len()];
                for (flat, v) in self.values.iter().enumerate() {
                    let mut rem = flat;
                    for k in (0..self.shape.len()).rev() {
                        idx[k] = rem % self.shape[k];
                        rem /= self.shape[k];
                    }
                    let mut row = vec![Field::Num(self.meta.time[idx[0]])];
                    for k in 0..d {
                        row.push(Field::Num(self.meta.space[k][idx[k + 1]]));
                    }
                    row.push(Field::Num(*v));
                    csv.row(&row);
                }
                let f = format!("{stem}.csv");
                csv.write(&dir.join(&f))?;
                f
            }
        };
        let sidecar = FbsSidecar {
            meta: self.meta.clone(),
            shape: self.shape.clone(),
            layout: "row-major, time slowest, then x1..xd".into(),
            format: match format {
                TensorFormat::Binary => "f64-le".into(),
                TensorFormat::Csv => "csv".into(),
            },
            data_file,
        };
        let path = dir.join(format!("{stem}.json"));
        std::fs::write(&path, serde_json::to_string_pretty(&sidecar)?)?;
        Ok(path)
    }

    /// Reads a realization from its sidecar.
    pub fn read(sidecar: &Path) -> Result<Self> {
        let s: FbsSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
        let dir = sidecar.parent().unwrap_or(Path::new("."));
        let data = dir.join(&s.data_file);
        let values = match s.format.as_str() {
            "f64-le" => io::read_f64_le(&data)?,
            "csv" => {
                let text = std::fs::read_to_string(&data)?;
                io::parse_csv(&text)
                    .into_iter()
                    .skip(1)
                    .map(|r| {
                        r.last()
                            .and_then(|v| v.parse::<f64>().ok())
                            .ok_or_else(|| Error::Format("bad CSV value".into()))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            other => return Err(Error::Format(format!("unknown tensor format {other}"))),
        };
        let f = Self::from_parts(s.meta, values)?;
        if f.shape != s.shape {
            return Err(Error::Format("sidecar shape does not match data".into()));
        }
        Ok(f)
    }
}

/// Cell index and weight of `v` on a sorted axis, clamped to the ends.
fn locate(axis: &[f64], v: f64) -> (usize, f64) {
    let n = axis.len();
    if v <= axis[0] {
        return (0, 0.0);
    }
    if v >= axis[n - 1] {
        return (n - 2, 1.0);
    }
    let i = axis.partition_point(|&a| a <= v) - 1;
    (i, (v - axis[i]) / (axis[i + 1] - axis[i]))
}

impl DriverField for FbsField {
    fn space_dim(&self) -> usize {
        self.meta.space.len()
    }
    fn channels(&self) -> usize {
        1
    }
    fn horizon(&self) -> f64 {
        *self.meta.time.last().unwrap()
    }
    fn kind(&self) -> FieldKind {
        FieldKind::FbsGrid
    }
    fn regularity(&self) -> Option<RegularityParams> {
        None
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let d = self.meta.space.len();
        let mut buf = [(0usize, 0.0f64); 8];
        let mut heap;
        let cells: &mut [(usize, f64)] = if d < 8 {
            &mut buf[..d + 1]
        } else {
            heap = vec![(0usize, 0.0f64); d + 1];
            &mut heap
        };
        cells[0] = locate(&self.meta.time, t);
        for k in 0..d {
            cells[k + 1] = locate(&self.meta.space[k], x[k]);
        }
        let corners = 1usize << (d + 1);
        let mut acc = 0.0;
        for c in 0..corners {
            let mut w = 1.0;
            let mut flat = 0usize;
            for (k, &(i, f)) in cells.iter().enumerate() {
                let hi = (c >> k) & 1 == 1;
                w *= if hi { f } else { 1.0 - f };
                flat = flat * self.shape[k] + i + usize::from(hi);
            }
            if w != 0.0 {
                acc += w * self.values[flat];
            }
        }
        out[0] = acc;
    }
}

/// Samples a fractional Brownian sheet on `time × space` with the given seed.
pub fn fbs_generate(
    hurst: HurstParams,
    time: &TimeGrid,
    space: &SpaceLattice,
    seed: u64,
) -> Result<FbsField> {
    Ok(FbsSampler::new(hurst, time, space)?.sample(seed))
}

const MOLLIFIER_NODES: usize = 64;

/// Quadrature of the standard mollifier `ρ(u) ∝ exp(-1/(1-4u²))` on
/// `[-1/2, 1/2]`: composite midpoint nodes with weights for `ρ` and for
/// `ρ'`. The value weights sum to one and the derivative weights satisfy
/// `Σ w'_k (-u_k) = 1`, so affine functions are reproduced exactly.
fn mollifier_rule() -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = MOLLIFIER_NODES;
    let h = 1.0 / n as f64;
    let mut nodes = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    let mut dw = Vec::with_capacity(n);
    for k in 0..n {
        let u = -0.5 + (k as f64 + 0.5) * h;
        let q = 1.0 - 4.0 * u * u;
        let rho = (-1.0 / q).exp();
        // d/du exp(-1/q) = exp(-1/q) · q'/q², q' = -8u
        let drho = rho * (-8.0 * u) / (q * q);
        nodes.push(u);
        w.push(rho * h);
        dw.push(drho * h);
    }
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= z);
    let zd: f64 = -dw.iter().zip(&nodes).map(|(a, u)| a * u).sum::<f64>();
    dw.iter_mut().for_each(|v| *v /= zd);
    (nodes, w, dw)
}

/// Time mollification `η^m(t, x) = ∫ m ρ(m(t-s)) η̄(s, x) ds`, with `η̄`
/// extended by `η(0, x)` before 0 and `η(T, x)` after `T`, then shifted so
/// that `η^m(0, x) = 0`.
#[derive(Clone)]
pub struct MollifiedField {
    inner: Arc<dyn DriverField>,
    m: f64,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    dweights: Vec<f64>,
}

impl MollifiedField {
    pub fn new(inner: Arc<dyn DriverField>, m: f64) -> Result<Self> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::arg(format!("mollification index must be positive, got {m}")));
        }
        let (nodes, weights, dweights) = mollifier_rule();
        Ok(MollifiedField { inner, m, nodes, weights, dweights })
    }

    pub fn index(&self) -> f64 {
        self.m
    }

    fn raw(&self, t: f64, x: &[f64], weights: &[f64], out: &mut [f64]) {
        let big_t = self.inner.horizon();
        let mc = self.inner.channels();
        let mut tmp = vec![0.0; mc];
        out.iter_mut().for_each(|o| *o = 0.0);
        for (u, w) in self.nodes.iter().zip(weights) {
            let s = (t - u / self.m).clamp(0.0, big_t);
            self.inner.eval(s, x, &mut tmp);
            for (o, v) in out.iter_mut().zip(&tmp) {
                *o += w * v;
            }
        }
    }
}

impl DriverField for MollifiedField {
    fn space_dim(&self) -> usize {
        self.inner.space_dim()
    }
    fn channels(&self) -> usize {
        self.inner.channels()
    }
    fn horizon(&self) -> f64 {
        self.inner.horizon()
    }
    fn kind(&self) -> FieldKind {
        FieldKind::Mollified
    }
    fn regularity(&self) -> Option<RegularityParams> {
        self.inner.regularity()
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.raw(t, x, &self.weights, out);
        let mut z = vec![0.0; out.len()];
        self.raw(0.0, x, &self.weights, &mut z);
        for (o, v) in out.iter_mut().zip(z) {
            *o -= v;
        }
    }
    fn increment(&self, s: f64, t: f64, x: &[f64], out: &mut [f64]) {
        // the t = 0 normalization cancels
        self.raw(t, x, &self.weights, out);
        let mut z = vec![0.0; out.len()];
        self.raw(s, x, &self.weights, &mut z);
        for (o, v) in out.iter_mut().zip(z) {
            *o -= v;
        }
    }
    fn time_derivative(&self, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        // ∂_t η^m(t) = ∫ m ρ'(u) η̄(t - u/m) du
        self.raw(t, x, &self.dweights, out);
        out.iter_mut().for_each(|o| *o *= self.m);
        true
    }
}

/// `η_{t0}(s, x) = η(t0 + s, x) - η(t0, x)` on `[0, T - t0]`.
#[derive(Clone)]
pub struct ShiftedField {
    inner: Arc<dyn DriverField>,
    t0: f64,
}

impl ShiftedField {
    pub fn new(inner: Arc<dyn DriverField>, t0: f64) -> Result<Self> {
        if !(t0 >= 0.0 && t0 < inner.horizon()) {
            return Err(Error::arg(format!("shift {t0} outside [0, T)")));
        }
        Ok(ShiftedField { inner, t0 })
    }
}

impl DriverField for ShiftedField {
    fn space_dim(&self) -> usize {
        self.inner.space_dim()
    }
    fn channels(&self) -> usize {
        self.inner.channels()
    }
    fn horizon(&self) -> f64 {
        self.inner.horizon() - self.t0
    }
    fn kind(&self) -> FieldKind {
        FieldKind::Shifted
    }
    fn regularity(&self) -> Option<RegularityParams> {
        self.inner.regularity()
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.increment(self.t0, self.t0 + t, x, out);
    }
    fn time_derivative(&self, t: f64, x: &[f64], out: &mut [f64]) -> bool {
        self.inner.time_derivative(self.t0 + t, x, out)
    }
}

/// Grid lower bounds of the three terms of the driver seminorm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeminormEstimate {
    /// rectangular increments over `|t-s|^τ |x-y|^λ` (times the weight)
    pub mixed: f64,
    /// time increments over `|t-s|^τ` (times the weight)
    pub time: f64,
    /// space increments over `|x-y|^λ` (times the weight)
    pub space: f64,
}

impl SeminormEstimate {
    /// The seminorm itself: the sum of the three suprema.
    pub fn total(&self) -> f64 {
        self.mixed + self.time + self.space
    }

    pub fn max_term(&self) -> f64 {
        self.mixed.max(self.time).max(self.space)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Estimates the seminorm of `field` from all pairs of the evaluation grid
/// (`times` × `points`, each point of length `d`). With `weighted`, the
/// polynomial weights `1 + |x|^β + |y|^β` and `1 + |x|^{β+λ}` are applied.
pub fn seminorm_estimate(
    field: &dyn DriverField,
    tau: f64,
    lambda: f64,
    beta: f64,
    times: &[f64],
    points: &[Vec<f64>],
    weighted: bool,
) -> Result<SeminormEstimate> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::InvalidExponent { value: tau, requirement: "0 < tau <= 1" });
    }
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::InvalidExponent { value: lambda, requirement: "0 < lambda <= 1" });
    }
    if beta < 0.0 {
        return Err(Error::InvalidExponent { value: beta, requirement: "beta >= 0" });
    }
    let m = field.channels();
    let nt = times.len();
    let nx = points.len();
    let mut vals = vec![0.0; nt * nx * m];
    for (i, &t) in times.iter().enumerate() {
        for (j, x) in points.iter().enumerate() {
            let k = (i * nx + j) * m;
            field.eval(t, x, &mut vals[k..k + m]);
        }
    }
    let v = |i: usize, j: usize| &vals[(i * nx + j) * m..(i * nx + j + 1) * m];
    let xnorm: Vec<f64> = points.iter().map(|x| norm(x)).collect();
    let w_pair = |a: usize, b: usize| {
        if weighted {
            1.0 + xnorm[a].powf(beta) + xnorm[b].powf(beta)
        } else {
            1.0
        }
    };
    let w_one = |a: usize| if weighted { 1.0 + xnorm[a].powf(beta + lambda) } else { 1.0 };
    let dx = |a: usize, b: usize| {
        points[a].iter().zip(&points[b]).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
    };
    let rows = crate::par::map_range(nt, |s| {
        let mut mixed = 0.0f64;
        let mut time = 0.0f64;
        let mut space = 0.0f64;
        let mut buf = vec![0.0; m];
        for a in 0..nx {
            for b in a + 1..nx {
                let d = dx(a, b);
                if d == 0.0 {
                    continue;
                }
                for c in 0..m {
                    buf[c] = v(s, b)[c] - v(s, a)[c];
                }
                space = space.max(norm(&buf) / (d.powf(lambda) * w_pair(a, b)));
            }
        }
        for t in s + 1..nt {
            let ht = (times[t] - times[s]).abs();
            if ht == 0.0 {
                continue;
            }
            for a in 0..nx {
                for c in 0..m {
                    buf[c] = v(t, a)[c] - v(s, a)[c];
                }
                time = time.max(norm(&buf) / (ht.powf(tau) * w_one(a)));
                for b in a + 1..nx {
                    let d = dx(a, b);
                    if d == 0.0 {
                        continue;
                    }
                    for c in 0..m {
                        buf[c] = v(s, a)[c] - v(t, a)[c] - v(s, b)[c] + v(t, b)[c];
                    }
                    mixed = mixed.max(norm(&buf) / (ht.powf(tau) * d.powf(lambda) * w_pair(a, b)));
                }
            }
        }
        (mixed, time, space)
    });
    let mut est = SeminormEstimate { mixed: 0.0, time: 0.0, space: 0.0 };
    for (a, b, c) in rows {
        est.mixed = est.mixed.max(a);
        est.time = est.time.max(b);
        est.space = est.space.max(c);
    }
    Ok(est)
}

/// Outcome of the structural checks on exponents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    /// `p > 2`, `τ ∈ (½, 1]`, `λ ∈ (0, 1]`, `τ + λ/p > 1`
    pub bounded: bool,
    /// the same with `p = 2`
    pub bounded_p2: bool,
    /// an `ε ∈ (0,1)` with `β ≥ 0`, `τ + (1-ε)/p > 1`, `λ + β < 2ετ/(1+ε)`
    pub unbounded: bool,
    /// smallest admissible `ε` on the grid `0.01, ..., 0.99`
    pub epsilon_witness: Option<f64>,
    /// Hurst region `H0 + H/2 > 1`, `dH < 2H0 - 1` (only with Hurst input)
    pub hurst_region: Option<bool>,
}

impl AssumptionReport {
    pub fn summary_lines(&self) -> Vec<String> {
        let pf = |b: bool| if b { "PASS" } else { "FAIL" };
        let mut v = vec![
            format!("bounded driver, p > 2: {}", pf(self.bounded)),
            format!("bounded driver, p = 2: {}", pf(self.bounded_p2)),
            format!(
                "unbounded driver: {}{}",
                pf(self.unbounded),
                self.epsilon_witness.map(|e| format!(" (epsilon = {e:.2})")).unwrap_or_default()
            ),
        ];
        if let Some(r) = self.hurst_region {
            v.push(format!("hurst region: {}", pf(r)));
        }
        v
    }
}

fn bounded_condition(tau: f64, lambda: f64, p: f64) -> bool {
    tau > 0.5 && tau <= 1.0 && lambda > 0.0 && lambda <= 1.0 && tau + lambda / p > 1.0
}

/// Checks the exponent conditions for bounded and unbounded drivers, and the
/// Hurst region when `hurst` is given (`d` spatial dimensions).
pub fn assumption_check(
    params: &RegularityParams,
    hurst: Option<(HurstParams, usize)>,
) -> AssumptionReport {
    let RegularityParams { tau, lambda, beta, p, .. } = *params;
    let bounded = p > 2.0 && bounded_condition(tau, lambda, p);
    let bounded_p2 = bounded_condition(tau, lambda, 2.0);
    let admissible = |eps: f64| {
        beta >= 0.0
            && tau + (1.0 - eps) / p > 1.0
            && lambda + beta < 2.0 * eps * tau / (1.0 + eps)
    };
    let epsilon_witness = match params.epsilon {
        Some(e) if e > 0.0 && e < 1.0 && admissible(e) => Some(e),
        _ => (1..100).map(|k| k as f64 / 100.0).find(|&e| admissible(e)),
    };
    let hurst_region = hurst.map(|(h, d)| hurst_region(h, d));
    AssumptionReport {
        bounded,
        bounded_p2,
        unbounded: epsilon_witness.is_some(),
        epsilon_witness,
        hurst_region,
    }
}

/// `H0 + H/2 > 1` and `d·H < 2H0 - 1`.
pub fn hurst_region(h: HurstParams, d: usize) -> bool {
    h.h0 + h.h / 2.0 > 1.0 && (d as f64) * h.h < 2.0 * h.h0 - 1.0
}

/// Exponent condition for the exponential-moment bound of the Young
/// integral with multiplier `χ`: `λ + β < χ` for one equation, `(λ+β)/τ < χ`
/// for systems.
pub fn exponential_moment_condition(params: &RegularityParams, chi: f64, n_equations: usize) -> bool {
    if n_equations <= 1 {
        params.lambda + params.beta < chi
    } else {
        (params.lambda + params.beta) / params.tau < chi
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tx() -> AnalyticField {
        AnalyticField::scalar(1, 1.0, |t, x| t * x[0])
    }

    #[test]
    fn analytic_field_is_normalized_at_zero() {
        let f = AnalyticField::scalar(1, 1.0, |t, x| (t + 1.0) * x[0].cos());
        assert_eq!(f.eval1(0.0, &[0.7]), 0.0);
        assert!((f.eval1(1.0, &[0.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn seminorm_of_t_times_x() {
        let times: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let pts: Vec<Vec<f64>> = (0..=10).map(|i| vec![i as f64 / 10.0]).collect();
        let e = seminorm_estimate(&tx(), 1.0, 1.0, 0.0, &times, &pts, false).unwrap();
        assert!((e.mixed - 1.0).abs() < 1e-12);
        assert!((e.time - 1.0).abs() < 1e-12);
        assert!((e.space - 1.0).abs() < 1e-12);
        assert!((e.max_term() - 1.0).abs() < 1e-12);
        assert!((e.total() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn seminorm_of_pure_time_field() {
        let f = AnalyticField::scalar(1, 1.0, |t, _| t);
        let times: Vec<f64> = (0..=8).map(|i| i as f64 / 8.0).collect();
        let pts: Vec<Vec<f64>> = (0..=4).map(|i| vec![i as f64]).collect();
        let e = seminorm_estimate(&f, 1.0, 0.5, 0.0, &times, &pts, false).unwrap();
        assert_eq!(e.mixed, 0.0);
        assert_eq!(e.space, 0.0);
        assert!((e.time - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seminorm_rejects_bad_exponents() {
        let r = seminorm_estimate(&tx(), 1.2, 1.0, 0.0, &[0.0, 1.0], &[vec![0.0]], false);
        assert!(matches!(r, Err(Error::InvalidExponent { .. })));
    }

    #[test]
    fn assumption_examples() {
        let p = RegularityParams { tau: 0.9, lambda: 1.0, beta: 0.0, p: 2.5, epsilon: None, k: None };
        assert!(assumption_check(&p, None).bounded);
        let bad = RegularityParams { tau: 0.5, ..p };
        assert!(!assumption_check(&bad, None).bounded);
        let h = HurstParams { h0: 0.9, h: 0.3 };
        assert!(hurst_region(h, 1));
        assert!(!hurst_region(HurstParams { h0: 0.6, h: 0.5 }, 1));
        let rep = assumption_check(&p, Some((h, 1)));
        assert!(rep.summary_lines().iter().any(|l| l == "hurst region: PASS"));
    }

    #[test]
    fn unbounded_condition_witness() {
        let p = RegularityParams { tau: 0.95, lambda: 0.2, beta: 0.1, p: 2.2, epsilon: None, k: None };
        let r = assumption_check(&p, None);
        let e = r.epsilon_witness.unwrap();
        assert!(p.tau + (1.0 - e) / p.p > 1.0);
        assert!(p.lambda + p.beta < 2.0 * e * p.tau / (1.0 + e));
    }

    #[test]
    fn mollifier_reproduces_affine_increments_and_slopes() {
        let base: Arc<dyn DriverField> =
            Arc::new(AnalyticField::scalar(1, 1.0, |t, x| t * (1.0 + x[0] * x[0])));
        let mf = MollifiedField::new(base, 16.0).unwrap();
        let x = [0.7];
        let c = 1.0 + 0.49;
        for &(s, t) in &[(0.1, 0.5), (0.2, 0.9), (0.05, 0.95)] {
            let inc = mf.eval1(t, &x) - mf.eval1(s, &x);
            assert!((inc - c * (t - s)).abs() < 1e-8, "{inc}");
            let mut d = [0.0];
            assert!(mf.time_derivative(t, &x, &mut d));
            assert!((d[0] - c).abs() < 1e-8, "{}", d[0]);
        }
        assert_eq!(mf.eval1(0.0, &x), 0.0);
    }

    #[test]
    fn mollifier_sup_error_decays() {
        let base: Arc<dyn DriverField> =
            Arc::new(AnalyticField::scalar(1, 1.0, |t, _| t.sqrt()));
        let mut prev = f64::INFINITY;
        for m in [4.0, 16.0, 64.0] {
            let mf = MollifiedField::new(base.clone(), m).unwrap();
            let err = (0..=200)
                .map(|i| {
                    let t = i as f64 / 200.0;
                    (mf.eval1(t, &[0.0]) - t.sqrt()).abs()
                })
                .fold(0.0, f64::max);
            // Hölder-1/2 field with seminorm 1
            assert!(err <= 1.0 / m.sqrt() + 1e-12, "m={m} err={err}");
            assert!(err < prev);
            prev = err;
        }
    }

    #[test]
    fn shifted_field_restarts_at_zero() {
        let base: Arc<dyn DriverField> = Arc::new(tx());
        let s = ShiftedField::new(base, 0.25).unwrap();
        assert_eq!(s.eval1(0.0, &[2.0]), 0.0);
        assert!((s.eval1(0.5, &[2.0]) - 1.0).abs() < 1e-15);
        assert!((s.horizon() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn fbs_vanishes_on_axes_and_is_reproducible() {
        let tg = TimeGrid::uniform(1.0, 8).unwrap();
        let sl = SpaceLattice::uniform(1, -1.0, 1.0, 9).unwrap();
        let h = HurstParams { h0: 0.8, h: 0.6 };
        let a = fbs_generate(h, &tg, &sl, 42).unwrap();
        let b = fbs_generate(h, &tg, &sl, 42).unwrap();
        assert_eq!(a.values(), b.values());
        for j in 0..9 {
            assert_eq!(a.at(&[0, j]), 0.0);
        }
        for i in 0..9 {
            assert_eq!(a.at(&[i, 4]), 0.0);
        }
        assert_eq!(a.eval1(0.37, &[0.0]), 0.0);
        assert_eq!(a.eval1(0.0, &[0.3]), 0.0);
    }

    #[test]
    fn fbs_interpolation_hits_nodes() {
        let tg = TimeGrid::uniform(1.0, 4).unwrap();
        let sl = SpaceLattice::new(vec![vec![-1.0, 0.0, 0.5, 1.0], vec![0.0, 1.0]]).unwrap();
        let f = fbs_generate(HurstParams { h0: 0.7, h: 0.5 }, &tg, &sl, 1).unwrap();
        assert_eq!(f.eval1(0.5, &[0.5, 1.0]), f.at(&[2, 2, 1]));
        let mid = f.eval1(0.625, &[0.5, 1.0]);
        let expect = 0.5 * (f.at(&[2, 2, 1]) + f.at(&[3, 2, 1]));
        assert!((mid - expect).abs() < 1e-14);
    }

    #[test]
    fn fbs_export_round_trip() {
        let dir = std::env::temp_dir().join(format!("ybsde-fbs-{}", std::process::id()));
        let tg = TimeGrid::uniform(1.0, 4).unwrap();
        let sl = SpaceLattice::uniform(1, -1.0, 1.0, 5).unwrap();
        let f = fbs_generate(HurstParams { h0: 0.8, h: 0.5 }, &tg, &sl, 3).unwrap();
        for fmt in [TensorFormat::Binary, TensorFormat::Csv] {
            let side = f.write(&dir, "sheet", fmt).unwrap();
            let g = FbsField::read(&side).unwrap();
            assert_eq!(g.values(), f.values());
            assert_eq!(g.meta(), f.meta());
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn fbs_rejects_bad_input() {
        let tg = TimeGrid::uniform(1.0, 4).unwrap();
        let sl = SpaceLattice::uniform(1, -1.0, 1.0, 5).unwrap();
        assert!(fbs_generate(HurstParams { h0: 1.2, h: 0.5 }, &tg, &sl, 0).is_err());
        let big = SpaceLattice::uniform(1, -1.0, 1.0, 5000).unwrap();
        assert!(matches!(
            fbs_generate(HurstParams { h0: 0.8, h: 0.5 }, &tg, &big, 0),
            Err(Error::OversizeGrid(_))
        ));
    }
}

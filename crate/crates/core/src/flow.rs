//! Linear Young flows
//! `Γ_s^t = I + Σ_i ∫_t^s (α^i_r)^⊤ Γ_r^t η_i(dr, X_r)` for `s >= t`.
//!
//! The flow is built by the left-point product
//! `Γ_{j+1} = (I + Σ_i (α^i_{t_j})^⊤ δη^i_j) Γ_j`, with
//! `δη^i_j = η_i(t_{j+1}, X_{t_j}) - η_i(t_j, X_{t_j})`, so
//! `Γ_T^t = Γ_T^s Γ_s^t` holds exactly on the grid up to rounding.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::driver::DriverField;
use crate::paths::SamplePath;
use crate::sewing;
use crate::{Error, Result};

/// Flow matrices `Γ_s^t` for a fixed start `t` and all later grid points
/// `s`, each `n × n` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowMatrix {
    pub n: usize,
    /// grid index of the start time
    pub base: usize,
    /// times `s` (start time first)
    pub times: Vec<f64>,
    mats: Vec<f64>,
}

impl FlowMatrix {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// `Γ_{times[k]}^{t}` as a row-major slice.
    pub fn slice(&self, k: usize) -> &[f64] {
        let q = self.n * self.n;
        &self.mats[k * q..(k + 1) * q]
    }

    pub fn matrix(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.n, self.slice(k))
    }

    pub fn last(&self) -> DMatrix<f64> {
        self.matrix(self.len() - 1)
    }

    /// Index of the time closest to `s`.
    pub fn index_of(&self, s: f64) -> Option<usize> {
        let tol = 1e-12 * self.times.last().copied().unwrap_or(1.0).max(1.0);
        self.times.iter().position(|&t| (t - s).abs() <= tol)
    }
}

/// `c = a · b` for row-major `n × n` slices.
pub(crate) fn matmul(n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for k in 0..n {
                acc += a[i * n + k] * b[k * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

/// `I + Σ_i (α^i)^⊤ δη^i` into `out` (`alpha` is `M × n × n`).
pub(crate) fn euler_factor(n: usize, alpha: &[f64], deta: &[f64], sign: f64, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..n {
        out[i * n + i] = 1.0;
    }
    for (c, de) in deta.iter().enumerate() {
        let a = &alpha[c * n * n..(c + 1) * n * n];
        for r in 0..n {
            for k in 0..n {
                // transpose: (α^⊤)_{rk} = α_{kr}
                out[r * n + k] += sign * a[k * n + r] * de;
            }
        }
    }
}

fn check_inputs(alpha: &SamplePath, x: &SamplePath, field: &dyn DriverField) -> Result<usize> {
    let m = field.channels();
    if x.dim() != field.space_dim() {
        return Err(Error::DimensionMismatch("path and field dimensions differ".into()));
    }
    if alpha.grid() != x.grid() {
        return Err(Error::arg("coefficient and path must share a grid"));
    }
    let q = alpha.dim() / m;
    let n = (q as f64).sqrt().round() as usize;
    if n == 0 || n * n * m != alpha.dim() {
        return Err(Error::DimensionMismatch(format!(
            "coefficient dimension {} is not M·N² with M = {m}",
            alpha.dim()
        )));
    }
    Ok(n)
}

fn indices(len: usize, base: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 || base >= len - 1 || (len - 1 - base) % stride != 0 {
        return Err(Error::arg(format!(
            "start index {base} with stride {stride} does not reach the end of {len} points"
        )));
    }
    Ok((base..len).step_by(stride).collect())
}

/// Euler flow from grid index `base` using every `stride`-th grid point.
/// `alpha` has dimension `M·N·N` (channel-major, each `N × N` row-major).
pub fn solve_linear_yode(
    alpha: &SamplePath,
    x: &SamplePath,
    field: &dyn DriverField,
    base: usize,
    stride: usize,
) -> Result<FlowMatrix> {
    let n = check_inputs(alpha, x, field)?;
    let m = field.channels();
    let idx = indices(x.len(), base, stride)?;
    let g = x.grid().points();
    let q = n * n;
    let mut mats = vec![0.0; idx.len() * q];
    for i in 0..n {
        mats[i * n + i] = 1.0;
    }
    let mut deta = vec![0.0; m];
    let mut e = vec![0.0; q];
    for (k, w) in idx.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        field.increment(g[a], g[b], x.value(a), &mut deta);
        euler_factor(n, alpha.value(a), &deta, 1.0, &mut e);
        let (prev, next) = mats.split_at_mut((k + 1) * q);
        matmul(n, &e, &prev[k * q..], &mut next[..q]);
        if next[..q].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { path: 0, step: b });
        }
    }
    Ok(FlowMatrix { n, base, times: idx.iter().map(|&i| g[i]).collect(), mats })
}

/// Inverse flow by the right-multiplicative scheme
/// `Γ^{-1}_{j+1} = Γ^{-1}_j (I - Σ_i (α^i_{t_j})^⊤ δη^i_j)`.
pub fn solve_inverse_linear_yode(
    alpha: &SamplePath,
    x: &SamplePath,
    field: &dyn DriverField,
    base: usize,
    stride: usize,
) -> Result<FlowMatrix> {
    let n = check_inputs(alpha, x, field)?;
    let m = field.channels();
    let idx = indices(x.len(), base, stride)?;
    let g = x.grid().points();
    let q = n * n;
    let mut mats = vec![0.0; idx.len() * q];
    for i in 0..n {
        mats[i * n + i] = 1.0;
    }
    let mut deta = vec![0.0; m];
    let mut e = vec![0.0; q];
    for (k, w) in idx.windows(2).enumerate() {
        let (a, b) = (w[0], w[1]);
        field.increment(g[a], g[b], x.value(a), &mut deta);
        euler_factor(n, alpha.value(a), &deta, -1.0, &mut e);
        let (prev, next) = mats.split_at_mut((k + 1) * q);
        matmul(n, &prev[k * q..], &e, &mut next[..q]);
    }
    Ok(FlowMatrix { n, base, times: idx.iter().map(|&i| g[i]).collect(), mats })
}

const MAX_CONDITION: f64 = 1e12;

/// Pointwise matrix inverse of a flow. Fails if some `Γ` has condition
/// number above `1e12`.
pub fn inverse_flow(flow: &FlowMatrix) -> Result<FlowMatrix> {
    let n = flow.n;
    let mut mats = Vec::with_capacity(flow.mats.len());
    for k in 0..flow.len() {
        let m = flow.matrix(k);
        let cond = crate::linalg::condition_number(&m);
        if !(cond <= MAX_CONDITION) {
            return Err(Error::SingularFlow { index: flow.base + k, condition: cond });
        }
        let inv = m.try_inverse().ok_or(Error::SingularFlow { index: flow.base + k, condition: cond })?;
        for r in 0..n {
            for c in 0..n {
                mats.push(inv[(r, c)]);
            }
        }
    }
    Ok(FlowMatrix { n, base: flow.base, times: flow.times.clone(), mats })
}

/// Scalar exponential formula
/// `exp(Σ_i ∫_t^s α^i_r η_i(dr, X_r))` on the same (strided) points as
/// [`solve_linear_yode`], the exponent computed by the sewing module.
pub fn exp_formula_1d(
    alpha: &SamplePath,
    x: &SamplePath,
    field: &dyn DriverField,
    base: usize,
    stride: usize,
) -> Result<Vec<f64>> {
    if alpha.dim() != field.channels() {
        return Err(Error::DimensionMismatch("scalar flow needs one coefficient per channel".into()));
    }
    let idx = indices(x.len(), base, stride)?;
    // restrict both paths to the points base, base + stride, ...
    let pick = |p: &SamplePath| -> Result<SamplePath> {
        let t0 = p.grid().t(base);
        let g = crate::paths::TimeGrid::new(idx.iter().map(|&i| p.grid().t(i) - t0).collect())?;
        let mut v = Vec::with_capacity(idx.len() * p.dim());
        for &i in &idx {
            v.extend_from_slice(p.value(i));
        }
        SamplePath::new(g, p.dim(), v)
    };
    let (xs, al) = (pick(x)?, pick(alpha)?);
    let t0 = x.grid().t(base);
    let shifted = ShiftedTime { inner: field, t0 };
    let r = sewing::nonlinear_young_integral(&al, &xs, &shifted, None, 0)?;
    Ok(r.cumulative.iter().map(|v| v.exp()).collect())
}

/// Field seen from a later origin without renormalization (increments are
/// all that the integral uses).
struct ShiftedTime<'a> {
    inner: &'a dyn DriverField,
    t0: f64,
}

impl DriverField for ShiftedTime<'_> {
    fn space_dim(&self) -> usize {
        self.inner.space_dim()
    }
    fn channels(&self) -> usize {
        self.inner.channels()
    }
    fn horizon(&self) -> f64 {
        self.inner.horizon() - self.t0
    }
    fn kind(&self) -> crate::driver::FieldKind {
        crate::driver::FieldKind::Shifted
    }
    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.inner.eval(self.t0 + t, x, out)
    }
}

//! JSON experiment configuration.
//!
//! A config is one JSON object. Keys named `_comment` (at any depth) are
//! dropped before parsing; every other unknown key is an error.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use young_bsde::bsde::{PicardOptions, RegressionBasis};
use young_bsde::driver::{
    AnalyticField, DriverField, FbsField, HurstParams, MollifiedField, RegularityParams, SpaceLattice,
};
use young_bsde::paths::TimeGrid;

use crate::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Integrate,
    Flow,
    LinearBsde,
    NonlinearBsde,
    Localize,
    Compare,
    PdeTable,
    CrossCheck,
    LocalizationError,
    Neumann,
    FbsGenerate,
    Assumptions,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Integrate => "integrate",
            Experiment::Flow => "flow",
            Experiment::LinearBsde => "linear-bsde",
            Experiment::NonlinearBsde => "nonlinear-bsde",
            Experiment::Localize => "localize",
            Experiment::Compare => "compare",
            Experiment::PdeTable => "pde-table",
            Experiment::CrossCheck => "cross-check",
            Experiment::LocalizationError => "localization-error",
            Experiment::Neumann => "neumann",
            Experiment::FbsGenerate => "fbs-generate",
            Experiment::Assumptions => "assumptions",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub driver: Option<DriverSection>,
    #[serde(default)]
    pub forward: Option<ForwardSection>,
    #[serde(default)]
    pub sewing: Option<SewingSection>,
    #[serde(default)]
    pub flow: Option<FlowSection>,
    #[serde(default)]
    pub bsde: Option<BsdeSection>,
    #[serde(default)]
    pub pde: Option<PdeSection>,
    #[serde(default)]
    pub basis: Option<RegressionBasis>,
    #[serde(default)]
    pub assumptions: AssumptionsSection,
    #[serde(default)]
    pub tolerances: Tolerances,
}

/// Exponents for the assumption checks: given directly, or derived from the
/// sheet's Hurst indices losing `theta`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssumptionsSection {
    #[serde(default = "default_theta")]
    pub theta: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub regularity: Option<RegularityParams>,
}

fn default_theta() -> f64 {
    0.01
}

fn default_p() -> f64 {
    2.5
}

impl Default for AssumptionsSection {
    fn default() -> Self {
        AssumptionsSection { theta: default_theta(), p: default_p(), regularity: None }
    }
}

/// Driver field. `horizon` comes from the forward or pde section.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DriverSection {
    /// fractional Brownian sheet sampled on a grid, optionally mollified in time
    Fbs {
        h0: f64,
        h: f64,
        #[serde(default = "one")]
        d: usize,
        time_cells: usize,
        lo: f64,
        hi: f64,
        points: usize,
        #[serde(default)]
        seed: Option<u64>,
        #[serde(default)]
        mollify: Option<f64>,
    },
    /// `η(t, x) = sin(x₁) t^exponent`
    SinPower { exponent: f64 },
    /// `η(t, x) = t`
    Clock,
    Zero,
}

fn one() -> usize {
    1
}

impl DriverSection {
    pub fn hurst(&self) -> Option<(HurstParams, usize)> {
        match self {
            DriverSection::Fbs { h0, h, d, .. } => Some((HurstParams { h0: *h0, h: *h }, *d)),
            _ => None,
        }
    }

    /// Raw sheet sample, before mollification.
    pub fn sample(&self, horizon: f64, seed: u64) -> young_bsde::Result<Option<FbsField>> {
        match self {
            DriverSection::Fbs { h0, h, d, time_cells, lo, hi, points, seed: own, .. } => {
                let grid = TimeGrid::uniform(horizon, *time_cells)?;
                let lattice = SpaceLattice::uniform(*d, *lo, *hi, *points)?;
                let f = young_bsde::driver::fbs_generate(HurstParams { h0: *h0, h: *h }, &grid, &lattice, own.unwrap_or(seed))?;
                Ok(Some(f))
            }
            _ => Ok(None),
        }
    }

    /// The field on `[0, horizon]` in `d` space dimensions; `mollify`
    /// overrides the configured index.
    pub fn build(&self, d: usize, horizon: f64, seed: u64, mollify: Option<f64>) -> young_bsde::Result<Arc<dyn DriverField>> {
        Ok(match self {
            DriverSection::Fbs { mollify: own, .. } => {
                let raw: Arc<dyn DriverField> = Arc::new(self.sample(horizon, seed)?.expect("sheet"));
                match mollify.or(*own) {
                    Some(m) => Arc::new(MollifiedField::new(raw, m)?),
                    None => raw,
                }
            }
            DriverSection::SinPower { exponent } => {
                let a = *exponent;
                Arc::new(AnalyticField::scalar(d, horizon, move |t, x| x[0].sin() * t.powf(a)))
            }
            DriverSection::Clock => Arc::new(
                AnalyticField::scalar(d, horizon, |t, _| t).with_time_derivative(|_, _, o| o[0] = 1.0),
            ),
            DriverSection::Zero => Arc::new(
                AnalyticField::scalar(d, horizon, |_, _| 0.0).with_time_derivative(|_, _, o| o[0] = 0.0),
            ),
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardSection {
    #[serde(default = "origin")]
    pub x0: Vec<f64>,
    #[serde(default = "unit")]
    pub sigma: f64,
    #[serde(default = "unit")]
    pub horizon: f64,
    pub paths: usize,
    pub steps: usize,
}

fn origin() -> Vec<f64> {
    vec![0.0]
}

fn unit() -> f64 {
    1.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Battery {
    /// time-differentiable drivers against quadrature
    Smooth,
    /// dyadic Cauchy increments for the configured driver along Brownian motion
    Rough,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SewingSection {
    pub battery: Battery,
    pub levels: u32,
    #[serde(default = "one")]
    pub base_cells: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub cells: usize,
    /// constant coefficient, `N × N × M` row-major
    pub alpha: Vec<f64>,
    /// strides for the scalar exponential formula (scalar drivers only)
    #[serde(default)]
    pub strides: Vec<usize>,
}

/// Generators `f(t, x, y, z)`, scalar `y`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GeneratorSection {
    Zero,
    /// `a cos(x₁) + b t + λ y + c z₁`
    Affine {
        #[serde(default)]
        a: f64,
        #[serde(default)]
        b: f64,
        #[serde(default)]
        lambda: f64,
        #[serde(default)]
        c: f64,
    },
    /// `scale · √|x₁| · sin(y)`
    SqrtSin { scale: f64 },
    /// `scale · sin(y + x₁) + c z₁`
    Sin {
        scale: f64,
        #[serde(default)]
        c: f64,
    },
}

impl GeneratorSection {
    pub fn function(&self) -> impl Fn(f64, &[f64], &[f64], &[f64], &mut [f64]) + Send + Sync + 'static {
        let g = self.clone();
        move |t, x, y, z, o| {
            o[0] = match g {
                GeneratorSection::Zero => 0.0,
                GeneratorSection::Affine { a, b, lambda, c } => a * x[0].cos() + b * t + lambda * y[0] + c * z[0],
                GeneratorSection::SqrtSin { scale } => scale * x[0].abs().sqrt() * y[0].sin(),
                GeneratorSection::Sin { scale, c } => scale * (y[0] + x[0]).sin() + c * z[0],
            }
        }
    }
}

/// Couplings `g(y)`, one channel.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum CouplingSection {
    Zero,
    Linear { alpha: f64 },
    Sin { scale: f64 },
    Cos { scale: f64 },
}

impl CouplingSection {
    pub fn function(self) -> impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static {
        move |y, o| {
            o[0] = match self {
                CouplingSection::Zero => 0.0,
                CouplingSection::Linear { alpha } => alpha * y[0],
                CouplingSection::Sin { scale } => scale * y[0].sin(),
                CouplingSection::Cos { scale } => scale * y[0].cos(),
            }
        }
    }
}

/// Terminal and boundary data `h(x)`.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TerminalSection {
    Constant { value: f64 },
    /// `cos(freq · x₁)`
    Cos {
        #[serde(default = "unit")]
        freq: f64,
    },
    Tanh,
    /// `exp(-|x|²)`
    Bump,
    /// `1 / (1 + |x|²)`
    Lorentz,
    /// `min(|x₁|, cap)`
    AbsCapped { cap: f64 },
    /// `x₁²`
    Square,
}

impl TerminalSection {
    pub fn function(self) -> impl Fn(&[f64]) -> f64 + Send + Sync + Copy + 'static {
        move |x: &[f64]| {
            let r2: f64 = x.iter().map(|v| v * v).sum();
            match self {
                TerminalSection::Constant { value } => value,
                TerminalSection::Cos { freq } => (freq * x[0]).cos(),
                TerminalSection::Tanh => x[0].tanh(),
                TerminalSection::Bump => (-r2).exp(),
                TerminalSection::Lorentz => 1.0 / (1.0 + r2),
                TerminalSection::AbsCapped { cap } => x[0].abs().min(cap),
                TerminalSection::Square => x[0] * x[0],
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BsdeSection {
    #[serde(default = "zero_generator")]
    pub generator: GeneratorSection,
    #[serde(default = "zero_coupling")]
    pub coupling: CouplingSection,
    pub terminal: TerminalSection,
    #[serde(default)]
    pub picard: PicardOptions,
    /// localization radii
    #[serde(default)]
    pub radii: Vec<f64>,
    /// terminal shift of the upper solution in `compare`
    #[serde(default)]
    pub shift: Option<f64>,
    #[serde(default)]
    pub diagnostics: Option<DiagnosticsSection>,
}

fn zero_generator() -> GeneratorSection {
    GeneratorSection::Zero
}

fn zero_coupling() -> CouplingSection {
    CouplingSection::Zero
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub p: f64,
    pub k: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub paths: usize,
    pub steps: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PdeSection {
    #[serde(default = "one")]
    pub d: usize,
    #[serde(default = "unit")]
    pub horizon: f64,
    #[serde(default = "unit")]
    pub sigma: f64,
    pub terminal: TerminalSection,
    #[serde(default = "zero_generator")]
    pub generator: GeneratorSection,
    #[serde(default = "zero_coupling")]
    pub coupling: CouplingSection,
    /// box half-width
    #[serde(default)]
    pub n: Option<f64>,
    #[serde(default)]
    pub time_steps: Option<usize>,
    #[serde(default)]
    pub dx: Option<f64>,
    /// evaluation points (first coordinate; others 0)
    #[serde(default)]
    pub points: Vec<f64>,
    #[serde(default)]
    pub n_list: Vec<f64>,
    #[serde(default)]
    pub m_list: Vec<f64>,
    #[serde(default)]
    pub n_max: Option<f64>,
    #[serde(default)]
    pub mc: Option<McSection>,
    /// reflecting interval `[a, b]` and start `(t, x)` for `neumann`
    #[serde(default)]
    pub interval: Option<[f64; 2]>,
    #[serde(default)]
    pub start: Option<[f64; 2]>,
}

/// Pass/fail thresholds written to the summary.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tolerances {
    #[serde(default = "smooth_tol")]
    pub smooth: f64,
    #[serde(default = "cocycle_tol")]
    pub cocycle: f64,
    #[serde(default = "inverse_tol")]
    pub inverse: f64,
    #[serde(default = "ordered_tol")]
    pub ordered: f64,
    #[serde(default = "table_tol")]
    pub table: f64,
    /// standard errors allowed between Monte Carlo and an oracle
    #[serde(default = "se_tol")]
    pub standard_errors: f64,
}

fn smooth_tol() -> f64 {
    1e-6
}
fn cocycle_tol() -> f64 {
    1e-12
}
fn inverse_tol() -> f64 {
    1e-10
}
fn ordered_tol() -> f64 {
    1e-2
}
fn table_tol() -> f64 {
    1e-2
}
fn se_tol() -> f64 {
    3.0
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            smooth: smooth_tol(),
            cocycle: cocycle_tol(),
            inverse: inverse_tol(),
            ordered: ordered_tol(),
            table: table_tol(),
            standard_errors: se_tol(),
        }
    }
}

/// Removes `_comment` keys at every depth.
pub fn strip_comments(v: &mut Value) {
    match v {
        Value::Object(map) => {
            map.remove("_comment");
            map.values_mut().for_each(strip_comments);
        }
        Value::Array(items) => items.iter_mut().for_each(strip_comments),
        _ => {}
    }
}

/// Parses a config document, reporting the path of the offending key.
pub fn parse(text: &str) -> Result<(ExperimentConfig, Value), CliError> {
    let raw: Value = serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid JSON: {e}")))?;
    let mut v = raw.clone();
    strip_comments(&mut v);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(v).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." || path.is_empty() {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("{path}: {inner}"))
        }
    })?;
    Ok((cfg, raw))
}

pub fn load(path: &Path) -> Result<(ExperimentConfig, Value), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

/// A section that the experiment cannot run without.
pub fn need<'a, T>(section: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
    section.as_ref().ok_or_else(|| CliError::Config(format!("missing required key `{key}`")))
}

/// Checks everything `run` would need, without running.
pub fn validate(cfg: &ExperimentConfig) -> Result<(), CliError> {
    use Experiment::*;
    let e = cfg.experiment;
    let req = |ok: bool, key: &str| if ok { Ok(()) } else { Err(CliError::Config(format!("missing required key `{key}`"))) };
    match e {
        Integrate => {
            let s = need(&cfg.sewing, "sewing")?;
            if s.battery == Battery::Rough {
                need(&cfg.driver, "driver")?;
            }
        }
        Flow => {
            need(&cfg.flow, "flow")?;
            need(&cfg.driver, "driver")?;
        }
        LinearBsde | NonlinearBsde | Localize | Compare => {
            need(&cfg.driver, "driver")?;
            need(&cfg.forward, "forward")?;
            let b = need(&cfg.bsde, "bsde")?;
            if e == Localize {
                req(!b.radii.is_empty(), "bsde.radii")?;
            }
            if e == Compare {
                req(b.shift.is_some(), "bsde.shift")?;
            }
            if e == LinearBsde {
                match (&b.generator, b.coupling) {
                    (GeneratorSection::Zero | GeneratorSection::Affine { lambda: 0.0, .. }, CouplingSection::Zero | CouplingSection::Linear { .. }) => {}
                    _ => {
                        return Err(CliError::Config(
                            "bsde: linear-bsde needs an affine generator without y term and a linear coupling".into(),
                        ))
                    }
                }
            }
        }
        PdeTable | CrossCheck | LocalizationError => {
            let p = need(&cfg.pde, "pde")?;
            req(p.time_steps.is_some(), "pde.time_steps")?;
            req(p.dx.is_some(), "pde.dx")?;
            req(!p.points.is_empty(), "pde.points")?;
            match e {
                PdeTable => {
                    need(&cfg.driver, "driver")?;
                    req(!p.n_list.is_empty(), "pde.n_list")?;
                    req(!p.m_list.is_empty(), "pde.m_list")?;
                }
                CrossCheck => {
                    need(&cfg.driver, "driver")?;
                    req(p.n.is_some(), "pde.n")?;
                    need(&p.mc, "pde.mc")?;
                }
                _ => {
                    req(p.n_list.len() >= 2, "pde.n_list")?;
                    req(p.n_max.is_some(), "pde.n_max")?;
                }
            }
        }
        Neumann => {
            need(&cfg.driver, "driver")?;
            let p = need(&cfg.pde, "pde")?;
            need(&p.mc, "pde.mc")?;
            req(p.interval.is_some(), "pde.interval")?;
            req(p.start.is_some(), "pde.start")?;
        }
        FbsGenerate => {
            let d = need(&cfg.driver, "driver")?;
            req(d.hurst().is_some(), "driver.h0")?;
        }
        Assumptions => {
            let hurst = cfg.driver.as_ref().and_then(|d| d.hurst());
            req(hurst.is_some() || cfg.assumptions.regularity.is_some(), "driver")?;
        }
    }
    Ok(())
}

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("misaligned interval [{start}, {end}]: endpoints must be grid points")]
    MisalignedInterval { start: f64, end: f64 },

    #[error("invalid exponent {value} (need {requirement})")]
    InvalidExponent { value: f64, requirement: &'static str },

    #[error("covariance factorization failed on axis {axis}")]
    CovarianceFactorization { axis: usize },

    #[error("oversize grid: {0}")]
    OversizeGrid(String),

    #[error("non-finite germ value on [{s}, {t}]")]
    NonFiniteGerm { s: f64, t: f64 },

    #[error("non-finite value at path {path}, step {step}")]
    NonFinite { path: usize, step: usize },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("singular flow at grid index {index} (condition number {condition:.3e})")]
    SingularFlow { index: usize, condition: f64 },

    #[error("declared bound {bound} violated at path {path}, step {step} (observed {observed})")]
    BoundViolated { bound: f64, observed: f64, path: usize, step: usize },

    #[error("regression normal equations singular at step {step}")]
    SingularRegression { step: usize },

    #[error("no contraction in Picard iteration at step {step}")]
    NoContraction { step: usize },

    #[error("inputs not ordered: {0}")]
    InputsNotOrdered(String),

    #[error("ellipticity violated at x = {x:?}: smallest eigenvalue {eigenvalue} < {nu}")]
    Ellipticity { x: Vec<f64>, eigenvalue: f64, nu: f64 },

    #[error("explicit scheme unstable: dt = {dt} exceeds limit, use dt <= {suggested}")]
    Cfl { dt: f64, suggested: f64 },

    #[error("linear solver did not converge ({0})")]
    LinearSolver(String),

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    /// True for failures of the numerics (as opposed to bad input).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::CovarianceFactorization { .. }
                | Error::NonFiniteGerm { .. }
                | Error::NonFinite { .. }
                | Error::SingularFlow { .. }
                | Error::SingularRegression { .. }
                | Error::NoContraction { .. }
                | Error::LinearSolver(_)
                | Error::BoundViolated { .. }
        )
    }
}

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("step count {requested} exceeds the configured cap {cap}")]
    StepOverflow { requested: usize, cap: usize },
    #[error("geodesic did not leave M before t = {t_max}")]
    Trapped { t_max: f64 },
    #[error("ray from the anchor point never enters M")]
    MissesM,
    #[error("Riccati linearization degenerate: |det Z| = {det:e} at t = {t}")]
    DegenerateZ { det: f64, t: f64 },
    #[error("principal amplitude underflow: |u0| = {value:e} at t = {t}")]
    AmplitudeUnderflow { value: f64, t: f64 },
    #[error("beam support at t = T reaches M (distance {distance})")]
    SupportTouchesM { distance: f64 },
    #[error("test-function segment crosses the boundary more than once")]
    MultiCross,
    #[error("test direction too close to tangential: (nu, eta) = {inwardness}")]
    Grazing { inwardness: f64 },
    #[error("pass time s = {s} leaves no room for the time cutoff in (1, T)")]
    PassTimeOutOfRange { s: f64 },
    #[error("wave solver became unstable at step {step}")]
    Unstable { step: usize },
    #[error("CFL violated: dt = {dt} > {limit}")]
    Cfl { dt: f64, limit: f64 },
    #[error("snapshot window touches the boundary lattice")]
    SupportLeak,
    #[error("white-noise covariance check failed: {0}")]
    CovarianceFail(String),
    #[error("lemma check failed: {0}")]
    LemmaFail(String),
    #[error("epsilon sequence inconsistent: {0}")]
    Inconsistent(String),
    #[error("no detection for anchor {0}")]
    NoDetection(usize),
    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;

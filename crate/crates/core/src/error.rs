use thiserror::Error;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid exponent {0}: must lie in [1, inf]")]
    InvalidExponent(f64),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid measure: {0}")]
    InvalidMeasure(String),

    #[error("transform produced a non-finite value at point {index}")]
    TransformDomain { index: usize },

    #[error("support sizes {n}x{m} exceed the exact-solver cap of {cap} entries; use the entropic solver")]
    SizeCapExceeded { n: usize, m: usize, cap: usize },

    #[error("no convergence after {iterations} iterations (marginal error {marginal_error:.3e}, last dual change {last_change:.3e})")]
    ConvergenceFailure {
        iterations: usize,
        marginal_error: f64,
        last_change: f64,
    },

    #[error("time step {requested:.3e} violates the stability restriction; use at most {suggested:.3e}")]
    StepSize { requested: f64, suggested: f64 },

    #[error("invalid coefficients: {0}")]
    InvalidCoefficients(String),

    #[error("trajectory {trajectory} blew up at t = {time}")]
    Blowup { trajectory: usize, time: f64 },

    #[error("lambda selection failed: sup |grad phi| = {achieved:.3e} still above target at lambda = {lambda}")]
    SelectionFailure { lambda: f64, achieved: f64 },

    #[error("fixed-point inverse did not contract after {iterations} iterations (step {residual:.3e})")]
    ContractionFailure { iterations: usize, residual: f64 },

    #[error("missing ingredient `{0}`")]
    IncompleteIngredients(String),

    #[error("Osgood weight hypothesis violated: worst sampled ratio {ratio:.4} > 1")]
    HypothesisViolation { ratio: f64 },

    #[error("integrability exponents violate the LPS condition: {0}")]
    LpsViolation(String),

    #[error("alpha = {alpha} must lie in (2, {upper})")]
    InvalidAlpha { alpha: f64, upper: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

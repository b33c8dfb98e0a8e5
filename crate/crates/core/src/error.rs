use thiserror::Error;

/// Errors raised by model construction, integration and inference.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("state space too large: {states} joint states exceeds cap {cap}")]
    StateSpaceTooLarge { states: u128, cap: usize },

    #[error("index out of range: {0}")]
    OutOfRange(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid evidence: {0}")]
    InvalidEvidence(String),

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("stiffness/step-underflow at t = {t}: step {step:e} below minimum")]
    StepUnderflow { t: f64, step: f64 },

    #[error("integration produced a non-finite value at t = {t}")]
    NonFinite { t: f64 },

    #[error("integration exceeded {steps} steps at t = {t}")]
    TooManySteps { t: f64, steps: usize },

    #[error("t = {t} outside solution span [{start}, {end}]")]
    OutsideSpan { t: f64, start: f64, end: f64 },

    #[error("quadrature failed to converge; worst subinterval [{a}, {b}] with error {err:e}")]
    QuadratureFailure { a: f64, b: f64, err: f64 },

    #[error("degenerate density for component {component}, state {state} at t = {t}")]
    DegenerateDensity { component: usize, state: usize, t: f64 },

    #[error("evidence has zero probability under the model")]
    ZeroLikelihood,
}

pub type Result<T> = std::result::Result<T, Error>;

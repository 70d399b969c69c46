use crate::prelude::*;
use core::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    Domain(String),
    DimensionMismatch { expected: usize, found: usize },
    InvalidInput(String),
    NewtonDivergence { iterations: usize, residual: f64 },
    SingularJacobian,
    Singular(String),
    Resonance { divisor: f64 },
    Numerical(String),
    StepFailure { t: f64 },
    BlowUp { t: f64 },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(s) => write!(f, "domain error: {s}"),
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::InvalidInput(s) => write!(f, "invalid input: {s}"),
            Error::NewtonDivergence { iterations, residual } => write!(
                f,
                "Newton iteration diverged after {iterations} iterations (residual {residual:e})"
            ),
            Error::SingularJacobian => {
                write!(f, "singular Jacobian (orbit may be nonisolated)")
            }
            Error::Singular(s) => write!(f, "singular system: {s}"),
            Error::Resonance { divisor } => {
                write!(f, "resonance at the unit circle (divisor {divisor:e})")
            }
            Error::Numerical(s) => write!(f, "numerical failure: {s}"),
            Error::StepFailure { t } => write!(f, "step size underflow at t = {t}"),
            Error::BlowUp { t } => write!(f, "solution blow-up at t = {t}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

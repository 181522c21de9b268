use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

/// Errors produced by the numerical core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A value failed a domain invariant (non-finite entry, out-of-range parameter).
    Validation(String),
    /// Two vectors that must agree in length do not.
    DimensionMismatch { expected: usize, found: usize },
    /// An estimator was handed no samples.
    EmptyInput(&'static str),
    /// A data stream ran dry before the requested horizon.
    StreamExhausted { completed: usize, requested: usize },
    /// The iterate left the finite-value guard box.
    Diverged { iter: usize, theta_norm: f64, t: f64 },
    /// An inner solver stopped without meeting its tolerance.
    NotConverged {
        theta: Vec<f64>,
        t: f64,
        grad_norm: f64,
        iterations: usize,
    },
    /// A claimed infimum lies above an observed function value.
    BadInfimum { f_star: f64, observed: f64 },
    /// A theorem or rate-fit hypothesis does not hold for the given inputs.
    Hypothesis(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Validation(msg) => write!(f, "{msg}"),
            Error::DimensionMismatch { expected, found } => {
                write!(f, "dimension mismatch: expected {expected}, found {found}")
            }
            Error::EmptyInput(what) => write!(f, "empty input: {what}"),
            Error::StreamExhausted {
                completed,
                requested,
            } => write!(
                f,
                "stream exhausted after {completed} of {requested} iterations"
            ),
            Error::Diverged {
                iter,
                theta_norm,
                t,
            } => write!(
                f,
                "divergence guard tripped at iteration {iter} (|theta| = {theta_norm:e}, t = {t:e})"
            ),
            Error::NotConverged {
                grad_norm,
                iterations,
                ..
            } => write!(
                f,
                "solver did not converge after {iterations} iterations (gradient norm {grad_norm:e})"
            ),
            Error::BadInfimum { f_star, observed } => write!(
                f,
                "bad infimum: f_star = {f_star} exceeds observed value {observed}"
            ),
            Error::Hypothesis(msg) => write!(f, "{msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}

//! Value types shared by every module.
//!
//! Dimensions are runtime values: an [`Example`] carries `d` features and a
//! [`ParamState`] carries `m` predictor parameters next to the scalar `t`.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};

fn check_finite_vec(name: &str, v: &[f64]) -> Result<()> {
    match v.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::Validation(format!("{name}[{i}] not finite"))),
        None => Ok(()),
    }
}

fn check_finite(name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Validation(format!("{name} not finite")))
    }
}

/// One datastream element `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub x: Vec<f64>,
    pub y: f64,
}

impl Example {
    pub fn new(x: Vec<f64>, y: f64) -> Result<Self> {
        check_finite_vec("x", &x)?;
        check_finite("y", y)?;
        Ok(Self { x, y })
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }
}

/// An example carrying a fictitious Gaussian target `w`, drawn independently of `(x, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedExample {
    pub base: Example,
    pub w: f64,
}

impl AugmentedExample {
    pub fn new(base: Example, w: f64) -> Result<Self> {
        check_finite("w", w)?;
        Ok(Self { base, w })
    }

    /// Wraps an example with `w = 0`.
    pub fn plain(base: Example) -> Self {
        Self { base, w: 0.0 }
    }
}

/// The joint iterate `(theta, t)` of the variational CV@R problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamState {
    pub theta: Vec<f64>,
    pub t: f64,
}

impl ParamState {
    pub fn new(theta: Vec<f64>, t: f64) -> Result<Self> {
        validate_state(Self { theta, t })
    }

    pub fn zeros(m: usize) -> Self {
        Self {
            theta: alloc::vec![0.0; m],
            t: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.theta.len()
    }

    /// Stacks `theta` then `t` into one vector of length `m + 1`.
    pub fn to_joint(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.theta.len() + 1);
        v.extend_from_slice(&self.theta);
        v.push(self.t);
        v
    }

    /// Inverse of [`ParamState::to_joint`].
    pub fn from_joint(v: &[f64]) -> Self {
        let (theta, t) = v.split_at(v.len() - 1);
        Self {
            theta: theta.to_vec(),
            t: t[0],
        }
    }
}

/// Returns `s` unchanged if every entry is finite.
pub fn validate_state(s: ParamState) -> Result<ParamState> {
    check_finite_vec("theta", &s.theta)?;
    check_finite("t", s.t)?;
    Ok(s)
}

/// Confidence level `alpha` in `(0, 1]`. `alpha = 1` is the risk-neutral limit.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct ConfidenceLevel(f64);

impl ConfidenceLevel {
    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_finite() && alpha > 0.0 && alpha <= 1.0 {
            Ok(Self(alpha))
        } else {
            Err(Error::Validation(format!(
                "confidence level must lie in (0, 1], got {alpha}"
            )))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }

    #[inline]
    pub fn inv(self) -> f64 {
        1.0 / self.0
    }
}

/// Constant stepsizes: `beta` for `theta`, `gamma` for `t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSizes {
    pub beta: f64,
    pub gamma: f64,
}

impl StepSizes {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        for (name, v) in [("beta", beta), ("gamma", gamma)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(Self { beta, gamma })
    }

    pub fn min(&self) -> f64 {
        self.beta.min(self.gamma)
    }

    pub fn max(&self) -> f64 {
        self.beta.max(self.gamma)
    }
}

/// Regularity constants a loss declares about itself.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConstants {
    /// Strong convexity (and hence PL) parameter.
    pub mu: f64,
    /// Lipschitz constant of the gradient.
    pub l_smooth: f64,
    /// Lipschitz constant of the loss itself.
    pub g_lip: f64,
    /// Lowest attainable loss value.
    pub l_floor: f64,
}

impl LossConstants {
    pub fn validate(self) -> Result<Self> {
        for (name, v) in [("mu", self.mu), ("l_smooth", self.l_smooth), ("g_lip", self.g_lip)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Validation(format!(
                    "{name} must be finite and nonnegative, got {v}"
                )));
            }
        }
        check_finite("l_floor", self.l_floor)?;
        if self.mu > 0.0 && self.l_smooth > 0.0 && self.mu > self.l_smooth {
            return Err(Error::Validation(format!(
                "mu ({}) exceeds l_smooth ({})",
                self.mu, self.l_smooth
            )));
        }
        Ok(self)
    }
}

/// One row of a [`Trace`].
///
/// Row `n > 0` holds the state after consuming the `n`-th stream element;
/// `in_event` and `loss_sample` describe that element evaluated at the
/// previous state. Row 0 is the initial state and carries no sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub state: ParamState,
    pub in_event: bool,
    pub loss_sample: Option<f64>,
    pub g_alpha_est: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trace {
    pub records: Vec<TraceRecord>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last_state(&self) -> Option<&ParamState> {
        self.records.last().map(|r| &r.state)
    }

    /// Records that carry a periodic objective estimate.
    pub fn checkpoints(&self) -> impl Iterator<Item = &TraceRecord> {
        self.records.iter().filter(|r| r.g_alpha_est.is_some())
    }
}

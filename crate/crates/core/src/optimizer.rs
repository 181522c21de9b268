//! CV@R-SGD, its Gaussian-smoothed variant, and the LMS baseline.
//!
//! One stream element per step. The event indicator and the loss gradient are
//! both evaluated at the old state `(theta_n, t_n)` on the new example.

use alloc::vec::Vec;
use core::fmt;

use crate::error::{check_dim, Error, Result};
use crate::losses::{LossModel, SmoothedSurrogate};
use crate::math;
use crate::objective::{g_alpha_estimate, smoothed_g_estimate};
use crate::types::{
    AugmentedExample, ConfidenceLevel, Example, ParamState, StepSizes, Trace, TraceRecord,
};

/// Iterates with `|theta|` or `|t|` beyond this abort the run.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdConfig {
    pub alpha: ConfidenceLevel,
    pub steps: StepSizes,
    pub horizon: usize,
    pub init: ParamState,
    /// Smoothing scale; `0` runs plain CV@R-SGD.
    pub sigma: f64,
    pub eval_cadence: usize,
    pub eval_batch: usize,
    pub seed: u64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.eval_cadence == 0 {
            return Err(Error::Validation("eval_cadence must be at least 1".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Validation("eval_batch must be at least 1".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Validation(alloc::format!(
                "sigma must be finite and nonnegative, got {}",
                self.sigma
            )));
        }
        crate::types::validate_state(self.init.clone())?;
        Ok(())
    }
}

/// One CV@R-SGD step. Returns the next state and whether the example fell in the event.
pub fn cvar_sgd_step<L: LossModel + ?Sized>(
    state: &ParamState,
    e: &Example,
    loss: &L,
    alpha: ConfidenceLevel,
    steps: StepSizes,
) -> Result<(ParamState, bool)> {
    let (next, hit, _) = step_with_offset(state, e, 0.0, loss, alpha, steps)?;
    Ok((next, hit))
}

/// CV@R-SGD on the surrogate `l - w`; the event is `{ l - w - t > 0 }`.
pub fn smoothed_sgd_step<L: LossModel>(
    state: &ParamState,
    ae: &AugmentedExample,
    s: &SmoothedSurrogate<L>,
    alpha: ConfidenceLevel,
    steps: StepSizes,
) -> Result<(ParamState, bool)> {
    let (next, hit, _) = step_with_offset(state, &ae.base, ae.w, &s.inner, alpha, steps)?;
    Ok((next, hit))
}

/// Shared update; `offset` is subtracted from the loss. Also returns the loss sample.
fn step_with_offset<L: LossModel + ?Sized>(
    state: &ParamState,
    e: &Example,
    offset: f64,
    loss: &L,
    alpha: ConfidenceLevel,
    steps: StepSizes,
) -> Result<(ParamState, bool, f64)> {
    let mut grad = alloc::vec![0.0; state.dim()];
    let l = loss.value_and_grad(&state.theta, e, &mut grad)?;
    let hit = l - offset - state.t > 0.0;
    let b = if hit { 1.0 } else { 0.0 };
    let t = state.t - steps.gamma * (1.0 - b * alpha.inv());
    let mut theta = state.theta.clone();
    if hit {
        math::axpy(-steps.beta * alpha.inv(), &grad, &mut theta);
    }
    Ok((ParamState { theta, t }, hit, l))
}

/// Plain SGD on the expected loss: `theta - beta grad l(theta; e)`.
pub fn lms_step<L: LossModel + ?Sized>(
    theta: &[f64],
    e: &Example,
    loss: &L,
    beta: f64,
) -> Result<Vec<f64>> {
    let mut grad = alloc::vec![0.0; theta.len()];
    loss.grad_theta_into(theta, e, &mut grad)?;
    let mut next = theta.to_vec();
    math::axpy(-beta, &grad, &mut next);
    Ok(next)
}

/// A failed run together with every record produced before the failure.
#[derive(Debug, Clone, PartialEq)]
pub struct RunFailure {
    pub error: Error,
    pub partial: Trace,
}

impl fmt::Display for RunFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({} records kept)", self.error, self.partial.len())
    }
}

impl core::error::Error for RunFailure {}

fn guard(iter: usize, s: &ParamState) -> Result<()> {
    let n = math::norm(&s.theta);
    if !(n.is_finite() && s.t.is_finite() && n <= DIVERGENCE_LIMIT && s.t.abs() <= DIVERGENCE_LIMIT) {
        return Err(Error::Diverged {
            iter,
            theta_norm: n,
            t: s.t,
        });
    }
    Ok(())
}

fn draw_batch<V: Iterator<Item = Example>>(
    eval_source: &mut V,
    n: usize,
    completed: usize,
    requested: usize,
) -> Result<Vec<Example>> {
    let batch: Vec<Example> = eval_source.by_ref().take(n).collect();
    if batch.len() < n {
        return Err(Error::StreamExhausted {
            completed,
            requested,
        });
    }
    Ok(batch)
}

/// Iterates CV@R-SGD for `config.horizon` steps.
///
/// The trace has `horizon + 1` records (the first is `config.init`). Every
/// `eval_cadence` iterations the objective is estimated on `eval_batch` fresh
/// examples from `eval_source`; with `sigma > 0` both the update and the
/// estimate use the smoothed surrogate and the stream's `w`.
pub fn run<L, S, V>(
    config: &SgdConfig,
    loss: &L,
    stream: S,
    mut eval_source: V,
) -> core::result::Result<Trace, RunFailure>
where
    L: LossModel + ?Sized,
    S: IntoIterator<Item = AugmentedExample>,
    V: Iterator<Item = Example>,
{
    let mut trace = Trace {
        records: Vec::with_capacity(config.horizon + 1),
    };
    let fail = |error, trace: Trace| RunFailure {
        error,
        partial: trace,
    };
    if let Err(e) = config.validate() {
        return Err(fail(e, trace));
    }
    let smoothing = if config.sigma > 0.0 {
        match SmoothedSurrogate::new(loss, config.sigma) {
            Ok(s) => Some(s),
            Err(e) => return Err(fail(e, trace)),
        }
    } else {
        None
    };
    let estimate = |state: &ParamState, batch: &[Example]| -> Result<f64> {
        Ok(match &smoothing {
            Some(s) => smoothed_g_estimate(state, s, batch, config.alpha)?.value,
            None => g_alpha_estimate(state, loss, batch, config.alpha)?.value,
        })
    };

    let mut state = config.init.clone();
    let mut stream = stream.into_iter();
    for iter in 0..=config.horizon {
        let (in_event, loss_sample) = if iter == 0 {
            (false, None)
        } else {
            let Some(ae) = stream.next() else {
                return Err(fail(
                    Error::StreamExhausted {
                        completed: iter - 1,
                        requested: config.horizon,
                    },
                    trace,
                ));
            };
            if let Err(e) = check_dim(state.dim(), ae.base.dim()) {
                return Err(fail(e, trace));
            }
            let offset = if smoothing.is_some() { ae.w } else { 0.0 };
            match step_with_offset(&state, &ae.base, offset, loss, config.alpha, config.steps) {
                Ok((next, hit, l)) => {
                    state = next;
                    (hit, Some(l - offset))
                }
                Err(e) => return Err(fail(e, trace)),
            }
        };
        let g_alpha_est = if iter % config.eval_cadence == 0 {
            let est = draw_batch(&mut eval_source, config.eval_batch, iter, config.horizon)
                .and_then(|b| estimate(&state, &b));
            match est {
                Ok(v) => Some(v),
                Err(e) => return Err(fail(e, trace)),
            }
        } else {
            None
        };
        trace.records.push(TraceRecord {
            iter,
            state: state.clone(),
            in_event,
            loss_sample,
            g_alpha_est,
        });
        if let Err(e) = guard(iter, &state) {
            return Err(fail(e, trace));
        }
    }
    Ok(trace)
}

/// LMS iterates `theta_0 .. theta_horizon` on the given stream.
pub fn run_lms<L, S>(init: &[f64], beta: f64, loss: &L, stream: S, horizon: usize) -> Result<Vec<Vec<f64>>>
where
    L: LossModel + ?Sized,
    S: IntoIterator<Item = Example>,
{
    let mut out = Vec::with_capacity(horizon + 1);
    out.push(init.to_vec());
    let mut stream = stream.into_iter();
    for iter in 1..=horizon {
        let e = stream.next().ok_or(Error::StreamExhausted {
            completed: iter - 1,
            requested: horizon,
        })?;
        let next = lms_step(out.last().expect("nonempty"), &e, loss, beta)?;
        guard(iter, &ParamState { theta: next.clone(), t: 0.0 })?;
        out.push(next);
    }
    Ok(out)
}

//! CV@R estimators and the joint objective
//! `G_alpha(theta, t) = E { t + (1/alpha) (l - t)_+ }` with its gradients.
//!
//! Batch functions accept `&[E]` for any `E: Borrow<Example>`, so both owned
//! batches and index-restricted views (`&[&Example]`) work.

use alloc::vec::Vec;
use core::borrow::Borrow;

use crate::error::{Error, Result};
use crate::losses::{softplus_excess, LossModel, SmoothedSurrogate};
use crate::math::{self, NeumaierSum, SQRT_2PI};
use crate::types::{ConfidenceLevel, Example, ParamState};

/// Monte Carlo estimate of an expectation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_samples: usize,
}

impl GEstimate {
    fn from_samples(values: &[f64]) -> Self {
        let (value, std_error) = math::mean_and_std_error(values);
        Self {
            value,
            std_error,
            n_samples: values.len(),
        }
    }
}

/// Membership in the event `A(theta, t) = { l(theta; e) - t > 0 }` (strict).
pub fn in_event<L: LossModel + ?Sized>(state: &ParamState, loss: &L, e: &Example) -> Result<bool> {
    Ok(loss.value(&state.theta, e)? - state.t > 0.0)
}

fn sorted_descending(samples: &[f64]) -> Vec<f64> {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Number of tail samples `k = ceil(alpha n)`, clamped to `[1, n]`.
fn tail_count(alpha: ConfidenceLevel, n: usize) -> (f64, usize) {
    let an = alpha.get() * n as f64;
    let k = (libm::ceil(an) as usize).clamp(1, n);
    (an, k)
}

/// Empirical superquantile: the mean of the worst `alpha` fraction of `samples`,
/// with the boundary sample weighted fractionally when `alpha n` is not an integer.
pub fn cvar_sorted(samples: &[f64], alpha: ConfidenceLevel) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("cvar samples"));
    }
    let s = sorted_descending(samples);
    let (an, k) = tail_count(alpha, s.len());
    let mut acc = NeumaierSum::new();
    for &v in &s[..k - 1] {
        acc.add(v);
    }
    acc.add((an - (k - 1) as f64) * s[k - 1]);
    Ok(acc.total() / an)
}

/// Empirical value-at-risk matching [`cvar_sorted`]: the `ceil(alpha n)`-th largest sample.
///
/// This `t` attains the variational minimum, so it is the quantile convention
/// used whenever a single `t*` must be reported.
pub fn value_at_risk(samples: &[f64], alpha: ConfidenceLevel) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("value-at-risk samples"));
    }
    let s = sorted_descending(samples);
    let (_, k) = tail_count(alpha, s.len());
    Ok(s[k - 1])
}

/// `t + (1/alpha) mean((s - t)_+)`
fn variational_objective(samples: &[f64], inv_alpha: f64, t: f64) -> f64 {
    let mut acc = NeumaierSum::new();
    for &s in samples {
        acc.add((s - t).max(0.0));
    }
    t + inv_alpha * (acc.total() / samples.len() as f64)
}

/// CV@R by direct minimization of `t + (1/alpha) mean((s - t)_+)` over `t`.
///
/// Ternary search on `[min s, max s]`; the objective is convex with slope in
/// `[1 - 1/alpha, 1]`, so shrinking the bracket below `alpha * tol` bounds the
/// value error by `tol`. Returns `(value, t_star)`.
pub fn cvar_variational(samples: &[f64], alpha: ConfidenceLevel, tol: f64) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("cvar samples"));
    }
    if !(tol.is_finite() && tol > 0.0) {
        return Err(Error::Validation(alloc::format!("tolerance must be positive, got {tol}")));
    }
    let inv_alpha = alpha.inv();
    let f = |t| variational_objective(samples, inv_alpha, t);
    let (mut a, mut b) = samples
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = 0.5 * tol * alpha.get();
    let mut iters = 0;
    while b - a > width && iters < 400 {
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        if f(m1) <= f(m2) {
            b = m2;
        } else {
            a = m1;
        }
        iters += 1;
    }
    let mid = 0.5 * (a + b);
    let best = [a, mid, b]
        .into_iter()
        .map(|t| (f(t), t))
        .fold((f64::INFINITY, mid), |acc, c| if c.0 < acc.0 { c } else { acc });
    Ok(best)
}

pub(crate) fn per_sample_losses<L, E>(state: &ParamState, loss: &L, batch: &[E]) -> Result<Vec<f64>>
where
    L: LossModel + ?Sized,
    E: Borrow<Example>,
{
    batch.iter().map(|e| loss.value(&state.theta, e.borrow())).collect()
}

/// Sample mean of `t + (1/alpha)(l - t)_+` over `batch`, with its standard error.
pub fn g_alpha_estimate<L, E>(
    state: &ParamState,
    loss: &L,
    batch: &[E],
    alpha: ConfidenceLevel,
) -> Result<GEstimate>
where
    L: LossModel + ?Sized,
    E: Borrow<Example>,
{
    if batch.is_empty() {
        return Err(Error::EmptyInput("objective batch"));
    }
    let inv_alpha = alpha.inv();
    let t = state.t;
    let values: Vec<f64> = per_sample_losses(state, loss, batch)?
        .into_iter()
        .map(|l| t + inv_alpha * (l - t).max(0.0))
        .collect();
    Ok(GEstimate::from_samples(&values))
}

/// Weighted gradient `[ (1/alpha) mean(w_i grad l_i) ; 1 - (1/alpha) mean(w_i) ]`.
fn weighted_joint_gradient<L, E>(
    state: &ParamState,
    loss: &L,
    batch: &[E],
    alpha: ConfidenceLevel,
    weight: impl Fn(f64) -> f64,
) -> Result<Vec<f64>>
where
    L: LossModel + ?Sized,
    E: Borrow<Example>,
{
    if batch.is_empty() {
        return Err(Error::EmptyInput("gradient batch"));
    }
    let m = state.dim();
    let mut g = alloc::vec![0.0; m];
    let mut acc: Vec<NeumaierSum> = alloc::vec![NeumaierSum::new(); m];
    let mut mass = NeumaierSum::new();
    for e in batch {
        let e = e.borrow();
        let l = loss.value_and_grad(&state.theta, e, &mut g)?;
        let w = weight(l - state.t);
        if w != 0.0 {
            mass.add(w);
            for (a, gi) in acc.iter_mut().zip(&g) {
                a.add(w * gi);
            }
        }
    }
    let n = batch.len() as f64;
    let inv_alpha = alpha.inv();
    let mut out: Vec<f64> = acc.iter().map(|a| inv_alpha * a.total() / n).collect();
    out.push(1.0 - inv_alpha * mass.total() / n);
    Ok(out)
}

/// Stochastic (sub)gradient of `G_alpha` on a fixed batch: `theta` block then `t`.
pub fn grad_g_alpha_estimate<L, E>(
    state: &ParamState,
    loss: &L,
    batch: &[E],
    alpha: ConfidenceLevel,
) -> Result<Vec<f64>>
where
    L: LossModel + ?Sized,
    E: Borrow<Example>,
{
    weighted_joint_gradient(state, loss, batch, alpha, |z| if z > 0.0 { 1.0 } else { 0.0 })
}

/// Gradient of the smoothed objective: the event indicator replaced by `Phi((l - t)/sigma)`.
pub fn smoothed_grad_g<L, E>(
    state: &ParamState,
    s: &SmoothedSurrogate<L>,
    batch: &[E],
    alpha: ConfidenceLevel,
) -> Result<Vec<f64>>
where
    L: LossModel,
    E: Borrow<Example>,
{
    let sigma = s.sigma();
    weighted_joint_gradient(state, &s.inner, batch, alpha, |z| math::norm_cdf(z / sigma))
}

/// Upper bound `sigma / (alpha sqrt(2 pi))` on the smoothing bias of the objective.
pub fn smoothing_bias_bound(sigma: f64, alpha: ConfidenceLevel) -> f64 {
    sigma / (alpha.get() * SQRT_2PI)
}

/// Mean of `t + (1/alpha) R_sigma(l - t)`, with `w` integrated out analytically.
///
/// The value is assembled as the unsmoothed estimate plus a nonnegative
/// excess clamped to [`smoothing_bias_bound`], which is an identity for
/// `R_sigma(z) = (z)_+ + sigma h(|z|/sigma)` and keeps the sandwich exact in
/// floating point.
pub fn smoothed_g_estimate<L, E>(
    state: &ParamState,
    s: &SmoothedSurrogate<L>,
    batch: &[E],
    alpha: ConfidenceLevel,
) -> Result<GEstimate>
where
    L: LossModel,
    E: Borrow<Example>,
{
    if batch.is_empty() {
        return Err(Error::EmptyInput("objective batch"));
    }
    let losses = per_sample_losses(state, &s.inner, batch)?;
    let (t, sigma, inv_alpha) = (state.t, s.sigma(), alpha.inv());
    let mut hinge = Vec::with_capacity(losses.len());
    let mut smooth = Vec::with_capacity(losses.len());
    let mut excess = NeumaierSum::new();
    for &l in &losses {
        let z = l - t;
        let h = softplus_excess(libm::fabs(z) / sigma);
        hinge.push(t + inv_alpha * z.max(0.0));
        smooth.push(t + inv_alpha * (z.max(0.0) + sigma * h));
        excess.add(h);
    }
    let base = GEstimate::from_samples(&hinge);
    let mean_h = excess.total() / losses.len() as f64;
    let extra = (sigma * mean_h / alpha.get()).clamp(0.0, smoothing_bias_bound(sigma, alpha));
    let spread = GEstimate::from_samples(&smooth);
    Ok(GEstimate {
        value: base.value + extra,
        std_error: spread.std_error,
        n_samples: losses.len(),
    })
}

/// Empirical probability of the event `A(theta, t)` on a batch.
pub fn event_mass<L, E>(state: &ParamState, loss: &L, batch: &[E]) -> Result<f64>
where
    L: LossModel + ?Sized,
    E: Borrow<Example>,
{
    if batch.is_empty() {
        return Err(Error::EmptyInput("event batch"));
    }
    let mut hits = 0usize;
    for e in batch {
        if in_event(state, loss, e.borrow())? {
            hits += 1;
        }
    }
    Ok(hits as f64 / batch.len() as f64)
}

/// Everything the diagnostics need about `G_alpha` at one state, on one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSummary {
    pub g: GEstimate,
    pub grad: Vec<f64>,
    pub event_mass: f64,
    /// Delta-method standard error of `0.5 |grad|^2`.
    pub half_sq_grad_std_error: f64,
}

impl ObjectiveSummary {
    pub fn half_sq_grad(&self) -> f64 {
        0.5 * math::sq_norm(&self.grad)
    }
}

/// Objective value, gradient, event mass and their standard errors in two passes.
pub fn summarize<L, E>(
    state: &ParamState,
    loss: &L,
    batch: &[E],
    alpha: ConfidenceLevel,
) -> Result<ObjectiveSummary>
where
    L: LossModel + ?Sized,
    E: Borrow<Example>,
{
    if batch.is_empty() {
        return Err(Error::EmptyInput("objective batch"));
    }
    let losses = per_sample_losses(state, loss, batch)?;
    summarize_with_losses(state, loss, batch, &losses, alpha)
}

/// [`summarize`] with the per-sample losses at `state` already computed.
pub(crate) fn summarize_with_losses<L, E>(
    state: &ParamState,
    loss: &L,
    batch: &[E],
    losses: &[f64],
    alpha: ConfidenceLevel,
) -> Result<ObjectiveSummary>
where
    L: LossModel + ?Sized,
    E: Borrow<Example>,
{
    let m = state.dim();
    let inv_alpha = alpha.inv();
    let t = state.t;
    let mut g = alloc::vec![0.0; m];
    let values: Vec<f64> = losses.iter().map(|&l| t + inv_alpha * (l - t).max(0.0)).collect();
    let mut acc: Vec<NeumaierSum> = alloc::vec![NeumaierSum::new(); m];
    let mut hits = 0usize;
    // Only event members contribute gradients, so only they are differentiated.
    for (e, &l) in batch.iter().zip(losses) {
        if l - t > 0.0 {
            hits += 1;
            loss.grad_theta_into(&state.theta, e.borrow(), &mut g)?;
            for (a, gi) in acc.iter_mut().zip(&g) {
                a.add(*gi);
            }
        }
    }
    let n = batch.len() as f64;
    let mass = hits as f64 / n;
    let mut grad: Vec<f64> = acc.iter().map(|a| inv_alpha * a.total() / n).collect();
    grad.push(1.0 - inv_alpha * mass);

    // Second pass: per-sample projections <v_i, grad> for the delta method.
    let (gt, gtheta) = (grad[m], &grad[..m]);
    let mut proj = Vec::with_capacity(batch.len());
    for (e, &l) in batch.iter().zip(losses) {
        if l - t > 0.0 {
            loss.grad_theta_into(&state.theta, e.borrow(), &mut g)?;
            proj.push(inv_alpha * math::dot(&g, gtheta) + (1.0 - inv_alpha) * gt);
        } else {
            proj.push(gt);
        }
    }
    let (_, se) = math::mean_and_std_error(&proj);
    Ok(ObjectiveSummary {
        g: GEstimate::from_samples(&values),
        grad,
        event_mass: mass,
        half_sq_grad_std_error: se,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::RidgeLoss;
    use alloc::vec;

    fn a(v: f64) -> ConfidenceLevel {
        ConfidenceLevel::new(v).unwrap()
    }

    fn ex(x: &[f64], y: f64) -> Example {
        Example::new(x.to_vec(), y).unwrap()
    }

    /// Loss that ignores theta and returns `y`; handy for scripting loss values.
    struct ConstLoss;
    impl LossModel for ConstLoss {
        fn value(&self, _theta: &[f64], e: &Example) -> Result<f64> {
            Ok(e.y)
        }
        fn grad_theta_into(&self, _theta: &[f64], _e: &Example, out: &mut [f64]) -> Result<()> {
            out.fill(0.0);
            Ok(())
        }
        fn constants(&self) -> crate::types::LossConstants {
            crate::types::LossConstants {
                mu: 0.0,
                l_smooth: 0.0,
                g_lip: 0.0,
                l_floor: f64::MIN,
            }
        }
    }

    fn st(t: f64) -> ParamState {
        ParamState {
            theta: vec![0.0],
            t,
        }
    }

    #[test]
    fn event_is_strict() {
        let e = ex(&[0.0], 2.0);
        assert!(!in_event(&st(2.0), &ConstLoss, &e).unwrap());
        assert!(in_event(&st(1.9), &ConstLoss, &e).unwrap());
        assert!(in_event(&st(-1.0), &ConstLoss, &ex(&[0.0], 0.0)).unwrap());
    }

    #[test]
    fn cvar_sorted_examples() {
        assert_eq!(cvar_sorted(&[1.0, 2.0, 3.0, 4.0], a(0.5)).unwrap(), 3.5);
        assert_eq!(cvar_sorted(&[4.0, 1.0, 3.0, 2.0], a(1.0)).unwrap(), 2.5);
        for alpha in [0.05, 0.3, 0.77, 1.0] {
            let v = cvar_sorted(&[1.25; 7], a(alpha)).unwrap();
            assert!((v - 1.25).abs() < 1e-15);
        }
        assert_eq!(cvar_sorted(&[], a(0.5)), Err(Error::EmptyInput("cvar samples")));
    }

    #[test]
    fn cvar_sorted_fractional_tail() {
        // n = 4, alpha = 0.3: alpha n = 1.2, k = 2: (4 + 0.2 * 3) / 1.2
        let v = cvar_sorted(&[1.0, 2.0, 3.0, 4.0], a(0.3)).unwrap();
        assert!((v - 4.6 / 1.2).abs() < 1e-14);
    }

    #[test]
    fn cvar_variational_examples() {
        let (v, t) = cvar_variational(&[1.0, 2.0, 3.0, 4.0], a(0.5), 1e-10).unwrap();
        assert!((v - 3.5).abs() < 1e-10);
        assert!((2.0..=3.0).contains(&t));
        let (v, t) = cvar_variational(&[5.0, 5.0, 5.0], a(0.2), 1e-10).unwrap();
        assert_eq!((v, t), (5.0, 5.0));
        let s = [0.3, -1.2, 4.4, 2.0, 0.0];
        let (v, _) = cvar_variational(&s, a(1.0), 1e-12).unwrap();
        assert!((v - 1.1).abs() < 1e-12);
        assert!(cvar_variational(&s, a(1.0), 0.0).is_err());
    }

    #[test]
    fn var_is_variational_minimizer() {
        let s = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(value_at_risk(&s, a(0.5)).unwrap(), 3.0);
        assert_eq!(value_at_risk(&s, a(1.0)).unwrap(), 1.0);
        let t = value_at_risk(&s, a(0.3)).unwrap();
        let f = variational_objective(&s, 1.0 / 0.3, t);
        assert!((f - cvar_sorted(&s, a(0.3)).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn g_alpha_trivial_cases() {
        let batch = [ex(&[0.0], 1.0), ex(&[0.0], 3.0), ex(&[0.0], 2.5)];
        let g = g_alpha_estimate(&st(3.5), &ConstLoss, &batch, a(0.2)).unwrap();
        assert_eq!(g.value, 3.5);
        assert_eq!(g.std_error, 0.0);
        assert_eq!(g.n_samples, 3);
        let g = g_alpha_estimate(&st(0.5), &ConstLoss, &batch, a(1.0)).unwrap();
        assert!((g.value - 6.5 / 3.0).abs() < 1e-15);
        let empty: [Example; 0] = [];
        assert!(g_alpha_estimate(&st(0.0), &ConstLoss, &empty, a(1.0)).is_err());
    }

    #[test]
    fn g_alpha_ridge_hand_value() {
        let loss = RidgeLoss::new(0.1).unwrap();
        let batch = [ex(&[1.0, 1.0], 2.0), ex(&[0.5, 0.0], -1.0), ex(&[0.0, 2.0], 3.0)];
        let s = ParamState {
            theta: vec![0.0, 0.0],
            t: 0.0,
        };
        // (1/alpha) mean(y^2) = 5 * (4 + 1 + 9) / 3
        let g = g_alpha_estimate(&s, &loss, &batch, a(0.2)).unwrap();
        assert!((g.value - 70.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gradient_outside_and_inside_event() {
        let loss = RidgeLoss::new(0.1).unwrap();
        let batch = [ex(&[1.0, 1.0], 2.0), ex(&[0.5, 0.0], -1.0)];
        let s = ParamState {
            theta: vec![0.0, 0.0],
            t: 100.0,
        };
        assert_eq!(grad_g_alpha_estimate(&s, &loss, &batch, a(0.3)).unwrap(), vec![0.0, 0.0, 1.0]);
        let s = ParamState {
            theta: vec![0.0, 0.0],
            t: -1.0,
        };
        let g = grad_g_alpha_estimate(&s, &loss, &batch, a(1.0)).unwrap();
        // mean of [-4,-4] and [1, 0]
        assert_eq!(g, vec![-1.5, -2.0, 0.0]);
    }

    #[test]
    fn smoothed_weight_is_half_at_tie() {
        let loss = RidgeLoss::new(0.1).unwrap();
        let s = SmoothedSurrogate::new(loss, 0.7).unwrap();
        let e = ex(&[1.0, 1.0], 2.0);
        let state = ParamState {
            theta: vec![0.0, 0.0],
            t: 4.0,
        };
        let g = smoothed_grad_g(&state, &s, &[e], a(0.5)).unwrap();
        // weight 0.5: theta block = 2 * 0.5 * [-4, -4]; t = 1 - 2 * 0.5
        assert_eq!(g, vec![-4.0, -4.0, 0.0]);
    }

    #[test]
    fn smoothed_value_at_tie() {
        let loss = RidgeLoss::new(0.1).unwrap();
        let sigma = 0.3;
        let s = SmoothedSurrogate::new(loss, sigma).unwrap();
        let state = ParamState {
            theta: vec![0.0, 0.0],
            t: 4.0,
        };
        let g = smoothed_g_estimate(&state, &s, &[ex(&[1.0, 1.0], 2.0)], a(0.5)).unwrap();
        assert!((g.value - (4.0 + sigma / (0.5 * SQRT_2PI))).abs() < 1e-15);
    }

    #[test]
    fn summary_matches_separate_estimators() {
        let loss = RidgeLoss::new(0.1).unwrap();
        let batch = [
            ex(&[1.0, 1.0], 2.0),
            ex(&[0.5, 0.0], -1.0),
            ex(&[0.0, 2.0], 3.0),
            ex(&[1.5, 0.2], 0.1),
        ];
        let s = ParamState {
            theta: vec![0.3, -0.2],
            t: 1.0,
        };
        let sum = summarize(&s, &loss, &batch, a(0.4)).unwrap();
        let g = g_alpha_estimate(&s, &loss, &batch, a(0.4)).unwrap();
        let grad = grad_g_alpha_estimate(&s, &loss, &batch, a(0.4)).unwrap();
        assert_eq!(sum.g, g);
        assert_eq!(sum.grad, grad);
        assert_eq!(sum.event_mass, event_mass(&s, &loss, &batch).unwrap());
        assert!(sum.half_sq_grad_std_error >= 0.0);
    }
}

//! Empirical checks of the PL-type conditions, the convergence bound and the
//! stepsize window, plus the reference minimizer they all depend on.
//!
//! Every population-level quantity is computed on one fixed sample so that
//! both sides of each inequality see the same empirical measure.

use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::losses::LossModel;
use crate::math::{self, NeumaierSum};
use crate::minimize::bfgs;
use crate::objective::{cvar_sorted, per_sample_losses, summarize_with_losses, value_at_risk};
use crate::types::{ConfidenceLevel, Example, ParamState, StepSizes, Trace};

/// Absolute slack below which a PL shortfall is treated as rounding.
pub const PL_SLACK: f64 = 1e-10;
/// Monte Carlo slack, in combined standard errors.
pub const MC_SIGMAS: f64 = 3.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PlReport {
    pub mu_tested: f64,
    /// Points actually tested (skipped states excluded).
    pub n_points: usize,
    pub n_violations: usize,
    /// Minimum over tested points of `0.5 |grad|^2 - mu gap`; `+inf` when nothing was tested.
    pub worst_margin: f64,
    /// States whose event mass fell below the requested minimum.
    pub n_skipped: usize,
    /// Largest disagreement between the iterative and closed-form restricted infima.
    pub infimum_crosscheck: Option<f64>,
}

impl PlReport {
    fn new(mu: f64) -> Self {
        Self {
            mu_tested: mu,
            n_points: 0,
            n_violations: 0,
            worst_margin: f64::INFINITY,
            n_skipped: 0,
            infimum_crosscheck: None,
        }
    }
}

fn check_mu(mu: f64) -> Result<()> {
    if mu.is_finite() && mu > 0.0 {
        Ok(())
    } else {
        Err(Error::Validation(alloc::format!("mu must be positive, got {mu}")))
    }
}

/// Counts points where `0.5 |grad f|^2 < mu (f - f_star) - 1e-10`.
///
/// `f` returns the value and gradient at a point.
pub fn pl_check<F>(f: F, points: &[Vec<f64>], mu: f64, f_star: f64) -> Result<PlReport>
where
    F: Fn(&[f64]) -> (f64, Vec<f64>),
{
    check_mu(mu)?;
    if points.is_empty() {
        return Err(Error::EmptyInput("PL test points"));
    }
    let mut report = PlReport::new(mu);
    for p in points {
        let (v, g) = f(p);
        if f_star > v + 1e-12 {
            return Err(Error::BadInfimum { f_star, observed: v });
        }
        let margin = 0.5 * math::sq_norm(&g) - mu * (v - f_star);
        report.n_points += 1;
        report.worst_margin = report.worst_margin.min(margin);
        if margin < -PL_SLACK {
            report.n_violations += 1;
        }
    }
    Ok(report)
}

/// Mean loss over `examples` and its gradient.
fn mean_loss_and_grad<L: LossModel + ?Sized>(
    loss: &L,
    theta: &[f64],
    examples: &[&Example],
) -> Result<(f64, Vec<f64>)> {
    let m = theta.len();
    let mut g = alloc::vec![0.0; m];
    let mut acc: Vec<NeumaierSum> = alloc::vec![NeumaierSum::new(); m];
    let mut val = NeumaierSum::new();
    for e in examples {
        val.add(loss.value_and_grad(theta, e, &mut g)?);
        for (a, gi) in acc.iter_mut().zip(&g) {
            a.add(*gi);
        }
    }
    let n = examples.len() as f64;
    Ok((val.total() / n, acc.iter().map(|a| a.total() / n).collect()))
}

/// `inf_theta mean_{e in examples} l(theta; e)`, with the closed-form value when the loss has one.
///
/// Returns the infimum and, if both were computed, the gap between them.
fn restricted_infimum<L: LossModel + ?Sized>(
    loss: &L,
    examples: &[&Example],
    start: &[f64],
) -> Result<(f64, Option<f64>)> {
    let min = bfgs(|th| mean_loss_and_grad(loss, th, examples), start, 1e-8, 10_000)?;
    let gnorm = math::norm(&min.grad);
    if !min.converged && gnorm > 1e-6 {
        return Err(Error::NotConverged {
            theta: min.x,
            t: f64::NAN,
            grad_norm: gnorm,
            iterations: min.iterations,
        });
    }
    let mu = loss.constants().mu;
    // Strong convexity turns the residual gradient into a valid lower bound.
    let iterative = if mu > 0.0 {
        min.value - math::sq_norm(&min.grad) / (2.0 * mu)
    } else {
        min.value
    };
    let weights = alloc::vec![1.0; examples.len()];
    match loss.weighted_minimizer(examples, &weights) {
        Some(Ok(theta)) => {
            let (closed, _) = mean_loss_and_grad(loss, &theta, examples)?;
            Ok((closed.min(iterative), Some(libm::fabs(closed - iterative))))
        }
        _ => Ok((iterative, None)),
    }
}

/// Set-restricted PL check with the event `A(theta, t)` as the restriction.
///
/// At each state the population is conditioned on `A(theta, t)`. States whose
/// conditional mass is below `min_event_mass` are skipped. Otherwise the check
/// compares `0.5 |E[grad l | A]|^2` with `mu (E[l | A] - l*)`, where `l*` is the
/// infimum over `theta` of the conditional mean loss on the same event set, and
/// flags shortfalls beyond three combined standard errors.
pub fn set_restricted_pl_check<L: LossModel + ?Sized>(
    loss: &L,
    states: &[ParamState],
    mu: f64,
    population: &[Example],
    min_event_mass: f64,
) -> Result<PlReport> {
    check_mu(mu)?;
    if population.is_empty() {
        return Err(Error::EmptyInput("PL population"));
    }
    if !(0.0..1.0).contains(&min_event_mass) {
        return Err(Error::Validation(alloc::format!(
            "min_event_mass must lie in [0, 1), got {min_event_mass}"
        )));
    }
    let mut report = PlReport::new(mu);
    let n = population.len() as f64;
    for state in states {
        let mut event: Vec<&Example> = Vec::new();
        let mut losses = Vec::new();
        let mut grads: Vec<Vec<f64>> = Vec::new();
        for e in population {
            let mut g = alloc::vec![0.0; state.dim()];
            let l = loss.value_and_grad(&state.theta, e, &mut g)?;
            if l - state.t > 0.0 {
                event.push(e);
                losses.push(l);
                grads.push(g);
            }
        }
        if event.is_empty() || (event.len() as f64) / n < min_event_mass {
            report.n_skipped += 1;
            continue;
        }
        let k = event.len() as f64;
        let gbar: Vec<f64> = (0..state.dim())
            .map(|j| math::compensated_sum(grads.iter().map(|g| g[j])) / k)
            .collect();
        let proj: Vec<f64> = grads.iter().map(|g| math::dot(g, &gbar)).collect();
        let (_, se_lhs) = math::mean_and_std_error(&proj);
        let (mean_l, se_l) = math::mean_and_std_error(&losses);
        let (l_star, cross) = restricted_infimum(loss, &event, &state.theta)?;
        if let Some(c) = cross {
            report.infimum_crosscheck = Some(report.infimum_crosscheck.unwrap_or(0.0).max(c));
        }
        let margin = 0.5 * math::sq_norm(&gbar) - mu * (mean_l - l_star);
        let slack = PL_SLACK + MC_SIGMAS * libm::sqrt(se_lhs * se_lhs + (mu * se_l) * (mu * se_l));
        report.n_points += 1;
        report.worst_margin = report.worst_margin.min(margin);
        if margin < -slack {
            report.n_violations += 1;
        }
    }
    Ok(report)
}

/// How a [`ReferenceSolution`] was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMethod {
    /// `alpha = 1`: the mean loss minimized by the loss's closed form.
    MeanClosedForm,
    /// `alpha = 1`: the mean loss minimized by quasi-Newton iterations.
    MeanQuasiNewton,
    /// `alpha < 1`: Gaussian-smoothing continuation with quasi-Newton inner solves.
    SmoothedContinuation,
}

impl ReferenceMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceMethod::MeanClosedForm => "mean_closed_form",
            ReferenceMethod::MeanQuasiNewton => "mean_quasi_newton",
            ReferenceMethod::SmoothedContinuation => "smoothed_continuation",
        }
    }
}

/// Minimizer of the empirical `G_alpha` over `(theta, t)` on a fixed population.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub theta_star: Vec<f64>,
    /// The empirical value-at-risk of the loss at `theta_star`.
    pub t_star: f64,
    pub g_star: f64,
    pub method: ReferenceMethod,
    pub n_samples: usize,
    /// Upper bound on `g_star - min G_alpha`, when a certificate is available.
    pub certified_gap: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceOptions {
    /// Required certified gap, relative to `1 + |g_star|`.
    pub gap_tol: f64,
    /// Budget of quasi-Newton iterations across all stages.
    pub max_iter: usize,
}

impl Default for ReferenceOptions {
    fn default() -> Self {
        Self {
            gap_tol: 1e-9,
            max_iter: 100_000,
        }
    }
}

/// [`estimate_reference_with`] under default options.
pub fn estimate_reference<L: LossModel + ?Sized>(
    loss: &L,
    alpha: ConfidenceLevel,
    population: &[Example],
    init: &ParamState,
) -> Result<ReferenceSolution> {
    estimate_reference_with(loss, alpha, population, init, ReferenceOptions::default())
}

/// Per-sample losses and gradients at `theta`.
fn losses_and_grads<L: LossModel + ?Sized>(
    loss: &L,
    theta: &[f64],
    population: &[Example],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let m = theta.len();
    let mut vals = Vec::with_capacity(population.len());
    let mut grads = alloc::vec![0.0; population.len() * m];
    for (e, g) in population.iter().zip(grads.chunks_exact_mut(m)) {
        vals.push(loss.value_and_grad(theta, e, g)?);
    }
    Ok((vals, grads))
}

/// Minimizes the empirical `G_alpha`.
///
/// For `alpha = 1` this is the mean loss, with `t*` reported as the smallest
/// loss (every `t` at or below it is optimal). For `alpha < 1`, the hinge is
/// replaced by the Gaussian softplus `R_sigma` and the smooth problem is solved
/// for a decreasing sequence of `sigma`. Each stage yields tail weights
/// `w` with `0 <= w_i <= 1/(alpha n)`, `sum w = 1`, and
/// `min_theta sum w_i l_i(theta)` is a lower bound on the optimum; the run stops
/// once the superquantile at the best iterate is within `gap_tol` of it.
pub fn estimate_reference_with<L: LossModel + ?Sized>(
    loss: &L,
    alpha: ConfidenceLevel,
    population: &[Example],
    init: &ParamState,
    opts: ReferenceOptions,
) -> Result<ReferenceSolution> {
    if population.is_empty() {
        return Err(Error::EmptyInput("reference population"));
    }
    crate::types::validate_state(init.clone())?;
    if alpha.get() == 1.0 {
        return mean_reference(loss, population, init, opts);
    }
    let m = init.dim();
    let n = population.len();
    let a = alpha.get();
    let inv_alpha = alpha.inv();
    let mu = loss.constants().mu;
    let refs: Vec<&Example> = population.iter().collect();

    let cvar_at = |theta: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (vals, _) = losses_and_grads(loss, theta, population)?;
        Ok((cvar_sorted(&vals, alpha)?, vals))
    };
    // Lower bound from dual weights `w` evaluated around `theta`, plus the
    // weighted minimizer as a fresh primal candidate when the loss has one.
    let dual_bound = |w: &[f64], theta: &[f64]| -> Result<(Option<f64>, Option<Vec<f64>>)> {
        if let Some(Ok(th)) = loss.weighted_minimizer(&refs, w) {
            let mut acc = NeumaierSum::new();
            for (e, &wi) in population.iter().zip(w) {
                if wi != 0.0 {
                    acc.add(wi * loss.value(&th, e)?);
                }
            }
            return Ok((Some(acc.total()), Some(th)));
        }
        if mu > 0.0 {
            let (vals, grads) = losses_and_grads(loss, theta, population)?;
            let mut val = NeumaierSum::new();
            let mut g = alloc::vec![NeumaierSum::new(); m];
            for (i, &wi) in w.iter().enumerate() {
                val.add(wi * vals[i]);
                for (gj, &d) in g.iter_mut().zip(&grads[i * m..(i + 1) * m]) {
                    gj.add(wi * d);
                }
            }
            let gn: f64 = g.iter().map(|s| s.total() * s.total()).sum();
            return Ok((Some(val.total() - gn / (2.0 * mu)), None));
        }
        Ok((None, None))
    };

    let (f0, vals0) = cvar_at(&init.theta)?;
    let var0 = value_at_risk(&vals0, alpha)?;
    let scale = 1.0 + libm::fabs(f0);
    let mut sigma = (0.1 * (f0 - var0)).max(1e-3 * scale);
    let sigma_min = 1e-13 * scale;

    let mut best_theta = init.theta.clone();
    let mut best_ub = f0;
    let mut best_lb = f64::NEG_INFINITY;
    let mut any_bound = false;
    let mut z = init.theta.clone();
    z.push(var0);
    let mut used = 0usize;

    loop {
        let s = sigma;
        let objective = |zz: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (theta, t) = (&zz[..m], zz[m]);
            let (vals, grads) = losses_and_grads(loss, theta, population)?;
            let mut val = NeumaierSum::new();
            let mut mass = NeumaierSum::new();
            let mut g = alloc::vec![NeumaierSum::new(); m];
            for (i, &l) in vals.iter().enumerate() {
                let d = l - t;
                val.add(crate::losses::r_sigma(s, d));
                let p = math::norm_cdf(d / s);
                if p != 0.0 {
                    mass.add(p);
                    for (gj, &dg) in g.iter_mut().zip(&grads[i * m..(i + 1) * m]) {
                        gj.add(p * dg);
                    }
                }
            }
            let nf = n as f64;
            let mut grad: Vec<f64> = g.iter().map(|v| inv_alpha * v.total() / nf).collect();
            grad.push(1.0 - inv_alpha * mass.total() / nf);
            Ok((t + inv_alpha * val.total() / nf, grad))
        };
        let budget = (opts.max_iter - used).min(2_000);
        let stage = bfgs(objective, &z, (1e-3 * s).max(1e-12), budget)?;
        used += stage.iterations.max(1);
        let last_grad = math::norm(&stage.grad);
        z = stage.x;

        let theta = &z[..m];
        let (ub, vals) = cvar_at(theta)?;
        if ub < best_ub {
            best_ub = ub;
            best_theta = theta.to_vec();
        }
        for w in [
            smoothed_weights(&vals, z[m], s, a),
            tail_weights(&vals, alpha),
        ] {
            let (lb, candidate) = dual_bound(&w, theta)?;
            if let Some(lb) = lb {
                any_bound = true;
                best_lb = best_lb.max(lb);
            }
            if let Some(th) = candidate {
                let (cub, _) = cvar_at(&th)?;
                if cub < best_ub {
                    best_ub = cub;
                    best_theta = th;
                }
            }
        }
        let tol = opts.gap_tol * (1.0 + libm::fabs(best_ub));
        if any_bound && best_ub - best_lb <= tol {
            break;
        }
        if sigma <= sigma_min || used >= opts.max_iter {
            if any_bound {
                return Err(Error::NotConverged {
                    theta: best_theta,
                    t: z[m],
                    grad_norm: last_grad,
                    iterations: used,
                });
            }
            // Nothing certifies the result; accept only a stationary final stage.
            if !stage.converged {
                return Err(Error::NotConverged {
                    theta: best_theta,
                    t: z[m],
                    grad_norm: last_grad,
                    iterations: used,
                });
            }
            break;
        }
        sigma = (sigma * 0.1).max(sigma_min);
    }

    let (vals, _) = losses_and_grads(loss, &best_theta, population)?;
    let t_star = value_at_risk(&vals, alpha)?;
    Ok(ReferenceSolution {
        theta_star: best_theta,
        t_star,
        g_star: best_ub,
        method: ReferenceMethod::SmoothedContinuation,
        n_samples: n,
        certified_gap: any_bound.then(|| (best_ub - best_lb).max(0.0)),
    })
}

fn mean_reference<L: LossModel + ?Sized>(
    loss: &L,
    population: &[Example],
    init: &ParamState,
    opts: ReferenceOptions,
) -> Result<ReferenceSolution> {
    let refs: Vec<&Example> = population.iter().collect();
    let weights = alloc::vec![1.0 / population.len() as f64; population.len()];
    let (theta, method) = match loss.weighted_minimizer(&refs, &weights) {
        Some(Ok(th)) => (th, ReferenceMethod::MeanClosedForm),
        _ => {
            let min = bfgs(
                |th| mean_loss_and_grad(loss, th, &refs),
                &init.theta,
                1e-8,
                opts.max_iter,
            )?;
            if !min.converged {
                return Err(Error::NotConverged {
                    grad_norm: math::norm(&min.grad),
                    theta: min.x,
                    t: init.t,
                    iterations: min.iterations,
                });
            }
            (min.x, ReferenceMethod::MeanQuasiNewton)
        }
    };
    let (g_star, grad) = mean_loss_and_grad(loss, &theta, &refs)?;
    let (vals, _) = losses_and_grads(loss, &theta, population)?;
    let t_star = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let mu = loss.constants().mu;
    Ok(ReferenceSolution {
        theta_star: theta,
        t_star,
        g_star,
        method,
        n_samples: population.len(),
        certified_gap: (mu > 0.0).then(|| math::sq_norm(&grad) / (2.0 * mu)),
    })
}

/// Weights `Phi((l_i - t)/sigma) / (alpha n)`, moved onto the set
/// `{0 <= w_i <= 1/(alpha n), sum w = 1}`.
fn smoothed_weights(vals: &[f64], t: f64, sigma: f64, alpha: f64) -> Vec<f64> {
    let cap = 1.0 / (alpha * vals.len() as f64);
    let w: Vec<f64> = vals
        .iter()
        .map(|&l| cap * math::norm_cdf((l - t) / sigma))
        .collect();
    fill_capped_simplex(w, vals, cap)
}

/// The weights realizing the superquantile at these losses: `1/(alpha n)` on
/// the top `ceil(alpha n) - 1`, the remainder on the next one.
fn tail_weights(vals: &[f64], alpha: ConfidenceLevel) -> Vec<f64> {
    let cap = 1.0 / (alpha.get() * vals.len() as f64);
    fill_capped_simplex(alloc::vec![0.0; vals.len()], vals, cap)
}

/// Rescales down if the total exceeds one; otherwise tops up the largest
/// losses to the cap until the total is one.
fn fill_capped_simplex(mut w: Vec<f64>, vals: &[f64], cap: f64) -> Vec<f64> {
    let total = math::compensated_sum(w.iter().copied());
    if total >= 1.0 {
        for wi in w.iter_mut() {
            *wi /= total;
        }
        return w;
    }
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&i, &j| vals[j].total_cmp(&vals[i]));
    let mut missing = 1.0 - total;
    for i in order {
        if missing <= 0.0 {
            break;
        }
        let add = (cap - w[i]).min(missing).max(0.0);
        w[i] += add;
        missing -= add;
    }
    w
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lemma1Report {
    pub n_states: usize,
    /// States meeting the event-mass condition, hence tested.
    pub n_checked: usize,
    pub n_violations: usize,
    /// Minimum over tested states of `0.5 |grad G|^2 - mu (G - G*)`.
    pub worst_margin: f64,
}

/// At each state whose event mass exceeds `alpha + 2 alpha mu (t* - t)_+`,
/// checks `mu (G - G*) <= 0.5 |grad G|^2` within three combined standard errors.
pub fn lemma1_check<L: LossModel + ?Sized>(
    loss: &L,
    alpha: ConfidenceLevel,
    mu: f64,
    states: &[ParamState],
    population: &[Example],
    reference: &ReferenceSolution,
) -> Result<Lemma1Report> {
    check_mu(mu)?;
    if population.is_empty() {
        return Err(Error::EmptyInput("population"));
    }
    let a = alpha.get();
    let mut report = Lemma1Report {
        n_states: states.len(),
        n_checked: 0,
        n_violations: 0,
        worst_margin: f64::INFINITY,
    };
    for state in states {
        let losses = per_sample_losses(state, loss, population)?;
        let hits = losses.iter().filter(|&&l| l - state.t > 0.0).count();
        let threshold = a + 2.0 * a * mu * (reference.t_star - state.t).max(0.0);
        if hits as f64 / population.len() as f64 <= threshold {
            continue;
        }
        let s = summarize_with_losses(state, loss, population, &losses, alpha)?;
        report.n_checked += 1;
        let margin = s.half_sq_grad() - mu * (s.g.value - reference.g_star);
        let se_g = mu * s.g.std_error;
        let se_h = s.half_sq_grad_std_error;
        let slack = PL_SLACK + MC_SIGMAS * libm::sqrt(se_g * se_g + se_h * se_h);
        report.worst_margin = report.worst_margin.min(margin);
        if margin < -slack {
            report.n_violations += 1;
        }
    }
    Ok(report)
}

/// Result of [`stepsize_admissibility`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Admissibility {
    /// `lower <= gamma < upper`.
    pub ok: bool,
    /// `alpha eps / (1 - alpha)`
    pub lower: f64,
    /// `eps / (2 mu (t* - l) + 1)`
    pub upper: f64,
    /// `t* - l < (1 - 2 alpha) / (2 alpha mu)`: whether any `gamma` can satisfy both.
    pub feasible: bool,
}

/// Window of `gamma` values for which the `t`-drift condition holds with margin `epsilon`.
pub fn stepsize_admissibility(
    alpha: ConfidenceLevel,
    epsilon: f64,
    gamma: f64,
    mu: f64,
    t_star: f64,
    l_floor: f64,
) -> Result<Admissibility> {
    let a = alpha.get();
    if a == 1.0 {
        return Err(Error::Validation(
            "stepsize window undefined at alpha = 1".into(),
        ));
    }
    for (name, v) in [("epsilon", epsilon), ("gamma", gamma)] {
        if !(v.is_finite() && v > 0.0) {
            return Err(Error::Validation(alloc::format!("{name} must be positive, got {v}")));
        }
    }
    check_mu(mu)?;
    let excess = t_star - l_floor;
    if !(excess.is_finite() && excess >= 0.0) {
        return Err(Error::Validation(alloc::format!(
            "t* ({t_star}) must not lie below the loss floor ({l_floor})"
        )));
    }
    let lower = a * epsilon / (1.0 - a);
    let upper = epsilon / (2.0 * mu * excess + 1.0);
    Ok(Admissibility {
        ok: lower <= gamma && gamma < upper,
        lower,
        upper,
        feasible: excess < (1.0 - 2.0 * a) / (2.0 * a * mu),
    })
}

/// `(1 - 2 mu min)^T gap0 + max^2 / min * L (1 + C^2) / (4 alpha^2 mu)` with
/// `min`, `max` taken over the two stepsizes.
pub fn theorem1_bound(
    mu: f64,
    l_smooth: f64,
    steps: StepSizes,
    alpha: ConfidenceLevel,
    horizon: u64,
    gap0: f64,
    c_t_squared: f64,
) -> Result<f64> {
    check_mu(mu)?;
    for (name, v) in [("l_smooth", l_smooth), ("gap0", gap0), ("c_t_squared", c_t_squared)] {
        if !(v.is_finite() && v >= 0.0) {
            return Err(Error::Validation(alloc::format!(
                "{name} must be finite and nonnegative, got {v}"
            )));
        }
    }
    let (lo, hi) = (steps.min(), steps.max());
    let q = 2.0 * mu * lo;
    if q >= 1.0 {
        return Err(Error::Hypothesis(alloc::format!(
            "2 mu min(beta, gamma) = {q} must be below 1"
        )));
    }
    let a = alpha.get();
    let contraction = libm::pow(1.0 - q, horizon as f64);
    Ok(contraction * gap0 + hi * hi / lo * l_smooth * (1.0 + c_t_squared) / (4.0 * a * a * mu))
}

/// Fitted geometric decay of a gap sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateFit {
    /// Per-entry contraction factor.
    pub rho: f64,
    pub floor: f64,
    /// Fitted index range `[start, end)`.
    pub start: usize,
    pub end: usize,
}

/// Fits `gap_n - floor ~ C rho^n` before the sequence reaches its floor.
///
/// The floor is the `floor_quantile` quantile of the last 10% of `gaps`,
/// or zero if that tail is itself still decaying (its first-half median more
/// than twice its second-half median). The fit is least squares on
/// `log(max(gap - floor, 1e-300))` from `burn_in` up to the first index where
/// `gap <= 2 floor`.
pub fn fit_linear_rate(gaps: &[f64], burn_in: usize, floor_quantile: f64) -> Result<RateFit> {
    if gaps.len() <= burn_in + 10 {
        return Err(Error::Validation(alloc::format!(
            "need more than {} gaps, got {}",
            burn_in + 10,
            gaps.len()
        )));
    }
    if !(floor_quantile > 0.0 && floor_quantile < 1.0) {
        return Err(Error::Validation(alloc::format!(
            "floor_quantile must lie in (0, 1), got {floor_quantile}"
        )));
    }
    if gaps.iter().any(|g| !g.is_finite()) {
        return Err(Error::Validation("gaps must be finite".into()));
    }
    let tail_len = gaps.len().div_ceil(10);
    let tail = &gaps[gaps.len() - tail_len..];
    let mut floor = quantile(tail, floor_quantile);
    if tail_len >= 4 {
        let (m1, m2) = (median(&tail[..tail_len / 2]), median(&tail[tail_len / 2..]));
        if m1 > 0.0 && m2 > 0.0 && m1 > 2.0 * m2 {
            floor = 0.0;
        }
    }
    let end = (burn_in..gaps.len())
        .find(|&i| gaps[i] <= 2.0 * floor)
        .unwrap_or(gaps.len());
    if end < burn_in + 2 {
        return Err(Error::Hypothesis("already at noise floor".into()));
    }
    let pts = end - burn_in;
    let xm = (burn_in + end - 1) as f64 / 2.0;
    let ys: Vec<f64> = gaps[burn_in..end]
        .iter()
        .map(|g| libm::log((g - floor).max(1e-300)))
        .collect();
    let ym = math::compensated_sum(ys.iter().copied()) / pts as f64;
    let mut sxy = NeumaierSum::new();
    let mut sxx = NeumaierSum::new();
    for (k, y) in ys.iter().enumerate() {
        let dx = (burn_in + k) as f64 - xm;
        sxy.add(dx * (y - ym));
        sxx.add(dx * dx);
    }
    Ok(RateFit {
        rho: libm::exp(sxy.total() / sxx.total()),
        floor,
        start: burn_in,
        end,
    })
}

/// Linear-interpolation sample quantile.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let pos = q * (s.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let hi = (lo + 1).min(s.len() - 1);
    s[lo] + (pos - lo as f64) * (s[hi] - s[lo])
}

fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradBoundEstimate {
    /// Largest mean `|grad_theta l|^2` over the inspected states.
    pub c_t_squared: f64,
    /// Standard error of the winning estimate.
    pub std_error: f64,
    pub n_states: usize,
    /// Trace iteration of the winning state.
    pub argmax_iter: usize,
}

/// Estimates `sup_n E |grad_theta l(theta_n)|^2` over every `stride`-th trace
/// record, each with `batch` fresh examples from `eval_source`.
pub fn estimate_grad_bound<L, I>(
    trace: &Trace,
    loss: &L,
    eval_source: &mut I,
    batch: usize,
    stride: usize,
) -> Result<GradBoundEstimate>
where
    L: LossModel + ?Sized,
    I: Iterator<Item = Example>,
{
    if trace.is_empty() {
        return Err(Error::EmptyInput("trace"));
    }
    if batch == 0 || stride == 0 {
        return Err(Error::Validation("batch and stride must be positive".into()));
    }
    let mut best = GradBoundEstimate {
        c_t_squared: f64::NEG_INFINITY,
        std_error: 0.0,
        n_states: 0,
        argmax_iter: 0,
    };
    let mut sq = Vec::with_capacity(batch);
    for (idx, rec) in trace.records.iter().enumerate() {
        if idx % stride != 0 {
            continue;
        }
        sq.clear();
        let mut g = alloc::vec![0.0; rec.state.dim()];
        for drawn in 0..batch {
            let e = eval_source.next().ok_or(Error::StreamExhausted {
                completed: drawn,
                requested: batch,
            })?;
            loss.grad_theta_into(&rec.state.theta, &e, &mut g)?;
            sq.push(math::sq_norm(&g));
        }
        let (mean, se) = math::mean_and_std_error(&sq);
        best.n_states += 1;
        if mean > best.c_t_squared {
            best.c_t_squared = mean;
            best.std_error = se;
            best.argmax_iter = rec.iter;
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::RidgeLoss;
    use alloc::vec;

    fn a(v: f64) -> ConfidenceLevel {
        ConfidenceLevel::new(v).unwrap()
    }

    fn sq(x: &[f64]) -> (f64, Vec<f64>) {
        (math::sq_norm(x), x.iter().map(|v| 2.0 * v).collect())
    }

    #[test]
    fn pl_check_on_squared_norm() {
        let pts = vec![vec![1.0, -2.0], vec![0.3, 0.0], vec![0.0, 0.0]];
        let r = pl_check(sq, &pts, 2.0, 0.0).unwrap();
        assert_eq!((r.n_points, r.n_violations), (3, 0));
        let r = pl_check(sq, &pts, 2.5, 0.0).unwrap();
        assert_eq!(r.n_violations, 2);
        let r = pl_check(|_: &[f64]| (4.0, vec![0.0, 0.0]), &pts, 7.0, 4.0).unwrap();
        assert_eq!(r.n_violations, 0);
        assert!(matches!(
            pl_check(sq, &pts, 2.0, 1.0),
            Err(Error::BadInfimum { .. })
        ));
    }

    #[test]
    fn admissibility_example() {
        let r = stepsize_admissibility(a(0.2), 0.004, 0.001, 0.2, 1.0, 0.0).unwrap();
        assert_eq!(r.lower, 0.001);
        assert!((r.upper - 0.004 / 1.4).abs() < 1e-15);
        assert!(r.ok);
        assert!(r.feasible);
        let r = stepsize_admissibility(a(0.2), 0.004, 0.0009, 0.2, 1.0, 0.0).unwrap();
        assert!(!r.ok);
        let r = stepsize_admissibility(a(0.5), 0.004, 0.001, 0.3, 0.5, 0.0).unwrap();
        assert!(!r.feasible);
        assert!(stepsize_admissibility(a(1.0), 0.004, 0.001, 0.2, 1.0, 0.0).is_err());
    }

    #[test]
    fn theorem1_example() {
        let steps = StepSizes::new(0.001, 0.001).unwrap();
        let b = theorem1_bound(0.2, 1.0, steps, a(0.2), 10_000, 1.0, 10.0).unwrap();
        let expected = libm::exp(10_000.0 * libm::log(0.9996)) + 0.001 * 11.0 / (4.0 * 0.04 * 0.2);
        assert!((b - expected).abs() < 1e-12);
        assert!((b - (0.0183 + 0.34375)).abs() < 1e-4);
        let steps = StepSizes::new(0.002, 0.001).unwrap();
        let floor = theorem1_bound(0.2, 1.0, steps, a(0.2), 5, 0.0, 0.0).unwrap();
        assert!((floor - 0.002 * 0.002 / 0.001 / (4.0 * 0.04 * 0.2)).abs() < 1e-15);
        let big = StepSizes::new(3.0, 3.0).unwrap();
        assert!(matches!(
            theorem1_bound(0.2, 1.0, big, a(0.2), 5, 0.0, 0.0),
            Err(Error::Hypothesis(_))
        ));
    }

    #[test]
    fn rate_fit_geometric() {
        let gaps: Vec<f64> = (0..200).map(|n| libm::pow(0.5, n as f64)).collect();
        let r = fit_linear_rate(&gaps, 0, 0.5).unwrap();
        assert!((r.rho - 0.5).abs() < 1e-6, "{r:?}");
        assert_eq!(r.floor, 0.0);
    }

    #[test]
    fn rate_fit_with_floor() {
        let gaps: Vec<f64> = (0..1000).map(|n| libm::pow(0.9, n as f64) + 0.01).collect();
        let r = fit_linear_rate(&gaps, 0, 0.5).unwrap();
        assert!((0.88..=0.92).contains(&r.rho), "{r:?}");
        assert!((r.floor - 0.01).abs() < 1e-6);
    }

    #[test]
    fn rate_fit_constant_is_at_floor() {
        let gaps = vec![0.3; 100];
        match fit_linear_rate(&gaps, 0, 0.5) {
            Err(Error::Hypothesis(msg)) => assert_eq!(msg, "already at noise floor"),
            other => panic!("{other:?}"),
        }
        assert!(fit_linear_rate(&gaps[..10], 0, 0.5).is_err());
    }

    #[test]
    fn capped_simplex_weights() {
        let vals = [5.0, 1.0, 3.0, 4.0, 2.0];
        let w = tail_weights(&vals, a(0.3));
        // alpha n = 1.5: full weight 1/1.5 on 5.0, the rest on 4.0.
        assert!((w[0] - 1.0 / 1.5).abs() < 1e-15);
        assert!((w[3] - 0.5 / 1.5).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    fn ex(x: &[f64], y: f64) -> Example {
        Example::new(x.to_vec(), y).unwrap()
    }

    #[test]
    fn reference_single_example() {
        let loss = RidgeLoss::new(0.1).unwrap();
        let pop = vec![ex(&[1.0, 2.0], 3.0)];
        let r = estimate_reference(&loss, a(0.2), &pop, &ParamState::zeros(2)).unwrap();
        let refs: Vec<&Example> = pop.iter().collect();
        let th = loss.weighted_minimizer(&refs, &[1.0]).unwrap().unwrap();
        let lmin = loss.value(&th, &pop[0]).unwrap();
        assert!((r.g_star - lmin).abs() < 1e-9, "{r:?} vs {lmin}");
        assert!((r.t_star - lmin).abs() < 1e-9);
    }

    #[test]
    fn grad_bound_zero_gradient() {
        struct Flat;
        impl LossModel for Flat {
            fn value(&self, _: &[f64], _: &Example) -> Result<f64> {
                Ok(1.0)
            }
            fn grad_theta_into(&self, _: &[f64], _: &Example, out: &mut [f64]) -> Result<()> {
                out.fill(0.0);
                Ok(())
            }
            fn constants(&self) -> crate::types::LossConstants {
                crate::types::LossConstants { mu: 0.0, l_smooth: 0.0, g_lip: 0.0, l_floor: 1.0 }
            }
        }
        let trace = Trace {
            records: vec![crate::types::TraceRecord {
                iter: 0,
                state: ParamState::zeros(1),
                in_event: false,
                loss_sample: None,
                g_alpha_est: None,
            }],
        };
        let mut src = core::iter::repeat(ex(&[1.0], 1.0));
        let g = estimate_grad_bound(&trace, &Flat, &mut src, 10, 1).unwrap();
        assert_eq!(g.c_t_squared, 0.0);
    }
}

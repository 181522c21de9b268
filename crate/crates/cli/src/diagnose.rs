//! The `diagnose` command: checks the PL-type conditions, the stepsize window
//! and the convergence bound against completed runs, and writes `report.json`.

use std::path::Path;

use cvar_sgd_core::datagen::{uniforms, Lane};
use cvar_sgd_core::diagnostics::{
    estimate_grad_bound, lemma1_check, pl_check, set_restricted_pl_check, stepsize_admissibility,
    theorem1_bound, Admissibility, Lemma1Report, PlReport,
};
use cvar_sgd_core::losses::smoothness_constant_lprime;
use cvar_sgd_core::math::{self, norm};
use cvar_sgd_core::{Example, LossModel, ParamState, StepSizes, Trace};
use serde::Serialize;

use crate::error::CliError;
use crate::experiment::{log, mean_gaps, rate_outcome, Context, RateOutcome, ReferenceSummary, SeedRun};
use crate::output::{read_trace, trace_path, write_json};

#[derive(Debug, Clone, Serialize)]
pub struct Constant {
    pub value: f64,
    pub provenance: String,
}

fn constant(value: f64, provenance: impl Into<String>) -> Constant {
    Constant {
        value,
        provenance: provenance.into(),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PlSummary {
    pub mu_tested: f64,
    pub n_points: usize,
    pub n_violations: usize,
    pub n_skipped: usize,
    pub worst_margin: Option<f64>,
    pub infimum_crosscheck: Option<f64>,
}

impl From<&PlReport> for PlSummary {
    fn from(r: &PlReport) -> Self {
        Self {
            mu_tested: r.mu_tested,
            n_points: r.n_points,
            n_violations: r.n_violations,
            n_skipped: r.n_skipped,
            worst_margin: r.worst_margin.is_finite().then_some(r.worst_margin),
            infimum_crosscheck: r.infimum_crosscheck,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Summary {
    pub run: usize,
    pub n_states: usize,
    pub n_checked: usize,
    pub n_violations: usize,
    pub worst_margin: Option<f64>,
}

impl Lemma1Summary {
    fn new(run: usize, r: &Lemma1Report) -> Self {
        Self {
            run,
            n_states: r.n_states,
            n_checked: r.n_checked,
            n_violations: r.n_violations,
            worst_margin: r.worst_margin.is_finite().then_some(r.worst_margin),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum AdmissibilityOutcome {
    Checked {
        epsilon: f64,
        gamma: f64,
        ok: bool,
        lower: f64,
        upper: f64,
        feasible: bool,
    },
    Undefined {
        error: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundPoint {
    pub iter: usize,
    pub mean_gap: f64,
    pub mean_gap_std_error: f64,
    pub bound: f64,
    pub below: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct Theorem1Constants {
    pub mu: Constant,
    pub l_smooth: Constant,
    pub c_t_squared: Constant,
    pub gap0: Constant,
    pub g_star: Constant,
    pub t_star: Constant,
    pub alpha: Constant,
    pub beta: Constant,
    pub gamma: Constant,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Theorem1Outcome {
    Evaluated {
        constants: Theorem1Constants,
        all_below: bool,
        trajectory: Vec<BoundPoint>,
    },
    Inapplicable {
        constants: Theorem1Constants,
        error: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config: serde_json::Value,
    pub reference: ReferenceSummary,
    /// PL inequality of the population mean loss at the random test states.
    pub pl_mean_loss: PlSummary,
    /// Set-restricted PL inequality with the event `A(theta, t)` as restriction.
    pub set_restricted_pl: PlSummary,
    pub lemma1: Lemma1Summary,
    pub stepsize_admissibility: AdmissibilityOutcome,
    pub theorem1: Theorem1Outcome,
    pub rate_fit: RateOutcome,
    pub notes: Vec<String>,
}

/// Random test states: `theta` uniform in a box of half-width 2 around the
/// reference solution, `t` at the loss quantile that leaves a uniformly drawn
/// event mass in `[1.2 m, 0.95]` above it, where `m` is `min_event_mass`.
pub fn random_states(ctx: &Context, n: usize) -> Result<Vec<ParamState>, CliError> {
    let d = &ctx.config.diagnostics;
    let m = ctx.spec.dim_d;
    let lo_mass = (1.2 * d.min_event_mass).min(0.95);
    let mut u = vec![0.0; m + 1];
    let mut states = Vec::with_capacity(n);
    let pop = &ctx.population;
    for k in 0..n as u64 {
        uniforms(d.seed, Lane::POPULATION, k, &mut u);
        let theta: Vec<f64> = ctx
            .reference
            .theta_star
            .iter()
            .zip(&u)
            .map(|(c, v)| c + 4.0 * v - 2.0)
            .collect();
        let mass = lo_mass + (0.95 - lo_mass) * u[m];
        let mut losses = pop
            .iter()
            .map(|e| ctx.loss.value(&theta, e))
            .collect::<Result<Vec<_>, _>>()?;
        losses.sort_by(f64::total_cmp);
        let idx = ((1.0 - mass) * pop.len() as f64) as usize;
        let t = losses[idx.min(pop.len() - 1)];
        states.push(ParamState { theta, t });
    }
    Ok(states)
}

/// Reads every seed's trace and recomputes its population gaps.
fn load_runs(ctx: &Context, dir: &Path) -> Result<Vec<SeedRun>, CliError> {
    (0..ctx.config.experiment.n_seeds)
        .map(|i| {
            let path = trace_path(dir, i);
            if !path.exists() {
                return Err(CliError::Io(format!(
                    "missing trace {}; run `cvar-sgd run` first or pass --run",
                    path.display()
                )));
            }
            let loaded = read_trace(&path)?;
            if loaded.config_json != ctx.config_json {
                return Err(CliError::Config(format!(
                    "{} was produced by a different configuration",
                    path.display()
                )));
            }
            let gaps = loaded
                .trace
                .checkpoints()
                .map(|r| ctx.gap(&r.state).map(|g| (r.iter, g)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SeedRun {
                run: i,
                seed: ctx.config.run_seed(i),
                trace: loaded.trace,
                lms: Vec::new(),
                gaps,
            })
        })
        .collect()
}

fn checkpoint_trace(t: &Trace) -> Trace {
    Trace {
        records: t.checkpoints().cloned().collect(),
    }
}

/// Smoothness constant for the bound, with its provenance.
fn smoothness(ctx: &Context, runs: &[SeedRun]) -> Constant {
    let cfg = &ctx.config;
    let c = ctx.loss.constants();
    if let Some(l) = cfg.diagnostics.l_smooth {
        return constant(l, "user_supplied: diagnostics.l_smooth");
    }
    if cfg.sgd.sigma > 0.0 {
        let radius = runs
            .iter()
            .flat_map(|r| r.trace.records.iter())
            .map(|r| norm(&r.state.theta))
            .fold(norm(&ctx.reference.theta_star), f64::max);
        let y_max = ctx.population.iter().map(|e| e.y.abs()).fold(0.0, f64::max);
        let g = ctx.loss.lipschitz_over_box(radius, ctx.spec.x_norm_max(), y_max);
        let mut consts = c;
        consts.g_lip = g;
        return constant(
            smoothness_constant_lprime(&consts, cfg.sgd.sigma, ctx.alpha),
            format!(
                "smoothed_objective: (L sigma sqrt(2 pi) + G^2) / (alpha sigma sqrt(2 pi)) with L = 2 E|x|^2 + 2 lambda = {}, G = {} the loss gradient bound over |theta| <= {} (largest iterate norm)",
                c.l_smooth, g, radius
            ),
        );
    }
    constant(
        c.l_smooth,
        "loss_gradient_lipschitz: 2 E|x|^2 + 2 lambda from the input law; stands in for the smoothness of G_alpha, which is not available in closed form",
    )
}

pub fn diagnose(ctx: &Context, dir: &Path, quiet: bool) -> Result<Report, CliError> {
    let cfg = &ctx.config;
    let runs = load_runs(ctx, dir)?;
    let mu = ctx.loss.constants().mu;
    let loss = &ctx.loss;
    let pop = &ctx.population;

    log(quiet, "PL checks");
    let states = random_states(ctx, cfg.diagnostics.pl_states)?;
    let refs: Vec<&Example> = pop.iter().collect();
    let weights = vec![1.0 / pop.len() as f64; pop.len()];
    let theta_mean = loss
        .weighted_minimizer(&refs, &weights)
        .expect("ridge has a closed form")?;
    let mean_loss = |th: &[f64]| -> (f64, Vec<f64>) {
        let mut g = vec![0.0; th.len()];
        let mut acc = vec![0.0; th.len()];
        let mut v = 0.0;
        for e in pop {
            v += loss.value_and_grad(th, e, &mut g).expect("dimensions checked");
            math::axpy(1.0, &g, &mut acc);
        }
        let n = pop.len() as f64;
        (v / n, acc.iter().map(|a| a / n).collect())
    };
    let f_star = mean_loss(&theta_mean).0;
    let points: Vec<Vec<f64>> = states.iter().map(|s| s.theta.clone()).collect();
    let pl_mean = pl_check(mean_loss, &points, mu, f_star)?;
    let restricted = set_restricted_pl_check(loss, &states, mu, pop, cfg.diagnostics.min_event_mass)?;

    log(quiet, "gradient-dominance check along run 0");
    let first = &runs[0];
    let lemma_states: Vec<ParamState> = first.trace.checkpoints().map(|r| r.state.clone()).collect();
    let lemma = lemma1_check(loss, ctx.alpha, mu, &lemma_states, pop, &ctx.reference)?;

    let admissibility = match stepsize_admissibility(
        ctx.alpha,
        cfg.diagnostics.epsilon,
        cfg.sgd.gamma,
        mu,
        ctx.reference.t_star,
        loss.constants().l_floor,
    ) {
        Ok(Admissibility {
            ok,
            lower,
            upper,
            feasible,
        }) => AdmissibilityOutcome::Checked {
            epsilon: cfg.diagnostics.epsilon,
            gamma: cfg.sgd.gamma,
            ok,
            lower,
            upper,
            feasible,
        },
        Err(e) => AdmissibilityOutcome::Undefined {
            error: e.to_string(),
        },
    };

    log(quiet, "gradient bound and convergence bound");
    let mut c_t_squared = 0.0f64;
    for r in &runs {
        let mut src = pop.iter().cloned().cycle();
        let est = estimate_grad_bound(&checkpoint_trace(&r.trace), loss, &mut src, cfg.sgd.eval_batch, 1)?;
        c_t_squared = c_t_squared.max(est.c_t_squared);
    }
    let mean = mean_gaps(&runs);
    let gap0 = ctx.gap(&cfg.sgd_config(0)?.init)?;
    let steps = StepSizes::new(cfg.sgd.beta, cfg.sgd.gamma)?;
    let l_smooth = smoothness(ctx, &runs);
    let constants = Theorem1Constants {
        mu: constant(mu, "loss_strong_convexity: 2 lambda, the set-restricted PL parameter for the ridge loss"),
        c_t_squared: constant(
            c_t_squared,
            format!(
                "max over checkpoint states of all runs of mean |grad_theta l|^2 over {} population examples",
                cfg.sgd.eval_batch
            ),
        ),
        gap0: constant(gap0, "population G_alpha at the initial state minus g_star"),
        g_star: constant(ctx.reference.g_star, format!("population reference ({})", ctx.reference.method.as_str())),
        t_star: constant(ctx.reference.t_star, "population value-at-risk at theta_star"),
        alpha: constant(ctx.alpha.get(), "config: sgd.alpha"),
        beta: constant(cfg.sgd.beta, "config: sgd.beta"),
        gamma: constant(cfg.sgd.gamma, "config: sgd.gamma"),
        l_smooth,
    };
    let theorem1 = {
        let mut trajectory = Vec::with_capacity(mean.len());
        let mut failure = None;
        for &(iter, gap, se) in &mean {
            match theorem1_bound(
                mu,
                constants.l_smooth.value,
                steps,
                ctx.alpha,
                iter as u64,
                gap0.max(0.0),
                c_t_squared,
            ) {
                Ok(bound) => trajectory.push(BoundPoint {
                    iter,
                    mean_gap: gap,
                    mean_gap_std_error: se,
                    bound,
                    below: gap <= bound,
                }),
                Err(e) => {
                    failure = Some(e.to_string());
                    break;
                }
            }
        }
        match failure {
            Some(error) => Theorem1Outcome::Inapplicable { constants, error },
            None => Theorem1Outcome::Evaluated {
                all_below: trajectory.iter().all(|p| p.below),
                constants,
                trajectory,
            },
        }
    };
    let rate_fit = rate_outcome(
        &mean,
        cfg.sgd.eval_cadence,
        cfg.diagnostics.burn_in,
        cfg.diagnostics.floor_quantile,
    );

    Ok(Report {
        config: serde_json::from_str(&ctx.config_json).expect("config JSON parses"),
        reference: (&ctx.reference).into(),
        pl_mean_loss: (&pl_mean).into(),
        set_restricted_pl: (&restricted).into(),
        lemma1: Lemma1Summary::new(0, &lemma),
        stepsize_admissibility: admissibility,
        theorem1,
        rate_fit,
        notes: vec![
            "t_star, g_star and every gap use the fixed diagnostic population in place of the true distribution".into(),
            "the drift condition on t and the stepsize window use the population t_star; the two t* symbols of the window are treated as one".into(),
            "gaps are measured on the unsmoothed objective even when the run uses smoothing".into(),
        ],
    })
}

pub fn write_report(report: &Report, dir: &Path) -> Result<(), CliError> {
    write_json(&dir.join("report.json"), report)
}

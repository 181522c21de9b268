//! The `run` command: CV@R-SGD and LMS over several seeds, with population
//! gaps, test-error comparisons and a JSON summary.

use std::path::Path;

use cvar_sgd_core::datagen::{materialize_population_in, Lane, StreamCursor, StreamSpec};
use cvar_sgd_core::diagnostics::{
    estimate_reference_with, fit_linear_rate, ReferenceOptions, ReferenceSolution,
};
use cvar_sgd_core::math::{dot, mean_and_std_error};
use cvar_sgd_core::objective::{cvar_sorted, g_alpha_estimate};
use cvar_sgd_core::optimizer::{run, run_lms, RunFailure};
use cvar_sgd_core::{ConfidenceLevel, Example, LossModel, ParamState, RidgeLoss, Trace};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::output::{fmt_f64, trace_path, write_json, write_trace, CsvFile};

/// Shared, read-only state of one experiment.
pub struct Context {
    pub config: ExperimentConfig,
    pub config_json: String,
    pub spec: StreamSpec,
    pub loss: RidgeLoss,
    pub alpha: ConfidenceLevel,
    /// Fixed sample behind every gap and diagnostic.
    pub population: Vec<Example>,
    pub reference: ReferenceSolution,
}

impl Context {
    pub fn prepare(config: ExperimentConfig) -> Result<Self, CliError> {
        let spec = config.stream_spec()?;
        let loss = config.loss()?;
        let alpha = config.alpha()?;
        let population = materialize_population_in(&spec, Lane::POPULATION, config.experiment.population_n);
        let init = config.sgd_config(0)?.init;
        let reference = estimate_reference_with(&loss, alpha, &population, &init, ReferenceOptions::default())?;
        Ok(Self {
            config_json: config.to_json(),
            config,
            spec,
            loss,
            alpha,
            population,
            reference,
        })
    }

    /// Training and evaluation stream of run `run`.
    pub fn run_spec(&self, run: usize) -> StreamSpec {
        self.spec.with_seed(self.config.run_seed(run))
    }

    /// `G_alpha(state) - G*` on the population.
    pub fn gap(&self, state: &ParamState) -> Result<f64, CliError> {
        let g = g_alpha_estimate(state, &self.loss, &self.population, self.alpha)?;
        Ok(g.value - self.reference.g_star)
    }

    pub fn test_set(&self) -> Vec<Example> {
        materialize_population_in(&self.spec, Lane::TEST, self.config.experiment.test_n)
    }
}

/// Outcome of one seed.
pub struct SeedRun {
    pub run: usize,
    pub seed: u64,
    pub trace: Trace,
    /// LMS iterates on the same stream.
    pub lms: Vec<Vec<f64>>,
    /// Population gaps at the checkpoint records, as `(iter, gap)`.
    pub gaps: Vec<(usize, f64)>,
}

pub fn run_one(ctx: &Context, run_idx: usize) -> Result<SeedRun, (CliError, Option<Trace>)> {
    let cfg = ctx.config.sgd_config(run_idx).map_err(|e| (e, None))?;
    let spec = ctx.run_spec(run_idx);
    let stream = StreamCursor::new(spec.clone(), Lane::TRAIN);
    let eval = StreamCursor::new(spec.clone(), Lane::EVAL).examples();
    let trace = run(&cfg, &ctx.loss, stream, eval).map_err(|RunFailure { error, partial }| {
        (CliError::Runtime(format!("run {run_idx}: {error}")), Some(partial))
    })?;
    let lms = run_lms(
        &cfg.init.theta,
        ctx.config.experiment.baseline_beta,
        &ctx.loss,
        StreamCursor::new(spec, Lane::TRAIN).examples(),
        cfg.horizon,
    )
    .map_err(|e| (CliError::Runtime(format!("run {run_idx} (LMS): {e}")), None))?;
    let gaps = trace
        .checkpoints()
        .map(|r| ctx.gap(&r.state).map(|g| (r.iter, g)))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| (e, None))?;
    Ok(SeedRun {
        run: run_idx,
        seed: cfg.seed,
        trace,
        lms,
        gaps,
    })
}

fn sq_error(theta: &[f64], e: &Example) -> f64 {
    let r = dot(theta, &e.x) - e.y;
    r * r
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub mean_std_error: f64,
    /// Empirical CV@R at the configured level.
    pub cvar: f64,
}

fn error_stats(samples: &[f64], alpha: ConfidenceLevel) -> Result<ErrorStats, CliError> {
    let (mean, se) = mean_and_std_error(samples);
    Ok(ErrorStats {
        mean,
        mean_std_error: se,
        cvar: cvar_sorted(samples, alpha)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct TestErrors {
    /// Unregularized squared error `(y - <theta, x>)^2`.
    pub sq_error: ErrorStats,
    /// Full ridge loss, the training objective's loss.
    pub ridge_loss: ErrorStats,
}

pub struct TestSamples {
    pub sq_error: Vec<f64>,
    pub ridge_loss: Vec<f64>,
}

pub fn test_samples(ctx: &Context, theta: &[f64], test: &[Example]) -> Result<TestSamples, CliError> {
    let mut sq = Vec::with_capacity(test.len());
    let mut rl = Vec::with_capacity(test.len());
    for e in test {
        sq.push(sq_error(theta, e));
        rl.push(ctx.loss.value(theta, e)?);
    }
    Ok(TestSamples {
        sq_error: sq,
        ridge_loss: rl,
    })
}

fn test_errors(ctx: &Context, s: &TestSamples) -> Result<TestErrors, CliError> {
    Ok(TestErrors {
        sq_error: error_stats(&s.sq_error, ctx.alpha)?,
        ridge_loss: error_stats(&s.ridge_loss, ctx.alpha)?,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ReferenceSummary {
    pub theta_star: Vec<f64>,
    pub t_star: f64,
    pub g_star: f64,
    pub method: &'static str,
    pub n_samples: usize,
    pub certified_gap: Option<f64>,
}

impl From<&ReferenceSolution> for ReferenceSummary {
    fn from(r: &ReferenceSolution) -> Self {
        Self {
            theta_star: r.theta_star.clone(),
            t_star: r.t_star,
            g_star: r.g_star,
            method: r.method.as_str(),
            n_samples: r.n_samples,
            certified_gap: r.certified_gap,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run: usize,
    pub seed: u64,
    pub final_theta: Vec<f64>,
    pub final_t: f64,
    pub final_gap: f64,
    pub final_g_alpha_est: Option<f64>,
    pub lms_final_theta: Vec<f64>,
    pub test_cvar_sgd: TestErrors,
    pub test_lms: TestErrors,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateSummary {
    pub rho_per_checkpoint: f64,
    pub rho_per_iteration: f64,
    pub floor: f64,
    pub fit_start_iter: usize,
    pub fit_end_iter: usize,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum RateOutcome {
    Fit(RateSummary),
    Failed { error: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct MeanGapSummary {
    pub checkpoints: usize,
    pub initial: f64,
    pub final_gap: f64,
    pub rate_fit: RateOutcome,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedAverages {
    pub cvar_sgd_sq_error_mean: f64,
    pub cvar_sgd_sq_error_cvar: f64,
    pub cvar_sgd_ridge_loss_mean: f64,
    pub cvar_sgd_ridge_loss_cvar: f64,
    pub lms_sq_error_mean: f64,
    pub lms_sq_error_cvar: f64,
    pub lms_ridge_loss_mean: f64,
    pub lms_ridge_loss_cvar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub config: serde_json::Value,
    pub reference: ReferenceSummary,
    pub runs: Vec<RunSummary>,
    pub mean_gap: MeanGapSummary,
    pub test_error_seed_averages: SeedAverages,
}

/// Mean gap over seeds at each checkpoint, with its standard error.
pub fn mean_gaps(runs: &[SeedRun]) -> Vec<(usize, f64, f64)> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    (0..first.gaps.len())
        .map(|k| {
            let vals: Vec<f64> = runs.iter().map(|r| r.gaps[k].1).collect();
            let (m, se) = mean_and_std_error(&vals);
            (first.gaps[k].0, m, se)
        })
        .collect()
}

pub fn rate_outcome(
    mean: &[(usize, f64, f64)],
    cadence: usize,
    burn_in: usize,
    floor_quantile: f64,
) -> RateOutcome {
    let gaps: Vec<f64> = mean.iter().map(|g| g.1).collect();
    match fit_linear_rate(&gaps, burn_in, floor_quantile) {
        Ok(fit) => RateOutcome::Fit(RateSummary {
            rho_per_checkpoint: fit.rho,
            rho_per_iteration: fit.rho.powf(1.0 / cadence as f64),
            floor: fit.floor,
            fit_start_iter: mean[fit.start].0,
            fit_end_iter: mean.get(fit.end).map_or(mean[mean.len() - 1].0 + cadence, |g| g.0),
        }),
        Err(e) => RateOutcome::Failed {
            error: e.to_string(),
        },
    }
}

/// Everything `run` produces, before it is written out.
pub struct RunOutput {
    pub ctx: Context,
    pub runs: Vec<SeedRun>,
    pub summary: Summary,
    pub test_samples_first: (TestSamples, TestSamples),
}

pub fn log(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

/// Runs every seed; on failure the offending partial trace is written before returning.
pub fn execute(config: ExperimentConfig, quiet: bool) -> Result<RunOutput, CliError> {
    let out_dir = config.experiment.output_dir.clone();
    log(quiet, format!("materializing population of {}", config.experiment.population_n));
    let ctx = Context::prepare(config)?;
    log(
        quiet,
        format!(
            "reference: G* = {} at t* = {} ({})",
            fmt_f64(ctx.reference.g_star),
            fmt_f64(ctx.reference.t_star),
            ctx.reference.method.as_str()
        ),
    );
    let n = ctx.config.experiment.n_seeds;
    let results: Vec<_> = (0..n).into_par_iter().map(|i| run_one(&ctx, i)).collect();
    let mut runs = Vec::with_capacity(n);
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(run) => runs.push(run),
            Err((e, partial)) => {
                if let Some(trace) = partial {
                    std::fs::create_dir_all(&out_dir).map_err(|err| CliError::io(&out_dir, err))?;
                    write_trace(&trace_path(&out_dir, i), &ctx.config_json, ctx.spec.dim_d, &trace)?;
                }
                return Err(e);
            }
        }
    }
    log(quiet, format!("finished {n} runs"));

    let test = ctx.test_set();
    let mut run_summaries = Vec::with_capacity(n);
    let mut first = None;
    for r in &runs {
        let last = r.trace.records.last().expect("trace has the initial record");
        let lms_theta = r.lms.last().expect("LMS has the initial iterate");
        let cs = test_samples(&ctx, &last.state.theta, &test)?;
        let ls = test_samples(&ctx, lms_theta, &test)?;
        run_summaries.push(RunSummary {
            run: r.run,
            seed: r.seed,
            final_theta: last.state.theta.clone(),
            final_t: last.state.t,
            final_gap: ctx.gap(&last.state)?,
            final_g_alpha_est: r.trace.checkpoints().last().and_then(|c| c.g_alpha_est),
            lms_final_theta: lms_theta.clone(),
            test_cvar_sgd: test_errors(&ctx, &cs)?,
            test_lms: test_errors(&ctx, &ls)?,
        });
        if first.is_none() {
            first = Some((cs, ls));
        }
    }

    let avg = |f: &dyn Fn(&RunSummary) -> f64| run_summaries.iter().map(f).sum::<f64>() / n as f64;
    let averages = SeedAverages {
        cvar_sgd_sq_error_mean: avg(&|r| r.test_cvar_sgd.sq_error.mean),
        cvar_sgd_sq_error_cvar: avg(&|r| r.test_cvar_sgd.sq_error.cvar),
        cvar_sgd_ridge_loss_mean: avg(&|r| r.test_cvar_sgd.ridge_loss.mean),
        cvar_sgd_ridge_loss_cvar: avg(&|r| r.test_cvar_sgd.ridge_loss.cvar),
        lms_sq_error_mean: avg(&|r| r.test_lms.sq_error.mean),
        lms_sq_error_cvar: avg(&|r| r.test_lms.sq_error.cvar),
        lms_ridge_loss_mean: avg(&|r| r.test_lms.ridge_loss.mean),
        lms_ridge_loss_cvar: avg(&|r| r.test_lms.ridge_loss.cvar),
    };
    let mg = mean_gaps(&runs);
    let d = &ctx.config.diagnostics;
    let mean_gap = MeanGapSummary {
        checkpoints: mg.len(),
        initial: mg.first().map_or(f64::NAN, |g| g.1),
        final_gap: mg.last().map_or(f64::NAN, |g| g.1),
        rate_fit: rate_outcome(&mg, ctx.config.sgd.eval_cadence, d.burn_in, d.floor_quantile),
    };
    let summary = Summary {
        config: serde_json::from_str(&ctx.config_json).expect("config JSON parses"),
        reference: (&ctx.reference).into(),
        runs: run_summaries,
        mean_gap,
        test_error_seed_averages: averages,
    };
    Ok(RunOutput {
        ctx,
        runs,
        summary,
        test_samples_first: first.expect("at least one run"),
    })
}

/// Writes traces, gap table, test-error tables and the summary.
pub fn write_outputs(out: &RunOutput, dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let ctx = &out.ctx;
    let cj = &ctx.config_json;
    let m = ctx.spec.dim_d;
    for r in &out.runs {
        write_trace(&trace_path(dir, r.run), cj, m, &r.trace)?;
    }

    let mut header = vec!["iter".to_string(), "mean_gap".into(), "std_error".into()];
    header.extend(out.runs.iter().map(|r| format!("gap_seed{}", r.run)));
    let mut gaps = CsvFile::create(&dir.join("gaps.csv"), cj, &header)?;
    for (k, (iter, mean, se)) in mean_gaps(&out.runs).into_iter().enumerate() {
        let mut row = vec![iter.to_string(), fmt_f64(mean), fmt_f64(se)];
        row.extend(out.runs.iter().map(|r| fmt_f64(r.gaps[k].1)));
        gaps.row(row)?;
    }
    gaps.finish()?;

    let (cs, ls) = &out.test_samples_first;
    let header: Vec<String> = ["index", "cvar_sgd_sq_error", "cvar_sgd_ridge_loss", "lms_sq_error", "lms_ridge_loss"]
        .map(String::from)
        .to_vec();
    let mut te = CsvFile::create(&dir.join("test_errors.csv"), cj, &header)?;
    for i in 0..cs.sq_error.len() {
        te.row([
            i.to_string(),
            fmt_f64(cs.sq_error[i]),
            fmt_f64(cs.ridge_loss[i]),
            fmt_f64(ls.sq_error[i]),
            fmt_f64(ls.ridge_loss[i]),
        ])?;
    }
    te.finish()?;

    // Instantaneous errors: iterate n-1 of each solver on the n-th stream example.
    let first = &out.runs[0];
    let stream = StreamCursor::new(ctx.run_spec(first.run), Lane::TRAIN).examples();
    let header: Vec<String> = ["iter", "cvar_sgd_sq_error", "cvar_sgd_ridge_loss", "lms_sq_error", "lms_ridge_loss"]
        .map(String::from)
        .to_vec();
    let mut seq = CsvFile::create(&dir.join("test_error_sequential.csv"), cj, &header)?;
    for (n, e) in (1..first.trace.records.len()).zip(stream) {
        let ct = &first.trace.records[n - 1].state.theta;
        let lt = &first.lms[n - 1];
        seq.row([
            n.to_string(),
            fmt_f64(sq_error(ct, &e)),
            fmt_f64(ctx.loss.value(ct, &e)?),
            fmt_f64(sq_error(lt, &e)),
            fmt_f64(ctx.loss.value(lt, &e)?),
        ])?;
    }
    seq.finish()?;

    write_json(&dir.join("summary.json"), &out.summary)
}

//! Experiment configuration: a TOML file with `[stream]`, `[loss]`, `[sgd]`,
//! `[experiment]` and `[diagnostics]` sections. Every key is optional and
//! defaults to the reference ridge experiment; unknown keys are rejected.

use std::path::{Path, PathBuf};

use cvar_sgd_core::datagen::{StreamKind, StreamSpec, DEFAULT_THETA_O};
use cvar_sgd_core::optimizer::SgdConfig;
use cvar_sgd_core::{ConfidenceLevel, ParamState, RidgeLoss, StepSizes};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub stream: StreamSection,
    pub loss: LossSection,
    pub sgd: SgdSection,
    pub experiment: ExperimentSection,
    pub diagnostics: DiagnosticsSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKindName {
    RidgePaper,
    LinearGaussianNoise,
    FinitePopulation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub kind: StreamKindName,
    /// Required for `finite_population`.
    pub population_size: Option<u64>,
    pub dim_d: usize,
    pub theta_o: Vec<f64>,
    pub noise_std: f64,
    pub x_low: f64,
    pub x_high: f64,
    /// Seed of the shared test set and diagnostic population.
    pub seed: u64,
    pub sigma_w: f64,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            kind: StreamKindName::RidgePaper,
            population_size: None,
            dim_d: 7,
            theta_o: DEFAULT_THETA_O.to_vec(),
            noise_std: 0.0,
            x_low: 0.0,
            x_high: 2.0,
            seed: 20_240_601,
            sigma_w: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSection {
    pub kind: LossKind,
    pub lambda: f64,
}

impl Default for LossSection {
    fn default() -> Self {
        Self {
            kind: LossKind::Ridge,
            lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdSection {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub horizon: usize,
    /// Defaults to zeros of the stream dimension.
    pub theta_init: Option<Vec<f64>>,
    pub t_init: f64,
    /// Gaussian smoothing scale; 0 disables smoothing.
    pub sigma: f64,
    pub eval_cadence: usize,
    pub eval_batch: usize,
    /// Seed of run 0; run `i` uses `seed + i`.
    pub seed: u64,
}

impl Default for SgdSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.002,
            gamma: 0.001,
            horizon: 20_000,
            theta_init: None,
            t_init: 0.0,
            sigma: 0.0,
            eval_cadence: 100,
            eval_batch: 10_000,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    /// LMS stepsize.
    pub baseline_beta: f64,
    pub n_seeds: usize,
    /// Size of the fixed population behind every gap and diagnostic.
    pub population_n: usize,
    /// Fresh examples for the final test-error comparison.
    pub test_n: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            baseline_beta: 0.01,
            n_seeds: 20,
            population_n: 100_000,
            test_n: 100_000,
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    pub enabled: bool,
    /// Random states for the set-restricted PL check.
    pub pl_states: usize,
    pub min_event_mass: f64,
    /// Drift margin of the stepsize window.
    pub epsilon: f64,
    /// Smoothness constant for the convergence bound; derived when absent.
    pub l_smooth: Option<f64>,
    pub burn_in: usize,
    pub floor_quantile: f64,
    pub seed: u64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self {
            enabled: true,
            pl_states: 50,
            min_event_mass: 0.05,
            epsilon: 0.004,
            l_smooth: None,
            burn_in: 0,
            floor_quantile: 0.5,
            seed: 7,
        }
    }
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(e.to_string()))?;
        cfg.resolved()
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Fills derived defaults and validates.
    pub fn resolved(mut self) -> Result<Self, CliError> {
        let d = self.stream.dim_d;
        if self.sgd.theta_init.is_none() {
            self.sgd.theta_init = Some(vec![0.0; d]);
        }
        if self.sgd.sigma > 0.0 {
            if self.stream.sigma_w == 0.0 {
                self.stream.sigma_w = self.sgd.sigma;
            } else if self.stream.sigma_w != self.sgd.sigma {
                return Err(invalid(format!(
                    "sgd.sigma ({}) and stream.sigma_w ({}) disagree",
                    self.sgd.sigma, self.stream.sigma_w
                )));
            }
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<(), CliError> {
        self.stream_spec()?;
        self.loss()?;
        self.sgd_config(0)?;
        let e = &self.experiment;
        if !(e.baseline_beta.is_finite() && e.baseline_beta > 0.0) {
            return Err(invalid("experiment.baseline_beta must be positive"));
        }
        if e.n_seeds == 0 {
            return Err(invalid("experiment.n_seeds must be at least 1"));
        }
        if e.test_n == 0 {
            return Err(invalid("experiment.test_n must be at least 1"));
        }
        if e.population_n == 0 {
            return Err(invalid("experiment.population_n must be at least 1"));
        }
        let g = &self.diagnostics;
        if g.enabled && e.population_n < 1_000 {
            return Err(invalid(
                "experiment.population_n must be at least 1000 when diagnostics are enabled",
            ));
        }
        if !(g.min_event_mass > 0.0 && g.min_event_mass < 1.0) {
            return Err(invalid("diagnostics.min_event_mass must lie in (0, 1)"));
        }
        if !(g.epsilon.is_finite() && g.epsilon > 0.0) {
            return Err(invalid("diagnostics.epsilon must be positive"));
        }
        if let Some(l) = g.l_smooth {
            if !(l.is_finite() && l > 0.0) {
                return Err(invalid("diagnostics.l_smooth must be positive"));
            }
        }
        if !(g.floor_quantile > 0.0 && g.floor_quantile < 1.0) {
            return Err(invalid("diagnostics.floor_quantile must lie in (0, 1)"));
        }
        Ok(())
    }

    /// The stream shared by the test set and the diagnostic population.
    pub fn stream_spec(&self) -> Result<StreamSpec, CliError> {
        let s = &self.stream;
        let kind = match (s.kind, s.population_size) {
            (StreamKindName::RidgePaper, None) => StreamKind::RidgePaper,
            (StreamKindName::LinearGaussianNoise, None) => StreamKind::LinearGaussianNoise,
            (StreamKindName::FinitePopulation, Some(size)) => StreamKind::FinitePopulation { size },
            (StreamKindName::FinitePopulation, None) => {
                return Err(invalid("stream.population_size is required for finite_population"))
            }
            (_, Some(_)) => {
                return Err(invalid("stream.population_size only applies to finite_population"))
            }
        };
        let spec = StreamSpec {
            kind,
            dim_d: s.dim_d,
            theta_o: s.theta_o.clone(),
            noise_std: s.noise_std,
            x_low: s.x_low,
            x_high: s.x_high,
            seed: s.seed,
            sigma_w: s.sigma_w,
        };
        spec.validate().map_err(|e| invalid(format!("stream: {e}")))?;
        Ok(spec)
    }

    /// Ridge loss with its smoothness constant taken from the input law.
    pub fn loss(&self) -> Result<RidgeLoss, CliError> {
        let LossKind::Ridge = self.loss.kind;
        let m2 = self.stream_spec()?.x_second_moment();
        RidgeLoss::new(self.loss.lambda)
            .and_then(|l| l.with_input_second_moment(m2))
            .map_err(|e| invalid(format!("loss: {e}")))
    }

    pub fn alpha(&self) -> Result<ConfidenceLevel, CliError> {
        ConfidenceLevel::new(self.sgd.alpha).map_err(|e| invalid(format!("sgd.alpha: {e}")))
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.sgd.seed.wrapping_add(run as u64)
    }

    /// Optimizer settings for run `run`.
    pub fn sgd_config(&self, run: usize) -> Result<SgdConfig, CliError> {
        let s = &self.sgd;
        let theta = s
            .theta_init
            .clone()
            .unwrap_or_else(|| vec![0.0; self.stream.dim_d]);
        if theta.len() != self.stream.dim_d {
            return Err(invalid(format!(
                "sgd.theta_init has {} entries but stream.dim_d is {}",
                theta.len(),
                self.stream.dim_d
            )));
        }
        let cfg = SgdConfig {
            alpha: self.alpha()?,
            steps: StepSizes::new(s.beta, s.gamma).map_err(|e| invalid(format!("sgd: {e}")))?,
            horizon: s.horizon,
            init: ParamState::new(theta, s.t_init).map_err(|e| invalid(format!("sgd: {e}")))?,
            sigma: s.sigma,
            eval_cadence: s.eval_cadence,
            eval_batch: s.eval_batch,
            seed: self.run_seed(run),
        };
        cfg.validate().map_err(|e| invalid(format!("sgd: {e}")))?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_reference_experiment() {
        let c = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(c.stream.dim_d, 7);
        assert_eq!(c.loss.lambda, 0.1);
        assert_eq!((c.sgd.alpha, c.sgd.beta, c.sgd.gamma), (0.2, 0.002, 0.001));
        assert_eq!(c.experiment.baseline_beta, 0.01);
        assert_eq!(c.sgd.theta_init, Some(vec![0.0; 7]));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str("[sgd]\nbeat = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("beat"), "{err}");
        assert!(ExperimentConfig::from_toml_str("[sgdd]\n").is_err());
    }

    #[test]
    fn invalid_values_are_config_errors() {
        for text in [
            "[sgd]\nalpha = 0.0\n",
            "[sgd]\nbeta = -1.0\n",
            "[stream]\nx_low = 3.0\n",
            "[stream]\ndim_d = 3\n",
            "[stream]\nkind = \"finite_population\"\n",
            "[experiment]\npopulation_n = 10\n",
            "[sgd]\ntheta_init = [1.0]\n",
            "[sgd]\nsigma = 0.5\n[stream]\nsigma_w = 0.2\n",
        ] {
            let err = ExperimentConfig::from_toml_str(text).unwrap_err();
            assert!(matches!(err, CliError::Config(_)), "{text}: {err}");
        }
    }

    #[test]
    fn smoothing_scale_propagates_to_stream() {
        let c = ExperimentConfig::from_toml_str("[sgd]\nsigma = 0.5\n").unwrap();
        assert_eq!(c.stream.sigma_w, 0.5);
    }

    #[test]
    fn json_roundtrip() {
        let c = ExperimentConfig::default().resolved().unwrap();
        let back: ExperimentConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}

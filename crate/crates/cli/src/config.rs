//! Run configuration: a TOML tree with CLI overrides.

use std::path::{Path, PathBuf};

use rsmp_core::problem::FeedbackRule;
use rsmp_core::reproduce::Numerics;
use rsmp_core::spike::WindowAnchor;
use rsmp_core::{build_registry_problem, ControlProblem, ControlProcess, Params, RegressionBasis, Scheme};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// Directory searched for relative config paths and for the default `rsmp.toml`.
pub const CONFIG_DIR_ENV: &str = "RSMP_CONFIG_DIR";

/// File name picked up from [`CONFIG_DIR_ENV`] when no `--config` is given.
pub const DEFAULT_CONFIG_NAME: &str = "rsmp.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub problem: ProblemSpec,
    #[serde(default)]
    pub control: ControlSpec,
    #[serde(default)]
    pub numerics: NumericsSpec,
    #[serde(default)]
    pub conditions: ConditionSpec,
    #[serde(default)]
    pub spike: SpikeConfig,
    #[serde(default)]
    pub output: OutputSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProblemSpec {
    pub name: String,
    #[serde(default)]
    pub params: Params,
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec {
            name: "example1".into(),
            params: Params::new(),
        }
    }
}

/// Candidate control `ū`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ControlSpec {
    Constant { value: Vec<f64> },
    /// One value per grid step; the row count must equal `numerics.steps`.
    Piecewise { values: Vec<Vec<f64>> },
    /// `u = Π_U(K x + k)`, `gain` row-major `m × n`.
    LinearFeedback { gain: Vec<f64>, offset: Vec<f64> },
}

impl Default for ControlSpec {
    fn default() -> Self {
        ControlSpec::Constant { value: vec![0.0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NumericsSpec {
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub degree: usize,
    pub ridge: f64,
    pub scheme: Scheme,
    /// Worker threads; the global pool when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

impl Default for NumericsSpec {
    fn default() -> Self {
        let basis = RegressionBasis::default();
        NumericsSpec {
            steps: 512,
            paths: 4096,
            seed: 0,
            degree: basis.degree,
            ridge: basis.ridge,
            scheme: basis.scheme,
            workers: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    /// Region `V` for the singularity and second-order checks; the
    /// control-set grid when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<Vec<Vec<f64>>>,
    /// Verdict tolerance; the scale-aware default when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tolerance: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpikeConfig {
    pub replacement: Vec<f64>,
    pub anchor: WindowAnchor,
    pub ladder: Vec<f64>,
}

impl Default for SpikeConfig {
    fn default() -> Self {
        SpikeConfig {
            replacement: vec![1.0],
            anchor: WindowAnchor::Start(0.0),
            ladder: vec![0.2, 0.1, 0.05, 0.025],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    /// Directory for `report.json` and the CSV tables.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Also write the simulated paths as a CSV (simulate only).
    #[serde(default)]
    pub dump_paths: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            problem: ProblemSpec::default(),
            control: ControlSpec::default(),
            numerics: NumericsSpec::default(),
            conditions: ConditionSpec::default(),
            spike: SpikeConfig::default(),
            output: OutputSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string_pretty(self).map_err(|e| CliError::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Config(msgs) => CliError::Config(msgs.into_iter().map(|m| format!("{}: {m}", path.display())).collect()),
            other => other,
        })
    }

    /// Field-path messages for every invalid entry; empty when valid.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let n = &self.numerics;
        if n.steps < 2 {
            out.push(format!("numerics.steps: must be at least 2, got {}", n.steps));
        }
        if n.paths < 2 {
            out.push(format!("numerics.paths: must be at least 2, got {}", n.paths));
        }
        if n.degree > rsmp_core::bsde::MAX_DEGREE {
            out.push(format!("numerics.degree: at most {}, got {}", rsmp_core::bsde::MAX_DEGREE, n.degree));
        }
        if !(n.ridge.is_finite() && n.ridge >= 0.0) {
            out.push(format!("numerics.ridge: must be finite and non-negative, got {}", n.ridge));
        }
        if n.workers == Some(0) {
            out.push("numerics.workers: must be at least 1".into());
        }
        if let Some(t) = self.conditions.tolerance {
            if !(t.is_finite() && t >= 0.0) {
                out.push(format!("conditions.tolerance: must be finite and non-negative, got {t}"));
            }
        }
        if let Some(region) = &self.conditions.region {
            if region.is_empty() {
                out.push("conditions.region: must not be empty".into());
            }
        }
        match &self.control {
            ControlSpec::Constant { value } if value.is_empty() => out.push("control.value: must not be empty".into()),
            ControlSpec::Piecewise { values } if values.len() != n.steps => out.push(format!(
                "control.values: needs one row per step ({}), got {}",
                n.steps,
                values.len()
            )),
            _ => {}
        }
        let s = &self.spike;
        if s.ladder.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            out.push("spike.ladder: entries must be positive".into());
        }
        if s.ladder.windows(2).any(|w| w[1] >= w[0]) {
            out.push("spike.ladder: must be strictly decreasing".into());
        }
        if s.replacement.is_empty() {
            out.push("spike.replacement: must not be empty".into());
        }
        if let Err(e) = self.build_problem() {
            out.push(format!("problem: {e}"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn build_problem(&self) -> Result<ControlProblem, CliError> {
        Ok(build_registry_problem(&self.problem.name, &self.problem.params)?)
    }

    pub fn build_control(&self, problem: &ControlProblem) -> Result<ControlProcess, CliError> {
        Ok(match &self.control {
            ControlSpec::Constant { value } => ControlProcess::constant(value),
            ControlSpec::Piecewise { values } => ControlProcess::PiecewiseConstant(values.clone()),
            ControlSpec::LinearFeedback { gain, offset } => {
                ControlProcess::Feedback(FeedbackRule::linear(gain.clone(), offset.clone(), problem.control_set())?)
            }
        })
    }

    pub fn numerics(&self) -> Numerics {
        let n = &self.numerics;
        Numerics {
            steps: n.steps,
            paths: n.paths,
            seed: n.seed,
            basis: RegressionBasis {
                degree: n.degree,
                ridge: n.ridge,
                scheme: n.scheme,
            },
        }
    }

    /// Region `V`: the configured one or the control-set grid.
    pub fn region(&self, problem: &ControlProblem) -> Vec<Vec<f64>> {
        self.conditions
            .region
            .clone()
            .unwrap_or_else(|| problem.control_set().grid().to_vec())
    }
}

/// Resolve `--config`: absolute or existing paths as given, otherwise
/// relative to `$RSMP_CONFIG_DIR`; with no flag, `$RSMP_CONFIG_DIR/rsmp.toml`
/// if present.
pub fn resolve_config_path(flag: Option<&Path>, config_dir: Option<&Path>) -> Option<PathBuf> {
    match (flag, config_dir) {
        (Some(p), Some(dir)) if !p.is_absolute() && !p.exists() => Some(dir.join(p)),
        (Some(p), _) => Some(p.to_path_buf()),
        (None, Some(dir)) => {
            let candidate = dir.join(DEFAULT_CONFIG_NAME);
            candidate.exists().then_some(candidate)
        }
        (None, None) => None,
    }
}

//! Machine-readable run report and its CSV tables.

use std::fs::File;
use std::path::{Path, PathBuf};

use rsmp_core::principle::{ConditionReport, SingularityVerdict};
use rsmp_core::problem::ValidationReport;
use rsmp_core::reproduce::CriterionResult;
use rsmp_core::spike::TaylorReport;
use rsmp_core::bsde::StepDiagnostics;
use rsmp_core::Estimate;
use serde::Serialize;

use crate::config::RunConfig;
use crate::CliError;

/// Version tag of the report layout documented in `report.schema.json`.
pub const SCHEMA: &str = "rsmp-report/1";

/// Whether the run detected a violated condition (or a failed criterion).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Clear,
    Detected,
}

impl Status {
    pub fn exit_code(self) -> i32 {
        match self {
            Status::Clear => 0,
            Status::Detected => 2,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CommandResult {
    Simulate {
        cost: Estimate,
        /// Per-coordinate `E x_T`.
        terminal_state: Vec<Estimate>,
        /// Per-step regression diagnostics of the cost solve; written as
        /// `diagnostics.jsonl`, kept out of `report.json`.
        #[serde(skip)]
        diagnostics: Vec<StepDiagnostics>,
    },
    CheckFirst {
        report: ConditionReport,
    },
    Classify {
        singularity: SingularityVerdict,
    },
    CheckSecond {
        singularity: SingularityVerdict,
        report: ConditionReport,
    },
    Taylor {
        report: TaylorReport,
    },
    Reproduce {
        example: String,
        criteria: Vec<CriterionResult>,
    },
    Validate {
        report: ValidationReport,
    },
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub schema: &'static str,
    pub command: String,
    pub config: RunConfig,
    pub seed: u64,
    pub workers: Option<usize>,
    pub wall_seconds: f64,
    pub status: Status,
    pub result: CommandResult,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String, CliError> {
        serde_json::to_string_pretty(self).map_err(|e| CliError::Io(e.to_string()))
    }

    /// Short plain-text digest for the terminal.
    pub fn summary(&self) -> String {
        let mut out = format!("{} on {}: ", self.command, self.config.problem.name);
        match &self.result {
            CommandResult::Simulate { cost, .. } => {
                out.push_str(&format!("J(u) = y(0) = {:.6} ± {:.2e}", cost.mean, cost.se));
            }
            CommandResult::CheckFirst { report } => {
                out.push_str(&format!(
                    "first-order {:?} (tolerance {:.3e}, max |E δH| = {:.3e})",
                    report.verdict,
                    report.tolerance,
                    report.max_abs_mean()
                ));
            }
            CommandResult::Classify { singularity } => {
                out.push_str(&format!(
                    "{:?}; flat on region: {}; singular set has {} point(s)",
                    singularity.classification,
                    singularity.flat_on_region,
                    singularity.singular_set.len()
                ));
            }
            CommandResult::CheckSecond { report, .. } => {
                out.push_str(&format!(
                    "second-order {:?} (tolerance {:.3e}, max |E S| = {:.3e})",
                    report.outcome.unwrap_or_else(|| report.verdict.into()),
                    report.tolerance,
                    report.max_abs_mean()
                ));
            }
            CommandResult::Taylor { report } => {
                out.push_str("rate fits");
                for (name, fit) in &report.fits {
                    if fit.exact {
                        out.push_str(&format!("\n  {name}: exact"));
                    } else {
                        out.push_str(&format!("\n  {name}: slope {:.3} ± {:.3}", fit.slope, fit.half_width));
                    }
                }
            }
            CommandResult::Reproduce { example, criteria } => {
                out.push_str(example);
                for c in criteria {
                    out.push('\n');
                    out.push_str(&c.summary());
                }
            }
            CommandResult::Validate { report } => {
                out.push_str(if report.passed { "assumptions hold" } else { "assumption check failed" });
                for c in report.checks.iter().filter(|c| !c.passed) {
                    out.push_str(&format!("\n  {}: {:.3e} > {:.3e}", c.name, c.observed, c.bound));
                }
            }
        }
        out
    }

    /// Write `report.json` and the tables of this command into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        let mut written = Vec::new();
        let json = dir.join("report.json");
        std::fs::write(&json, self.to_json()?).map_err(|e| CliError::Io(format!("{}: {e}", json.display())))?;
        written.push(json);
        match &self.result {
            CommandResult::Simulate { diagnostics, .. } => written.push(write_diagnostics(dir, diagnostics)?),
            CommandResult::CheckFirst { report } => written.push(write_conditions(dir, report)?),
            CommandResult::Classify { singularity } => written.push(write_flatness(dir, singularity)?),
            CommandResult::CheckSecond { singularity, report } => {
                written.push(write_flatness(dir, singularity)?);
                written.push(write_conditions(dir, report)?);
            }
            CommandResult::Taylor { report } => {
                written.push(write_rates(dir, report)?);
                written.push(write_levels(dir, report)?);
            }
            CommandResult::Reproduce { criteria, .. } => written.push(write_criteria(dir, criteria)?),
            CommandResult::Validate { report } => written.push(write_validation(dir, report)?),
        }
        Ok(written)
    }
}

fn writer(path: &Path) -> Result<csv::Writer<File>, CliError> {
    csv::Writer::from_path(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |e| CliError::Io(format!("{}: {e}", path.display()))
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(";")
}

#[derive(Serialize)]
struct ConditionRow<'a> {
    order: &'a str,
    step: usize,
    t: f64,
    v: String,
    mean: f64,
    se: f64,
    verdict: rsmp_core::Verdict,
}

/// One JSON record per backward step, oldest step first.
fn write_diagnostics(dir: &Path, diagnostics: &[StepDiagnostics]) -> Result<PathBuf, CliError> {
    let path = dir.join("diagnostics.jsonl");
    let mut text = String::new();
    for d in diagnostics {
        text.push_str(&serde_json::to_string(d).map_err(|e| CliError::Io(e.to_string()))?);
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(path)
}

fn write_conditions(dir: &Path, report: &ConditionReport) -> Result<PathBuf, CliError> {
    let path = dir.join("conditions.csv");
    let mut w = writer(&path)?;
    let order = match report.order {
        rsmp_core::principle::ConditionOrder::First => "first",
        rsmp_core::principle::ConditionOrder::Second => "second",
    };
    for r in &report.records {
        w.serialize(ConditionRow {
            order,
            step: r.step,
            t: r.t,
            v: join(&r.v),
            mean: r.mean,
            se: r.se,
            verdict: r.verdict,
        })
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(path)
}

#[derive(Serialize)]
struct FlatnessRow {
    v: String,
    max_abs_mean: f64,
    worst_ratio: f64,
    flat: bool,
    trivial: bool,
}

fn write_flatness(dir: &Path, verdict: &SingularityVerdict) -> Result<PathBuf, CliError> {
    let path = dir.join("singularity.csv");
    let mut w = writer(&path)?;
    for s in &verdict.stats {
        w.serialize(FlatnessRow {
            v: join(&s.v),
            max_abs_mean: s.max_abs_mean,
            worst_ratio: s.worst_ratio,
            flat: s.flat,
            trivial: s.trivial,
        })
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(path)
}

#[derive(Serialize)]
struct RateRow<'a> {
    residual: &'a str,
    slope: f64,
    half_width: f64,
    exact: bool,
    levels_used: usize,
}

fn write_rates(dir: &Path, report: &TaylorReport) -> Result<PathBuf, CliError> {
    let path = dir.join("rates.csv");
    let mut w = writer(&path)?;
    for (name, fit) in &report.fits {
        w.serialize(RateRow {
            residual: name,
            slope: fit.slope,
            half_width: fit.half_width,
            exact: fit.exact,
            levels_used: fit.used.iter().filter(|u| **u).count(),
        })
        .map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(path)
}

#[derive(Serialize)]
struct LevelRow<'a> {
    eps: f64,
    residual: &'a str,
    mean: f64,
    se: f64,
}

fn write_levels(dir: &Path, report: &TaylorReport) -> Result<PathBuf, CliError> {
    let path = dir.join("levels.csv");
    let mut w = writer(&path)?;
    for l in &report.levels {
        let s = &l.state;
        let mut rows = vec![
            ("state_diff_8", s.diff_8),
            ("state_x1_8", s.x1_8),
            ("state_first_2", s.first_2),
            ("state_x2_2", s.x2_2),
            ("state_second_2", s.second_2),
            ("cost_first_4", l.cost_first.y_4),
            ("cost_first_z_2", l.cost_first.z_2),
        ];
        if let Some(e) = l.cost_second {
            rows.push(("cost_second_2", e));
        }
        for (residual, e) in rows {
            w.serialize(LevelRow {
                eps: l.eps,
                residual,
                mean: e.mean,
                se: e.se,
            })
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(path)
}

#[derive(Serialize)]
struct CriterionRow<'a> {
    criterion: u8,
    check: &'a str,
    value: f64,
    target: &'a str,
    passed: bool,
}

fn write_criteria(dir: &Path, criteria: &[CriterionResult]) -> Result<PathBuf, CliError> {
    let path = dir.join("criteria.csv");
    let mut w = writer(&path)?;
    for c in criteria {
        for k in &c.checks {
            w.serialize(CriterionRow {
                criterion: c.id,
                check: &k.name,
                value: k.value,
                target: &k.target,
                passed: k.passed,
            })
            .map_err(csv_err(&path))?;
        }
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(path)
}

fn write_validation(dir: &Path, report: &ValidationReport) -> Result<PathBuf, CliError> {
    let path = dir.join("validation.csv");
    let mut w = writer(&path)?;
    for c in &report.checks {
        w.serialize(c).map_err(csv_err(&path))?;
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(path)
}

/// One row per `(path, node)`: `t`, Brownian values and state components.
pub fn write_paths(path: &Path, batch: &rsmp_core::PathBatch) -> Result<(), CliError> {
    let state = batch
        .state()
        .ok_or_else(|| CliError::Io("no state to dump".into()))?;
    let w_path = batch.brownian();
    let grid = batch.grid();
    let mut w = writer(path)?;
    let d = batch.noise_dim();
    let n = state.width();
    let mut header = vec!["path".to_string(), "step".into(), "t".into()];
    header.extend((0..d).map(|j| format!("w{j}")));
    header.extend((0..n).map(|i| format!("x{i}")));
    w.write_record(&header).map_err(csv_err(path))?;
    for m in 0..batch.path_count() {
        for k in 0..grid.nodes() {
            let mut row = vec![m.to_string(), k.to_string(), grid.t(k).to_string()];
            row.extend(w_path.at(k, m).iter().map(|v| v.to_string()));
            row.extend(state.at(k, m).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err(path))?;
        }
    }
    w.flush().map_err(|e| CliError::Io(e.to_string()))?;
    Ok(())
}

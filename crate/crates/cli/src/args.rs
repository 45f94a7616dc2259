//! Argument parsing and the exit-code contract: 0 when no violation was
//! detected, 2 when one was (or a reproduced criterion failed), 1 on error.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use rsmp_core::reproduce::ExampleId;

use crate::commands::{execute, Command};
use crate::config::{resolve_config_path, RunConfig, CONFIG_DIR_ENV};
use crate::{CliError, EXIT_ERROR};

#[derive(Debug, Parser)]
#[command(name = "rsmp", version, about = "Check first- and second-order optimality conditions by simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,

    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Directory for relative config paths and the default rsmp.toml.
    #[arg(long, global = true, env = CONFIG_DIR_ENV, value_name = "DIR")]
    pub config_dir: Option<PathBuf>,

    /// Registry problem (example1, example2, affine).
    #[arg(long, global = true)]
    pub problem: Option<String>,

    /// Scalar problem parameter, repeatable: `--param sign=-1`.
    #[arg(long = "param", global = true, value_name = "KEY=VALUE", value_parser = parse_param, allow_hyphen_values = true)]
    pub params: Vec<(String, f64)>,

    /// Constant control value(s), comma separated.
    #[arg(long, global = true, value_delimiter = ',', allow_hyphen_values = true)]
    pub control: Option<Vec<f64>>,

    /// Time steps N.
    #[arg(long, global = true)]
    pub steps: Option<usize>,

    /// Monte Carlo paths M.
    #[arg(long, global = true)]
    pub paths: Option<usize>,

    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Output directory for report.json and CSV tables.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Verdict tolerance (default: scale-aware).
    #[arg(long, global = true)]
    pub tolerance: Option<f64>,

    /// Write simulated paths to <out>/paths.csv (simulate only).
    #[arg(long, global = true)]
    pub dump_paths: bool,

    /// Print the JSON report instead of the summary.
    #[arg(long, global = true)]
    pub json: bool,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Simulate the state and cost; report J(u) = y(0).
    Simulate,
    /// First-order condition over the control grid.
    CheckFirst,
    /// Second-order condition on the singular region.
    CheckSecond,
    /// Singularity classification of the control on the region.
    Classify,
    /// Spike ladder with residual rate fits.
    Taylor,
    /// Acceptance pipeline for a worked example.
    Reproduce {
        /// example1, example2+ or example2-.
        #[arg(value_parser = parse_example)]
        example: ExampleId,
    },
    /// Check the problem's regularity assumptions at random points.
    Validate,
    /// Print the effective configuration as TOML.
    Config,
}

fn parse_param(s: &str) -> Result<(String, f64), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got {s:?}"))?;
    let v: f64 = v.trim().parse().map_err(|e| format!("{k}: {e}"))?;
    Ok((k.trim().to_string(), v))
}

fn parse_example(s: &str) -> Result<ExampleId, String> {
    s.parse().map_err(|e: rsmp_core::Error| e.to_string())
}

impl Cli {
    /// Configuration file (if any) with flag overrides applied.
    pub fn effective_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match resolve_config_path(self.config.as_deref(), self.config_dir.as_deref()) {
            Some(path) => RunConfig::load(&path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.problem {
            if *p != cfg.problem.name {
                cfg.problem.name = p.clone();
                cfg.problem.params.clear();
            }
        }
        for (k, v) in &self.params {
            cfg.problem.params.insert(k.clone(), rsmp_core::problem::ParamValue::Scalar(*v));
        }
        if let Some(v) = &self.control {
            cfg.control = crate::config::ControlSpec::Constant { value: v.clone() };
        }
        let n = &mut cfg.numerics;
        if let Some(v) = self.steps {
            n.steps = v;
        }
        if let Some(v) = self.paths {
            n.paths = v;
        }
        if let Some(v) = self.seed {
            n.seed = v;
        }
        if self.workers.is_some() {
            n.workers = self.workers;
        }
        if self.tolerance.is_some() {
            cfg.conditions.tolerance = self.tolerance;
        }
        if self.out.is_some() {
            cfg.output.dir = self.out.clone();
        }
        if self.dump_paths {
            cfg.output.dump_paths = true;
        }
        Ok(cfg)
    }
}

fn command_of(sub: &Sub) -> Option<Command> {
    Some(match sub {
        Sub::Simulate => Command::Simulate,
        Sub::CheckFirst => Command::CheckFirst,
        Sub::CheckSecond => Command::CheckSecond,
        Sub::Classify => Command::Classify,
        Sub::Taylor => Command::Taylor,
        Sub::Reproduce { example } => Command::Reproduce(*example),
        Sub::Validate => Command::Validate,
        Sub::Config => return None,
    })
}

fn run_parsed(cli: &Cli) -> Result<i32, CliError> {
    let cfg = cli.effective_config()?;
    let Some(command) = command_of(&cli.command) else {
        print!("{}", cfg.to_toml()?);
        return Ok(0);
    };
    let report = execute(&command, &cfg)?;
    if let Some(dir) = &cfg.output.dir {
        for path in report.write(dir)? {
            log::info!("wrote {}", path.display());
        }
    }
    if cli.json {
        println!("{}", report.to_json()?);
    } else {
        println!("{}", report.summary());
    }
    Ok(report.status.exit_code())
}

/// Parse `args`, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_parsed(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

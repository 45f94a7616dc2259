//! Subcommand pipelines.

use std::time::Instant;

use rsmp_core::principle::SecondOrderOutcome;
use rsmp_core::reproduce::{reproduce_example, with_workers, BaseRun, ExampleId};
use rsmp_core::spike::{taylor_expansion, MIN_WINDOW_STEPS};
use rsmp_core::{euler_forward, sample_for, solve_cost_bsde, validate_problem, Estimate, Verdict};

use crate::config::RunConfig;
use crate::report::{write_paths, CommandResult, RunReport, Status, SCHEMA};
use crate::CliError;

/// Sample size of the `validate` assumption sweep.
pub const VALIDATION_SAMPLES: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Command {
    Simulate,
    CheckFirst,
    CheckSecond,
    Classify,
    Taylor,
    Reproduce(ExampleId),
    Validate,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Simulate => "simulate",
            Command::CheckFirst => "check-first",
            Command::CheckSecond => "check-second",
            Command::Classify => "classify",
            Command::Taylor => "taylor",
            Command::Reproduce(_) => "reproduce",
            Command::Validate => "validate",
        }
    }
}

/// Run `command` under `cfg` on the configured worker pool.
pub fn execute(command: &Command, cfg: &RunConfig) -> Result<RunReport, CliError> {
    cfg.validate()?;
    let started = Instant::now();
    let workers = cfg.numerics.workers;
    let (status, result) = with_workers(workers, || dispatch(command, cfg))??;
    Ok(RunReport {
        schema: SCHEMA,
        command: command.name().into(),
        config: cfg.clone(),
        seed: cfg.numerics.seed,
        workers,
        wall_seconds: started.elapsed().as_secs_f64(),
        status,
        result,
    })
}

fn verdict_status(v: Verdict) -> Status {
    // inconclusive is not a detected violation
    if v == Verdict::Violated {
        Status::Detected
    } else {
        Status::Clear
    }
}

fn dispatch(command: &Command, cfg: &RunConfig) -> Result<(Status, CommandResult), CliError> {
    let tol = cfg.conditions.tolerance;
    match command {
        Command::Simulate => simulate(cfg),
        Command::CheckFirst => {
            let problem = cfg.build_problem()?;
            let control = cfg.build_control(&problem)?;
            let base = BaseRun::new(&problem, &control, &cfg.numerics(), false)?;
            let report = base.first_order(&problem, tol)?;
            Ok((verdict_status(report.verdict), CommandResult::CheckFirst { report }))
        }
        Command::Classify => {
            let problem = cfg.build_problem()?;
            let control = cfg.build_control(&problem)?;
            let base = BaseRun::new(&problem, &control, &cfg.numerics(), false)?;
            let singularity = base.classify(&problem, &cfg.region(&problem), tol)?;
            Ok((Status::Clear, CommandResult::Classify { singularity }))
        }
        Command::CheckSecond => {
            let problem = cfg.build_problem()?;
            let control = cfg.build_control(&problem)?;
            let base = BaseRun::new(&problem, &control, &cfg.numerics(), true)?;
            let singularity = base.classify(&problem, &cfg.region(&problem), tol)?;
            let report = base.second_order(&problem, &singularity, tol)?;
            let status = match report.outcome {
                Some(SecondOrderOutcome::Excluded) => Status::Detected,
                _ => Status::Clear,
            };
            Ok((status, CommandResult::CheckSecond { singularity, report }))
        }
        Command::Taylor => taylor(cfg),
        Command::Reproduce(id) => {
            let criteria = reproduce_example(*id, cfg.numerics.seed);
            let status = if criteria.iter().all(|c| c.passed) {
                Status::Clear
            } else {
                Status::Detected
            };
            Ok((
                status,
                CommandResult::Reproduce {
                    example: id.to_string(),
                    criteria,
                },
            ))
        }
        Command::Validate => {
            let problem = cfg.build_problem()?;
            let report = validate_problem(&problem, VALIDATION_SAMPLES, cfg.numerics.seed)?;
            let status = if report.passed { Status::Clear } else { Status::Detected };
            Ok((status, CommandResult::Validate { report }))
        }
    }
}

fn simulate(cfg: &RunConfig) -> Result<(Status, CommandResult), CliError> {
    let problem = cfg.build_problem()?;
    let control = cfg.build_control(&problem)?;
    let num = cfg.numerics();
    let noise = sample_for(&problem, num.steps, num.paths, num.seed)?;
    let paths = euler_forward(&problem, &control, &noise)?;
    let cost = solve_cost_bsde(&problem, &paths, &num.basis)?;
    let state = paths.state().expect("euler_forward fills the state");
    let n = state.width();
    let terminal_state = (0..n)
        .map(|i| Estimate::from_samples((0..num.paths).map(|m| state.at(num.steps, m)[i])))
        .collect();
    if cfg.output.dump_paths {
        let dir = cfg
            .output
            .dir
            .as_ref()
            .ok_or_else(|| CliError::Config(vec!["output.dump_paths: needs output.dir (--out)".into()]))?;
        std::fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?;
        write_paths(&dir.join("paths.csv"), &paths)?;
    }
    Ok((
        Status::Clear,
        CommandResult::Simulate {
            cost: cost.y0,
            terminal_state,
            diagnostics: cost.diagnostics,
        },
    ))
}

fn taylor(cfg: &RunConfig) -> Result<(Status, CommandResult), CliError> {
    let problem = cfg.build_problem()?;
    let control = cfg.build_control(&problem)?;
    let num = cfg.numerics();
    let h = problem.horizon() / num.steps as f64;
    let thin: Vec<String> = cfg
        .spike
        .ladder
        .iter()
        .filter(|e| **e < MIN_WINDOW_STEPS as f64 * h * (1.0 - 1e-9))
        .map(|e| format!("spike.ladder: ε = {e} is thinner than {MIN_WINDOW_STEPS} steps of h = {h}"))
        .collect();
    if !thin.is_empty() {
        return Err(CliError::Config(thin));
    }
    let replacement = rsmp_core::ControlProcess::constant(&cfg.spike.replacement);
    // Classify on the replacement value so the second-order residual is
    // evaluated only when it applies.
    let base = BaseRun::new(&problem, &control, &num, false)?;
    let singularity = base.classify(&problem, &[cfg.spike.replacement.clone()], cfg.conditions.tolerance)?;
    let noise = base.paths.noise_only();
    let report = taylor_expansion(
        &problem,
        &control,
        &replacement,
        cfg.spike.anchor,
        &cfg.spike.ladder,
        &noise,
        &num.basis,
        Some(&singularity),
    )?;
    Ok((Status::Clear, CommandResult::Taylor { report }))
}

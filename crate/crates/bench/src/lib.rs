//! Fixtures shared by the solver benchmarks.

use rsmp_core::reproduce::example1_problem;
use rsmp_core::{euler_forward, sample_for, ControlProblem, ControlProcess, PathBatch};

/// `example1` at `ū = 0.5` with forward paths on `steps × paths`, seed 0.
pub fn example1_paths(steps: usize, paths: usize) -> (ControlProblem, ControlProcess, PathBatch) {
    let problem = example1_problem().expect("registry problem");
    let control = ControlProcess::constant(&[0.5]);
    let noise = sample_for(&problem, steps, paths, 0).expect("valid sizes");
    let batch = euler_forward(&problem, &control, &noise).expect("finite paths");
    (problem, control, batch)
}

//! Verification toolkit for necessary optimality conditions of stochastic
//! control problems with recursive (BSDE-driven) costs.
//!
//! The pipeline runs forward Euler paths for a candidate control, solves the
//! cost equation and the first- and second-order adjoint equations by
//! regression Monte Carlo, and evaluates first-order, singularity and
//! second-order verdicts. Spike perturbations measure the Taylor residuals
//! of the state and cost expansions.

pub mod bsde;
pub mod error;
pub mod field;
pub mod oracles;
pub mod principle;
pub mod reproduce;
pub mod problem;
pub mod sde;
pub mod spike;
pub mod stats;

pub use bsde::{
    bsde_stability_check, gamma_duality_y1, solve_cost_bsde, solve_first_adjoint, solve_second_adjoint,
    solve_variation_cost_first, solve_variation_cost_second, AdjointFirst, AdjointSecond, CostSolution,
    RegressionBasis, Scheme, StabilityReport, VariationCost,
};
pub use error::{Error, Result};
pub use field::Field;
pub use principle::{
    first_order_check, second_order_check, singularity_classify, ConditionReport, SecondOrderOutcome,
    Singularity, SingularityVerdict, Verdict,
};
pub use problem::{
    build_registry_problem, validate_problem, Coefficients, ControlProblem, ControlProcess, ControlSet, Dims,
    FnCoefficients, Params,
};
pub use sde::{euler_forward, integrate_gamma, sample_brownian, sample_for, PathBatch, TimeGrid};
pub use spike::{build_spike, fit_rate, RateFit, SpikeSpec};
pub use stats::Estimate;

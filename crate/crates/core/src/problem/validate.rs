//! Sampling-based checks of the Lipschitz, growth and second-derivative
//! bounds, derivative consistency, and the admissibility moment.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{fd, Coefficients, ControlProblem, ControlSetKind, Dims};
use crate::error::{Error, Result};
use crate::sde::PathBatch;
use crate::stats::{norm, spectral_norm, KahanSum};

/// Moment used by the admissibility norm `sup_t (E|u(t)|^8)^{1/8}`.
pub const ADMISSIBILITY_MOMENT: i32 = 8;

/// Relative tolerance for analytic versus finite-difference derivatives.
pub const DERIVATIVE_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct ValidationOptions {
    pub sample_count: usize,
    pub seed: u64,
    /// Half-width of the state box around `x0`; `y`, `z` are drawn from `[-radius, radius]`.
    pub radius: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            sample_count: 256,
            seed: 0,
            radius: 1.0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AssumptionCheck {
    pub name: String,
    /// Worst value seen over all samples.
    pub observed: f64,
    pub bound: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub problem: String,
    pub lipschitz_bound: f64,
    pub options: ValidationOptions,
    pub checks: Vec<AssumptionCheck>,
    pub passed: bool,
}

impl ValidationReport {
    pub fn check(&self, name: &str) -> Option<&AssumptionCheck> {
        self.checks.iter().find(|c| c.name == name)
    }
}

struct Sample {
    t: f64,
    x: Vec<f64>,
    y: f64,
    z: Vec<f64>,
    u: Vec<f64>,
}

fn draw(problem: &ControlProblem, opts: &ValidationOptions, index: usize) -> Sample {
    let Dims { d, .. } = problem.dims();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    rng.set_stream(index as u64);
    let r = opts.radius;
    let t = rng.random::<f64>() * problem.horizon();
    let x = problem
        .initial_state()
        .iter()
        .map(|&c| c + r * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let y = r * (2.0 * rng.random::<f64>() - 1.0);
    let z = (0..d).map(|_| r * (2.0 * rng.random::<f64>() - 1.0)).collect();
    let u = match problem.control_set().kind() {
        ControlSetKind::Finite { points } => points[rng.random_range(0..points.len())].clone(),
        ControlSetKind::Box { lower, upper } => lower
            .iter()
            .zip(upper)
            .map(|(l, h)| l + (h - l) * rng.random::<f64>())
            .collect(),
    };
    Sample { t, x, y, z, u }
}

fn describe(s: &Sample) -> String {
    format!("t={}, x={:?}, y={}, z={:?}, u={:?}", s.t, s.x, s.y, s.z, s.u)
}

fn ensure_finite(name: &str, values: &[f64], s: &Sample) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::InvalidProblem {
            coefficient: name.to_string(),
            point: describe(s),
        })
    }
}

/// Norm of a stack of square blocks: `sqrt(Σ ‖block‖₂²)`, an upper bound
/// on the operator norm of the bilinear map they define.
fn block_norm(blocks: &[f64], n: usize) -> f64 {
    blocks
        .chunks(n * n)
        .map(|b| spectral_norm(b, n, n).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn asymmetry(a: &[f64], n: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    worst
}

/// Check every bound of the Lipschitz/growth and second-derivative
/// assumptions at `sample_count` random points, with the default radius.
pub fn validate_problem(problem: &ControlProblem, sample_count: usize, seed: u64) -> Result<ValidationReport> {
    validate_problem_with(
        problem,
        &ValidationOptions {
            sample_count,
            seed,
            ..ValidationOptions::default()
        },
    )
}

pub fn validate_problem_with(problem: &ControlProblem, opts: &ValidationOptions) -> Result<ValidationReport> {
    if opts.sample_count == 0 {
        return Err(Error::InvalidArgument("sample_count must be at least 1".into()));
    }
    if !(opts.radius.is_finite() && opts.radius > 0.0) {
        return Err(Error::InvalidArgument("validation radius must be positive".into()));
    }
    let coef = problem.coef();
    let Dims { n, d, .. } = problem.dims();
    let w = n + 1 + d;
    let k0 = problem.lipschitz_bound();

    const NAMES: [&str; 16] = [
        "b_x", "sigma_x", "h_x", "f_x", "f_y", "f_z", "b_growth", "sigma_growth", "h_growth",
        "f_growth", "b_xx", "sigma_xx", "D2f", "h_xx", "D2f_symmetry", "h_xx_symmetry",
    ];
    let mut worst = [0.0f64; 16];

    let mut b = vec![0.0; n];
    let mut bx = vec![0.0; n * n];
    let mut bxx = vec![0.0; n * n * n];
    let mut sig = vec![0.0; n * d];
    let mut sx = vec![0.0; d * n * n];
    let mut sxx = vec![0.0; d * n * n * n];
    let mut grad = vec![0.0; w];
    let mut hess = vec![0.0; w * w];
    let mut hx = vec![0.0; n];
    let mut hxx = vec![0.0; n * n];

    for i in 0..opts.sample_count {
        let s = draw(problem, opts, i);
        let (t, x, y, z, u) = (s.t, &s.x, s.y, &s.z, &s.u);
        coef.drift(t, x, u, &mut b);
        ensure_finite("drift", &b, &s)?;
        coef.drift_x(t, x, u, &mut bx);
        ensure_finite("drift_x", &bx, &s)?;
        coef.drift_xx(t, x, u, &mut bxx);
        ensure_finite("drift_xx", &bxx, &s)?;
        coef.diffusion(t, x, &mut sig);
        ensure_finite("diffusion", &sig, &s)?;
        coef.diffusion_x(t, x, &mut sx);
        ensure_finite("diffusion_x", &sx, &s)?;
        coef.diffusion_xx(t, x, &mut sxx);
        ensure_finite("diffusion_xx", &sxx, &s)?;
        let f = coef.generator(t, x, y, z, u);
        ensure_finite("generator", &[f], &s)?;
        coef.generator_grad(t, x, y, z, u, &mut grad);
        ensure_finite("generator_grad", &grad, &s)?;
        coef.generator_hess(t, x, y, z, u, &mut hess);
        ensure_finite("generator_hess", &hess, &s)?;
        let h = coef.terminal(x);
        ensure_finite("terminal", &[h], &s)?;
        coef.terminal_grad(x, &mut hx);
        ensure_finite("terminal_grad", &hx, &s)?;
        coef.terminal_hess(x, &mut hxx);
        ensure_finite("terminal_hess", &hxx, &s)?;

        let (nx, nu, nz) = (norm(x), norm(u), norm(z));
        let observed = [
            spectral_norm(&bx, n, n),
            spectral_norm(&sx, d * n, n),
            norm(&hx),
            norm(&grad[..n]),
            grad[n].abs(),
            norm(&grad[n + 1..]),
            norm(&b) / (1.0 + nx + nu),
            norm(&sig) / (1.0 + nx),
            h.abs() / (1.0 + nx),
            f.abs() / (1.0 + nx + y.abs() + nz + nu),
            block_norm(&bxx, n),
            block_norm(&sxx, n),
            spectral_norm(&hess, w, w),
            spectral_norm(&hxx, n, n),
            asymmetry(&hess, w),
            asymmetry(&hxx, n),
        ];
        for (acc, v) in worst.iter_mut().zip(observed) {
            *acc = acc.max(v);
        }
    }

    let mut checks: Vec<AssumptionCheck> = NAMES
        .iter()
        .zip(worst)
        .map(|(name, observed)| {
            let bound = if name.ends_with("_symmetry") { 1e-8 * k0 } else { k0 };
            AssumptionCheck {
                name: name.to_string(),
                observed,
                bound,
                passed: observed <= bound * (1.0 + 1e-9),
            }
        })
        .collect();

    if coef.analytic_derivatives() {
        let gap = derivative_consistency(problem, opts.sample_count, opts.seed)?;
        checks.push(AssumptionCheck {
            name: "derivatives_vs_fd".into(),
            observed: gap,
            bound: DERIVATIVE_TOLERANCE,
            passed: gap <= DERIVATIVE_TOLERANCE,
        });
    }

    let passed = checks.iter().all(|c| c.passed);
    Ok(ValidationReport {
        problem: problem.name().to_string(),
        lipschitz_bound: k0,
        options: opts.clone(),
        checks,
        passed,
    })
}

/// Forwards only the base coefficients, so every derivative falls back to
/// finite differences.
struct FiniteDifferenceView<'a>(&'a dyn Coefficients);

impl Coefficients for FiniteDifferenceView<'_> {
    fn dims(&self) -> Dims {
        self.0.dims()
    }
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        self.0.drift(t, x, u, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.0.diffusion(t, x, out)
    }
    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        self.0.generator(t, x, y, z, u)
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        self.0.terminal(x)
    }
}

/// Largest relative gap `|analytic - fd| / max(1, |analytic|)` between the
/// problem's derivative methods and central finite differences.
pub fn derivative_consistency(problem: &ControlProblem, sample_count: usize, seed: u64) -> Result<f64> {
    let coef = problem.coef();
    let fdv = FiniteDifferenceView(coef);
    let Dims { n, d, .. } = problem.dims();
    let w = n + 1 + d;
    let opts = ValidationOptions {
        sample_count,
        seed,
        ..ValidationOptions::default()
    };
    let mut worst = 0.0f64;
    let mut pair = |len: usize, eval: &dyn Fn(&dyn Coefficients, &mut [f64])| {
        let mut a = vec![0.0; len];
        let mut b = vec![0.0; len];
        eval(coef, &mut a);
        eval(&fdv, &mut b);
        worst = worst.max(fd::max_relative_gap(&a, &b));
    };
    for i in 0..sample_count {
        let s = draw(problem, &opts, i);
        let (t, x, y, z, u) = (s.t, &s.x[..], s.y, &s.z[..], &s.u[..]);
        pair(n * n, &|c, o| c.drift_x(t, x, u, o));
        pair(n * n * n, &|c, o| c.drift_xx(t, x, u, o));
        pair(d * n * n, &|c, o| c.diffusion_x(t, x, o));
        pair(d * n * n * n, &|c, o| c.diffusion_xx(t, x, o));
        pair(w, &|c, o| c.generator_grad(t, x, y, z, u, o));
        pair(w * w, &|c, o| c.generator_hess(t, x, y, z, u, o));
        pair(n, &|c, o| c.terminal_grad(x, o));
        pair(n * n, &|c, o| c.terminal_hess(x, o));
    }
    if worst.is_finite() {
        Ok(worst)
    } else {
        Err(Error::InvalidProblem {
            coefficient: "derivative bundle".into(),
            point: "finite-difference comparison produced a non-finite gap".into(),
        })
    }
}

/// `max_k (E|u(t_k)|^8)^{1/8}` over the grid steps of `paths`.
///
/// Feedback controls need the state on `paths`.
pub fn admissibility_norm(u: &super::ControlProcess, paths: &PathBatch) -> Result<f64> {
    let m_paths = paths.path_count();
    if m_paths == 0 {
        return Err(Error::Empty("path batch"));
    }
    let grid = paths.grid();
    let state = match (u.is_open_loop(), paths.state()) {
        (true, s) => s,
        (false, Some(s)) => Some(s),
        (false, None) => {
            return Err(Error::Precondition(
                "feedback control needs simulated state paths".into(),
            ))
        }
    };
    let dim = u.dim().ok_or(Error::Empty("control values"))?;
    let mut buf = vec![0.0; dim];
    let mut best = 0.0f64;
    for k in 0..grid.steps() {
        let mut acc = KahanSum::default();
        let paths_here = if u.is_open_loop() { 1 } else { m_paths };
        for m in 0..paths_here {
            let x = state.map(|s| s.at(k, m)).unwrap_or(&[]);
            u.eval(k, grid.t(k), x, &mut buf);
            acc.add(norm(&buf).powi(ADMISSIBILITY_MOMENT));
        }
        let moment = acc.value() / paths_here as f64;
        best = best.max(moment.powf(1.0 / ADMISSIBILITY_MOMENT as f64));
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use super::*;
    use crate::problem::{build_registry_problem, ControlSet, FnCoefficients, Params};

    #[test]
    fn example1_passes_with_unit_sigma_x() {
        let mut params = Params::new();
        params.insert("a".into(), 1.0.into());
        let p = build_registry_problem("example1", &params).unwrap();
        let rep = validate_problem(&p, 200, 3).unwrap();
        assert!(rep.passed, "{rep:#?}");
        assert!((rep.check("sigma_x").unwrap().observed - 1.0).abs() < 1e-12);
    }

    #[test]
    fn trivial_problem_reports_zero_or_one() {
        let c = FnCoefficients::new(Dims { n: 1, d: 1, m: 1 }).terminal(|x| x[0]);
        let set = ControlSet::interval(-1.0, 1.0, 3).unwrap();
        let p = ControlProblem::new("trivial", Arc::new(c), 1.0, vec![0.0], set, 1.0).unwrap();
        let rep = validate_problem(&p, 50, 1).unwrap();
        assert!(rep.passed, "{rep:#?}");
        assert!((rep.check("h_x").unwrap().observed - 1.0).abs() < 1e-8);
        assert!(rep.check("b_x").unwrap().observed == 0.0);
        assert!(rep.check("sigma_x").unwrap().observed == 0.0);
    }

    #[test]
    fn quadratic_drift_fails_lipschitz_bound_on_wide_box() {
        let c = FnCoefficients::new(Dims { n: 1, d: 1, m: 1 }).drift(|_, x, _, o| o[0] = x[0] * x[0]);
        let set = ControlSet::interval(-1.0, 1.0, 3).unwrap();
        let p = ControlProblem::new("quad", Arc::new(c), 1.0, vec![0.0], set, 1.0).unwrap();
        let opts = ValidationOptions {
            sample_count: 100,
            seed: 5,
            radius: 10.0,
        };
        let rep = validate_problem_with(&p, &opts).unwrap();
        assert!(!rep.passed);
        assert!(!rep.check("b_x").unwrap().passed);
    }

    #[test]
    fn non_finite_coefficient_names_the_culprit() {
        let c = FnCoefficients::new(Dims { n: 1, d: 1, m: 1 }).generator(|_, _, _, _, _| f64::NAN);
        let set = ControlSet::interval(-1.0, 1.0, 3).unwrap();
        let p = ControlProblem::new("nan", Arc::new(c), 1.0, vec![0.0], set, 1.0).unwrap();
        match validate_problem(&p, 3, 0) {
            Err(Error::InvalidProblem { coefficient, .. }) => assert_eq!(coefficient, "generator"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn validation_is_deterministic_in_seed() {
        let p = build_registry_problem("example2", &Params::new()).unwrap();
        let a = validate_problem(&p, 64, 11).unwrap();
        let b = validate_problem(&p, 64, 11).unwrap();
        for (x, y) in a.checks.iter().zip(&b.checks) {
            assert_eq!(x.observed.to_bits(), y.observed.to_bits());
        }
    }

    #[test]
    fn zero_samples_is_an_error() {
        let p = build_registry_problem("example2", &Params::new()).unwrap();
        assert!(validate_problem(&p, 0, 0).is_err());
    }
}

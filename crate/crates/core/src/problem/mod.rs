//! Controlled forward-backward systems: coefficients, derivative bundles,
//! control sets and candidate controls.
//!
//! Array layouts used by every derivative method (row-major, noise-major):
//!
//! | quantity | length | index |
//! |---|---|---|
//! | `b_x` | n·n | `i*n + l` = ∂b_i/∂x_l |
//! | `b_xx` | n·n·n | `(i*n + l)*n + r` |
//! | `σ` | n·d | `i*d + j` |
//! | `σ_x` | d·n·n | `(j*n + i)*n + l` = ∂σ_ij/∂x_l |
//! | `σ_xx` | d·n·n·n | `((j*n + i)*n + l)*n + r` |
//! | `∇f` | n+1+d | x block, then y, then z |
//! | `D²f` | (n+1+d)² | row-major over the same ordering |

mod control;
pub mod fd;
mod registry;
mod validate;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use control::{ControlProcess, ControlSet, ControlSetKind, FeedbackRule};
pub use registry::{build_registry_problem, ParamValue, Params, RegistryKind};
pub use validate::{
    admissibility_norm, derivative_consistency, validate_problem, validate_problem_with, AssumptionCheck,
    ValidationOptions, ValidationReport, ADMISSIBILITY_MOMENT, DERIVATIVE_TOLERANCE,
};

/// Problem dimensions: state `n`, noise `d`, control `m`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub n: usize,
    pub d: usize,
    pub m: usize,
}

impl Dims {
    /// Length of the `(x, y, z)` argument of the generator.
    pub fn generator_args(&self) -> usize {
        self.n + 1 + self.d
    }
}

/// Coefficient functions `b`, `σ`, `f`, `h` of a controlled system
/// `dx = b dt + σ dW`, `dy = -f dt + z dW`, `y_T = h(x_T)`.
///
/// Derivative methods default to central finite differences; registry
/// problems override them analytically.
pub trait Coefficients: Send + Sync {
    fn dims(&self) -> Dims;

    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]);

    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]);

    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64;

    fn terminal(&self, x: &[f64]) -> f64;

    /// True when the derivative methods are overridden with closed forms.
    fn analytic_derivatives(&self) -> bool {
        false
    }

    fn drift_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.dims().n;
        fd::jacobian(x, n, |xx, o| self.drift(t, xx, u, o), out);
    }

    fn drift_xx(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.dims().n;
        fd::hessians(x, n, |xx, o| self.drift(t, xx, u, o), out);
    }

    fn diffusion_x(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let Dims { n, d, .. } = self.dims();
        let mut raw = vec![0.0; n * d * n];
        fd::jacobian(x, n * d, |xx, o| self.diffusion(t, xx, o), &mut raw);
        for i in 0..n {
            for j in 0..d {
                for l in 0..n {
                    out[(j * n + i) * n + l] = raw[(i * d + j) * n + l];
                }
            }
        }
    }

    fn diffusion_xx(&self, t: f64, x: &[f64], out: &mut [f64]) {
        let Dims { n, d, .. } = self.dims();
        let nn = n * n;
        let mut raw = vec![0.0; n * d * nn];
        fd::hessians(x, n * d, |xx, o| self.diffusion(t, xx, o), &mut raw);
        for i in 0..n {
            for j in 0..d {
                let src = (i * d + j) * nn;
                let dst = (j * n + i) * nn;
                out[dst..dst + nn].copy_from_slice(&raw[src..src + nn]);
            }
        }
    }

    fn generator_grad(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        let w = pack_xyz(x, y, z);
        let n = x.len();
        fd::jacobian(
            &w,
            1,
            |ww, o| o[0] = self.generator(t, &ww[..n], ww[n], &ww[n + 1..], u),
            out,
        );
    }

    fn generator_hess(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64], out: &mut [f64]) {
        let w = pack_xyz(x, y, z);
        let n = x.len();
        fd::hessians(
            &w,
            1,
            |ww, o| o[0] = self.generator(t, &ww[..n], ww[n], &ww[n + 1..], u),
            out,
        );
    }

    fn terminal_grad(&self, x: &[f64], out: &mut [f64]) {
        fd::jacobian(x, 1, |xx, o| o[0] = self.terminal(xx), out);
    }

    fn terminal_hess(&self, x: &[f64], out: &mut [f64]) {
        fd::hessians(x, 1, |xx, o| o[0] = self.terminal(xx), out);
    }
}

fn pack_xyz(x: &[f64], y: f64, z: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(x.len() + 1 + z.len());
    w.extend_from_slice(x);
    w.push(y);
    w.extend_from_slice(z);
    w
}

/// Derivatives of `b`, `σ` and `f` at one point, in the documented layouts.
#[derive(Clone, Debug, Serialize)]
pub struct CoefficientDerivatives {
    pub dims: Dims,
    pub b_x: Vec<f64>,
    pub b_xx: Vec<f64>,
    pub sigma_x: Vec<f64>,
    pub sigma_xx: Vec<f64>,
    /// `(f_x, f_y, f_z)`.
    pub f_grad: Vec<f64>,
    /// Hessian of `f` in `(x, y, z)`.
    pub f_hess: Vec<f64>,
}

impl CoefficientDerivatives {
    pub fn new(dims: Dims) -> Self {
        let Dims { n, d, .. } = dims;
        let w = dims.generator_args();
        CoefficientDerivatives {
            dims,
            b_x: vec![0.0; n * n],
            b_xx: vec![0.0; n * n * n],
            sigma_x: vec![0.0; d * n * n],
            sigma_xx: vec![0.0; d * n * n * n],
            f_grad: vec![0.0; w],
            f_hess: vec![0.0; w * w],
        }
    }

    /// First derivatives only; second-order arrays are left untouched.
    #[allow(clippy::too_many_arguments)]
    pub fn eval_first(&mut self, coef: &dyn Coefficients, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) {
        coef.drift_x(t, x, u, &mut self.b_x);
        coef.diffusion_x(t, x, &mut self.sigma_x);
        coef.generator_grad(t, x, y, z, u, &mut self.f_grad);
    }

    pub fn eval_all(&mut self, coef: &dyn Coefficients, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) {
        self.eval_first(coef, t, x, y, z, u);
        coef.drift_xx(t, x, u, &mut self.b_xx);
        coef.diffusion_xx(t, x, &mut self.sigma_xx);
        coef.generator_hess(t, x, y, z, u, &mut self.f_hess);
    }

    pub fn f_x(&self) -> &[f64] {
        &self.f_grad[..self.dims.n]
    }

    pub fn f_y(&self) -> f64 {
        self.f_grad[self.dims.n]
    }

    pub fn f_z(&self) -> &[f64] {
        &self.f_grad[self.dims.n + 1..]
    }
}

type DriftFn = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;
type DiffusionFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;
type GeneratorFn = dyn Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync;
type TerminalFn = dyn Fn(&[f64]) -> f64 + Send + Sync;

/// Closure-backed coefficients with finite-difference derivatives.
#[derive(Clone)]
pub struct FnCoefficients {
    dims: Dims,
    drift: Arc<DriftFn>,
    diffusion: Arc<DiffusionFn>,
    generator: Arc<GeneratorFn>,
    terminal: Arc<TerminalFn>,
}

impl FnCoefficients {
    /// All four coefficients start at zero.
    pub fn new(dims: Dims) -> Self {
        FnCoefficients {
            dims,
            drift: Arc::new(|_, _, _, o: &mut [f64]| o.fill(0.0)),
            diffusion: Arc::new(|_, _, o: &mut [f64]| o.fill(0.0)),
            generator: Arc::new(|_, _, _, _, _| 0.0),
            terminal: Arc::new(|_| 0.0),
        }
    }

    pub fn drift(mut self, f: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Arc::new(f);
        self
    }

    pub fn diffusion(mut self, f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Arc::new(f);
        self
    }

    pub fn generator(
        mut self,
        f: impl Fn(f64, &[f64], f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.generator = Arc::new(f);
        self
    }

    pub fn terminal(mut self, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.terminal = Arc::new(f);
        self
    }
}

impl Coefficients for FnCoefficients {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn drift(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.drift)(t, x, u, out)
    }
    fn diffusion(&self, t: f64, x: &[f64], out: &mut [f64]) {
        (self.diffusion)(t, x, out)
    }
    fn generator(&self, t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        (self.generator)(t, x, y, z, u)
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        (self.terminal)(x)
    }
}

/// A controlled forward-backward system on `[0, T]`.
///
/// Immutable after construction and cheap to clone.
#[derive(Clone)]
pub struct ControlProblem {
    name: String,
    coefficients: Arc<dyn Coefficients>,
    dims: Dims,
    horizon: f64,
    initial_state: Vec<f64>,
    control_set: ControlSet,
    lipschitz_bound: f64,
    kind: RegistryKind,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("dims", &self.dims)
            .field("horizon", &self.horizon)
            .field("initial_state", &self.initial_state)
            .field("control_set", &self.control_set)
            .field("lipschitz_bound", &self.lipschitz_bound)
            .finish()
    }
}

impl ControlProblem {
    pub fn new(
        name: impl Into<String>,
        coefficients: Arc<dyn Coefficients>,
        horizon: f64,
        initial_state: Vec<f64>,
        control_set: ControlSet,
        lipschitz_bound: f64,
    ) -> Result<Self> {
        let dims = coefficients.dims();
        if dims.n == 0 || dims.d == 0 || dims.m == 0 {
            return Err(Error::Shape(format!("dimensions must be positive, got {dims:?}")));
        }
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::param("T", "horizon must be positive and finite"));
        }
        if initial_state.len() != dims.n {
            return Err(Error::Shape(format!(
                "initial state has length {}, state dimension is {}",
                initial_state.len(),
                dims.n
            )));
        }
        if control_set.dim() != dims.m {
            return Err(Error::Shape(format!(
                "control set lives in R^{}, control dimension is {}",
                control_set.dim(),
                dims.m
            )));
        }
        if !(lipschitz_bound.is_finite() && lipschitz_bound > 0.0) {
            return Err(Error::param("k0", "Lipschitz bound must be positive and finite"));
        }
        Ok(ControlProblem {
            name: name.into(),
            coefficients,
            dims,
            horizon,
            initial_state,
            control_set,
            lipschitz_bound,
            kind: RegistryKind::Custom,
        })
    }

    pub(crate) fn with_kind(mut self, kind: RegistryKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn coef(&self) -> &dyn Coefficients {
        self.coefficients.as_ref()
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.initial_state
    }

    pub fn control_set(&self) -> &ControlSet {
        &self.control_set
    }

    pub fn lipschitz_bound(&self) -> f64 {
        self.lipschitz_bound
    }

    /// Which registry family built this problem, with its parameters.
    pub fn kind(&self) -> &RegistryKind {
        &self.kind
    }

    /// Same problem with a different Lipschitz constant.
    pub fn with_lipschitz_bound(mut self, k0: f64) -> Result<Self> {
        if !(k0.is_finite() && k0 > 0.0) {
            return Err(Error::param("k0", "Lipschitz bound must be positive and finite"));
        }
        self.lipschitz_bound = k0;
        Ok(self)
    }

    /// Same problem with a different control set.
    pub fn with_control_set(mut self, set: ControlSet) -> Result<Self> {
        if set.dim() != self.dims.m {
            return Err(Error::Shape("control set dimension mismatch".into()));
        }
        self.control_set = set;
        Ok(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_defaults_follow_documented_layout() {
        // σ(x) = [[x0, 2 x1], [x0 x1, 0]] with n = d = 2.
        let c = FnCoefficients::new(Dims { n: 2, d: 2, m: 1 }).diffusion(|_, x, o| {
            o[0] = x[0];
            o[1] = 2.0 * x[1];
            o[2] = x[0] * x[1];
            o[3] = 0.0;
        });
        let x = [0.5, -1.5];
        let mut sx = [0.0; 8];
        c.diffusion_x(0.0, &x, &mut sx);
        // column j = 0: rows (σ_00, σ_10)
        let col0 = [1.0, 0.0, x[1], x[0]];
        // column j = 1: rows (σ_01, σ_11)
        let col1 = [0.0, 2.0, 0.0, 0.0];
        assert!(fd::max_relative_gap(&col0, &sx[..4]) < 1e-8);
        assert!(fd::max_relative_gap(&col1, &sx[4..]) < 1e-8);

        let mut sxx = [0.0; 16];
        c.diffusion_xx(0.0, &x, &mut sxx);
        // only σ_10 = x0 x1 is curved: ∂²/∂x0∂x1 = 1
        let mut expect = [0.0; 16];
        expect[(n_idx(0, 1, 2)) * 2 + 1] = 1.0;
        expect[(n_idx(0, 1, 2) + 1) * 2] = 1.0;
        assert!(fd::max_relative_gap(&expect, &sxx) < 1e-6);
    }

    fn n_idx(j: usize, i: usize, n: usize) -> usize {
        (j * n + i) * n
    }

    #[test]
    fn generator_gradient_orders_x_then_y_then_z() {
        let c = FnCoefficients::new(Dims { n: 1, d: 2, m: 1 })
            .generator(|_, x, y, z, _| 3.0 * x[0] + 5.0 * y + 7.0 * z[0] - z[1]);
        let mut g = [0.0; 4];
        c.generator_grad(0.0, &[0.2], 0.1, &[0.3, 0.4], &[0.0], &mut g);
        assert!(fd::max_relative_gap(&[3.0, 5.0, 7.0, -1.0], &g) < 1e-9);
    }

    #[test]
    fn construction_rejects_inconsistent_shapes() {
        let c = Arc::new(FnCoefficients::new(Dims { n: 2, d: 1, m: 1 }));
        let set = ControlSet::interval(-1.0, 1.0, 3).unwrap();
        assert!(ControlProblem::new("x", c.clone(), 1.0, vec![0.0], set.clone(), 1.0).is_err());
        assert!(ControlProblem::new("x", c.clone(), 0.0, vec![0.0; 2], set.clone(), 1.0).is_err());
        assert!(ControlProblem::new("x", c, 1.0, vec![0.0; 2], set, 1.0).is_ok());
    }
}

//! Backward solvers for the cost equation, the first- and second-order
//! adjoint equations and the first/second variation cost equations.
//!
//! Layouts per path: `q` and `z` are noise-major (`q[j*n + i]`); the
//! matrix adjoint stores `P` row-major (`P[r*n + c]`) and `Q` as
//! `Q[j*n*n + r*n + c]`.

mod chains;
mod engine;

use serde::Serialize;

pub use engine::{
    solve_backward, BackwardSolution, Chain, Driver, RegressionBasis, Scheme, StepDiagnostics, MAX_DEGREE,
};

use chains::{StateChain, VariationChain};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::principle::g_vector;
use crate::problem::{CoefficientDerivatives, ControlProblem, Dims};
use crate::sde::{spike_value, PathBatch, TimeGrid};
use crate::spike::SpikeSpec;
use crate::stats::{Estimate, KahanSum};

/// Cost process `(y, z)` with `J(u) = y(0)`.
#[derive(Clone, Debug)]
pub struct CostSolution {
    /// `(N+1) × M × 1`.
    pub y: Field,
    /// `N × M × d`.
    pub z: Field,
    pub y0: Estimate,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// First-order adjoint `(p, q)`.
#[derive(Clone, Debug)]
pub struct AdjointFirst {
    /// `(N+1) × M × n`.
    pub p: Field,
    /// `N × M × (d·n)`.
    pub q: Field,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Second-order adjoint `(P, Q)`; `P` is symmetric at every node.
#[derive(Clone, Debug)]
pub struct AdjointSecond {
    /// `(N+1) × M × n²`.
    pub p: Field,
    /// `N × M × (d·n²)`.
    pub q: Field,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Solution `(y_i, z_i)` of a variation cost equation with zero terminal value.
#[derive(Clone, Debug)]
pub struct VariationCost {
    pub y: Field,
    pub z: Field,
    pub y0: Estimate,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Base trajectory `(x̄, ū, ȳ, z̄)` read by the linearised drivers.
#[derive(Clone, Copy)]
struct Along<'a> {
    problem: &'a ControlProblem,
    grid: TimeGrid,
    state: &'a Field,
    controls: &'a Field,
    y: &'a Field,
    z: &'a Field,
}

impl<'a> Along<'a> {
    fn new(problem: &'a ControlProblem, paths: &'a PathBatch, cost: &'a CostSolution) -> Result<Self> {
        let (state, controls) = paths.require_state()?;
        if cost.y.paths() != paths.path_count() || cost.y.nodes() != paths.grid().nodes() {
            return Err(Error::Shape("cost solution does not match the batch".into()));
        }
        Ok(Along {
            problem,
            grid: *paths.grid(),
            state,
            controls,
            y: &cost.y,
            z: &cost.z,
        })
    }

    fn derivatives(&self, bundle: &mut CoefficientDerivatives, k: usize, m: usize, second: bool) {
        let t = self.grid.t(k);
        let (x, y, z, u) = (self.state.at(k, m), self.y.at(k, m)[0], self.z.at(k, m), self.controls.at(k, m));
        if second {
            bundle.eval_all(self.problem.coef(), t, x, y, z, u);
        } else {
            bundle.eval_first(self.problem.coef(), t, x, y, z, u);
        }
    }
}

fn state_chain<'a>(problem: &'a ControlProblem, paths: &'a PathBatch) -> Result<StateChain<'a>> {
    let (state, controls) = paths.require_state()?;
    Ok(StateChain {
        problem,
        grid: *paths.grid(),
        state,
        controls,
    })
}

struct CostDriver<'a> {
    problem: &'a ControlProblem,
    grid: TimeGrid,
    state: &'a Field,
    controls: &'a Field,
}

impl Driver for CostDriver<'_> {
    type Scratch = ();
    fn width(&self) -> usize {
        1
    }
    fn scratch(&self) {}
    fn eval(&self, _: &mut (), k: usize, m: usize, y: &[f64], z: &[f64], out: &mut [f64]) {
        out[0] = self
            .problem
            .coef()
            .generator(self.grid.t(k), self.state.at(k, m), y[0], z, self.controls.at(k, m));
    }
}

fn check_basis_batch(paths: &PathBatch, problem: &ControlProblem) -> Result<()> {
    if paths.noise_dim() != problem.dims().d {
        return Err(Error::Shape("batch noise dimension differs from the problem".into()));
    }
    Ok(())
}

/// Cost equation with terminal values supplied per path.
pub(crate) fn solve_cost_with_terminal(
    problem: &ControlProblem,
    paths: &PathBatch,
    basis: &RegressionBasis,
    terminal: &[f64],
) -> Result<CostSolution> {
    check_basis_batch(paths, problem)?;
    let chain = state_chain(problem, paths)?;
    let driver = CostDriver {
        problem,
        grid: *paths.grid(),
        state: chain.state,
        controls: chain.controls,
    };
    let sol = solve_backward(paths.grid(), paths.increments(), &chain, &driver, terminal, basis)?;
    Ok(CostSolution {
        y: sol.y,
        z: sol.z,
        y0: sol.y0[0],
        diagnostics: sol.diagnostics,
    })
}

/// `y = h(x_T) + ∫ f dt - ∫ z dW` along simulated state paths.
pub fn solve_cost_bsde(problem: &ControlProblem, paths: &PathBatch, basis: &RegressionBasis) -> Result<CostSolution> {
    let (state, _) = paths.require_state()?;
    let last = paths.grid().steps();
    let terminal: Vec<f64> = (0..paths.path_count())
        .map(|m| problem.coef().terminal(state.at(last, m)))
        .collect();
    solve_cost_with_terminal(problem, paths, basis, &terminal)
}

struct FirstAdjointDriver<'a> {
    along: Along<'a>,
}

impl Driver for FirstAdjointDriver<'_> {
    type Scratch = CoefficientDerivatives;
    fn width(&self) -> usize {
        self.along.problem.dims().n
    }
    fn scratch(&self) -> CoefficientDerivatives {
        CoefficientDerivatives::new(self.along.problem.dims())
    }
    fn eval(&self, s: &mut CoefficientDerivatives, k: usize, m: usize, p: &[f64], q: &[f64], out: &mut [f64]) {
        self.along.derivatives(s, k, m, false);
        let Dims { n, d, .. } = s.dims;
        let fy = s.f_y();
        for i in 0..n {
            let mut v = fy * p[i] + s.f_grad[i];
            for l in 0..n {
                v += s.b_x[l * n + i] * p[l];
            }
            for j in 0..d {
                let fz = s.f_grad[n + 1 + j];
                v += fz * q[j * n + i];
                for l in 0..n {
                    let sx = s.sigma_x[(j * n + l) * n + i];
                    v += sx * (fz * p[l] + q[j * n + l]);
                }
            }
            out[i] = v;
        }
    }
}

/// First-order adjoint with driver
/// `[f_y + Σ_j f_z^j σ_x^{jᵀ} + b_xᵀ] p + Σ_j [f_z^j + σ_x^{jᵀ}] q^j + f_x`
/// and `p_T = h_x(x̄_T)`.
pub fn solve_first_adjoint(
    problem: &ControlProblem,
    paths: &PathBatch,
    cost: &CostSolution,
    basis: &RegressionBasis,
) -> Result<AdjointFirst> {
    check_basis_batch(paths, problem)?;
    let along = Along::new(problem, paths, cost)?;
    let n = problem.dims().n;
    let last = paths.grid().steps();
    let mut terminal = vec![0.0; paths.path_count() * n];
    for (m, row) in terminal.chunks_mut(n).enumerate() {
        problem.coef().terminal_grad(along.state.at(last, m), row);
    }
    let chain = state_chain(problem, paths)?;
    let sol = solve_backward(paths.grid(), paths.increments(), &chain, &FirstAdjointDriver { along }, &terminal, basis)?;
    Ok(AdjointFirst {
        p: sol.y,
        q: sol.z,
        diagnostics: sol.diagnostics,
    })
}

struct SecondAdjointDriver<'a> {
    along: Along<'a>,
    adj1: &'a AdjointFirst,
}

struct SecondScratch {
    der: CoefficientDerivatives,
    a: Vec<f64>,
    lift: Vec<f64>,
    tmp: Vec<f64>,
}

impl Driver for SecondAdjointDriver<'_> {
    type Scratch = SecondScratch;
    fn width(&self) -> usize {
        let n = self.along.problem.dims().n;
        n * n
    }
    fn scratch(&self) -> SecondScratch {
        let dims = self.along.problem.dims();
        let n = dims.n;
        SecondScratch {
            der: CoefficientDerivatives::new(dims),
            a: vec![0.0; n * n],
            lift: vec![0.0; dims.generator_args() * n],
            tmp: vec![0.0; dims.generator_args() * n],
        }
    }

    fn eval(&self, s: &mut SecondScratch, k: usize, m: usize, pm: &[f64], qm: &[f64], out: &mut [f64]) {
        self.along.derivatives(&mut s.der, k, m, true);
        let der = &s.der;
        let Dims { n, d, .. } = der.dims;
        let w = n + 1 + d;
        let nn = n * n;
        let p = self.adj1.p.at(k, m);
        let q = self.adj1.q.at(k, m);
        let fy = der.f_y();
        let fz = der.f_z();
        let sx = |j: usize, r: usize, c: usize| der.sigma_x[(j * n + r) * n + c];

        // A = Σ_j f_z^j σ_x^j + b_x
        for r in 0..n {
            for c in 0..n {
                let mut v = der.b_x[r * n + c];
                for j in 0..d {
                    v += fz[j] * sx(j, r, c);
                }
                s.a[r * n + c] = v;
            }
        }
        for r in 0..n {
            for c in 0..n {
                let mut v = fy * pm[r * n + c];
                for l in 0..n {
                    v += s.a[l * n + r] * pm[l * n + c] + pm[r * n + l] * s.a[l * n + c];
                }
                for j in 0..d {
                    // σ_x^{jᵀ} P σ_x^j
                    let mut sps = 0.0;
                    for a in 0..n {
                        for b in 0..n {
                            sps += sx(j, a, r) * pm[a * n + b] * sx(j, b, c);
                        }
                    }
                    let qj = &qm[j * nn..(j + 1) * nn];
                    let mut sq = fz[j] * qj[r * n + c];
                    for l in 0..n {
                        sq += sx(j, l, r) * qj[l * n + c] + qj[r * n + l] * sx(j, l, c);
                    }
                    v += sps + sq;
                }
                // Σ_i p_i b^i_xx + Σ_{ij} (f_z^j p_i + q^j_i) σ^{ij}_xx
                for i in 0..n {
                    v += p[i] * der.b_xx[(i * n + r) * n + c];
                    for j in 0..d {
                        let weight = fz[j] * p[i] + q[j * n + i];
                        v += weight * der.sigma_xx[((j * n + i) * n + r) * n + c];
                    }
                }
                out[r * n + c] = v;
            }
        }
        // lift = [I; pᵀ; (σ_x^{jᵀ} p + q^j)ᵀ], shape w × n
        s.lift.fill(0.0);
        for i in 0..n {
            s.lift[i * n + i] = 1.0;
            s.lift[n * n + i] = p[i];
        }
        for j in 0..d {
            for c in 0..n {
                let mut v = q[j * n + c];
                for l in 0..n {
                    v += sx(j, l, c) * p[l];
                }
                s.lift[(n + 1 + j) * n + c] = v;
            }
        }
        // tmp = D²f · lift
        for a in 0..w {
            for c in 0..n {
                let mut v = 0.0;
                for b in 0..w {
                    v += der.f_hess[a * w + b] * s.lift[b * n + c];
                }
                s.tmp[a * n + c] = v;
            }
        }
        for r in 0..n {
            for c in 0..n {
                let mut v = 0.0;
                for a in 0..w {
                    v += s.lift[a * n + r] * s.tmp[a * n + c];
                }
                out[r * n + c] += v;
            }
        }
    }

    fn project(&self, y: &mut [f64], z: &mut [f64]) {
        let n = self.along.problem.dims().n;
        symmetrise(y, n);
        z.chunks_mut(n * n).for_each(|block| symmetrise(block, n));
    }
}

fn symmetrise(a: &mut [f64], n: usize) {
    for r in 0..n {
        for c in 0..r {
            let v = 0.5 * (a[r * n + c] + a[c * n + r]);
            a[r * n + c] = v;
            a[c * n + r] = v;
        }
    }
}

/// Second-order matrix adjoint with `P_T = h_xx(x̄_T)`, solved entry-wise on
/// a shared design and symmetrised after every step.
pub fn solve_second_adjoint(
    problem: &ControlProblem,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    basis: &RegressionBasis,
) -> Result<AdjointSecond> {
    check_basis_batch(paths, problem)?;
    let along = Along::new(problem, paths, cost)?;
    let n = problem.dims().n;
    if adj1.p.paths() != paths.path_count() || adj1.p.width() != n {
        return Err(Error::Shape("first adjoint does not match the batch".into()));
    }
    let last = paths.grid().steps();
    let mut terminal = vec![0.0; paths.path_count() * n * n];
    for (m, row) in terminal.chunks_mut(n * n).enumerate() {
        problem.coef().terminal_hess(along.state.at(last, m), row);
        symmetrise(row, n);
    }
    let chain = state_chain(problem, paths)?;
    let sol = solve_backward(
        paths.grid(),
        paths.increments(),
        &chain,
        &SecondAdjointDriver { along, adj1 },
        &terminal,
        basis,
    )?;
    Ok(AdjointSecond {
        p: sol.y,
        q: sol.z,
        diagnostics: sol.diagnostics,
    })
}

/// Linear variation driver `f̄_y y + f̄_z·z + source(k, m)`.
struct VariationDriver<'a, S> {
    along: Along<'a>,
    source: S,
}

trait Source: Sync {
    type Scratch: Send;
    fn scratch(&self) -> Self::Scratch;
    fn value(&self, s: &mut Self::Scratch, der: &CoefficientDerivatives, k: usize, m: usize) -> f64;
}

impl<S: Source> Driver for VariationDriver<'_, S> {
    type Scratch = (CoefficientDerivatives, S::Scratch);
    fn width(&self) -> usize {
        1
    }
    fn scratch(&self) -> Self::Scratch {
        (CoefficientDerivatives::new(self.along.problem.dims()), self.source.scratch())
    }
    fn eval(&self, s: &mut Self::Scratch, k: usize, m: usize, y: &[f64], z: &[f64], out: &mut [f64]) {
        self.along.derivatives(&mut s.0, k, m, false);
        let mut v = s.0.f_y() * y[0];
        for (fz, zj) in s.0.f_z().iter().zip(z) {
            v += fz * zj;
        }
        out[0] = v + self.source.value(&mut s.1, &s.0, k, m);
    }
}

/// `p·δb + δf` on spiked steps, zero elsewhere.
struct FirstSource<'a> {
    along: Along<'a>,
    spike: &'a SpikeSpec,
    p: &'a Field,
}

impl Source for FirstSource<'_> {
    type Scratch = (Vec<f64>, Vec<f64>, Vec<f64>);
    fn scratch(&self) -> Self::Scratch {
        let Dims { n, m, .. } = self.along.problem.dims();
        (vec![0.0; m], vec![0.0; n], vec![0.0; n])
    }
    fn value(&self, s: &mut Self::Scratch, _: &CoefficientDerivatives, k: usize, m: usize) -> f64 {
        first_order_integrand(self.along, self.spike, self.p, k, m, s)
    }
}

/// `p·δb + δf` at step `k`, path `m`; zero off the spike set.
fn first_order_integrand(
    along: Along<'_>,
    spike: &SpikeSpec,
    p: &Field,
    k: usize,
    m: usize,
    (ue, be, bb): &mut (Vec<f64>, Vec<f64>, Vec<f64>),
) -> f64 {
    let t = along.grid.t(k);
    let x = along.state.at(k, m);
    if !spike_value(spike, k, t, x, ue) {
        return 0.0;
    }
    let coef = along.problem.coef();
    let ub = along.controls.at(k, m);
    let (y, z) = (along.y.at(k, m)[0], along.z.at(k, m));
    coef.drift(t, x, ue, be);
    coef.drift(t, x, ub, bb);
    let pk = p.at(k, m);
    let mut v = coef.generator(t, x, y, z, ue) - coef.generator(t, x, y, z, ub);
    for i in 0..pk.len() {
        v += pk[i] * (be[i] - bb[i]);
    }
    v
}

fn check_spike(spike: &SpikeSpec, paths: &PathBatch) -> Result<()> {
    if spike.grid() != paths.grid() {
        return Err(Error::Shape("spike and batch live on different grids".into()));
    }
    Ok(())
}

/// First variation cost `dy₁ = -(f̄_y y₁ + f̄_z z₁ + p·δb + δf) dt + z₁ dW`, `y₁(T) = 0`.
pub fn solve_variation_cost_first(
    problem: &ControlProblem,
    spike: &SpikeSpec,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    basis: &RegressionBasis,
) -> Result<VariationCost> {
    check_spike(spike, paths)?;
    let along = Along::new(problem, paths, cost)?;
    let chain = state_chain(problem, paths)?;
    let driver = VariationDriver {
        along,
        source: FirstSource {
            along,
            spike,
            p: &adj1.p,
        },
    };
    let terminal = vec![0.0; paths.path_count()];
    let sol = solve_backward(paths.grid(), paths.increments(), &chain, &driver, &terminal, basis)?;
    Ok(VariationCost {
        y: sol.y,
        z: sol.z,
        y0: sol.y0[0],
        diagnostics: sol.diagnostics,
    })
}

/// `(δG + P δb)·x₁` on spiked steps, zero elsewhere.
struct SecondSource<'a> {
    along: Along<'a>,
    spike: &'a SpikeSpec,
    adj1: &'a AdjointFirst,
    adj2: &'a AdjointSecond,
    x1: &'a Field,
}

pub(crate) struct SecondSourceScratch {
    ue: Vec<f64>,
    be: Vec<f64>,
    bb: Vec<f64>,
    spiked: CoefficientDerivatives,
    base: CoefficientDerivatives,
    ge: Vec<f64>,
    gb: Vec<f64>,
}

impl SecondSourceScratch {
    pub(crate) fn new(dims: Dims) -> Self {
        SecondSourceScratch {
            ue: vec![0.0; dims.m],
            be: vec![0.0; dims.n],
            bb: vec![0.0; dims.n],
            spiked: CoefficientDerivatives::new(dims),
            base: CoefficientDerivatives::new(dims),
            ge: vec![0.0; dims.n],
            gb: vec![0.0; dims.n],
        }
    }
}

/// `(δG(t; u^ε) + P δb(t; u^ε))·x₁` at step `k`, path `m`; zero off the spike.
#[allow(clippy::too_many_arguments)]
fn second_order_integrand(
    along: Along<'_>,
    spike: &SpikeSpec,
    p: &[f64],
    q: &[f64],
    pmat: &[f64],
    x1: &[f64],
    k: usize,
    m: usize,
    s: &mut SecondSourceScratch,
) -> f64 {
    let t = along.grid.t(k);
    let x = along.state.at(k, m);
    if !spike_value(spike, k, t, x, &mut s.ue) {
        return 0.0;
    }
    let coef = along.problem.coef();
    let ub = along.controls.at(k, m);
    let (y, z) = (along.y.at(k, m)[0], along.z.at(k, m));
    let n = x.len();
    coef.drift(t, x, &s.ue, &mut s.be);
    coef.drift(t, x, ub, &mut s.bb);
    s.spiked.eval_first(coef, t, x, y, z, &s.ue);
    s.base.eval_first(coef, t, x, y, z, ub);
    g_vector(&s.spiked, p, q, &mut s.ge);
    g_vector(&s.base, p, q, &mut s.gb);
    let mut v = 0.0;
    for i in 0..n {
        let mut row = s.ge[i] - s.gb[i];
        for l in 0..n {
            row += pmat[i * n + l] * (s.be[l] - s.bb[l]);
        }
        v += row * x1[i];
    }
    v
}

impl Source for SecondSource<'_> {
    type Scratch = SecondSourceScratch;
    fn scratch(&self) -> SecondSourceScratch {
        SecondSourceScratch::new(self.along.problem.dims())
    }
    fn value(&self, s: &mut SecondSourceScratch, _: &CoefficientDerivatives, k: usize, m: usize) -> f64 {
        second_order_integrand(
            self.along,
            self.spike,
            self.adj1.p.at(k, m),
            self.adj1.q.at(k, m),
            self.adj2.p.at(k, m),
            self.x1.at(k, m),
            k,
            m,
            s,
        )
    }
}

/// Second variation cost with source
/// `⟨P δb, x₁⟩ + pᵀ δb_x x₁ + [δf_x + δf_y p + Σ_j δf_z^j (σ̄_x^{jᵀ} p + q^j)]·x₁`,
/// regressed on the pair `(x̄, x₁)`.
#[allow(clippy::too_many_arguments)]
pub fn solve_variation_cost_second(
    problem: &ControlProblem,
    spike: &SpikeSpec,
    paths: &PathBatch,
    x1: &Field,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    basis: &RegressionBasis,
) -> Result<VariationCost> {
    check_spike(spike, paths)?;
    let along = Along::new(problem, paths, cost)?;
    let n = problem.dims().n;
    if x1.paths() != paths.path_count() || x1.width() != n || x1.nodes() != paths.grid().nodes() {
        return Err(Error::Shape("x1 does not match the batch".into()));
    }
    let chain = VariationChain {
        problem,
        grid: *paths.grid(),
        state: along.state,
        controls: along.controls,
        x1,
        spike,
    };
    let driver = VariationDriver {
        along,
        source: SecondSource {
            along,
            spike,
            adj1,
            adj2,
            x1,
        },
    };
    let terminal = vec![0.0; paths.path_count()];
    let sol = solve_backward(paths.grid(), paths.increments(), &chain, &driver, &terminal, basis)?;
    Ok(VariationCost {
        y: sol.y,
        z: sol.z,
        y0: sol.y0[0],
        diagnostics: sol.diagnostics,
    })
}

/// `E[Σ_k γ_k (p_k·δb_k + δf_k) h]` over the spike set.
pub fn gamma_duality_y1(
    problem: &ControlProblem,
    spike: &SpikeSpec,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    gamma: &Field,
) -> Result<Estimate> {
    check_spike(spike, paths)?;
    let along = Along::new(problem, paths, cost)?;
    if gamma.paths() != paths.path_count() || gamma.nodes() != paths.grid().nodes() {
        return Err(Error::Shape("γ does not match the batch".into()));
    }
    let h = paths.grid().h();
    let dims = problem.dims();
    let samples = per_path(paths.path_count(), |m| {
        let mut s = (vec![0.0; dims.m], vec![0.0; dims.n], vec![0.0; dims.n]);
        let mut acc = KahanSum::default();
        for k in spike.active_steps() {
            acc.add(gamma.at(k, m)[0] * first_order_integrand(along, spike, &adj1.p, k, m, &mut s) * h);
        }
        acc.value()
    });
    Ok(Estimate::from_samples(samples))
}

/// `E[Σ_k γ_k (δG_k + P_k δb_k)·x₁_k h]` over the spike set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gamma_second_integral(
    problem: &ControlProblem,
    spike: &SpikeSpec,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    gamma: &Field,
    x1: &Field,
) -> Result<Estimate> {
    check_spike(spike, paths)?;
    let along = Along::new(problem, paths, cost)?;
    let h = paths.grid().h();
    let dims = problem.dims();
    let samples = per_path(paths.path_count(), |m| {
        let mut s = SecondSourceScratch::new(dims);
        let mut acc = KahanSum::default();
        for k in spike.active_steps() {
            let v = second_order_integrand(
                along,
                spike,
                adj1.p.at(k, m),
                adj1.q.at(k, m),
                adj2.p.at(k, m),
                x1.at(k, m),
                k,
                m,
                &mut s,
            );
            acc.add(gamma.at(k, m)[0] * v * h);
        }
        acc.value()
    });
    Ok(Estimate::from_samples(samples))
}

/// Evaluate `f(m)` for every path in parallel, returned in path order.
pub(crate) fn per_path(paths: usize, f: impl Fn(usize) -> f64 + Sync + Send) -> Vec<f64> {
    use rayon::prelude::*;
    (0..paths).into_par_iter().map(f).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityEntry {
    pub delta: f64,
    /// `E|ξ|²` of the terminal perturbation.
    pub perturbation_norm: f64,
    /// `max_k (E|Δy_k|² + E Σ_{j≥k} h|Δz_j|²)`.
    pub difference_norm: f64,
    /// `sqrt(difference / perturbation)`, zero when both vanish.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct StabilityReport {
    pub entries: Vec<StabilityEntry>,
    /// Largest over smallest positive ratio.
    pub spread: f64,
    pub passed: bool,
}

/// Perturb the terminal value by `ξ = δ tanh(Σ_i (x_T - x_0)_i)`, re-solve
/// and compare. Passes when the positive ratios stay within a factor 2.
pub fn bsde_stability_check(
    problem: &ControlProblem,
    paths: &PathBatch,
    deltas: &[f64],
    basis: &RegressionBasis,
) -> Result<StabilityReport> {
    if deltas.is_empty() || deltas.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::InvalidArgument("perturbation sizes must be finite and non-negative".into()));
    }
    let (state, _) = paths.require_state()?;
    let last = paths.grid().steps();
    let h = paths.grid().h();
    let mp = paths.path_count();
    let x0 = problem.initial_state();
    let base_terminal: Vec<f64> = (0..mp).map(|m| problem.coef().terminal(state.at(last, m))).collect();
    let shape: Vec<f64> = (0..mp)
        .map(|m| state.at(last, m).iter().zip(x0).map(|(a, b)| a - b).sum::<f64>().tanh())
        .collect();
    let base = solve_cost_with_terminal(problem, paths, basis, &base_terminal)?;

    let mut entries = Vec::new();
    for &delta in deltas {
        let xi: Vec<f64> = shape.iter().map(|s| delta * s).collect();
        let perturbation_norm = crate::stats::mean(&xi.iter().map(|v| v * v).collect::<Vec<_>>());
        if delta == 0.0 || perturbation_norm == 0.0 {
            entries.push(StabilityEntry {
                delta,
                perturbation_norm: 0.0,
                difference_norm: 0.0,
                ratio: 0.0,
            });
            continue;
        }
        let terminal: Vec<f64> = base_terminal.iter().zip(&xi).map(|(a, b)| a + b).collect();
        let bumped = solve_cost_with_terminal(problem, paths, basis, &terminal)?;
        let dy = bumped.y.sub(&base.y);
        let dz = bumped.z.sub(&base.z);
        // tail[k] = E Σ_{j≥k} h |Δz_j|²
        let mut tail = vec![0.0; last + 1];
        for k in (0..last).rev() {
            let node = dz.node(k);
            tail[k] = tail[k + 1] + h * node.iter().map(|v| v * v).sum::<f64>() / mp as f64;
        }
        let difference_norm = (0..=last)
            .map(|k| dy.node(k).iter().map(|v| v * v).sum::<f64>() / mp as f64 + tail[k])
            .fold(0.0, f64::max);
        entries.push(StabilityEntry {
            delta,
            perturbation_norm,
            difference_norm,
            ratio: (difference_norm / perturbation_norm).sqrt(),
        });
    }
    let positive: Vec<f64> = entries.iter().map(|e| e.ratio).filter(|r| *r > 0.0).collect();
    let spread = if positive.is_empty() {
        1.0
    } else {
        positive.iter().fold(0.0f64, |a, b| a.max(*b)) / positive.iter().fold(f64::INFINITY, |a, b| a.min(*b))
    };
    Ok(StabilityReport {
        entries,
        spread,
        passed: spread <= 2.0,
    })
}

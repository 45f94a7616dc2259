//! Seeded Brownian increments and Euler–Maruyama integration of the state,
//! the first/second variation equations and the positive exponential `γ`.

use std::f64::consts::TAU;
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::CostSolution;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::problem::{ControlProblem, ControlProcess, Dims};
use crate::spike::SpikeSpec;

/// Uniform grid `t_k = k T / N`, `N >= 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidArgument("horizon must be positive".into()));
        }
        if steps < 2 {
            return Err(Error::InvalidArgument("time grid needs at least 2 steps".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn h(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    #[inline]
    pub fn t(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }
}

/// Brownian increments (one node per step) plus, once integrated, the state
/// at every node and the control applied on every step.
///
/// Clones share the increments, so perturbed runs on one batch use common
/// random numbers.
#[derive(Clone, Debug)]
pub struct PathBatch {
    grid: TimeGrid,
    seed: u64,
    increments: Arc<Field>,
    state: Option<Arc<Field>>,
    controls: Option<Arc<Field>>,
}

impl PathBatch {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn path_count(&self) -> usize {
        self.increments.paths()
    }

    pub fn noise_dim(&self) -> usize {
        self.increments.width()
    }

    /// `N × M × d` increments `ΔW_k = W(t_{k+1}) - W(t_k)`.
    pub fn increments(&self) -> &Field {
        &self.increments
    }

    #[inline]
    pub fn increment(&self, k: usize, m: usize) -> &[f64] {
        self.increments.at(k, m)
    }

    /// `(N+1) × M × n` state, present after [`euler_forward`].
    pub fn state(&self) -> Option<&Field> {
        self.state.as_deref()
    }

    /// `N × M × m` control values applied on each step.
    pub fn controls(&self) -> Option<&Field> {
        self.controls.as_deref()
    }

    pub(crate) fn require_state(&self) -> Result<(&Field, &Field)> {
        match (self.state(), self.controls()) {
            (Some(s), Some(c)) => Ok((s, c)),
            _ => Err(Error::Precondition("state paths have not been simulated on this batch".into())),
        }
    }

    /// Same increments, no state.
    pub fn noise_only(&self) -> PathBatch {
        PathBatch {
            state: None,
            controls: None,
            ..self.clone()
        }
    }

    /// `(N+1) × M × d` Brownian values `W(t_k)`, cumulated in step order.
    pub fn brownian(&self) -> Field {
        let (n_steps, paths, d) = (self.grid.steps, self.path_count(), self.noise_dim());
        let mut w = Field::zeros(n_steps + 1, paths, d);
        for k in 0..n_steps {
            let (cur, next) = w.step_pair_mut(k);
            let inc = self.increments.node(k);
            for i in 0..cur.len() {
                next[i] = cur[i] + inc[i];
            }
        }
        w
    }

    pub(crate) fn same_noise(&self, other: &PathBatch) -> bool {
        Arc::ptr_eq(&self.increments, &other.increments)
            || (self.grid == other.grid && self.increments == other.increments)
    }
}

/// Two standard normals from two raw words (Box–Muller).
#[inline]
fn normal_pair(rng: &mut ChaCha8Rng) -> (f64, f64) {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    // (0, 1]: keeps the logarithm finite.
    let u1 = ((rng.next_u64() >> 11) + 1) as f64 * SCALE;
    let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
    let r = (-2.0 * u1.ln()).sqrt();
    let (s, c) = (TAU * u2).sin_cos();
    (r * c, r * s)
}

/// Gaussian increments with variance `h`, keyed on `(seed, path, step)`.
///
/// Each path owns the ChaCha stream numbered by its index and each step
/// starts at a fixed word offset, so any draw can be regenerated alone and
/// the batch is identical for every worker count.
pub fn sample_brownian(grid: TimeGrid, paths: usize, noise_dim: usize, seed: u64) -> Result<PathBatch> {
    if paths == 0 {
        return Err(Error::InvalidArgument("path count must be at least 1".into()));
    }
    if noise_dim == 0 {
        return Err(Error::InvalidArgument("noise dimension must be at least 1".into()));
    }
    let steps = grid.steps;
    let pairs = noise_dim.div_ceil(2);
    // two u64 = four u32 words per normal pair
    let words_per_step = 4 * pairs as u128;
    let sqrt_h = grid.h().sqrt();

    let per_path: Vec<Vec<f64>> = (0..paths)
        .into_par_iter()
        .map(|m| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(m as u64);
            let mut out = vec![0.0; steps * noise_dim];
            for k in 0..steps {
                rng.set_word_pos(words_per_step * k as u128);
                let row = &mut out[k * noise_dim..(k + 1) * noise_dim];
                for p in 0..pairs {
                    let (a, b) = normal_pair(&mut rng);
                    row[2 * p] = a * sqrt_h;
                    if 2 * p + 1 < noise_dim {
                        row[2 * p + 1] = b * sqrt_h;
                    }
                }
            }
            out
        })
        .collect();

    let mut inc = Field::zeros(steps, paths, noise_dim);
    for k in 0..steps {
        let node = inc.node_mut(k);
        for (m, src) in per_path.iter().enumerate() {
            node[m * noise_dim..(m + 1) * noise_dim]
                .copy_from_slice(&src[k * noise_dim..(k + 1) * noise_dim]);
        }
    }
    Ok(PathBatch {
        grid,
        seed,
        increments: Arc::new(inc),
        state: None,
        controls: None,
    })
}

/// Brownian batch on a grid over the problem's horizon.
pub fn sample_for(problem: &ControlProblem, steps: usize, paths: usize, seed: u64) -> Result<PathBatch> {
    sample_brownian(TimeGrid::new(problem.horizon(), steps)?, paths, problem.dims().d, seed)
}

fn first_non_finite(node: &[f64], width: usize) -> Option<usize> {
    node.iter().position(|v| !v.is_finite()).map(|i| i / width.max(1))
}

/// `x_{k+1} = x_k + b(t_k, x_k, u_k) h + σ(t_k, x_k) ΔW_k` from `x_0`.
pub fn euler_forward(problem: &ControlProblem, u: &ControlProcess, paths: &PathBatch) -> Result<PathBatch> {
    let Dims { n, d, m: mdim } = problem.dims();
    if paths.noise_dim() != d {
        return Err(Error::Shape(format!(
            "batch has {} noise components, problem has {d}",
            paths.noise_dim()
        )));
    }
    let grid = paths.grid;
    let steps = grid.steps;
    let set = problem.control_set();
    u.check(set, steps)?;
    let coef = problem.coef();
    let mp = paths.path_count();
    let h = grid.h();

    let mut state = Field::zeros(steps + 1, mp, n);
    state
        .node_mut(0)
        .chunks_mut(n)
        .for_each(|row| row.copy_from_slice(problem.initial_state()));
    let mut controls = Field::zeros(steps, mp, mdim);

    for k in 0..steps {
        let t = grid.t(k);
        {
            let cur = state.node(k);
            controls
                .node_mut(k)
                .par_chunks_mut(mdim)
                .enumerate()
                .for_each(|(m, out)| u.eval(k, t, &cur[m * n..(m + 1) * n], out));
        }
        if !u.is_open_loop() {
            if let Some(bad) = controls.node(k).chunks(mdim).find(|v| !set.contains(v)) {
                return Err(Error::ControlOutsideSet {
                    step: k,
                    value: bad.to_vec(),
                });
            }
        }
        let ctrl = controls.node(k);
        let inc = paths.increments.node(k);
        let (cur, next) = state.step_pair_mut(k);
        next.par_chunks_mut(n).enumerate().for_each_init(
            || (vec![0.0; n], vec![0.0; n * d]),
            |(b, sig), (m, out)| {
                let x = &cur[m * n..(m + 1) * n];
                let dw = &inc[m * d..(m + 1) * d];
                coef.drift(t, x, &ctrl[m * mdim..(m + 1) * mdim], b);
                coef.diffusion(t, x, sig);
                for i in 0..n {
                    let mut v = x[i] + b[i] * h;
                    for j in 0..d {
                        v += sig[i * d + j] * dw[j];
                    }
                    out[i] = v;
                }
            },
        );
        if let Some(path) = first_non_finite(state.node(k + 1), n) {
            return Err(Error::Blowup { path, step: k + 1 });
        }
    }
    Ok(PathBatch {
        state: Some(Arc::new(state)),
        controls: Some(Arc::new(controls)),
        ..paths.clone()
    })
}

/// Value of the perturbed control on step `k` of path `m`, or `None` when
/// the step lies outside the spike set.
pub(crate) fn spike_value(spike: &SpikeSpec, k: usize, t: f64, xbar: &[f64], out: &mut [f64]) -> bool {
    if spike.active(k) {
        spike.replacement().eval(k, t, xbar, out);
        true
    } else {
        false
    }
}

fn check_spike(spike: &SpikeSpec, base: &PathBatch) -> Result<()> {
    if spike.grid() != base.grid() {
        return Err(Error::Shape("spike and batch live on different grids".into()));
    }
    Ok(())
}

/// First variation `dx₁ = (b̄_x x₁ + δb) dt + Σ_j σ̄_x^j x₁ dW_j`, `x₁(0) = 0`.
pub fn integrate_variation_first(problem: &ControlProblem, spike: &SpikeSpec, base: &PathBatch) -> Result<Field> {
    check_spike(spike, base)?;
    let (xbar, ubar) = base.require_state()?;
    let Dims { n, d, m: mdim } = problem.dims();
    let grid = base.grid;
    let h = grid.h();
    let coef = problem.coef();
    let mut x1 = Field::zeros(grid.steps + 1, base.path_count(), n);

    for k in 0..grid.steps {
        let t = grid.t(k);
        let xs = xbar.node(k);
        let us = ubar.node(k);
        let inc = base.increments.node(k);
        let (cur, next) = x1.step_pair_mut(k);
        next.par_chunks_mut(n).enumerate().for_each_init(
            || (vec![0.0; n * n], vec![0.0; d * n * n], vec![0.0; mdim], vec![0.0; n], vec![0.0; n]),
            |(bx, sx, ue, be, bb), (m, out)| {
                let x = &xs[m * n..(m + 1) * n];
                let ub = &us[m * mdim..(m + 1) * mdim];
                let y = &cur[m * n..(m + 1) * n];
                let dw = &inc[m * d..(m + 1) * d];
                coef.drift_x(t, x, ub, bx);
                coef.diffusion_x(t, x, sx);
                let spiked = spike_value(spike, k, t, x, ue);
                if spiked {
                    coef.drift(t, x, ue, be);
                    coef.drift(t, x, ub, bb);
                }
                for i in 0..n {
                    let mut drift = if spiked { be[i] - bb[i] } else { 0.0 };
                    for l in 0..n {
                        drift += bx[i * n + l] * y[l];
                    }
                    let mut v = y[i] + drift * h;
                    for j in 0..d {
                        let mut s = 0.0;
                        for l in 0..n {
                            s += sx[(j * n + i) * n + l] * y[l];
                        }
                        v += s * dw[j];
                    }
                    out[i] = v;
                }
            },
        );
        if let Some(path) = first_non_finite(x1.node(k + 1), n) {
            return Err(Error::Blowup { path, step: k + 1 });
        }
    }
    Ok(x1)
}

/// `Σ_{l,r} T[(i n + l) n + r] v_l v_r` for every leading index `i`.
#[inline]
pub(crate) fn quad_contract(t: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (i, o) in out.iter_mut().enumerate() {
        let block = &t[i * n * n..(i + 1) * n * n];
        let mut s = 0.0;
        for l in 0..n {
            let mut row = 0.0;
            for r in 0..n {
                row += block[l * n + r] * v[r];
            }
            s += v[l] * row;
        }
        *o = s;
    }
}

/// Second variation
/// `dx₂ = (b̄_x x₂ + δb_x x₁ + ½ b̄_xx(x₁)²) dt + Σ_j (σ̄_x^j x₂ + ½ σ̄_xx^j(x₁)²) dW_j`.
pub fn integrate_variation_second(
    problem: &ControlProblem,
    spike: &SpikeSpec,
    base: &PathBatch,
    x1: &Field,
) -> Result<Field> {
    check_spike(spike, base)?;
    let (xbar, ubar) = base.require_state()?;
    let Dims { n, d, m: mdim } = problem.dims();
    let grid = base.grid;
    if x1.nodes() != grid.nodes() || x1.paths() != base.path_count() || x1.width() != n {
        return Err(Error::Shape("x1 does not match the batch".into()));
    }
    let h = grid.h();
    let coef = problem.coef();
    let mut x2 = Field::zeros(grid.steps + 1, base.path_count(), n);

    struct Buf {
        bx: Vec<f64>,
        bxe: Vec<f64>,
        bxx: Vec<f64>,
        sx: Vec<f64>,
        sxx: Vec<f64>,
        ue: Vec<f64>,
        qb: Vec<f64>,
        qs: Vec<f64>,
    }

    for k in 0..grid.steps {
        let t = grid.t(k);
        let xs = xbar.node(k);
        let us = ubar.node(k);
        let x1s = x1.node(k);
        let inc = base.increments.node(k);
        let (cur, next) = x2.step_pair_mut(k);
        next.par_chunks_mut(n).enumerate().for_each_init(
            || Buf {
                bx: vec![0.0; n * n],
                bxe: vec![0.0; n * n],
                bxx: vec![0.0; n * n * n],
                sx: vec![0.0; d * n * n],
                sxx: vec![0.0; d * n * n * n],
                ue: vec![0.0; mdim],
                qb: vec![0.0; n],
                qs: vec![0.0; d * n],
            },
            |bf, (m, out)| {
                let x = &xs[m * n..(m + 1) * n];
                let ub = &us[m * mdim..(m + 1) * mdim];
                let v1 = &x1s[m * n..(m + 1) * n];
                let v2 = &cur[m * n..(m + 1) * n];
                let dw = &inc[m * d..(m + 1) * d];
                coef.drift_x(t, x, ub, &mut bf.bx);
                coef.drift_xx(t, x, ub, &mut bf.bxx);
                coef.diffusion_x(t, x, &mut bf.sx);
                coef.diffusion_xx(t, x, &mut bf.sxx);
                quad_contract(&bf.bxx, v1, &mut bf.qb);
                quad_contract(&bf.sxx, v1, &mut bf.qs);
                let spiked = spike_value(spike, k, t, x, &mut bf.ue);
                if spiked {
                    coef.drift_x(t, x, &bf.ue, &mut bf.bxe);
                }
                for i in 0..n {
                    let mut drift = 0.5 * bf.qb[i];
                    for l in 0..n {
                        drift += bf.bx[i * n + l] * v2[l];
                        if spiked {
                            drift += (bf.bxe[i * n + l] - bf.bx[i * n + l]) * v1[l];
                        }
                    }
                    let mut v = v2[i] + drift * h;
                    for j in 0..d {
                        let mut s = 0.5 * bf.qs[j * n + i];
                        for l in 0..n {
                            s += bf.sx[(j * n + i) * n + l] * v2[l];
                        }
                        v += s * dw[j];
                    }
                    out[i] = v;
                }
            },
        );
        if let Some(path) = first_non_finite(x2.node(k + 1), n) {
            return Err(Error::Blowup { path, step: k + 1 });
        }
    }
    Ok(x2)
}

/// `γ_{k+1} = γ_k exp[(f̄_y - ½|f̄_z|²) h + f̄_z·ΔW_k]`, `γ_0 = 1`, with the
/// generator derivatives taken along the base state and cost solution.
pub fn integrate_gamma(problem: &ControlProblem, base: &PathBatch, cost: &CostSolution) -> Result<Field> {
    let (xbar, ubar) = base.require_state()?;
    let Dims { n, d, m: mdim } = problem.dims();
    let grid = base.grid;
    if cost.y.paths() != base.path_count() || cost.y.nodes() != grid.nodes() {
        return Err(Error::Shape("cost solution does not match the batch".into()));
    }
    let h = grid.h();
    let coef = problem.coef();
    let mut gamma = Field::zeros(grid.steps + 1, base.path_count(), 1);
    gamma.node_mut(0).fill(1.0);
    for k in 0..grid.steps {
        let t = grid.t(k);
        let xs = xbar.node(k);
        let us = ubar.node(k);
        let inc = base.increments.node(k);
        let ys = cost.y.node(k);
        let zs = cost.z.node(k);
        let (cur, next) = gamma.step_pair_mut(k);
        next.par_iter_mut().enumerate().for_each_init(
            || vec![0.0; n + 1 + d],
            |grad, (m, out)| {
                coef.generator_grad(
                    t,
                    &xs[m * n..(m + 1) * n],
                    ys[m],
                    &zs[m * d..(m + 1) * d],
                    &us[m * mdim..(m + 1) * mdim],
                    grad,
                );
                let fy = grad[n];
                let fz = &grad[n + 1..];
                let dw = &inc[m * d..(m + 1) * d];
                let mut expo = fy * h;
                for j in 0..d {
                    expo += -0.5 * fz[j] * fz[j] * h + fz[j] * dw[j];
                }
                *out = cur[m] * expo.exp();
            },
        );
        if let Some(path) = first_non_finite(gamma.node(k + 1), 1) {
            return Err(Error::Blowup { path, step: k + 1 });
        }
    }
    Ok(gamma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{build_registry_problem, ControlSet, FnCoefficients, Params};
    use crate::stats::Estimate;

    fn grid(n: usize) -> TimeGrid {
        TimeGrid::new(1.0, n).unwrap()
    }

    #[test]
    fn grid_rejects_single_step() {
        assert!(TimeGrid::new(1.0, 1).is_err());
        assert!(TimeGrid::new(0.0, 4).is_err());
        let g = grid(4);
        assert_eq!(g.t(4), 1.0);
        assert_eq!(g.h(), 0.25);
    }

    #[test]
    fn same_seed_same_increments() {
        let a = sample_brownian(grid(2), 1, 1, 7).unwrap();
        let b = sample_brownian(grid(2), 1, 1, 7).unwrap();
        assert_eq!(a.increments(), b.increments());
        let c = sample_brownian(grid(2), 1, 1, 8).unwrap();
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn draws_are_keyed_on_path_and_step() {
        // Path 3 of a 5-path batch equals path 3 of a 9-path batch.
        let a = sample_brownian(grid(6), 5, 3, 1).unwrap();
        let b = sample_brownian(grid(10), 9, 3, 1).unwrap();
        for k in 0..6 {
            let scale = (10.0f64 / 6.0).sqrt();
            for (x, y) in a.increment(k, 3).iter().zip(b.increment(k, 3)) {
                assert!((x - y * scale).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn increments_have_variance_h() {
        let g = grid(100);
        let b = sample_brownian(g, 2000, 1, 3).unwrap();
        let mean = Estimate::from_samples(b.increments().as_slice().iter().copied());
        assert!(mean.mean.abs() < 5.0 * mean.se);
        let var = Estimate::from_samples(b.increments().as_slice().iter().map(|v| v * v));
        assert!((var.mean - g.h()).abs() < 5.0 * var.se);
    }

    #[test]
    fn zero_coefficients_freeze_the_state() {
        let c = FnCoefficients::new(Dims { n: 2, d: 1, m: 1 });
        let set = ControlSet::interval(-1.0, 1.0, 3).unwrap();
        let p = ControlProblem::new("zero", Arc::new(c), 1.0, vec![0.3, -2.0], set, 1.0).unwrap();
        let b = sample_for(&p, 8, 16, 0).unwrap();
        let out = euler_forward(&p, &ControlProcess::constant(&[0.5]), &b).unwrap();
        assert!(out.state().unwrap().as_slice().chunks(2).all(|x| x == [0.3, -2.0]));
    }

    #[test]
    fn blowup_reports_path_and_step() {
        let c = FnCoefficients::new(Dims { n: 1, d: 1, m: 1 }).drift(|_, x, _, o| o[0] = x[0] * x[0] * 1e200);
        let set = ControlSet::interval(-1.0, 1.0, 3).unwrap();
        let p = ControlProblem::new("boom", Arc::new(c), 1.0, vec![1.0], set, 1.0).unwrap();
        let b = sample_for(&p, 8, 2, 0).unwrap();
        assert!(matches!(
            euler_forward(&p, &ControlProcess::constant(&[0.0]), &b),
            Err(Error::Blowup { path: 0, step: 2 })
        ));
    }

    #[test]
    fn controls_outside_the_set_are_rejected() {
        let p = build_registry_problem("example2", &Params::new()).unwrap();
        let b = sample_for(&p, 8, 2, 0).unwrap();
        assert!(matches!(
            euler_forward(&p, &ControlProcess::constant(&[0.5]), &b),
            Err(Error::ControlOutsideSet { .. })
        ));
    }
}

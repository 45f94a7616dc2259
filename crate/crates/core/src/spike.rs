//! Spike perturbations of a base control, the Taylor residuals of the
//! state and cost expansions, and log-log rate fits.

use std::ops::Range;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::bsde::{
    solve_cost_bsde, solve_first_adjoint, solve_second_adjoint, solve_variation_cost_first,
    solve_variation_cost_second, AdjointFirst, AdjointSecond, CostSolution, RegressionBasis, VariationCost,
};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::principle::SingularityVerdict;
use crate::problem::{ControlProblem, ControlProcess};
use crate::sde::{euler_forward, integrate_variation_first, integrate_variation_second, PathBatch, TimeGrid};
use crate::stats::Estimate;

/// Alignment slack, in steps, for window endpoints.
const ALIGN_TOL: f64 = 1e-9;

/// Minimum window length in steps for a resolvable spike.
pub const MIN_WINDOW_STEPS: usize = 8;

/// Grid-aligned disjoint windows on which the replacement control is used.
/// Step `k` is spiked when `[t_k, t_{k+1})` lies in a window.
#[derive(Clone, Debug)]
pub struct SpikeSpec {
    grid: TimeGrid,
    windows: Vec<Range<usize>>,
    mask: Vec<bool>,
    replacement: ControlProcess,
}

impl SpikeSpec {
    /// Windows `[a, b)` in time units; endpoints must sit on grid nodes.
    pub fn new(grid: TimeGrid, windows: &[(f64, f64)], replacement: ControlProcess) -> Result<Self> {
        let mut steps = Vec::with_capacity(windows.len());
        for &(a, b) in windows {
            steps.push(to_steps(&grid, a, b, false)?);
        }
        Self::from_steps(grid, steps, replacement)
    }

    /// As [`SpikeSpec::new`] with endpoints rounded to the nearest node.
    pub fn snapped(grid: TimeGrid, windows: &[(f64, f64)], replacement: ControlProcess) -> Result<Self> {
        let mut steps = Vec::with_capacity(windows.len());
        for &(a, b) in windows {
            steps.push(to_steps(&grid, a, b, true)?);
        }
        Self::from_steps(grid, steps, replacement)
    }

    /// Replacement active on the whole horizon.
    pub fn full(grid: TimeGrid, replacement: ControlProcess) -> Result<Self> {
        Self::from_steps(grid, vec![0..grid.steps()], replacement)
    }

    pub fn empty(grid: TimeGrid, replacement: ControlProcess) -> Result<Self> {
        Self::from_steps(grid, Vec::new(), replacement)
    }

    /// Windows given as half-open step ranges.
    pub fn from_steps(grid: TimeGrid, mut windows: Vec<Range<usize>>, replacement: ControlProcess) -> Result<Self> {
        if !replacement.is_open_loop() {
            return Err(Error::InvalidArgument("spike replacement must be an open-loop control".into()));
        }
        windows.retain(|w| !w.is_empty());
        windows.sort_by_key(|w| w.start);
        for pair in windows.windows(2) {
            if pair[1].start < pair[0].end {
                return Err(Error::InvalidArgument(format!(
                    "spike windows overlap: steps {:?} and {:?}",
                    pair[0], pair[1]
                )));
            }
        }
        if let Some(w) = windows.iter().find(|w| w.end > grid.steps()) {
            return Err(Error::InvalidArgument(format!(
                "spike window {w:?} leaves the grid of {} steps",
                grid.steps()
            )));
        }
        let mut mask = vec![false; grid.steps()];
        for w in &windows {
            mask[w.clone()].iter_mut().for_each(|b| *b = true);
        }
        Ok(SpikeSpec {
            grid,
            windows,
            mask,
            replacement,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn windows(&self) -> &[Range<usize>] {
        &self.windows
    }

    pub fn replacement(&self) -> &ControlProcess {
        &self.replacement
    }

    pub fn active(&self, k: usize) -> bool {
        self.mask.get(k).copied().unwrap_or(false)
    }

    pub fn active_steps(&self) -> impl Iterator<Item = usize> + '_ {
        self.windows.iter().flat_map(|w| w.clone())
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    /// Total length `ε` of the windows.
    pub fn measure(&self) -> f64 {
        self.mask.iter().filter(|b| **b).count() as f64 * self.grid.h()
    }

    /// Every window spans at least [`MIN_WINDOW_STEPS`] steps.
    pub fn check_resolvable(&self) -> Result<()> {
        if let Some(w) = self.windows.iter().find(|w| w.len() < MIN_WINDOW_STEPS) {
            return Err(Error::InvalidArgument(format!(
                "spike window {w:?} spans {} steps; at least {MIN_WINDOW_STEPS} are needed at h = {}",
                w.len(),
                self.grid.h()
            )));
        }
        Ok(())
    }
}

fn to_steps(grid: &TimeGrid, a: f64, b: f64, snap: bool) -> Result<Range<usize>> {
    if !(a.is_finite() && b.is_finite() && a <= b && a >= 0.0 && b <= grid.horizon() * (1.0 + 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "spike window [{a}, {b}) is not inside [0, {}]",
            grid.horizon()
        )));
    }
    let h = grid.h();
    let conv = |s: f64| -> Result<usize> {
        let r = (s / h).round();
        if !snap && (s / h - r).abs() > ALIGN_TOL {
            return Err(Error::InvalidArgument(format!("spike endpoint {s} is not on the grid (h = {h})")));
        }
        Ok(r as usize)
    };
    Ok(conv(a)?..conv(b)?.min(grid.steps()))
}

/// `u^ε = ū` off the windows and the replacement on them.
pub fn build_spike(base: &ControlProcess, spike: &SpikeSpec) -> ControlProcess {
    if spike.windows.is_empty() {
        return base.clone();
    }
    ControlProcess::Spliced {
        base: Box::new(base.clone()),
        replacement: Box::new(spike.replacement.clone()),
        active: spike.mask.clone(),
    }
}

/// Base and spiked forward paths on common noise with both variations.
#[derive(Clone, Debug)]
pub struct SpikeRun {
    pub base: PathBatch,
    pub perturbed: PathBatch,
    pub x1: Field,
    pub x2: Field,
}

/// Simulate `x̄`, `x^ε`, `x₁`, `x₂` on the increments of `noise`.
pub fn run_spike(problem: &ControlProblem, base_control: &ControlProcess, spike: &SpikeSpec, noise: &PathBatch) -> Result<SpikeRun> {
    if spike.grid() != noise.grid() {
        return Err(Error::Shape("spike and batch live on different grids".into()));
    }
    spike.replacement.check(problem.control_set(), spike.grid.steps())?;
    let base = euler_forward(problem, base_control, noise)?;
    let perturbed = euler_forward(problem, &build_spike(base_control, spike), noise)?;
    let x1 = integrate_variation_first(problem, spike, &base)?;
    let x2 = integrate_variation_second(problem, spike, &base, &x1)?;
    Ok(SpikeRun {
        base,
        perturbed,
        x1,
        x2,
    })
}

/// Sup-over-nodes residual norms of the state expansion.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateResiduals {
    /// `E sup|x^ε - x̄|⁸`.
    pub diff_8: Estimate,
    /// `E sup|x₁|⁸`.
    pub x1_8: Estimate,
    /// `E sup|x^ε - x̄ - x₁|²`.
    pub first_2: Estimate,
    /// `E sup|x₂|²`.
    pub x2_2: Estimate,
    /// `E sup|x^ε - x̄ - x₁ - x₂|²`.
    pub second_2: Estimate,
}

impl SpikeRun {
    pub fn state_residuals(&self) -> Result<StateResiduals> {
        let (xb, _) = self.base.require_state()?;
        let (xe, _) = self.perturbed.require_state()?;
        let n = xb.width();
        let mp = xb.paths();
        let sup = |g: &(dyn Fn(usize, usize, usize) -> f64 + Sync), power: i32| {
            Estimate::from_samples(crate::bsde::per_path(mp, |m| {
                (0..xb.nodes())
                    .map(|k| (0..n).map(|i| g(k, m, i).powi(2)).sum::<f64>())
                    .fold(0.0, f64::max)
                    .powf(power as f64 / 2.0)
            }))
        };
        let diff = |k: usize, m: usize, i: usize| xe.at(k, m)[i] - xb.at(k, m)[i];
        Ok(StateResiduals {
            diff_8: sup(&diff, 8),
            x1_8: sup(&|k, m, i| self.x1.at(k, m)[i], 8),
            first_2: sup(&|k, m, i| diff(k, m, i) - self.x1.at(k, m)[i], 2),
            x2_2: sup(&|k, m, i| self.x2.at(k, m)[i], 2),
            second_2: sup(&|k, m, i| diff(k, m, i) - self.x1.at(k, m)[i] - self.x2.at(k, m)[i], 2),
        })
    }
}

/// One-call form of [`run_spike`] followed by [`SpikeRun::state_residuals`].
pub fn state_residuals(
    problem: &ControlProblem,
    base_control: &ControlProcess,
    spike: &SpikeSpec,
    noise: &PathBatch,
) -> Result<StateResiduals> {
    run_spike(problem, base_control, spike, noise)?.state_residuals()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostResidualFirst {
    /// `E sup|y^ε - ȳ - p·x₁ - y₁|⁴`.
    pub y_4: Estimate,
    /// `E ∫|z^ε - z̄ - (pᵀσ̄_x + qᵀ) x₁ - z₁|² dt`.
    pub z_2: Estimate,
}

fn check_open_loop(base: &PathBatch, perturbed: &PathBatch, base_control: &ControlProcess) -> Result<()> {
    if !base_control.is_open_loop() {
        return Err(Error::InvalidArgument("cost residuals need an open-loop base control".into()));
    }
    if !base.same_noise(perturbed) {
        return Err(Error::Precondition("base and spiked paths must share increments".into()));
    }
    Ok(())
}

/// First-order cost expansion residual along a [`SpikeRun`].
pub fn cost_residual_first(
    problem: &ControlProblem,
    base_control: &ControlProcess,
    run: &SpikeRun,
    base_cost: &CostSolution,
    spiked_cost: &CostSolution,
    adj1: &AdjointFirst,
    y1: &VariationCost,
) -> Result<CostResidualFirst> {
    check_open_loop(&run.base, &run.perturbed, base_control)?;
    let (xb, _) = run.base.require_state()?;
    let grid = *run.base.grid();
    let h = grid.h();
    let dims = problem.dims();
    let (n, d) = (dims.n, dims.d);
    let mp = run.base.path_count();
    let coef = problem.coef();
    let y_4 = Estimate::from_samples(crate::bsde::per_path(mp, |m| {
        (0..grid.nodes())
            .map(|k| {
                let px1: f64 = adj1.p.at(k, m).iter().zip(run.x1.at(k, m)).map(|(a, b)| a * b).sum();
                let r = spiked_cost.y.at(k, m)[0] - base_cost.y.at(k, m)[0] - px1 - y1.y.at(k, m)[0];
                r.powi(4)
            })
            .fold(0.0, f64::max)
    }));
    let z_2 = Estimate::from_samples(crate::bsde::per_path(mp, |m| {
        let mut sx = vec![0.0; d * n * n];
        let mut acc = 0.0;
        for k in 0..grid.steps() {
            coef.diffusion_x(grid.t(k), xb.at(k, m), &mut sx);
            let (p, q, x1) = (adj1.p.at(k, m), adj1.q.at(k, m), run.x1.at(k, m));
            for j in 0..d {
                let mut lin = 0.0;
                for i in 0..n {
                    let mut sxi = 0.0;
                    for l in 0..n {
                        sxi += sx[(j * n + i) * n + l] * x1[l];
                    }
                    lin += p[i] * sxi + q[j * n + i] * x1[i];
                }
                let r = spiked_cost.z.at(k, m)[j] - base_cost.z.at(k, m)[j] - lin - y1.z.at(k, m)[j];
                acc += h * r * r;
            }
        }
        acc
    }));
    Ok(CostResidualFirst { y_4, z_2 })
}

/// Second-order cost expansion residual
/// `E sup|y^ε - ȳ - p·(x₁ + x₂) - ½ x₁ᵀ P x₁ - y₂|²`.
///
/// The replacement must take values in a region on which the base control
/// was classified singular.
#[allow(clippy::too_many_arguments)]
pub fn cost_residual_second(
    base_control: &ControlProcess,
    run: &SpikeRun,
    spike: &SpikeSpec,
    singularity: &SingularityVerdict,
    base_cost: &CostSolution,
    spiked_cost: &CostSolution,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    y2: &VariationCost,
) -> Result<Estimate> {
    check_open_loop(&run.base, &run.perturbed, base_control)?;
    check_singular_replacement(spike, singularity)?;
    let grid = *run.base.grid();
    let n = run.x1.width();
    let mp = run.base.path_count();
    Ok(Estimate::from_samples(crate::bsde::per_path(mp, |m| {
        (0..grid.nodes())
            .map(|k| {
                let (p, pm, x1, x2) = (adj1.p.at(k, m), adj2.p.at(k, m), run.x1.at(k, m), run.x2.at(k, m));
                let mut r = spiked_cost.y.at(k, m)[0] - base_cost.y.at(k, m)[0] - y2.y.at(k, m)[0];
                for i in 0..n {
                    r -= p[i] * (x1[i] + x2[i]);
                    for l in 0..n {
                        r -= 0.5 * x1[i] * pm[i * n + l] * x1[l];
                    }
                }
                r * r
            })
            .fold(0.0, f64::max)
    })))
}

fn check_singular_replacement(spike: &SpikeSpec, singularity: &SingularityVerdict) -> Result<()> {
    if !singularity.flat_on_region {
        return Err(Error::Precondition(
            "base control is not singular on the region; run the singularity classification first".into(),
        ));
    }
    let mut v = vec![0.0; spike.replacement.dim().unwrap_or(0)];
    for k in spike.active_steps() {
        spike.replacement.eval(k, spike.grid.t(k), &[], &mut v);
        if !singularity.covers(&v) {
            return Err(Error::Precondition(format!(
                "replacement value {v:?} at step {k} lies outside the classified singular region; \
                 run the singularity classification on a region containing it first"
            )));
        }
    }
    Ok(())
}

/// Log-log regression of residual norms against `ε`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub eps: Vec<f64>,
    pub norms: Vec<f64>,
    /// Levels that entered the fit.
    pub used: Vec<bool>,
    /// `+∞` when every norm is exactly zero.
    pub slope: f64,
    /// 95% Student-t half-width of the slope.
    pub half_width: f64,
    pub exact: bool,
}

/// Minimum ladder length.
pub const MIN_LEVELS: usize = 4;

pub fn fit_rate(eps: &[f64], norms: &[f64]) -> Result<RateFit> {
    if eps.len() != norms.len() {
        return Err(Error::Shape("ε ladder and norms differ in length".into()));
    }
    if eps.len() < MIN_LEVELS {
        return Err(Error::InvalidArgument(format!("rate fit needs at least {MIN_LEVELS} levels")));
    }
    if eps.iter().any(|e| !(e.is_finite() && *e > 0.0)) || eps.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::InvalidArgument("ε ladder must be positive and strictly decreasing".into()));
    }
    if norms.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument("residual norms must be finite and non-negative".into()));
    }
    if norms.iter().all(|v| *v == 0.0) {
        return Ok(RateFit {
            eps: eps.to_vec(),
            norms: norms.to_vec(),
            used: vec![false; eps.len()],
            slope: f64::INFINITY,
            half_width: 0.0,
            exact: true,
        });
    }
    let used: Vec<bool> = norms.iter().map(|v| *v > 0.0).collect();
    for (e, _) in eps.iter().zip(norms).filter(|(_, v)| **v == 0.0) {
        log::warn!("dropping ε = {e} from the rate fit: residual is exactly zero");
    }
    let pts: Vec<(f64, f64)> = eps
        .iter()
        .zip(norms)
        .filter(|(_, v)| **v > 0.0)
        .map(|(e, v)| (e.ln(), v.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "only {} positive residuals; a slope with an error bar needs 3",
            pts.len()
        )));
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let dof = k - 2.0;
    let se = (rss / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(RateFit {
        eps: eps.to_vec(),
        norms: norms.to_vec(),
        used,
        slope,
        half_width: t * se,
        exact: false,
    })
}

/// All residuals at one ladder level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorLevel {
    pub eps: f64,
    pub state: StateResiduals,
    pub cost_first: CostResidualFirst,
    /// Present when the replacement lies in the singular region.
    pub cost_second: Option<Estimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaylorReport {
    pub levels: Vec<TaylorLevel>,
    pub fits: Vec<(String, RateFit)>,
}

impl TaylorReport {
    pub fn fit(&self, name: &str) -> Option<&RateFit> {
        self.fits.iter().find(|(n, _)| n == name).map(|(_, f)| f)
    }
}

/// Where each ladder window sits.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowAnchor {
    /// `[t, t + ε)`.
    Start(f64),
    /// `[t - ε, t)`.
    End(f64),
}

impl WindowAnchor {
    pub fn window(&self, eps: f64) -> (f64, f64) {
        match *self {
            WindowAnchor::Start(t) => (t, t + eps),
            WindowAnchor::End(t) => (t - eps, t),
        }
    }
}

/// Ladder of single windows of length `ε` on common noise. The base
/// adjoints are solved once; each level re-solves the spiked cost and both
/// variation costs.
#[allow(clippy::too_many_arguments)]
pub fn taylor_expansion(
    problem: &ControlProblem,
    base_control: &ControlProcess,
    replacement: &ControlProcess,
    anchor: WindowAnchor,
    ladder: &[f64],
    noise: &PathBatch,
    basis: &RegressionBasis,
    singularity: Option<&SingularityVerdict>,
) -> Result<TaylorReport> {
    let grid = *noise.grid();
    let base = euler_forward(problem, base_control, noise)?;
    let base_cost = solve_cost_bsde(problem, &base, basis)?;
    let adj1 = solve_first_adjoint(problem, &base, &base_cost, basis)?;
    let adj2 = solve_second_adjoint(problem, &base, &base_cost, &adj1, basis)?;
    let mut levels = Vec::with_capacity(ladder.len());
    for &eps in ladder {
        let spike = SpikeSpec::snapped(grid, &[anchor.window(eps)], replacement.clone())?;
        spike.check_resolvable()?;
        let eff = spike.measure();
        let run = run_spike(problem, base_control, &spike, noise)?;
        let spiked_cost = solve_cost_bsde(problem, &run.perturbed, basis)?;
        let y1 = solve_variation_cost_first(problem, &spike, &run.base, &base_cost, &adj1, basis)?;
        let cost_first = cost_residual_first(problem, base_control, &run, &base_cost, &spiked_cost, &adj1, &y1)?;
        let cost_second = match singularity {
            Some(sv) if check_singular_replacement(&spike, sv).is_ok() => {
                let y2 = solve_variation_cost_second(problem, &spike, &run.base, &run.x1, &base_cost, &adj1, &adj2, basis)?;
                Some(cost_residual_second(
                    base_control,
                    &run,
                    &spike,
                    sv,
                    &base_cost,
                    &spiked_cost,
                    &adj1,
                    &adj2,
                    &y2,
                )?)
            }
            _ => None,
        };
        levels.push(TaylorLevel {
            eps: eff,
            state: run.state_residuals()?,
            cost_first,
            cost_second,
        });
    }
    let eps: Vec<f64> = levels.iter().map(|l| l.eps).collect();
    let mut fits = Vec::new();
    // A ladder whose residuals cannot be fitted is reported without a fit.
    let mut push = |name: &str, f: &dyn Fn(&TaylorLevel) -> Option<f64>| -> Result<()> {
        let vals: Option<Vec<f64>> = levels.iter().map(f).collect();
        if let Some(v) = vals {
            match fit_rate(&eps, &v) {
                Ok(fit) => fits.push((name.to_string(), fit)),
                Err(e) => log::warn!("no rate fit for {name}: {e}"),
            }
        }
        Ok(())
    };
    push("state_diff_8", &|l| Some(l.state.diff_8.mean))?;
    push("state_x1_8", &|l| Some(l.state.x1_8.mean))?;
    push("state_first_2", &|l| Some(l.state.first_2.mean))?;
    push("state_x2_2", &|l| Some(l.state.x2_2.mean))?;
    push("state_second_2", &|l| Some(l.state.second_2.mean))?;
    push("cost_first_4", &|l| Some(l.cost_first.y_4.mean))?;
    push("cost_second_2", &|l| l.cost_second.map(|e| e.mean))?;
    Ok(TaylorReport { levels, fits })
}

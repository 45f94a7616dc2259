//! Hamiltonian, the `G` short-hand, and first-order, singularity and
//! second-order verdicts evaluated along simulated paths.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bsde::{gamma_duality_y1, gamma_second_integral, AdjointFirst, AdjointSecond, CostSolution};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::problem::{CoefficientDerivatives, ControlProblem, ControlProcess};
use crate::sde::PathBatch;
use crate::spike::SpikeSpec;
use crate::stats::Estimate;

/// Base point `(t, x̄, ȳ, z̄, ū)` at one node of one path.
#[derive(Clone, Copy, Debug)]
pub struct NodePoint<'a> {
    pub t: f64,
    pub x: &'a [f64],
    pub y: f64,
    pub z: &'a [f64],
    pub u: &'a [f64],
}

/// `H` and `H_x` at a control `v`, with `δH` taken against the base control.
pub struct HamiltonianEval<'a> {
    pub h: f64,
    pub h_x: Vec<f64>,
    problem: &'a ControlProblem,
    point: NodePoint<'a>,
    p: &'a [f64],
}

impl HamiltonianEval<'_> {
    /// `δH(t, v) = ⟨p, b(v) - b(ū)⟩ + f(v) - f(ū)`; exactly zero at `v = ū`.
    pub fn delta_h(&self, v: &[f64]) -> f64 {
        delta_h(self.problem, &self.point, v, self.p)
    }
}

/// `H = ⟨p, b(t,x,v)⟩ + ⟨q, σ(t,x)⟩ + f(t,x,y,z,v)` and its x-gradient
/// `b_xᵀ p + Σ_j σ_x^{jᵀ} q^j + f_x`.
pub fn hamiltonian<'a>(
    problem: &'a ControlProblem,
    point: NodePoint<'a>,
    v: &[f64],
    p: &'a [f64],
    q: &[f64],
) -> HamiltonianEval<'a> {
    let dims = problem.dims();
    let (n, d) = (dims.n, dims.d);
    let coef = problem.coef();
    let mut b = vec![0.0; n];
    let mut sigma = vec![0.0; n * d];
    coef.drift(point.t, point.x, v, &mut b);
    coef.diffusion(point.t, point.x, &mut sigma);
    let mut h = coef.generator(point.t, point.x, point.y, point.z, v);
    for i in 0..n {
        h += p[i] * b[i];
        for j in 0..d {
            h += q[j * n + i] * sigma[i * d + j];
        }
    }
    let mut der = CoefficientDerivatives::new(dims);
    der.eval_first(coef, point.t, point.x, point.y, point.z, v);
    let mut h_x = vec![0.0; n];
    hamiltonian_gradient(&der, p, q, &mut h_x);
    HamiltonianEval {
        h,
        h_x,
        problem,
        point,
        p,
    }
}

pub fn delta_h(problem: &ControlProblem, point: &NodePoint<'_>, v: &[f64], p: &[f64]) -> f64 {
    let n = p.len();
    let coef = problem.coef();
    let mut bv = vec![0.0; n];
    let mut bu = vec![0.0; n];
    coef.drift(point.t, point.x, v, &mut bv);
    coef.drift(point.t, point.x, point.u, &mut bu);
    let mut out = coef.generator(point.t, point.x, point.y, point.z, v)
        - coef.generator(point.t, point.x, point.y, point.z, point.u);
    for i in 0..n {
        out += p[i] * (bv[i] - bu[i]);
    }
    out
}

/// `H_x = b_xᵀ p + Σ_j σ_x^{jᵀ} q^j + f_x` from a derivative bundle.
pub fn hamiltonian_gradient(der: &CoefficientDerivatives, p: &[f64], q: &[f64], out: &mut [f64]) {
    let n = der.dims.n;
    let d = der.dims.d;
    for i in 0..n {
        let mut v = der.f_grad[i];
        for l in 0..n {
            v += der.b_x[l * n + i] * p[l];
        }
        for j in 0..d {
            for l in 0..n {
                v += der.sigma_x[(j * n + l) * n + i] * q[j * n + l];
            }
        }
        out[i] = v;
    }
}

/// `G = H_x + f_y p + Σ_j f_z^j (σ_x^{jᵀ} p + q^j)`.
pub fn g_vector(der: &CoefficientDerivatives, p: &[f64], q: &[f64], out: &mut [f64]) {
    hamiltonian_gradient(der, p, q, out);
    let n = der.dims.n;
    let fy = der.f_y();
    let fz = der.f_z();
    for i in 0..n {
        let mut v = fy * p[i];
        for (j, fzj) in fz.iter().enumerate() {
            let mut lifted = q[j * n + i];
            for l in 0..n {
                lifted += der.sigma_x[(j * n + l) * n + i] * p[l];
            }
            v += fzj * lifted;
        }
        out[i] += v;
    }
}

/// `G` at `v` and `δG = G(v) - G(ū)`, both with derivatives at `(x̄, ȳ, z̄)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GQuantity {
    pub g: Vec<f64>,
    pub delta_g: Vec<f64>,
}

pub fn delta_g(problem: &ControlProblem, point: &NodePoint<'_>, v: &[f64], p: &[f64], q: &[f64]) -> GQuantity {
    let mut work = PointScratch::new(problem);
    work.eval(problem, point, v, p, q);
    GQuantity {
        g: work.gv.clone(),
        delta_g: work.gv.iter().zip(&work.gu).map(|(a, b)| a - b).collect(),
    }
}

/// `S(t, v) = δG·δb + δbᵀ P δb`.
pub fn second_order_quantity(
    problem: &ControlProblem,
    point: &NodePoint<'_>,
    v: &[f64],
    p: &[f64],
    q: &[f64],
    pmat: &[f64],
) -> f64 {
    let mut work = PointScratch::new(problem);
    work.eval(problem, point, v, p, q);
    work.s(pmat)
}

/// Reusable buffers for pointwise `δG`, `δb` evaluation.
struct PointScratch {
    der_v: CoefficientDerivatives,
    der_u: CoefficientDerivatives,
    gv: Vec<f64>,
    gu: Vec<f64>,
    bv: Vec<f64>,
    bu: Vec<f64>,
    base_ready: bool,
}

impl PointScratch {
    fn new(problem: &ControlProblem) -> Self {
        let dims = problem.dims();
        PointScratch {
            der_v: CoefficientDerivatives::new(dims),
            der_u: CoefficientDerivatives::new(dims),
            gv: vec![0.0; dims.n],
            gu: vec![0.0; dims.n],
            bv: vec![0.0; dims.n],
            bu: vec![0.0; dims.n],
            base_ready: false,
        }
    }

    fn reset(&mut self) {
        self.base_ready = false;
    }

    fn eval(&mut self, problem: &ControlProblem, pt: &NodePoint<'_>, v: &[f64], p: &[f64], q: &[f64]) {
        let coef = problem.coef();
        if !self.base_ready {
            self.der_u.eval_first(coef, pt.t, pt.x, pt.y, pt.z, pt.u);
            g_vector(&self.der_u, p, q, &mut self.gu);
            coef.drift(pt.t, pt.x, pt.u, &mut self.bu);
            self.base_ready = true;
        }
        self.der_v.eval_first(coef, pt.t, pt.x, pt.y, pt.z, v);
        g_vector(&self.der_v, p, q, &mut self.gv);
        coef.drift(pt.t, pt.x, v, &mut self.bv);
    }

    fn s(&self, pmat: &[f64]) -> f64 {
        let n = self.bv.len();
        let mut out = 0.0;
        for i in 0..n {
            let dbi = self.bv[i] - self.bu[i];
            let mut row = self.gv[i] - self.gu[i];
            for l in 0..n {
                row += pmat[i * n + l] * (self.bv[l] - self.bu[l]);
            }
            out += row * dbi;
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Violated,
    Inconclusive,
}

impl Verdict {
    /// `mean < -(tol + 3 se)` is a violation, `mean ≥ -tol` satisfies.
    pub fn classify(est: &Estimate, tolerance: f64) -> Verdict {
        if est.mean < -(tolerance + 3.0 * est.se) {
            Verdict::Violated
        } else if est.mean >= -tolerance {
            Verdict::Satisfied
        } else {
            Verdict::Inconclusive
        }
    }

    /// Any violation dominates; satisfied only when every part is.
    pub fn combine<I: IntoIterator<Item = Verdict>>(parts: I) -> Verdict {
        let mut all = Verdict::Satisfied;
        for v in parts {
            match v {
                Verdict::Violated => return Verdict::Violated,
                Verdict::Inconclusive => all = Verdict::Inconclusive,
                Verdict::Satisfied => {}
            }
        }
        all
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondOrderOutcome {
    Candidate,
    Excluded,
    Inconclusive,
}

impl From<Verdict> for SecondOrderOutcome {
    fn from(v: Verdict) -> Self {
        match v {
            Verdict::Satisfied => SecondOrderOutcome::Candidate,
            Verdict::Violated => SecondOrderOutcome::Excluded,
            Verdict::Inconclusive => SecondOrderOutcome::Inconclusive,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionOrder {
    First,
    Second,
}

/// One `(node, v)` cell of a condition table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionRecord {
    pub step: usize,
    pub t: f64,
    pub v: Vec<f64>,
    pub mean: f64,
    pub se: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeVerdict {
    pub step: usize,
    pub t: f64,
    pub verdict: Verdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub order: ConditionOrder,
    pub tolerance: f64,
    pub records: Vec<ConditionRecord>,
    pub nodes: Vec<NodeVerdict>,
    pub verdict: Verdict,
    /// Present for second-order reports.
    pub outcome: Option<SecondOrderOutcome>,
}

impl ConditionReport {
    /// Largest `|mean|` over all cells.
    pub fn max_abs_mean(&self) -> f64 {
        self.records.iter().map(|r| r.mean.abs()).fold(0.0, f64::max)
    }

    pub fn record(&self, step: usize, v: &[f64]) -> Option<&ConditionRecord> {
        self.records.iter().find(|r| r.step == step && r.v == v)
    }

    fn assemble(order: ConditionOrder, tolerance: f64, t: impl Fn(usize) -> f64, v: &[Vec<f64>], cells: Vec<Vec<Estimate>>) -> Self {
        let mut records = Vec::with_capacity(cells.len() * v.len());
        let mut nodes = Vec::with_capacity(cells.len());
        for (k, row) in cells.into_iter().enumerate() {
            let mut node = Vec::with_capacity(row.len());
            for (vi, est) in row.into_iter().enumerate() {
                let verdict = Verdict::classify(&est, tolerance);
                node.push(verdict);
                records.push(ConditionRecord {
                    step: k,
                    t: t(k),
                    v: v[vi].clone(),
                    mean: est.mean,
                    se: est.se,
                    verdict,
                });
            }
            nodes.push(NodeVerdict {
                step: k,
                t: t(k),
                verdict: Verdict::combine(node),
            });
        }
        let verdict = Verdict::combine(nodes.iter().map(|n| n.verdict));
        ConditionReport {
            order,
            tolerance,
            records,
            nodes,
            verdict,
            outcome: match order {
                ConditionOrder::First => None,
                ConditionOrder::Second => Some(verdict.into()),
            },
        }
    }
}

/// Base-trajectory accessors shared by the checks.
struct Along<'a> {
    problem: &'a ControlProblem,
    paths: &'a PathBatch,
    state: &'a Field,
    controls: &'a Field,
    cost: &'a CostSolution,
}

impl<'a> Along<'a> {
    fn new(problem: &'a ControlProblem, paths: &'a PathBatch, cost: &'a CostSolution) -> Result<Self> {
        let (state, controls) = paths.require_state()?;
        if cost.y.paths() != paths.path_count() || cost.y.nodes() != paths.grid().nodes() {
            return Err(Error::Shape("cost solution does not match the batch".into()));
        }
        Ok(Along {
            problem,
            paths,
            state,
            controls,
            cost,
        })
    }

    fn point(&self, k: usize, m: usize) -> NodePoint<'_> {
        NodePoint {
            t: self.paths.grid().t(k),
            x: self.state.at(k, m),
            y: self.cost.y.at(k, m)[0],
            z: self.cost.z.at(k, m),
            u: self.controls.at(k, m),
        }
    }

    fn steps(&self) -> usize {
        self.paths.grid().steps()
    }

    /// Per-step, per-`v` estimates of `value(k, m, v_index)`.
    fn tabulate<S: Send>(
        &self,
        width: usize,
        init: impl Fn() -> S + Sync + Send,
        value: impl Fn(&mut S, usize, usize, &mut [f64]) + Sync + Send,
    ) -> Vec<Vec<Estimate>> {
        let mp = self.paths.path_count();
        (0..self.steps())
            .map(|k| {
                let rows: Vec<Vec<f64>> = (0..mp)
                    .into_par_iter()
                    .map_init(&init, |s, m| {
                        let mut row = vec![0.0; width];
                        value(s, k, m, &mut row);
                        row
                    })
                    .collect();
                (0..width)
                    .map(|vi| Estimate::from_samples(rows.iter().map(|r| r[vi])))
                    .collect()
            })
            .collect()
    }
}

fn check_adjoint(paths: &PathBatch, adj1: &AdjointFirst) -> Result<()> {
    if adj1.p.paths() != paths.path_count() || adj1.p.nodes() != paths.grid().nodes() {
        return Err(Error::Shape("first adjoint does not match the batch".into()));
    }
    Ok(())
}

fn check_region(problem: &ControlProblem, region: &[Vec<f64>]) -> Result<()> {
    if region.is_empty() {
        return Err(Error::Empty("control evaluation region"));
    }
    let m = problem.dims().m;
    if let Some(v) = region.iter().find(|v| v.len() != m || !problem.control_set().contains(v)) {
        return Err(Error::ControlOutsideSet { step: 0, value: v.clone() });
    }
    Ok(())
}

/// `1e-2 (1 + max_k E|H(t_k; ū)|)`.
pub fn default_tolerance(problem: &ControlProblem, paths: &PathBatch, cost: &CostSolution, adj1: &AdjointFirst) -> Result<f64> {
    let along = Along::new(problem, paths, cost)?;
    check_adjoint(paths, adj1)?;
    let mut scale: f64 = 0.0;
    for k in 0..along.steps() {
        let vals: Vec<f64> = (0..paths.path_count())
            .into_par_iter()
            .map(|m| {
                let pt = along.point(k, m);
                hamiltonian(problem, pt, pt.u, adj1.p.at(k, m), adj1.q.at(k, m)).h.abs()
            })
            .collect();
        scale = scale.max(crate::stats::mean(&vals));
    }
    Ok(1e-2 * (1.0 + scale))
}

fn resolve_tolerance(
    tolerance: Option<f64>,
    problem: &ControlProblem,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
) -> Result<f64> {
    match tolerance {
        Some(t) if t.is_finite() && t >= 0.0 => Ok(t),
        Some(t) => Err(Error::param("tolerance", format!("must be finite and non-negative, got {t}"))),
        None => default_tolerance(problem, paths, cost, adj1),
    }
}

fn delta_h_table(
    along: &Along<'_>,
    adj1: &AdjointFirst,
    region: &[Vec<f64>],
) -> Vec<Vec<Estimate>> {
    along.tabulate(
        region.len(),
        || (),
        |_, k, m, row| {
            let pt = along.point(k, m);
            let p = adj1.p.at(k, m);
            for (out, v) in row.iter_mut().zip(region) {
                *out = delta_h(along.problem, &pt, v, p);
            }
        },
    )
}

/// `E δH(t_k, v)` for every step and every point of the evaluation grid.
pub fn first_order_check(
    problem: &ControlProblem,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    tolerance: Option<f64>,
) -> Result<ConditionReport> {
    let region = problem.control_set().grid().to_vec();
    check_region(problem, &region)?;
    let along = Along::new(problem, paths, cost)?;
    check_adjoint(paths, adj1)?;
    let tol = resolve_tolerance(tolerance, problem, paths, cost, adj1)?;
    let cells = delta_h_table(&along, adj1, &region);
    let grid = *paths.grid();
    Ok(ConditionReport::assemble(ConditionOrder::First, tol, |k| grid.t(k), &region, cells))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Singularity {
    FullySingular,
    PartiallySingular,
    Nonsingular,
}

/// Flatness statistics of `δH` for one control point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlatnessStat {
    pub v: Vec<f64>,
    pub max_abs_mean: f64,
    /// Largest `|mean| / (tol + 3 se)` over steps; flat iff ≤ 1.
    pub worst_ratio: f64,
    pub flat: bool,
    /// `v` coincides with `ū` on every step and path.
    pub trivial: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SingularityVerdict {
    pub region: Vec<Vec<f64>>,
    pub flat_on_region: bool,
    pub classification: Singularity,
    /// Grid points on which `δH` is flat.
    pub singular_set: Vec<Vec<f64>>,
    pub tolerance: f64,
    pub stats: Vec<FlatnessStat>,
}

impl SingularityVerdict {
    /// Whether `v` lies in the region within `1e-12`.
    pub fn covers(&self, v: &[f64]) -> bool {
        self.region
            .iter()
            .any(|r| r.len() == v.len() && r.iter().zip(v).all(|(a, b)| (a - b).abs() <= 1e-12))
    }
}

/// Flatness of `δH` on `region` and classification against the full grid.
pub fn singularity_classify(
    problem: &ControlProblem,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    region: &[Vec<f64>],
    tolerance: Option<f64>,
) -> Result<SingularityVerdict> {
    check_region(problem, region)?;
    let along = Along::new(problem, paths, cost)?;
    check_adjoint(paths, adj1)?;
    let tol = resolve_tolerance(tolerance, problem, paths, cost, adj1)?;
    let mut points: Vec<Vec<f64>> = problem.control_set().grid().to_vec();
    for v in region {
        if !points.contains(v) {
            points.push(v.clone());
        }
    }
    let cells = delta_h_table(&along, adj1, &points);
    let controls = along.controls;
    let stats: Vec<FlatnessStat> = points
        .iter()
        .enumerate()
        .map(|(vi, v)| {
            let mut max_abs_mean: f64 = 0.0;
            let mut worst_ratio: f64 = 0.0;
            for row in &cells {
                let e = row[vi];
                max_abs_mean = max_abs_mean.max(e.mean.abs());
                let bound = tol + 3.0 * e.se;
                let ratio = if bound > 0.0 {
                    e.mean.abs() / bound
                } else if e.mean == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                };
                worst_ratio = worst_ratio.max(ratio);
            }
            let trivial = (0..along.steps()).all(|k| controls.node(k).chunks(v.len()).all(|u| u == v.as_slice()));
            FlatnessStat {
                v: v.clone(),
                max_abs_mean,
                worst_ratio,
                flat: worst_ratio <= 1.0,
                trivial,
            }
        })
        .collect();
    let grid_len = problem.control_set().grid().len();
    let grid_stats = &stats[..grid_len];
    let classification = if grid_stats.iter().all(|s| s.flat) {
        Singularity::FullySingular
    } else if grid_stats.iter().all(|s| !s.flat || s.trivial) {
        Singularity::Nonsingular
    } else {
        Singularity::PartiallySingular
    };
    let flat_on_region = stats.iter().filter(|s| region.contains(&s.v)).all(|s| s.flat);
    Ok(SingularityVerdict {
        region: region.to_vec(),
        flat_on_region,
        classification,
        singular_set: grid_stats.iter().filter(|s| s.flat).map(|s| s.v.clone()).collect(),
        tolerance: tol,
        stats,
    })
}

/// `E S(t_k, v)` for `v` in the region. Refuses to run unless the base
/// control was found singular on that region.
#[allow(clippy::too_many_arguments)]
pub fn second_order_check(
    problem: &ControlProblem,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    singularity: &SingularityVerdict,
    tolerance: Option<f64>,
) -> Result<ConditionReport> {
    if !singularity.flat_on_region {
        return Err(Error::Precondition(
            "base control is not singular on the requested region; second-order check does not apply".into(),
        ));
    }
    let region = &singularity.region;
    check_region(problem, region)?;
    let along = Along::new(problem, paths, cost)?;
    check_adjoint(paths, adj1)?;
    let n = problem.dims().n;
    if adj2.p.paths() != paths.path_count() || adj2.p.width() != n * n {
        return Err(Error::Shape("second adjoint does not match the batch".into()));
    }
    let tol = resolve_tolerance(tolerance, problem, paths, cost, adj1)?;
    let cells = along.tabulate(
        region.len(),
        || PointScratch::new(problem),
        |s, k, m, row| {
            let pt = along.point(k, m);
            let (p, q, pm) = (adj1.p.at(k, m), adj1.q.at(k, m), adj2.p.at(k, m));
            s.reset();
            for (out, v) in row.iter_mut().zip(region) {
                s.eval(problem, &pt, v, p, q);
                *out = s.s(pm);
            }
        },
    );
    let grid = *paths.grid();
    Ok(ConditionReport::assemble(ConditionOrder::Second, tol, |k| grid.t(k), region, cells))
}

/// `E ∫ γ (p·δb + δf) dt` for the candidate `u` replacing `ū` on the whole horizon.
pub fn directional_derivative_first(
    problem: &ControlProblem,
    candidate: &ControlProcess,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    gamma: &Field,
) -> Result<Estimate> {
    let spike = SpikeSpec::full(*paths.grid(), candidate.clone())?;
    gamma_duality_y1(problem, &spike, paths, cost, adj1, gamma)
}

/// `E ∫_E γ (δG + δbᵀ P)·x₁ dt` over the spike windows.
#[allow(clippy::too_many_arguments)]
pub fn directional_derivative_second(
    problem: &ControlProblem,
    spike: &SpikeSpec,
    paths: &PathBatch,
    cost: &CostSolution,
    adj1: &AdjointFirst,
    adj2: &AdjointSecond,
    gamma: &Field,
    x1: &Field,
) -> Result<Estimate> {
    gamma_second_integral(problem, spike, paths, cost, adj1, adj2, gamma, x1)
}

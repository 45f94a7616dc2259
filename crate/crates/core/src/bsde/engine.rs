//! Backward induction by least-squares Monte Carlo regression.
//!
//! A BSDE `dY = -F(t, Y, Z) dt + Z dW` with Markov state `s` is stepped as
//!
//! ```text
//! Y_k = E_k[Y_{k+1}] + h F(t_k, E_k[Y_{k+1}], Z_k),   Z_k = E_k[Y_{k+1} ΔW_k] / h
//! ```
//!
//! Conditional expectations come from one of two regressions.
//!
//! * [`Scheme::NextState`]: fit `Y_{k+1}` on polynomials of `s_{k+1}`, then
//!   take conditional moments of the basis under the Gaussian Euler
//!   transition `s_{k+1} = μ_k + L_k ΔW_k` in closed form. Polynomial
//!   responses of the state are reproduced without projection noise.
//! * [`Scheme::CurrentState`]: regress `Y_{k+1}` and
//!   `(Y_{k+1} - Ê_k[Y_{k+1}]) ΔW_k / h` on polynomials of `s_k`.
//!
//! All path reductions run over fixed chunks combined in chunk order, so
//! results do not depend on the worker count.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::sde::TimeGrid;
use crate::stats::Estimate;

/// Paths per reduction chunk.
const CHUNK: usize = 256;

/// Highest supported polynomial degree.
pub const MAX_DEGREE: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    NextState,
    CurrentState,
}

/// Polynomial regression basis in standardised state coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionBasis {
    pub degree: usize,
    /// Ridge damping relative to the mean diagonal of the Gram matrix.
    pub ridge: f64,
    pub scheme: Scheme,
}

impl Default for RegressionBasis {
    fn default() -> Self {
        RegressionBasis {
            degree: 2,
            ridge: 1e-8,
            scheme: Scheme::NextState,
        }
    }
}

impl RegressionBasis {
    pub fn validate(&self) -> Result<()> {
        if self.degree > MAX_DEGREE {
            return Err(Error::InvalidArgument(format!(
                "basis degree {} exceeds the supported maximum {MAX_DEGREE}",
                self.degree
            )));
        }
        if !(self.ridge.is_finite() && self.ridge >= 0.0) {
            return Err(Error::InvalidArgument("ridge must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Markov state carried by the regression.
pub trait Chain: Sync {
    type Scratch: Send;

    fn dim(&self) -> usize;

    fn scratch(&self) -> Self::Scratch;

    /// State at node `k` on path `m`.
    fn state(&self, k: usize, m: usize, out: &mut [f64]);

    /// Euler transition over step `k`: `s_{k+1} = mean + load ΔW_k`, with
    /// `load` row-major `dim × d`.
    fn transition(&self, s: &mut Self::Scratch, k: usize, m: usize, mean: &mut [f64], load: &mut [f64]);
}

/// Driver `F(t_k, Y, Z)` of a BSDE with `width` components.
///
/// `z` is noise-major: `z[j * width + w]`.
pub trait Driver: Sync {
    type Scratch: Send;

    fn width(&self) -> usize;

    fn scratch(&self) -> Self::Scratch;

    fn eval(&self, s: &mut Self::Scratch, k: usize, m: usize, y: &[f64], z: &[f64], out: &mut [f64]);

    /// Projection applied to each new `(Y_k, Z_k)`, e.g. symmetrisation.
    fn project(&self, _y: &mut [f64], _z: &mut [f64]) {}
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub basis_size: usize,
    pub active_coordinates: usize,
    /// RMS of the regression residual over paths and components.
    pub residual_rms: f64,
    /// Ratio of largest to smallest Cholesky pivot squared.
    pub condition: f64,
    pub ridge: f64,
}

/// Solution of one backward sweep.
#[derive(Clone, Debug)]
pub struct BackwardSolution {
    /// `(N+1) × M × W`.
    pub y: Field,
    /// `N × M × (d·W)`, noise-major per path.
    pub z: Field,
    /// Time-zero value per component; the error bar comes from the pathwise
    /// estimator `Y_N + Σ_k h F_k`.
    pub y0: Vec<Estimate>,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Multisets of coordinate indices of total degree `<= degree`.
fn monomials(coords: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier: Vec<Vec<usize>> = vec![Vec::new()];
    for _ in 0..degree {
        let mut next = Vec::new();
        for mono in &frontier {
            let start = mono.last().copied().unwrap_or(0);
            for c in start..coords {
                let mut m = mono.clone();
                m.push(c);
                next.push(m);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// `E[Π_i (α_{idx_i} + B_{idx_i}·ΔW)]` for `ΔW ~ N(0, h I)`, where
/// `cov[a * dim + b] = h B_a·B_b`, by Gaussian integration by parts.
fn gaussian_moment(idx: &[usize], alpha: &[f64], cov: &[f64], dim: usize) -> f64 {
    match idx.len() {
        0 => 1.0,
        1 => alpha[idx[0]],
        2 => alpha[idx[0]] * alpha[idx[1]] + cov[idx[0] * dim + idx[1]],
        len => {
            let first = idx[0];
            let rest = &idx[1..];
            let mut total = alpha[first] * gaussian_moment(rest, alpha, cov, dim);
            let mut buf = [0usize; MAX_DEGREE + 1];
            for p in 0..rest.len() {
                let mut w = 0;
                for (q, &r) in rest.iter().enumerate() {
                    if q != p {
                        buf[w] = r;
                        w += 1;
                    }
                }
                debug_assert_eq!(w, len - 2);
                total += cov[first * dim + rest[p]] * gaussian_moment(&buf[..w], alpha, cov, dim);
            }
            total
        }
    }
}

struct Standardiser {
    active: Vec<usize>,
    centre: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardiser {
    fn fit(states: &[f64], dim: usize, paths: usize) -> Self {
        let mut active = Vec::new();
        let mut centre = Vec::new();
        let mut scale = Vec::new();
        for a in 0..dim {
            let mean = states.iter().skip(a).step_by(dim).sum::<f64>() / paths as f64;
            let var = states
                .iter()
                .skip(a)
                .step_by(dim)
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>()
                / paths as f64;
            let sd = var.sqrt();
            if sd > 1e-12 * (1.0 + mean.abs()) {
                active.push(a);
                centre.push(mean);
                scale.push(sd);
            }
        }
        Standardiser { active, centre, scale }
    }

    fn apply(&self, s: &[f64], out: &mut [f64]) {
        for (i, &a) in self.active.iter().enumerate() {
            out[i] = (s[a] - self.centre[i]) / self.scale[i];
        }
    }
}

fn eval_basis(monos: &[Vec<usize>], z: &[f64], out: &mut [f64]) {
    for (o, mono) in out.iter_mut().zip(monos) {
        *o = mono.iter().map(|&c| z[c]).product();
    }
}

struct Fit {
    beta: DMatrix<f64>,
    condition: f64,
    ridge: f64,
}

/// Least squares `min ‖Ψ β - R‖²` with relative ridge, over rows of
/// `design` (`paths × k`) and `response` (`paths × w`). Column 0 is the
/// intercept and is not damped, so constants are reproduced exactly.
fn least_squares(design: &[f64], response: &[f64], k: usize, w: usize, paths: usize, ridge: f64) -> Result<Fit> {
    let partials: Vec<(Vec<f64>, Vec<f64>)> = design
        .par_chunks(CHUNK * k)
        .zip(response.par_chunks(CHUNK * w))
        .map(|(dc, rc)| {
            let mut g = vec![0.0; k * k];
            let mut b = vec![0.0; k * w];
            for (row, resp) in dc.chunks(k).zip(rc.chunks(w)) {
                for i in 0..k {
                    let ri = row[i];
                    for j in i..k {
                        g[i * k + j] += ri * row[j];
                    }
                    for c in 0..w {
                        b[i * w + c] += ri * resp[c];
                    }
                }
            }
            (g, b)
        })
        .collect();
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DMatrix::<f64>::zeros(k, w);
    for (g, b) in &partials {
        for i in 0..k {
            for j in i..k {
                gram[(i, j)] += g[i * k + j];
            }
            for c in 0..w {
                rhs[(i, c)] += b[i * w + c];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    gram /= paths as f64;
    rhs /= paths as f64;
    let trace = gram.trace();
    let mut lambda = ridge * trace / k as f64;
    for _ in 0..12 {
        let mut damped = gram.clone();
        for i in 1..k {
            damped[(i, i)] += lambda;
        }
        if let Some(chol) = damped.cholesky() {
            let diag: Vec<f64> = (0..k).map(|i| chol.l_dirty()[(i, i)]).collect();
            let hi = diag.iter().fold(0.0f64, |a, v| a.max(*v));
            let lo = diag.iter().fold(f64::INFINITY, |a, v| a.min(*v));
            let beta = chol.solve(&rhs);
            return Ok(Fit {
                beta,
                condition: (hi / lo).powi(2),
                ridge: lambda,
            });
        }
        lambda = if lambda == 0.0 { 1e-12 * trace.max(1e-300) } else { lambda * 10.0 };
    }
    Err(Error::Divergence { path: 0, step: 0 })
}

fn residual_rms(design: &[f64], response: &[f64], beta: &DMatrix<f64>, k: usize, w: usize) -> f64 {
    let partial: Vec<f64> = design
        .par_chunks(CHUNK * k)
        .zip(response.par_chunks(CHUNK * w))
        .map(|(dc, rc)| {
            let mut s = 0.0;
            for (row, resp) in dc.chunks(k).zip(rc.chunks(w)) {
                for c in 0..w {
                    let mut fit = 0.0;
                    for i in 0..k {
                        fit += row[i] * beta[(i, c)];
                    }
                    s += (fit - resp[c]).powi(2);
                }
            }
            s
        })
        .collect();
    let total: f64 = partial.iter().sum();
    (total / (response.len().max(1)) as f64).sqrt()
}

/// Solve one BSDE backward from `terminal` (`M × W`, path-major rows).
pub fn solve_backward<C: Chain, D: Driver>(
    grid: &TimeGrid,
    increments: &Field,
    chain: &C,
    driver: &D,
    terminal: &[f64],
    basis: &RegressionBasis,
) -> Result<BackwardSolution> {
    basis.validate()?;
    let steps = grid.steps();
    let paths = increments.paths();
    let d = increments.width();
    let w = driver.width();
    let dim = chain.dim();
    let h = grid.h();
    if increments.nodes() != steps || terminal.len() != paths * w {
        return Err(Error::Shape("terminal value or increments do not match the grid".into()));
    }

    let mut y = Field::zeros(steps + 1, paths, w);
    let mut z = Field::zeros(steps, paths, d * w);
    y.node_mut(steps).copy_from_slice(terminal);
    if let Some(path) = terminal.iter().position(|v| !v.is_finite()) {
        return Err(Error::Divergence { path: path / w.max(1), step: steps });
    }
    // pathwise Σ h F_k, for the time-zero error bar
    let mut acc = vec![0.0; paths * w];
    let mut diagnostics = Vec::with_capacity(steps);

    let mut states = vec![0.0; paths * dim];
    for k in (0..steps).rev() {
        let regress_node = match basis.scheme {
            Scheme::NextState => k + 1,
            Scheme::CurrentState => k,
        };
        states
            .par_chunks_mut(dim.max(1))
            .enumerate()
            .for_each(|(m, out)| chain.state(regress_node, m, out));
        let std = Standardiser::fit(&states, dim, paths);
        let monos = monomials(std.active.len(), basis.degree);
        let kb = monos.len();

        let mut design = vec![0.0; paths * kb];
        design
            .par_chunks_mut(kb)
            .zip(states.par_chunks(dim.max(1)))
            .for_each_init(
                || vec![0.0; std.active.len()],
                |zbuf, (row, s)| {
                    std.apply(s, zbuf);
                    eval_basis(&monos, zbuf, row);
                },
            );

        let dw = increments.node(k);
        let y_next_vals: Vec<f64> = y.node(k + 1).to_vec();
        let fit = least_squares(&design, &y_next_vals, kb, w, paths, basis.ridge)?;
        let mut diag = StepDiagnostics {
            step: k,
            basis_size: kb,
            active_coordinates: std.active.len(),
            residual_rms: residual_rms(&design, &y_next_vals, &fit.beta, kb, w),
            condition: fit.condition,
            ridge: fit.ridge,
        };

        // regress-now z coefficients: response (Y_{k+1} - fit) ΔW_j / h
        let zfit = if basis.scheme == Scheme::CurrentState {
            let mut resp = vec![0.0; paths * d * w];
            resp.par_chunks_mut(d * w)
                .zip(design.par_chunks(kb))
                .enumerate()
                .for_each(|(m, (r, row))| {
                    for c in 0..w {
                        let mut fitted = 0.0;
                        for i in 0..kb {
                            fitted += row[i] * fit.beta[(i, c)];
                        }
                        let dev = y_next_vals[m * w + c] - fitted;
                        for j in 0..d {
                            r[j * w + c] = dev * dw[m * d + j] / h;
                        }
                    }
                });
            let zf = least_squares(&design, &resp, kb, d * w, paths, basis.ridge)?;
            diag.condition = diag.condition.max(zf.condition);
            Some(zf.beta)
        } else {
            None
        };

        let beta = &fit.beta;
        let node_y: &mut [f64] = y.node_mut(k);
        let node_z: &mut [f64] = z.node_mut(k);
        node_y
            .par_chunks_mut(w)
            .zip(node_z.par_chunks_mut(d * w))
            .zip(acc.par_chunks_mut(w))
            .enumerate()
            .for_each_init(
                || {
                    (
                        chain.scratch(),
                        driver.scratch(),
                        vec![0.0; dim],
                        vec![0.0; dim * d],
                        vec![0.0; kb],
                        vec![0.0; kb * d],
                        vec![0.0; w],
                        vec![0.0; dim * dim],
                        vec![0.0; dim],
                    )
                },
                |(cs, ds, mean, load, mom, momz, fval, cov, alpha), (m, ((yk, zk), ak))| {
                    match basis.scheme {
                        Scheme::NextState => {
                            chain.transition(cs, k, m, mean, load);
                            let na = std.active.len();
                            // standardised transition: ŝ = α + B ΔW
                            let alpha = &mut alpha[..na];
                            for (i, &a) in std.active.iter().enumerate() {
                                alpha[i] = (mean[a] - std.centre[i]) / std.scale[i];
                            }
                            for i in 0..na {
                                for j in 0..na {
                                    let (a, b) = (std.active[i], std.active[j]);
                                    let mut s = 0.0;
                                    for q in 0..d {
                                        s += load[a * d + q] * load[b * d + q];
                                    }
                                    cov[i * na + j] = h * s / (std.scale[i] * std.scale[j]);
                                }
                            }
                            for (i, mono) in monos.iter().enumerate() {
                                mom[i] = gaussian_moment(mono, alpha, cov, na);
                                let mut sub = [0usize; MAX_DEGREE];
                                for j in 0..d {
                                    let mut v = 0.0;
                                    for p in 0..mono.len() {
                                        let mut wpos = 0;
                                        for (q, &r) in mono.iter().enumerate() {
                                            if q != p {
                                                sub[wpos] = r;
                                                wpos += 1;
                                            }
                                        }
                                        let a = std.active[mono[p]];
                                        let bpj = load[a * d + j] / std.scale[mono[p]];
                                        v += h * bpj * gaussian_moment(&sub[..wpos], alpha, cov, na);
                                    }
                                    momz[i * d + j] = v;
                                }
                            }
                            for c in 0..w {
                                let mut ey = 0.0;
                                for i in 0..kb {
                                    ey += beta[(i, c)] * mom[i];
                                }
                                yk[c] = ey;
                                for j in 0..d {
                                    let mut ez = 0.0;
                                    for i in 0..kb {
                                        ez += beta[(i, c)] * momz[i * d + j];
                                    }
                                    zk[j * w + c] = ez / h;
                                }
                            }
                        }
                        Scheme::CurrentState => {
                            let row = &design[m * kb..(m + 1) * kb];
                            let zb = zfit.as_ref().expect("z fit present");
                            for c in 0..w {
                                let mut ey = 0.0;
                                for i in 0..kb {
                                    ey += beta[(i, c)] * row[i];
                                }
                                yk[c] = ey;
                                for j in 0..d {
                                    let mut ez = 0.0;
                                    for i in 0..kb {
                                        ez += zb[(i, j * w + c)] * row[i];
                                    }
                                    zk[j * w + c] = ez;
                                }
                            }
                        }
                    }
                    driver.eval(ds, k, m, yk, zk, fval);
                    for c in 0..w {
                        yk[c] += h * fval[c];
                        ak[c] += h * fval[c];
                    }
                    driver.project(yk, zk);
                },
            );
        if let Some(i) = y.node(k).iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence { path: i / w.max(1), step: k });
        }
        if let Some(i) = z.node(k).iter().position(|v| !v.is_finite()) {
            return Err(Error::Divergence { path: i / (d * w).max(1), step: k });
        }
        diagnostics.push(diag);
    }
    diagnostics.reverse();

    let y0 = (0..w)
        .map(|c| {
            let value = crate::stats::mean(&y.node(0).iter().skip(c).step_by(w).copied().collect::<Vec<_>>());
            let pathwise = Estimate::from_samples((0..paths).map(|m| terminal[m * w + c] + acc[m * w + c]));
            Estimate {
                mean: value,
                se: pathwise.se,
            }
        })
        .collect();
    Ok(BackwardSolution { y, z, y0, diagnostics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monomial_count_matches_binomial() {
        assert_eq!(monomials(2, 2).len(), 6);
        assert_eq!(monomials(4, 2).len(), 15);
        assert_eq!(monomials(3, 3).len(), 20);
        assert_eq!(monomials(0, 3).len(), 1);
    }

    #[test]
    fn gaussian_moments_match_isserlis() {
        // one coordinate, α = 0.5, variance 2
        let alpha = [0.5];
        let cov = [2.0];
        let m = |k: usize| gaussian_moment(&vec![0; k], &alpha, &cov, 1);
        assert!((m(2) - (0.25 + 2.0)).abs() < 1e-14);
        assert!((m(3) - (0.125 + 3.0 * 0.5 * 2.0)).abs() < 1e-14);
        // E[(μ+X)^4] = μ^4 + 6μ²σ² + 3σ⁴
        assert!((m(4) - (0.0625 + 6.0 * 0.25 * 2.0 + 3.0 * 4.0)).abs() < 1e-13);
    }
}

//! Built-in problem instances.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Coefficients, ControlProblem, ControlSet, Dims};
use crate::error::{Error, Result};
use crate::stats::{norm, spectral_norm};

/// One registry parameter: a number, a vector, a matrix (list of rows) or a
/// list of matrices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ParamValue {
    Scalar(f64),
    Vector(Vec<f64>),
    Matrix(Vec<Vec<f64>>),
    Tensor(Vec<Vec<Vec<f64>>>),
}

impl From<f64> for ParamValue {
    fn from(v: f64) -> Self {
        ParamValue::Scalar(v)
    }
}

impl From<Vec<f64>> for ParamValue {
    fn from(v: Vec<f64>) -> Self {
        ParamValue::Vector(v)
    }
}

impl From<Vec<Vec<f64>>> for ParamValue {
    fn from(v: Vec<Vec<f64>>) -> Self {
        ParamValue::Matrix(v)
    }
}

pub type Params = BTreeMap<String, ParamValue>;

/// Registry family of a problem and the parameters oracles need.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum RegistryKind {
    Example1 { a: f64, beta: f64, gamma: f64 },
    Example2 { sign: f64, alpha: f64, beta: f64 },
    Affine,
    Custom,
}

fn canonical_key(k: &str) -> &str {
    match k {
        "α" => "alpha",
        "β" => "beta",
        "γ" => "gamma",
        "horizon" => "T",
        "K0" | "K₀" => "k0",
        "s" => "sign",
        other => other,
    }
}

struct Reader {
    params: BTreeMap<String, ParamValue>,
}

impl Reader {
    fn new(params: &Params, allowed: &[&str]) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (k, v) in params {
            let key = canonical_key(k);
            if !allowed.contains(&key) {
                return Err(Error::param(
                    k,
                    format!("unknown parameter (accepted: {})", allowed.join(", ")),
                ));
            }
            if out.insert(key.to_string(), v.clone()).is_some() {
                return Err(Error::param(k, "given twice under different spellings"));
            }
        }
        Ok(Reader { params: out })
    }

    fn scalar(&self, name: &str, default: f64) -> Result<f64> {
        match self.params.get(name) {
            None => Ok(default),
            Some(ParamValue::Scalar(v)) if v.is_finite() => Ok(*v),
            Some(ParamValue::Scalar(_)) => Err(Error::param(name, "must be finite")),
            Some(_) => Err(Error::param(name, "expected a number")),
        }
    }

    fn positive(&self, name: &str, default: f64) -> Result<f64> {
        let v = self.scalar(name, default)?;
        if v > 0.0 {
            Ok(v)
        } else {
            Err(Error::param(name, "must be positive"))
        }
    }

    fn count(&self, name: &str, default: usize) -> Result<usize> {
        let v = self.scalar(name, default as f64)?;
        if v >= 1.0 && v.fract() == 0.0 && v <= 1e6 {
            Ok(v as usize)
        } else {
            Err(Error::param(name, "must be a positive integer"))
        }
    }

    /// Length-`len` vector; a scalar fills every entry.
    fn vector(&self, name: &str, len: usize, default: f64) -> Result<Vec<f64>> {
        let v = match self.params.get(name) {
            None => vec![default; len],
            Some(ParamValue::Scalar(s)) => vec![*s; len],
            Some(ParamValue::Vector(v)) if v.len() == len => v.clone(),
            Some(ParamValue::Matrix(rows)) if rows.len() == len && rows.iter().all(|r| r.len() == 1) => {
                rows.iter().map(|r| r[0]).collect()
            }
            Some(_) => return Err(Error::param(name, format!("expected a vector of length {len}"))),
        };
        finite(name, v)
    }

    /// Row-major `rows×cols` matrix; a scalar `s` means `s` on the diagonal.
    fn matrix(&self, name: &str, rows: usize, cols: usize, default_diag: f64) -> Result<Vec<f64>> {
        let diag = |s: f64| {
            let mut m = vec![0.0; rows * cols];
            for i in 0..rows.min(cols) {
                m[i * cols + i] = s;
            }
            m
        };
        let v = match self.params.get(name) {
            None => diag(default_diag),
            Some(value) => matrix_from(name, value, rows, cols)?,
        };
        finite(name, v)
    }

    /// `count` square `n×n` matrices; scalars broadcast to `s·I`.
    fn matrices(&self, name: &str, count: usize, n: usize, default_diag: f64) -> Result<Vec<Vec<f64>>> {
        let diag = |s: f64| {
            let mut m = vec![0.0; n * n];
            for i in 0..n {
                m[i * n + i] = s;
            }
            m
        };
        match self.params.get(name) {
            None => Ok(vec![diag(default_diag); count]),
            Some(ParamValue::Scalar(s)) => Ok(vec![diag(*s); count]),
            Some(ParamValue::Vector(v)) if v.len() == count => Ok(v.iter().map(|s| diag(*s)).collect()),
            Some(ParamValue::Tensor(t)) if t.len() == count => t
                .iter()
                .map(|m| matrix_from(name, &ParamValue::Matrix(m.clone()), n, n).and_then(|v| finite(name, v)))
                .collect(),
            Some(value @ ParamValue::Matrix(_)) if count == 1 => {
                Ok(vec![finite(name, matrix_from(name, value, n, n)?)?])
            }
            Some(_) => Err(Error::param(name, format!("expected {count} matrices of size {n}x{n}"))),
        }
    }

    fn has(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    fn points(&self, name: &str, m: usize) -> Result<Vec<Vec<f64>>> {
        match self.params.get(name) {
            Some(ParamValue::Vector(v)) if m == 1 => Ok(v.iter().map(|x| vec![*x]).collect()),
            Some(ParamValue::Scalar(x)) if m == 1 => Ok(vec![vec![*x]]),
            Some(ParamValue::Matrix(rows)) if rows.iter().all(|r| r.len() == m) => Ok(rows.clone()),
            _ => Err(Error::param(name, format!("expected a list of points in R^{m}"))),
        }
    }
}

fn finite(name: &str, v: Vec<f64>) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(Error::param(name, "entries must be finite"))
    }
}

fn matrix_from(name: &str, value: &ParamValue, rows: usize, cols: usize) -> Result<Vec<f64>> {
    let bad = || Error::param(name, format!("expected a {rows}x{cols} matrix"));
    match value {
        ParamValue::Scalar(s) => {
            let mut m = vec![0.0; rows * cols];
            for i in 0..rows.min(cols) {
                m[i * cols + i] = *s;
            }
            Ok(m)
        }
        ParamValue::Vector(v) if (rows == 1 || cols == 1) && v.len() == rows * cols => Ok(v.clone()),
        ParamValue::Matrix(r) if r.len() == rows && r.iter().all(|row| row.len() == cols) => {
            Ok(r.iter().flatten().copied().collect())
        }
        _ => Err(bad()),
    }
}

fn symmetrised(m: &[f64], n: usize) -> Vec<f64> {
    let mut s = m.to_vec();
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = 0.5 * (m[i * n + j] + m[j * n + i]);
        }
    }
    s
}

/// Build a registry problem by name.
///
/// * `example1`: planar rotation system, `U = [-1, 1]`; parameters `a`,
///   `beta`, `gamma`, `T`, `grid_points`, `k0`.
/// * `example2`: scalar system `dx = u dt + (x - 1) dW`, `U = {-1, 0, 1}`,
///   `h = sign·½(x - 1)²`, `f = alpha·y + beta·z`; parameters `sign`,
///   `alpha`, `beta`, `T`, `k0`.
/// * `affine`: `b = A x + B u + c`, column `j` of `σ` is `C_j x + D_j`,
///   `f = fy·y + fz·z + ½xᵀ fxx x + fx·x + f0 + ½uᵀ R u + r·u`,
///   `h = ½xᵀ H x + g·x + h0`.
pub fn build_registry_problem(name: &str, params: &Params) -> Result<ControlProblem> {
    match name {
        "example1" => example1(params),
        "example2" => example2(params),
        "affine" => affine(params),
        other => Err(Error::UnknownProblem(other.to_string())),
    }
}

struct Example1 {
    a: f64,
    beta: f64,
    gamma: f64,
}

impl Coefficients for Example1 {
    fn dims(&self) -> Dims {
        Dims { n: 2, d: 1, m: 1 }
    }
    fn drift(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let c = -0.5 * self.a * self.a;
        out[0] = c * x[0] - u[0] * x[1];
        out[1] = u[0] * x[0] + c * x[1];
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = -self.a * x[1];
        out[1] = self.a * x[0];
    }
    fn generator(&self, _t: f64, _x: &[f64], y: f64, z: &[f64], _u: &[f64]) -> f64 {
        self.beta * y + self.gamma * z[0]
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        0.5 * (x[0] * x[0] + x[1] * x[1])
    }
    fn analytic_derivatives(&self) -> bool {
        true
    }
    fn drift_x(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        let c = -0.5 * self.a * self.a;
        out.copy_from_slice(&[c, -u[0], u[0], c]);
    }
    fn drift_xx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion_x(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, -self.a, self.a, 0.0]);
    }
    fn diffusion_xx(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn generator_grad(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, 0.0, self.beta, self.gamma]);
    }
    fn generator_hess(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_grad(&self, x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(x);
    }
    fn terminal_hess(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
    }
}

fn example1(params: &Params) -> Result<ControlProblem> {
    let r = Reader::new(params, &["a", "beta", "gamma", "T", "grid_points", "k0"])?;
    let a = r.scalar("a", 1.0)?;
    let beta = r.scalar("beta", 0.0)?;
    let gamma = r.scalar("gamma", 0.0)?;
    let horizon = r.positive("T", 1.0)?;
    let grid_points = r.count("grid_points", 21)?;
    let k0 = r.positive("k0", 4.0 + 0.5 * a * a + beta.abs() + gamma.abs())?;
    let set = ControlSet::interval(-1.0, 1.0, grid_points)?;
    Ok(ControlProblem::new(
        "example1",
        Arc::new(Example1 { a, beta, gamma }),
        horizon,
        vec![1.0, 0.0],
        set,
        k0,
    )?
    .with_kind(RegistryKind::Example1 { a, beta, gamma }))
}

struct Example2 {
    sign: f64,
    alpha: f64,
    beta: f64,
}

impl Coefficients for Example2 {
    fn dims(&self) -> Dims {
        Dims { n: 1, d: 1, m: 1 }
    }
    fn drift(&self, _t: f64, _x: &[f64], u: &[f64], out: &mut [f64]) {
        out[0] = u[0];
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        out[0] = x[0] - 1.0;
    }
    fn generator(&self, _t: f64, _x: &[f64], y: f64, z: &[f64], _u: &[f64]) -> f64 {
        self.alpha * y + self.beta * z[0]
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        0.5 * self.sign * (x[0] - 1.0) * (x[0] - 1.0)
    }
    fn analytic_derivatives(&self) -> bool {
        true
    }
    fn drift_x(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn drift_xx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn diffusion_x(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 1.0;
    }
    fn diffusion_xx(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out[0] = 0.0;
    }
    fn generator_grad(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&[0.0, self.alpha, self.beta]);
    }
    fn generator_hess(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn terminal_grad(&self, x: &[f64], out: &mut [f64]) {
        out[0] = self.sign * (x[0] - 1.0);
    }
    fn terminal_hess(&self, _x: &[f64], out: &mut [f64]) {
        out[0] = self.sign;
    }
}

fn example2(params: &Params) -> Result<ControlProblem> {
    let r = Reader::new(params, &["sign", "alpha", "beta", "T", "k0"])?;
    let sign = r.scalar("sign", 1.0)?;
    if sign != 1.0 && sign != -1.0 {
        return Err(Error::param("sign", "must be +1 or -1"));
    }
    let alpha = r.scalar("alpha", 0.0)?;
    let beta = r.scalar("beta", 0.0)?;
    let horizon = r.positive("T", 1.0)?;
    let k0 = r.positive("k0", 1f64.max(alpha.abs()).max(beta.abs()))?;
    let set = ControlSet::finite(vec![vec![-1.0], vec![0.0], vec![1.0]])?;
    Ok(ControlProblem::new(
        "example2",
        Arc::new(Example2 { sign, alpha, beta }),
        horizon,
        vec![1.0],
        set,
        k0,
    )?
    .with_kind(RegistryKind::Example2 { sign, alpha, beta }))
}

/// Affine dynamics with quadratic costs. Quadratic forms are symmetrised.
#[derive(Clone, Debug)]
pub(crate) struct Affine {
    dims: Dims,
    a: Vec<f64>,
    b: Vec<f64>,
    c: Vec<f64>,
    cs: Vec<Vec<f64>>,
    ds: Vec<f64>,
    fy: f64,
    fz: Vec<f64>,
    fxx: Vec<f64>,
    fx: Vec<f64>,
    f0: f64,
    r_mat: Vec<f64>,
    r_vec: Vec<f64>,
    h_mat: Vec<f64>,
    g: Vec<f64>,
    h0: f64,
}

impl Coefficients for Affine {
    fn dims(&self) -> Dims {
        self.dims
    }
    fn drift(&self, _t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        let Dims { n, m, .. } = self.dims;
        for i in 0..n {
            let mut v = self.c[i];
            for l in 0..n {
                v += self.a[i * n + l] * x[l];
            }
            for k in 0..m {
                v += self.b[i * m + k] * u[k];
            }
            out[i] = v;
        }
    }
    fn diffusion(&self, _t: f64, x: &[f64], out: &mut [f64]) {
        let Dims { n, d, .. } = self.dims;
        for i in 0..n {
            for j in 0..d {
                let mut v = self.ds[i * d + j];
                for l in 0..n {
                    v += self.cs[j][i * n + l] * x[l];
                }
                out[i * d + j] = v;
            }
        }
    }
    fn generator(&self, _t: f64, x: &[f64], y: f64, z: &[f64], u: &[f64]) -> f64 {
        let Dims { n, d, m } = self.dims;
        let mut v = self.fy * y + self.f0;
        for j in 0..d {
            v += self.fz[j] * z[j];
        }
        for i in 0..n {
            v += self.fx[i] * x[i];
            for l in 0..n {
                v += 0.5 * x[i] * self.fxx[i * n + l] * x[l];
            }
        }
        for k in 0..m {
            v += self.r_vec[k] * u[k];
            for l in 0..m {
                v += 0.5 * u[k] * self.r_mat[k * m + l] * u[l];
            }
        }
        v
    }
    fn terminal(&self, x: &[f64]) -> f64 {
        let n = self.dims.n;
        let mut v = self.h0;
        for i in 0..n {
            v += self.g[i] * x[i];
            for l in 0..n {
                v += 0.5 * x[i] * self.h_mat[i * n + l] * x[l];
            }
        }
        v
    }
    fn analytic_derivatives(&self) -> bool {
        true
    }
    fn drift_x(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.a);
    }
    fn drift_xx(&self, _t: f64, _x: &[f64], _u: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn diffusion_x(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        let nn = self.dims.n * self.dims.n;
        for (j, cj) in self.cs.iter().enumerate() {
            out[j * nn..(j + 1) * nn].copy_from_slice(cj);
        }
    }
    fn diffusion_xx(&self, _t: f64, _x: &[f64], out: &mut [f64]) {
        out.fill(0.0);
    }
    fn generator_grad(&self, _t: f64, x: &[f64], _y: f64, _z: &[f64], _u: &[f64], out: &mut [f64]) {
        let n = self.dims.n;
        for i in 0..n {
            let mut v = self.fx[i];
            for l in 0..n {
                v += self.fxx[i * n + l] * x[l];
            }
            out[i] = v;
        }
        out[n] = self.fy;
        out[n + 1..].copy_from_slice(&self.fz);
    }
    fn generator_hess(&self, _t: f64, _x: &[f64], _y: f64, _z: &[f64], _u: &[f64], out: &mut [f64]) {
        let n = self.dims.n;
        let w = self.dims.generator_args();
        out.fill(0.0);
        for i in 0..n {
            for l in 0..n {
                out[i * w + l] = self.fxx[i * n + l];
            }
        }
    }
    fn terminal_grad(&self, x: &[f64], out: &mut [f64]) {
        let n = self.dims.n;
        for i in 0..n {
            let mut v = self.g[i];
            for l in 0..n {
                v += self.h_mat[i * n + l] * x[l];
            }
            out[i] = v;
        }
    }
    fn terminal_hess(&self, _x: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.h_mat);
    }
}

const AFFINE_KEYS: &[&str] = &[
    "n", "d", "m", "A", "B", "c", "C", "D", "x0", "fy", "fz", "fxx", "fx", "f0", "R", "r", "H", "g",
    "h0", "u_min", "u_max", "u_points", "grid_points", "T", "k0",
];

fn affine(params: &Params) -> Result<ControlProblem> {
    let r = Reader::new(params, AFFINE_KEYS)?;
    let n = r.count("n", 1)?;
    let d = r.count("d", 1)?;
    let m = r.count("m", 1)?;
    let dims = Dims { n, d, m };
    let a = r.matrix("A", n, n, 0.0)?;
    let b = r.matrix("B", n, m, 1.0)?;
    let c = r.vector("c", n, 0.0)?;
    let cs = r.matrices("C", d, n, 0.0)?;
    // D is n×d with scalars filling every entry (it is an offset, not a map).
    let ds = match r.params.get("D") {
        Some(ParamValue::Scalar(s)) => vec![*s; n * d],
        Some(v) => finite("D", matrix_from("D", v, n, d)?)?,
        None => vec![0.0; n * d],
    };
    let x0 = r.vector("x0", n, 1.0)?;
    let fy = r.scalar("fy", 0.0)?;
    let fz = r.vector("fz", d, 0.0)?;
    let fxx = symmetrised(&r.matrix("fxx", n, n, 0.0)?, n);
    let fx = r.vector("fx", n, 0.0)?;
    let f0 = r.scalar("f0", 0.0)?;
    let r_mat = symmetrised(&r.matrix("R", m, m, 0.0)?, m);
    let r_vec = r.vector("r", m, 0.0)?;
    let h_mat = symmetrised(&r.matrix("H", n, n, 1.0)?, n);
    let g = r.vector("g", n, 0.0)?;
    let h0 = r.scalar("h0", 0.0)?;
    let horizon = r.positive("T", 1.0)?;

    let set = if r.has("u_points") {
        if r.has("u_min") || r.has("u_max") {
            return Err(Error::param("u_points", "cannot be combined with u_min/u_max"));
        }
        ControlSet::finite(r.points("u_points", m)?)?
    } else {
        let lo = r.vector("u_min", m, -1.0)?;
        let hi = r.vector("u_max", m, 1.0)?;
        let per_axis = r.count("grid_points", if m == 1 { 21 } else { 5 })?;
        ControlSet::boxed(lo, hi, per_axis)?
    };

    let u_scale = set.grid().iter().map(|p| norm(p)).fold(0.0, f64::max);
    let mut stacked = Vec::with_capacity(d * n * n);
    cs.iter().for_each(|cj| stacked.extend_from_slice(cj));
    let scale = [
        spectral_norm(&a, n, n),
        spectral_norm(&b, n, m),
        norm(&c),
        spectral_norm(&stacked, d * n, n),
        norm(&ds),
        fy.abs(),
        norm(&fz),
        spectral_norm(&fxx, n, n),
        norm(&fx),
        f0.abs(),
        spectral_norm(&r_mat, m, m),
        norm(&r_vec),
        spectral_norm(&h_mat, n, n),
        norm(&g),
        h0.abs(),
    ]
    .into_iter()
    .fold(1.0, f64::max);
    // Quadratic terms have gradients growing with |x| and |u|; cover the
    // default validation box around x0 with room to spare.
    let default_k0 = scale * (2.0 + norm(&x0) + (n as f64).sqrt() + u_scale);
    let k0 = r.positive("k0", default_k0)?;

    let coefficients = Affine {
        dims,
        a,
        b,
        c,
        cs,
        ds,
        fy,
        fz,
        fxx,
        fx,
        f0,
        r_mat,
        r_vec,
        h_mat,
        g,
        h0,
    };
    Ok(
        ControlProblem::new("affine", Arc::new(coefficients), horizon, x0, set, k0)?
            .with_kind(RegistryKind::Affine),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(pairs: &[(&str, ParamValue)]) -> Params {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn example1_starts_on_the_unit_circle() {
        let p = build_registry_problem(
            "example1",
            &params(&[("a", 1.0.into()), ("β", 0.0.into()), ("γ", 0.0.into()), ("T", 1.0.into())]),
        )
        .unwrap();
        assert_eq!(p.initial_state(), &[1.0, 0.0]);
        assert_eq!(p.dims(), Dims { n: 2, d: 1, m: 1 });
        assert_eq!(p.control_set().grid().len(), 21);
        assert_eq!(p.control_set().grid()[0], vec![-1.0]);
        assert_eq!(p.control_set().grid()[20], vec![1.0]);
    }

    #[test]
    fn example2_terminal_cost_and_finite_set() {
        let p = build_registry_problem("example2", &params(&[("sign", 1.0.into())])).unwrap();
        assert_eq!(p.initial_state(), &[1.0]);
        assert!((p.coef().terminal(&[3.0]) - 2.0).abs() < 1e-15);
        assert_eq!(p.control_set().grid().len(), 3);
        let neg = build_registry_problem("example2", &params(&[("sign", (-1.0).into())])).unwrap();
        assert!((neg.coef().terminal(&[3.0]) + 2.0).abs() < 1e-15);
        assert!(build_registry_problem("example2", &params(&[("sign", 0.5.into())])).is_err());
    }

    #[test]
    fn affine_family_reproduces_example2_dynamics() {
        let p = build_registry_problem(
            "affine",
            &params(&[
                ("A", 0.0.into()),
                ("B", 1.0.into()),
                ("c", 0.0.into()),
                ("C", 1.0.into()),
                ("D", (-1.0).into()),
                ("n", 1.0.into()),
            ]),
        )
        .unwrap();
        let e2 = build_registry_problem("example2", &Params::new()).unwrap();
        for &(x, u) in &[(0.3, -1.0), (1.0, 0.0), (2.5, 1.0)] {
            let (mut b1, mut b2, mut s1, mut s2) = ([0.0], [0.0], [0.0], [0.0]);
            p.coef().drift(0.0, &[x], &[u], &mut b1);
            e2.coef().drift(0.0, &[x], &[u], &mut b2);
            p.coef().diffusion(0.0, &[x], &mut s1);
            e2.coef().diffusion(0.0, &[x], &mut s2);
            assert_eq!(b1, b2);
            assert_eq!(s1, s2);
        }
    }

    #[test]
    fn unknown_names_and_keys_are_rejected() {
        assert!(matches!(
            build_registry_problem("example3", &Params::new()),
            Err(Error::UnknownProblem(_))
        ));
        assert!(matches!(
            build_registry_problem("example1", &params(&[("b", 1.0.into())])),
            Err(Error::Parameter { .. })
        ));
        assert!(build_registry_problem("example1", &params(&[("T", (-1.0).into())])).is_err());
        assert!(build_registry_problem("affine", &params(&[("A", vec![1.0, 2.0].into())])).is_err());
    }

    #[test]
    fn param_values_deserialise_untagged() {
        let v: ParamValue = serde_json::from_str("[[1.0, 0.0], [0.0, 1.0]]").unwrap();
        assert!(matches!(v, ParamValue::Matrix(_)));
        let v: ParamValue = serde_json::from_str("-1").unwrap();
        assert_eq!(v, ParamValue::Scalar(-1.0));
    }
}

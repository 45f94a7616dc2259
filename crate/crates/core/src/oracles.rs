//! Closed-form reference solutions for the rotating-circle problem
//! (`example1`) and the scalar singular problem (`example2`).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::sde::PathBatch;

/// Closed forms along a constant control `u`, as functions of `(t, W_t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example1Oracle {
    pub a: f64,
    pub beta: f64,
    pub gamma: f64,
    pub horizon: f64,
    pub u: f64,
}

/// Oracle values at one point; `q` has one column (`d = 1`) and `Q ≡ 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Example1Point {
    pub x: [f64; 2],
    pub p: [f64; 2],
    pub q: [f64; 2],
    /// Row-major `2 × 2`.
    pub pmat: [f64; 4],
}

impl Example1Oracle {
    fn discount(&self, t: f64) -> f64 {
        (self.beta * (self.horizon - t)).exp()
    }

    pub fn eval(&self, t: f64, w: f64) -> Example1Point {
        let theta = self.u * t + self.a * w;
        let (s, c) = theta.sin_cos();
        let e = self.discount(t);
        Example1Point {
            x: [c, s],
            p: [e * c, e * s],
            q: [-e * self.a * s, e * self.a * c],
            pmat: [e, 0.0, 0.0, e],
        }
    }

    /// `δb(t; v) = (v - u) J x`, `J` the quarter turn.
    pub fn delta_b(&self, t: f64, w: f64, v: f64) -> [f64; 2] {
        let x = self.eval(t, w).x;
        [-(v - self.u) * x[1], (v - self.u) * x[0]]
    }

    /// `δG(t; v) = (v - u) Jᵀ p`.
    pub fn delta_g(&self, t: f64, w: f64, v: f64) -> [f64; 2] {
        let p = self.eval(t, w).p;
        [(v - self.u) * p[1], -(v - self.u) * p[0]]
    }

    /// `δbᵀ P δb`.
    pub fn delta_b_p_delta_b(&self, t: f64, w: f64, v: f64) -> f64 {
        let db = self.delta_b(t, w, v);
        self.discount(t) * (db[0] * db[0] + db[1] * db[1])
    }

    /// `δG·δb + δbᵀ P δb`, identically zero.
    pub fn second_order_quantity(&self, t: f64, w: f64, v: f64) -> f64 {
        let dg = self.delta_g(t, w, v);
        let db = self.delta_b(t, w, v);
        dg[0] * db[0] + dg[1] * db[1] + self.delta_b_p_delta_b(t, w, v)
    }

    /// Oracle processes on the nodes of `paths`.
    pub fn fields(&self, paths: &PathBatch) -> Result<Example1Fields> {
        if paths.noise_dim() != 1 {
            return Err(Error::Shape("example1 oracle needs scalar noise".into()));
        }
        if (paths.grid().horizon() - self.horizon).abs() > 1e-12 * self.horizon {
            return Err(Error::Shape("oracle and batch horizons differ".into()));
        }
        let w = paths.brownian();
        let grid = *paths.grid();
        let nodes = grid.nodes();
        let mp = paths.path_count();
        let at = |k: usize, m: usize| self.eval(grid.t(k), w.at(k, m)[0]);
        Ok(Example1Fields {
            x: Field::from_fn(nodes, mp, 2, |k, m, o| o.copy_from_slice(&at(k, m).x)),
            p: Field::from_fn(nodes, mp, 2, |k, m, o| o.copy_from_slice(&at(k, m).p)),
            q: Field::from_fn(nodes - 1, mp, 2, |k, m, o| o.copy_from_slice(&at(k, m).q)),
            pmat: Field::from_fn(nodes, mp, 4, |k, m, o| o.copy_from_slice(&at(k, m).pmat)),
            qmat: Field::zeros(nodes - 1, mp, 4),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Example1Fields {
    pub x: Field,
    pub p: Field,
    pub q: Field,
    pub pmat: Field,
    pub qmat: Field,
}

/// Scalar second-order adjoint for `example2` with constant generator
/// slopes `(f_y, f_z)`: `dP = -(f_y + 2 f_z + 1) P dt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Example2Oracle {
    pub sign: f64,
    pub fy: f64,
    pub fz: f64,
    pub horizon: f64,
}

impl Example2Oracle {
    /// Solution with terminal value `s/2`.
    pub fn p_half(&self, t: f64) -> f64 {
        example2_p(self.sign, self.fy, self.fz, t, self.horizon)
    }

    /// Solution started from the terminal Hessian `h_xx = s` of `s(x-1)²/2`;
    /// this is what the backward solver targets.
    pub fn p(&self, t: f64) -> f64 {
        2.0 * self.p_half(t)
    }
}

/// `s/2 · exp((f_y + 2 f_z + 1)(T - t))`.
pub fn example2_p(sign: f64, fy: f64, fz: f64, t: f64, horizon: f64) -> f64 {
    sign * 0.5 * ((fy + 2.0 * fz + 1.0) * (horizon - t)).exp()
}

/// Discrepancy between a numerical field and its oracle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleDiff {
    /// `max_k sqrt(E |Δ_k|²)`.
    pub sup_node_rms: f64,
    /// `E max_k |Δ_k|²`.
    pub mean_sup_sq: f64,
    /// `sqrt(E_{k,m} |Δ|²)`.
    pub rms: f64,
    pub max_abs: f64,
    /// `rms / sqrt(E_{k,m} |oracle|²)`.
    pub relative_rms: f64,
}

/// Compare on the first `min(nodes)` nodes; widths and path counts must agree.
pub fn oracle_diff(numerical: &Field, oracle: &Field) -> Result<OracleDiff> {
    if numerical.paths() != oracle.paths() || numerical.width() != oracle.width() {
        return Err(Error::Shape(format!(
            "field shapes differ: {}×{}×{} vs {}×{}×{}",
            numerical.nodes(),
            numerical.paths(),
            numerical.width(),
            oracle.nodes(),
            oracle.paths(),
            oracle.width()
        )));
    }
    if numerical.nodes().abs_diff(oracle.nodes()) > 1 {
        return Err(Error::Shape("fields live on different grids".into()));
    }
    let nodes = numerical.nodes().min(oracle.nodes());
    let mp = numerical.paths();
    let sq = |k: usize, m: usize| -> f64 {
        numerical.at(k, m).iter().zip(oracle.at(k, m)).map(|(a, b)| (a - b) * (a - b)).sum()
    };
    let mut sup_node: f64 = 0.0;
    let mut total = 0.0;
    let mut norm = 0.0;
    let mut max_abs: f64 = 0.0;
    for k in 0..nodes {
        let mut node = 0.0;
        for m in 0..mp {
            node += sq(k, m);
            norm += oracle.at(k, m).iter().map(|v| v * v).sum::<f64>();
            for (a, b) in numerical.at(k, m).iter().zip(oracle.at(k, m)) {
                max_abs = max_abs.max((a - b).abs());
            }
        }
        total += node;
        sup_node = sup_node.max((node / mp as f64).sqrt());
    }
    let mean_sup_sq = (0..mp).map(|m| (0..nodes).map(|k| sq(k, m)).fold(0.0, f64::max)).sum::<f64>() / mp as f64;
    let count = (nodes * mp) as f64;
    let rms = (total / count).sqrt();
    let oracle_rms = (norm / count).sqrt();
    Ok(OracleDiff {
        sup_node_rms: sup_node,
        mean_sup_sq,
        rms,
        max_abs,
        relative_rms: if oracle_rms > 0.0 { rms / oracle_rms } else { rms },
    })
}

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MEMBERSHIP_TOL: f64 = 1e-12;

/// Shape of the control domain `U`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSetKind {
    Finite { points: Vec<Vec<f64>> },
    Box { lower: Vec<f64>, upper: Vec<f64> },
}

/// Control domain together with the finite grid used for minimisation and
/// flatness scans.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlSet {
    kind: ControlSetKind,
    evaluation_grid: Vec<Vec<f64>>,
}

impl ControlSet {
    /// Finite set; the evaluation grid is the set itself.
    pub fn finite(points: Vec<Vec<f64>>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::Empty("control set"));
        };
        let m = first.len();
        if m == 0 || points.iter().any(|p| p.len() != m) {
            return Err(Error::Shape("control points must share a positive dimension".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("u_points", "control points must be finite"));
        }
        Ok(ControlSet {
            evaluation_grid: points.clone(),
            kind: ControlSetKind::Finite { points },
        })
    }

    /// Scalar interval `[lo, hi]` scanned at `grid_points` uniform points.
    pub fn interval(lo: f64, hi: f64, grid_points: usize) -> Result<Self> {
        Self::boxed(vec![lo], vec![hi], grid_points)
    }

    /// Axis-aligned box scanned on a tensor grid with `per_axis` points per axis.
    pub fn boxed(lower: Vec<f64>, upper: Vec<f64>, per_axis: usize) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::Shape("box bounds must share a positive dimension".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && l <= u)) {
            return Err(Error::param("u_min/u_max", "need finite bounds with u_min <= u_max"));
        }
        if per_axis == 0 {
            return Err(Error::param("grid_points", "must be at least 1"));
        }
        let axes: Vec<Vec<f64>> = lower
            .iter()
            .zip(&upper)
            .map(|(&l, &u)| {
                if per_axis == 1 || l == u {
                    vec![0.5 * (l + u)]
                } else {
                    (0..per_axis)
                        .map(|i| l + (u - l) * i as f64 / (per_axis - 1) as f64)
                        .collect()
                }
            })
            .collect();
        let mut grid: Vec<Vec<f64>> = vec![Vec::new()];
        for axis in &axes {
            grid = grid
                .into_iter()
                .flat_map(|prefix| {
                    axis.iter().map(move |&v| {
                        let mut p = prefix.clone();
                        p.push(v);
                        p
                    })
                })
                .collect();
        }
        Ok(ControlSet {
            kind: ControlSetKind::Box { lower, upper },
            evaluation_grid: grid,
        })
    }

    /// Replace the evaluation grid; every point must lie in the set.
    pub fn with_grid(mut self, grid: Vec<Vec<f64>>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Empty("evaluation grid"));
        }
        if let Some(bad) = grid.iter().find(|p| !self.contains(p)) {
            return Err(Error::ControlOutsideSet {
                step: 0,
                value: bad.clone(),
            });
        }
        self.evaluation_grid = grid;
        Ok(self)
    }

    pub fn kind(&self) -> &ControlSetKind {
        &self.kind
    }

    pub fn grid(&self) -> &[Vec<f64>] {
        &self.evaluation_grid
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ControlSetKind::Finite { points } => points[0].len(),
            ControlSetKind::Box { lower, .. } => lower.len(),
        }
    }

    pub fn contains(&self, v: &[f64]) -> bool {
        if v.len() != self.dim() {
            return false;
        }
        match &self.kind {
            ControlSetKind::Finite { points } => points
                .iter()
                .any(|p| p.iter().zip(v).all(|(a, b)| (a - b).abs() <= MEMBERSHIP_TOL)),
            ControlSetKind::Box { lower, upper } => v
                .iter()
                .zip(lower.iter().zip(upper))
                .all(|(x, (l, u))| *x >= l - MEMBERSHIP_TOL && *x <= u + MEMBERSHIP_TOL),
        }
    }

    /// Nearest point of the set (Euclidean), written into `out`.
    pub fn project(&self, v: &[f64], out: &mut [f64]) {
        match &self.kind {
            ControlSetKind::Finite { points } => {
                let best = points
                    .iter()
                    .min_by(|a, b| {
                        let da: f64 = a.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum();
                        let db: f64 = b.iter().zip(v).map(|(p, q)| (p - q) * (p - q)).sum();
                        da.total_cmp(&db)
                    })
                    .expect("finite set is non-empty");
                out.copy_from_slice(best);
            }
            ControlSetKind::Box { lower, upper } => {
                for (i, o) in out.iter_mut().enumerate() {
                    *o = v[i].clamp(lower[i], upper[i]);
                }
            }
        }
    }
}

type RuleFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Markov feedback `u = φ(t, x)`.
#[derive(Clone)]
pub struct FeedbackRule {
    label: String,
    dim: usize,
    rule: Arc<RuleFn>,
}

impl FeedbackRule {
    pub fn new(
        label: impl Into<String>,
        dim: usize,
        rule: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        FeedbackRule {
            label: label.into(),
            dim,
            rule: Arc::new(rule),
        }
    }

    /// `u = Π_U(K x + k)` with `gain` row-major `m×n`.
    pub fn linear(gain: Vec<f64>, offset: Vec<f64>, set: &ControlSet) -> Result<Self> {
        let m = offset.len();
        if m != set.dim() || m == 0 || gain.len() % m != 0 {
            return Err(Error::Shape("feedback gain/offset do not match the control set".into()));
        }
        let n = gain.len() / m;
        let set = set.clone();
        Ok(FeedbackRule::new("linear", m, move |_, x, out| {
            let mut raw = offset.clone();
            for (a, r) in raw.iter_mut().enumerate() {
                for l in 0..n {
                    *r += gain[a * n + l] * x[l];
                }
            }
            set.project(&raw, out);
        }))
    }

    pub fn label(&self) -> &str {
        &self.label
    }
}

/// Candidate admissible control on the simulation grid.
#[derive(Clone)]
pub enum ControlProcess {
    Constant(Vec<f64>),
    /// One value per grid step `[t_k, t_{k+1})`.
    PiecewiseConstant(Vec<Vec<f64>>),
    Feedback(FeedbackRule),
    /// `replacement` on steps flagged in `active`, `base` elsewhere.
    Spliced {
        base: Box<ControlProcess>,
        replacement: Box<ControlProcess>,
        active: Vec<bool>,
    },
}

impl fmt::Debug for ControlProcess {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlProcess::Constant(v) => f.debug_tuple("Constant").field(v).finish(),
            ControlProcess::PiecewiseConstant(v) => {
                f.debug_tuple("PiecewiseConstant").field(&v.len()).finish()
            }
            ControlProcess::Feedback(r) => f.debug_tuple("Feedback").field(&r.label).finish(),
            ControlProcess::Spliced {
                base,
                replacement,
                active,
            } => f
                .debug_struct("Spliced")
                .field("base", base)
                .field("replacement", replacement)
                .field("active_steps", &active.iter().filter(|a| **a).count())
                .finish(),
        }
    }
}

impl ControlProcess {
    pub fn constant(v: &[f64]) -> Self {
        ControlProcess::Constant(v.to_vec())
    }

    /// Control dimension, if it can be read off without evaluation.
    pub fn dim(&self) -> Option<usize> {
        match self {
            ControlProcess::Constant(v) => Some(v.len()),
            ControlProcess::PiecewiseConstant(v) => v.first().map(Vec::len),
            ControlProcess::Feedback(r) => Some(r.dim),
            ControlProcess::Spliced { base, .. } => base.dim(),
        }
    }

    /// True when the value at step `k` does not depend on the state.
    pub fn is_open_loop(&self) -> bool {
        match self {
            ControlProcess::Constant(_) | ControlProcess::PiecewiseConstant(_) => true,
            ControlProcess::Feedback(_) => false,
            ControlProcess::Spliced {
                base, replacement, ..
            } => base.is_open_loop() && replacement.is_open_loop(),
        }
    }

    /// Value on step `k` (time `t`, state `x`), written into `out`.
    pub fn eval(&self, k: usize, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            ControlProcess::Constant(v) => out.copy_from_slice(v),
            ControlProcess::PiecewiseConstant(v) => out.copy_from_slice(&v[k.min(v.len() - 1)]),
            ControlProcess::Feedback(r) => (r.rule)(t, x, out),
            ControlProcess::Spliced {
                base,
                replacement,
                active,
            } => {
                if active.get(k).copied().unwrap_or(false) {
                    replacement.eval(k, t, x, out)
                } else {
                    base.eval(k, t, x, out)
                }
            }
        }
    }

    /// Shape and membership checks that need no state paths.
    pub fn check(&self, set: &ControlSet, steps: usize) -> Result<()> {
        if self.dim() != Some(set.dim()) {
            return Err(Error::Shape(format!(
                "control has dimension {:?}, control set has {}",
                self.dim(),
                set.dim()
            )));
        }
        match self {
            ControlProcess::Constant(v) => {
                if !set.contains(v) {
                    return Err(Error::ControlOutsideSet {
                        step: 0,
                        value: v.clone(),
                    });
                }
            }
            ControlProcess::PiecewiseConstant(vals) => {
                if vals.len() != steps {
                    return Err(Error::Shape(format!(
                        "piecewise-constant control has {} values for {} steps",
                        vals.len(),
                        steps
                    )));
                }
                if let Some((k, v)) = vals.iter().enumerate().find(|(_, v)| !set.contains(v)) {
                    return Err(Error::ControlOutsideSet {
                        step: k,
                        value: v.clone(),
                    });
                }
            }
            ControlProcess::Feedback(_) => {}
            ControlProcess::Spliced {
                base,
                replacement,
                active,
            } => {
                if active.len() != steps {
                    return Err(Error::Shape("splice mask does not match the grid".into()));
                }
                base.check(set, steps)?;
                replacement.check(set, steps)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interval_grid_includes_endpoints() {
        let s = ControlSet::interval(-1.0, 1.0, 21).unwrap();
        assert_eq!(s.grid().len(), 21);
        assert_eq!(s.grid()[0], vec![-1.0]);
        assert_eq!(s.grid()[20], vec![1.0]);
        assert!(s.grid().iter().all(|p| s.contains(p)));
    }

    #[test]
    fn box_grid_is_tensor_product() {
        let s = ControlSet::boxed(vec![0.0, -1.0], vec![1.0, 1.0], 3).unwrap();
        assert_eq!(s.grid().len(), 9);
    }

    #[test]
    fn finite_set_membership_and_projection() {
        let s = ControlSet::finite(vec![vec![-1.0], vec![0.0], vec![1.0]]).unwrap();
        assert!(s.contains(&[0.0]));
        assert!(!s.contains(&[0.5]));
        let mut out = [0.0];
        s.project(&[0.7], &mut out);
        assert_eq!(out, [1.0]);
        assert!(s.clone().with_grid(vec![vec![0.5]]).is_err());
        assert!(ControlSet::finite(vec![]).is_err());
    }

    #[test]
    fn check_flags_out_of_set_values() {
        let s = ControlSet::interval(-1.0, 1.0, 5).unwrap();
        assert!(ControlProcess::constant(&[0.5]).check(&s, 4).is_ok());
        assert!(matches!(
            ControlProcess::constant(&[1.5]).check(&s, 4),
            Err(Error::ControlOutsideSet { .. })
        ));
        let pw = ControlProcess::PiecewiseConstant(vec![vec![0.0], vec![2.0]]);
        assert!(matches!(pw.check(&s, 2), Err(Error::ControlOutsideSet { step: 1, .. })));
        assert!(pw.check(&s, 3).is_err());
    }

    #[test]
    fn linear_feedback_is_projected() {
        let s = ControlSet::interval(-1.0, 1.0, 3).unwrap();
        let fb = ControlProcess::Feedback(FeedbackRule::linear(vec![10.0], vec![0.0], &s).unwrap());
        let mut out = [0.0];
        fb.eval(0, 0.0, &[0.5], &mut out);
        assert_eq!(out, [1.0]);
        assert!(!fb.is_open_loop());
    }
}

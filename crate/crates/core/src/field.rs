//! Dense per-node, per-path storage.
//!
//! Values are laid out node-major: all paths of node `k` are contiguous, and
//! each path holds `width` consecutive entries. Backward regression sweeps
//! touch one node at a time, which this layout keeps cache-local.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    nodes: usize,
    paths: usize,
    width: usize,
    data: Vec<f64>,
}

impl Field {
    pub fn zeros(nodes: usize, paths: usize, width: usize) -> Self {
        Self {
            nodes,
            paths,
            width,
            data: vec![0.0; nodes * paths * width],
        }
    }

    pub fn from_fn(
        nodes: usize,
        paths: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, &mut [f64]),
    ) -> Self {
        let mut field = Self::zeros(nodes, paths, width);
        for k in 0..nodes {
            for m in 0..paths {
                f(k, m, field.at_mut(k, m));
            }
        }
        field
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn paths(&self) -> usize {
        self.paths
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn same_shape(&self, other: &Field) -> bool {
        self.nodes == other.nodes && self.paths == other.paths && self.width == other.width
    }

    #[inline]
    pub fn at(&self, k: usize, m: usize) -> &[f64] {
        let start = (k * self.paths + m) * self.width;
        &self.data[start..start + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, k: usize, m: usize) -> &mut [f64] {
        let start = (k * self.paths + m) * self.width;
        &mut self.data[start..start + self.width]
    }

    /// All paths of node `k`.
    pub fn node(&self, k: usize) -> &[f64] {
        let len = self.paths * self.width;
        &self.data[k * len..(k + 1) * len]
    }

    pub fn node_mut(&mut self, k: usize) -> &mut [f64] {
        let len = self.paths * self.width;
        &mut self.data[k * len..(k + 1) * len]
    }

    /// Node `k` read-only together with node `k + 1` mutable.
    pub fn step_pair_mut(&mut self, k: usize) -> (&[f64], &mut [f64]) {
        let len = self.paths * self.width;
        let (head, tail) = self.data.split_at_mut((k + 1) * len);
        (&head[k * len..], &mut tail[..len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fills node `k` path-parallel.
    pub fn fill_node_par(&mut self, k: usize, f: impl Fn(usize, &mut [f64]) + Sync) {
        let width = self.width;
        self.node_mut(k)
            .par_chunks_mut(width.max(1))
            .enumerate()
            .for_each(|(m, out)| f(m, out));
    }

    /// Entry-wise `self - other`.
    pub fn sub(&self, other: &Field) -> Field {
        assert!(self.same_shape(other), "field shapes differ");
        Field {
            nodes: self.nodes,
            paths: self.paths,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc: f64, v| acc.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_node_major() {
        let f = Field::from_fn(3, 2, 2, |k, m, out| {
            out[0] = k as f64;
            out[1] = m as f64;
        });
        assert_eq!(f.node(1), &[1.0, 0.0, 1.0, 1.0]);
        assert_eq!(f.at(2, 1), &[2.0, 1.0]);
    }

    #[test]
    fn step_pair_splits_adjacent_nodes() {
        let mut f = Field::from_fn(3, 2, 1, |k, _, out| out[0] = k as f64);
        let (prev, next) = f.step_pair_mut(1);
        assert_eq!(prev, &[1.0, 1.0]);
        next[0] = 9.0;
        assert_eq!(f.at(2, 0), &[9.0]);
    }
}

//! Order-fixed Monte Carlo aggregation.
//!
//! Every reduction in the crate goes through these helpers in path-index
//! order, so results do not depend on the worker count.

use serde::{Deserialize, Serialize};

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Sample mean with its Monte Carlo standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub se: f64,
}

impl Estimate {
    pub const ZERO: Estimate = Estimate { mean: 0.0, se: 0.0 };

    pub fn from_samples<I: IntoIterator<Item = f64>>(samples: I) -> Estimate {
        let values: Vec<f64> = samples.into_iter().collect();
        let n = values.len();
        if n == 0 {
            return Estimate {
                mean: f64::NAN,
                se: f64::NAN,
            };
        }
        let mut acc = KahanSum::default();
        values.iter().for_each(|&v| acc.add(v));
        let mean = acc.value() / n as f64;
        if n == 1 {
            return Estimate { mean, se: 0.0 };
        }
        let mut sq = KahanSum::default();
        values.iter().for_each(|&v| sq.add((v - mean) * (v - mean)));
        let var = sq.value() / (n - 1) as f64;
        Estimate {
            mean,
            se: (var / n as f64).sqrt(),
        }
    }

    /// `self - other` with independent-error standard errors combined.
    pub fn minus(&self, other: &Estimate) -> Estimate {
        Estimate {
            mean: self.mean - other.mean,
            se: self.se.hypot(other.se),
        }
    }
}

pub fn mean(values: &[f64]) -> f64 {
    let mut acc = KahanSum::default();
    values.iter().for_each(|&v| acc.add(v));
    acc.value() / values.len() as f64
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Operator 2-norm of a row-major `rows x cols` matrix.
pub(crate) fn spectral_norm(a: &[f64], rows: usize, cols: usize) -> f64 {
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let m = nalgebra::DMatrix::from_row_slice(rows, cols, a);
    m.singular_values().iter().fold(0.0, |acc: f64, &s| acc.max(s))
}

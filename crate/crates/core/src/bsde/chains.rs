//! Regression state chains built on simulated forward paths.

use super::engine::Chain;
use crate::field::Field;
use crate::problem::{ControlProblem, Dims};
use crate::sde::{spike_value, TimeGrid};
use crate::spike::SpikeSpec;

/// The controlled state itself, `s = x`.
pub(crate) struct StateChain<'a> {
    pub problem: &'a ControlProblem,
    pub grid: TimeGrid,
    pub state: &'a Field,
    pub controls: &'a Field,
}

impl Chain for StateChain<'_> {
    type Scratch = ();

    fn dim(&self) -> usize {
        self.problem.dims().n
    }

    fn scratch(&self) {}

    fn state(&self, k: usize, m: usize, out: &mut [f64]) {
        out.copy_from_slice(self.state.at(k, m));
    }

    fn transition(&self, _: &mut (), k: usize, m: usize, mean: &mut [f64], load: &mut [f64]) {
        let t = self.grid.t(k);
        let h = self.grid.h();
        let x = self.state.at(k, m);
        let coef = self.problem.coef();
        coef.drift(t, x, self.controls.at(k, m), mean);
        for (mi, xi) in mean.iter_mut().zip(x) {
            *mi = xi + *mi * h;
        }
        coef.diffusion(t, x, load);
    }
}

/// Base state together with the first variation, `s = (x̄, x₁)`.
pub(crate) struct VariationChain<'a> {
    pub problem: &'a ControlProblem,
    pub grid: TimeGrid,
    pub state: &'a Field,
    pub controls: &'a Field,
    pub x1: &'a Field,
    pub spike: &'a SpikeSpec,
}

pub(crate) struct VariationScratch {
    bx: Vec<f64>,
    sx: Vec<f64>,
    ue: Vec<f64>,
    be: Vec<f64>,
    bb: Vec<f64>,
    delta: Vec<f64>,
    sig: Vec<f64>,
}

impl Chain for VariationChain<'_> {
    type Scratch = VariationScratch;

    fn dim(&self) -> usize {
        2 * self.problem.dims().n
    }

    fn scratch(&self) -> VariationScratch {
        let Dims { n, d, m } = self.problem.dims();
        VariationScratch {
            bx: vec![0.0; n * n],
            sx: vec![0.0; d * n * n],
            ue: vec![0.0; m],
            be: vec![0.0; n],
            bb: vec![0.0; n],
            delta: vec![0.0; n],
            sig: vec![0.0; n * d],
        }
    }

    fn state(&self, k: usize, m: usize, out: &mut [f64]) {
        let n = self.problem.dims().n;
        out[..n].copy_from_slice(self.state.at(k, m));
        out[n..].copy_from_slice(self.x1.at(k, m));
    }

    fn transition(&self, s: &mut VariationScratch, k: usize, m: usize, mean: &mut [f64], load: &mut [f64]) {
        let Dims { n, d, .. } = self.problem.dims();
        let t = self.grid.t(k);
        let h = self.grid.h();
        let x = self.state.at(k, m);
        let ub = self.controls.at(k, m);
        let x1 = self.x1.at(k, m);
        let coef = self.problem.coef();

        coef.drift(t, x, ub, &mut s.be);
        coef.diffusion(t, x, &mut s.sig);
        coef.drift_x(t, x, ub, &mut s.bx);
        coef.diffusion_x(t, x, &mut s.sx);
        let spiked = spike_value(self.spike, k, t, x, &mut s.ue);
        for i in 0..n {
            mean[i] = x[i] + s.be[i] * h;
            for j in 0..d {
                load[i * d + j] = s.sig[i * d + j];
            }
        }
        // δb must be formed exactly as in the forward integration.
        if spiked {
            coef.drift(t, x, &s.ue, &mut s.delta);
            coef.drift(t, x, ub, &mut s.bb);
        }
        for i in 0..n {
            let mut drift = if spiked { s.delta[i] - s.bb[i] } else { 0.0 };
            for l in 0..n {
                drift += s.bx[i * n + l] * x1[l];
            }
            mean[n + i] = x1[i] + drift * h;
            for j in 0..d {
                let mut v = 0.0;
                for l in 0..n {
                    v += s.sx[(j * n + i) * n + l] * x1[l];
                }
                load[(n + i) * d + j] = v;
            }
        }
    }
}

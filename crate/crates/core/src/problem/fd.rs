//! Central finite differences used as default derivatives and as the
//! independent check on analytic derivative bundles.

/// Step used for every finite-difference derivative in the crate.
pub const FD_STEP: f64 = 1e-4;

/// Jacobian of `f: R^n -> R^k` at `x`, row-major `out[i * n + l] = d f_i / d x_l`.
pub fn jacobian(
    x: &[f64],
    k: usize,
    mut f: impl FnMut(&[f64], &mut [f64]),
    out: &mut [f64],
) {
    let n = x.len();
    let mut xp = x.to_vec();
    let mut fp = vec![0.0; k];
    let mut fm = vec![0.0; k];
    for l in 0..n {
        xp[l] = x[l] + FD_STEP;
        f(&xp, &mut fp);
        xp[l] = x[l] - FD_STEP;
        f(&xp, &mut fm);
        xp[l] = x[l];
        for i in 0..k {
            out[i * n + l] = (fp[i] - fm[i]) / (2.0 * FD_STEP);
        }
    }
}

/// Hessians of every component of `f: R^n -> R^k`,
/// `out[(i * n + l) * n + r] = d^2 f_i / d x_l d x_r`, symmetrised.
pub fn hessians(
    x: &[f64],
    k: usize,
    mut f: impl FnMut(&[f64], &mut [f64]),
    out: &mut [f64],
) {
    let n = x.len();
    let h = FD_STEP;
    let mut xp = x.to_vec();
    let mut buf = [vec![0.0; k], vec![0.0; k], vec![0.0; k], vec![0.0; k]];
    let mut centre = vec![0.0; k];
    f(x, &mut centre);
    for l in 0..n {
        for r in l..n {
            if l == r {
                xp[l] = x[l] + h;
                f(&xp, &mut buf[0]);
                xp[l] = x[l] - h;
                f(&xp, &mut buf[1]);
                xp[l] = x[l];
                for i in 0..k {
                    out[(i * n + l) * n + l] = (buf[0][i] - 2.0 * centre[i] + buf[1][i]) / (h * h);
                }
            } else {
                let signs = [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)];
                for (slot, (sl, sr)) in signs.iter().enumerate() {
                    xp[l] = x[l] + sl * h;
                    xp[r] = x[r] + sr * h;
                    f(&xp, &mut buf[slot]);
                }
                xp[l] = x[l];
                xp[r] = x[r];
                for i in 0..k {
                    let v = (buf[0][i] - buf[1][i] - buf[2][i] + buf[3][i]) / (4.0 * h * h);
                    out[(i * n + l) * n + r] = v;
                    out[(i * n + r) * n + l] = v;
                }
            }
        }
    }
}

/// Relative discrepancy `|a - b| / max(1, |a|)` maximised over entries.
pub fn max_relative_gap(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobian_of_linear_map_is_its_matrix() {
        let mut out = [0.0; 4];
        jacobian(
            &[0.3, -0.7],
            2,
            |x, o| {
                o[0] = 2.0 * x[0] - x[1];
                o[1] = 0.5 * x[1];
            },
            &mut out,
        );
        let expect = [2.0, -1.0, 0.0, 0.5];
        assert!(max_relative_gap(&expect, &out) < 1e-9);
    }

    #[test]
    fn hessian_of_quadratic_is_exact_up_to_roundoff() {
        let mut out = [0.0; 4];
        hessians(
            &[1.0, 2.0],
            1,
            |x, o| o[0] = x[0] * x[0] + 3.0 * x[0] * x[1],
            &mut out,
        );
        assert!(max_relative_gap(&[2.0, 3.0, 3.0, 0.0], &out) < 1e-6);
    }
}

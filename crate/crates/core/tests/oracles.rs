use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsmp_core::oracles::{example2_p, oracle_diff, Example1Oracle, Example2Oracle};
use rsmp_core::reproduce::example1_problem;
use rsmp_core::*;

const E: f64 = std::f64::consts::E;

fn oracle(beta: f64) -> Example1Oracle {
    Example1Oracle { a: 1.0, beta, gamma: 0.3, horizon: 1.0, u: 0.5 }
}

#[test]
fn example1_initial_and_terminal_values() {
    for u in [-1.0, 0.0, 0.7] {
        let o = Example1Oracle { u, ..oracle(0.5) };
        let at0 = o.eval(0.0, 0.0);
        assert_eq!(at0.x, [1.0, 0.0]);
        assert!((at0.p[0] - 0.5f64.exp()).abs() < 1e-15 && at0.p[1] == 0.0);
    }
    let o = oracle(0.0);
    for w in [-1.3, 0.2, 2.0] {
        let end = o.eval(1.0, w);
        assert_eq!(end.p, end.x);
        assert_eq!(end.pmat, [1.0, 0.0, 0.0, 1.0]);
    }
}

#[test]
fn example1_state_on_the_circle_and_s_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let o = Example1Oracle { u: rng.random_range(-1.0..1.0), ..oracle(rng.random_range(-1.0..1.0)) };
        let (t, w, v) = (rng.random_range(0.0..1.0), rng.random_range(-3.0..3.0), rng.random_range(-1.0..1.0));
        let x = o.eval(t, w).x;
        assert!((x[0].hypot(x[1]) - 1.0).abs() < 1e-15);
        assert!(o.second_order_quantity(t, w, v).abs() < 1e-14);
    }
}

#[test]
fn example2_second_adjoint_values() {
    assert_eq!(example2_p(1.0, 0.0, 0.0, 1.0, 1.0), 0.5);
    assert_eq!(example2_p(-1.0, 0.0, 0.0, 1.0, 1.0), -0.5);
    assert!((example2_p(1.0, 0.0, 0.0, 0.0, 1.0) - 1.359140914).abs() < 1e-9);
    for t in [0.0, 0.3, 0.9] {
        assert_eq!(example2_p(-1.0, 0.2, -0.1, t, 1.0), -example2_p(1.0, 0.2, -0.1, t, 1.0));
    }
    let o = Example2Oracle { sign: 1.0, fy: 0.0, fz: 0.0, horizon: 1.0 };
    assert!((o.p(0.0) - E).abs() < 1e-15 && o.p(1.0) == 1.0);
}

#[test]
fn example2_ode_residual_is_second_order() {
    // P_k = P_{k+1} e^{c h}; explicit Euler leaves P (e^{ch} - 1 - ch)
    let (fy, fz) = (0.3, -0.2);
    let c = fy + 2.0 * fz + 1.0;
    for steps in [16, 64, 256] {
        let h = 1.0 / steps as f64;
        for k in 0..steps {
            let (t0, t1) = (k as f64 * h, (k + 1) as f64 * h);
            let (p0, p1) = (example2_p(1.0, fy, fz, t0, 1.0), example2_p(1.0, fy, fz, t1, 1.0));
            let r = p0 - p1 - c * p1 * h;
            assert!(r.abs() <= p1 * (c * h).powi(2) * (c * h).exp(), "step {k} of {steps}");
        }
    }
}

#[test]
fn oracle_diff_basics() {
    let noise = sample_brownian(TimeGrid::new(1.0, 8).unwrap(), 16, 1, 0).unwrap();
    let f = oracle(0.5).fields(&noise).unwrap();
    let d = oracle_diff(&f.p, &f.p).unwrap();
    assert_eq!((d.sup_node_rms, d.mean_sup_sq, d.rms, d.max_abs, d.relative_rms), (0.0, 0.0, 0.0, 0.0, 0.0));
    assert!(oracle_diff(&f.p, &f.pmat).is_err());
    assert!(oracle_diff(&Field::zeros(9, 8, 2), &f.p).is_err());
}

/// Mean per-step residual of the first adjoint equation for the closed forms.
fn adjoint_residual(steps: usize, paths: usize) -> f64 {
    let o = oracle(0.5);
    let (a, beta, gamma, u) = (o.a, o.beta, o.gamma, o.u);
    let c = -0.5 * a * a;
    let noise = sample_brownian(TimeGrid::new(1.0, steps).unwrap(), paths, 1, 0).unwrap();
    let w = noise.brownian();
    let h = 1.0 / steps as f64;
    let mut total = 0.0;
    for m in 0..paths {
        for k in 0..steps {
            let t = k as f64 * h;
            let now = o.eval(t, w.at(k, m)[0]);
            let next = o.eval(t + h, w.at(k + 1, m)[0]);
            let (p, q) = (now.p, now.q);
            // (f_y + f_z σ_xᵀ + b_xᵀ) p + (f_z + σ_xᵀ) q with σ_x = a J, b_x = c I + u J
            let sxt_p = [a * p[1], -a * p[0]];
            let sxt_q = [a * q[1], -a * q[0]];
            let bxt_p = [c * p[0] + u * p[1], -u * p[0] + c * p[1]];
            let dw = noise.increment(k, m)[0];
            let mut r2 = 0.0;
            for i in 0..2 {
                let drv = beta * p[i] + gamma * sxt_p[i] + bxt_p[i] + gamma * q[i] + sxt_q[i];
                let r = next.p[i] - p[i] + drv * h - q[i] * dw;
                r2 += r * r;
            }
            total += r2.sqrt();
        }
    }
    total / (paths * steps) as f64
}

#[test]
fn example1_adjoint_closed_form_solves_the_adjoint_equation() {
    let steps = [32, 64, 128, 256, 512];
    let eps: Vec<f64> = steps.iter().map(|n| 1.0 / *n as f64).collect();
    let res: Vec<f64> = steps.iter().map(|n| adjoint_residual(*n, 500)).collect();
    let fit = fit_rate(&eps, &res).unwrap();
    assert!(fit.slope >= 1.0 - fit.half_width, "slope {} ± {}: {res:?}", fit.slope, fit.half_width);
}

#[test]
fn example1_euler_state_error() {
    let problem = example1_problem().unwrap();
    let o = oracle(0.5);
    let noise = sample_for(&problem, 4096, 128, 0).unwrap();
    let paths = euler_forward(&problem, &ControlProcess::constant(&[0.5]), &noise).unwrap();
    let d = oracle_diff(paths.state().unwrap(), &o.fields(&noise).unwrap().x).unwrap();
    assert!(d.sup_node_rms < 0.05, "{d:?}");
}

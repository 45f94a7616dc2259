use rsmp_core::bsde::{bsde_stability_check, solve_variation_cost_second};
use rsmp_core::problem::ParamValue;
use rsmp_core::reproduce::{example2_problem, BaseRun, Numerics};
use rsmp_core::spike::run_spike;
use rsmp_core::*;

fn params(entries: &[(&str, f64)]) -> Params {
    entries.iter().map(|(k, v)| (k.to_string(), ParamValue::Scalar(*v))).collect()
}

fn affine(entries: &[(&str, f64)]) -> ControlProblem {
    build_registry_problem("affine", &params(entries)).unwrap()
}

fn base(problem: &ControlProblem, u: f64, steps: usize, paths: usize, second: bool) -> BaseRun {
    BaseRun::new(problem, &ControlProcess::constant(&[u]), &Numerics::new(steps, paths, 0), second).unwrap()
}

#[test]
fn frozen_state_returns_terminal_value() {
    let problem = affine(&[("B", 0.0), ("H", 0.0), ("g", 1.0), ("x0", 0.7)]);
    let run = base(&problem, 0.0, 16, 32, false);
    assert!((run.cost.y0.mean - 0.7).abs() < 1e-12, "{:?}", run.cost.y0);
    assert!(run.cost.z.max_abs() < 1e-12, "{}", run.cost.z.max_abs());
}

#[test]
fn brownian_terminal_is_its_own_representation() {
    // x = x0 + W, h = x: y_k = x_k, z = 1
    let problem = affine(&[("B", 0.0), ("D", 1.0), ("H", 0.0), ("g", 1.0), ("x0", 0.0)]);
    let run = base(&problem, 0.0, 32, 2048, false);
    let state = run.paths.state().unwrap();
    for k in [0, 8, 16, 31] {
        for m in 0..50 {
            assert!((run.cost.y.at(k, m)[0] - state.at(k, m)[0]).abs() < 1e-6);
        }
    }
    let z: f64 = (0..32).map(|k| run.cost.z.node(k).iter().sum::<f64>() / 2048.0).sum::<f64>() / 32.0;
    assert!((z - 1.0).abs() < 1e-6, "mean z = {z}");
}

#[test]
fn example1_cost_matches_linear_bsde_closed_form() {
    for (beta, steps) in [(0.0, 256), (0.5, 256)] {
        let p: Params = params(&[("a", 1.0), ("beta", beta), ("gamma", 0.0)]);
        let problem = build_registry_problem("example1", &p).unwrap();
        let run = base(&problem, 0.5, steps, 1024, false);
        let exact = 0.5 * f64::exp(beta);
        // Euler inflates |x|² by O(h) per unit time
        let tol = 3.0 * run.cost.y0.se + 2.0 / steps as f64;
        assert!((run.cost.y0.mean - exact).abs() < tol, "β = {beta}: {:?}", run.cost.y0);
    }
}

#[test]
fn zero_driver_is_a_martingale() {
    let problem = affine(&[("A", 0.3), ("D", 0.5), ("H", 2.0), ("g", 0.4)]);
    let run = base(&problem, 0.2, 32, 4096, false);
    let state = run.paths.state().unwrap();
    let terminal = Estimate::from_samples((0..4096).map(|m| problem.coef().terminal(state.at(32, m))));
    assert!((run.cost.y0.mean - terminal.mean).abs() <= 3.0 * terminal.se);
}

#[test]
fn terminal_conditions_are_exact() {
    let problem = example2_problem(-1.0).unwrap();
    let run = base(&problem, 1.0, 16, 256, true);
    let adj2 = run.adj2.as_ref().unwrap();
    let state = run.paths.state().unwrap();
    for m in 0..256 {
        let x = state.at(16, m)[0];
        assert_eq!(run.cost.y.at(16, m)[0], problem.coef().terminal(&[x]));
        assert_eq!(run.adj1.p.at(16, m)[0], -(x - 1.0));
        assert_eq!(adj2.p.at(16, m)[0], -1.0);
    }
}

#[test]
fn no_terminal_gradient_no_adjoint() {
    let problem = affine(&[("A", 0.4), ("D", 0.3), ("H", 0.0), ("g", 0.0)]);
    let run = base(&problem, 0.5, 16, 128, true);
    assert_eq!(run.adj1.p.max_abs(), 0.0);
    assert_eq!(run.adj1.q.max_abs(), 0.0);
    let adj2 = run.adj2.unwrap();
    assert_eq!(adj2.p.max_abs(), 0.0);
    assert_eq!(adj2.q.max_abs(), 0.0);
}

#[test]
fn scalar_linear_adjoint() {
    let alpha = 0.7;
    let problem = affine(&[("A", alpha), ("D", 0.3), ("H", 0.0), ("g", 1.0)]);
    let steps = 128;
    let run = base(&problem, 0.0, steps, 256, false);
    let h = 1.0 / steps as f64;
    for k in 0..=steps {
        let exact = (alpha * (1.0 - run.paths.grid().t(k))).exp();
        assert!((run.adj1.p.at(k, 3)[0] - exact).abs() < h, "k = {k}");
    }
    let q = Estimate::from_samples(run.adj1.q.as_slice().iter().copied());
    assert!(q.mean.abs() < 1e-6);
}

#[test]
fn second_adjoint_is_symmetric() {
    let problem = rsmp_core::reproduce::example1_problem().unwrap();
    let run = base(&problem, 0.5, 32, 256, true);
    let pm = run.adj2.unwrap().p;
    for k in 0..=32 {
        for m in 0..256 {
            let v = pm.at(k, m);
            assert_eq!(v[1], v[2]);
        }
    }
}

#[test]
fn example2_second_adjoint_grows_backward() {
    // dP = -P dt with P(T) = h_xx = s
    for s in [1.0, -1.0] {
        let problem = example2_problem(s).unwrap();
        let run = base(&problem, 0.0, 256, 256, true);
        let p0 = run.adj2.unwrap().p.at(0, 0)[0];
        assert!((p0 - s * std::f64::consts::E).abs() < 0.02, "s = {s}: P(0) = {p0}");
    }
}

#[test]
fn empty_spike_gives_zero_variations() {
    let problem = rsmp_core::reproduce::example1_problem().unwrap();
    let run = base(&problem, 0.5, 16, 128, true);
    let basis = RegressionBasis::default();
    let spike = SpikeSpec::empty(*run.paths.grid(), ControlProcess::constant(&[-0.5])).unwrap();
    let y1 = solve_variation_cost_first(&problem, &spike, &run.paths, &run.cost, &run.adj1, &basis).unwrap();
    assert_eq!(y1.y.max_abs(), 0.0);
    let gamma = integrate_gamma(&problem, &run.paths, &run.cost).unwrap();
    let dual = gamma_duality_y1(&problem, &spike, &run.paths, &run.cost, &run.adj1, &gamma).unwrap();
    assert_eq!(dual.mean, 0.0);
    let x1 = Field::zeros(17, 128, 2);
    let adj2 = run.adj2.as_ref().unwrap();
    let y2 = solve_variation_cost_second(&problem, &spike, &run.paths, &x1, &run.cost, &run.adj1, adj2, &basis).unwrap();
    assert_eq!(y2.y.max_abs(), 0.0);
}

#[test]
fn positive_sign_second_variation_is_positive() {
    let problem = example2_problem(1.0).unwrap();
    let u = ControlProcess::constant(&[0.0]);
    let run = base(&problem, 0.0, 128, 1024, true);
    let spike = SpikeSpec::new(*run.paths.grid(), &[(0.0, 0.125)], ControlProcess::constant(&[1.0])).unwrap();
    let spiked = run_spike(&problem, &u, &spike, &run.paths.noise_only()).unwrap();
    let y2 = solve_variation_cost_second(
        &problem,
        &spike,
        &run.paths,
        &spiked.x1,
        &run.cost,
        &run.adj1,
        run.adj2.as_ref().unwrap(),
        &RegressionBasis::default(),
    )
    .unwrap();
    assert!(y2.y0.mean > 3.0 * y2.y0.se, "{:?}", y2.y0);
}

#[test]
fn affine_duality_within_standard_errors() {
    let problem = affine(&[("A", 0.2), ("D", 0.3), ("H", 0.0), ("g", 1.0), ("R", 0.0), ("fy", 0.3), ("fz", 0.2)]);
    let run = base(&problem, 0.0, 64, 2048, false);
    let spike = SpikeSpec::new(*run.paths.grid(), &[(0.25, 0.5)], ControlProcess::constant(&[0.5])).unwrap();
    let basis = RegressionBasis::default();
    let y1 = solve_variation_cost_first(&problem, &spike, &run.paths, &run.cost, &run.adj1, &basis).unwrap();
    let gamma = integrate_gamma(&problem, &run.paths, &run.cost).unwrap();
    let dual = gamma_duality_y1(&problem, &spike, &run.paths, &run.cost, &run.adj1, &gamma).unwrap();
    assert!(dual.mean > 0.0);
    assert!((y1.y0.mean - dual.mean).abs() <= 3.0 * y1.y0.se.hypot(dual.se), "{:?} vs {dual:?}", y1.y0);
}

#[test]
fn stability_report() {
    let basis = RegressionBasis::default();
    let linear = affine(&[("A", 0.2), ("D", 0.4), ("H", 1.0)]);
    let run = base(&linear, 0.0, 64, 2048, false);
    let report = bsde_stability_check(&linear, &run.paths, &[0.0, 0.1, 0.01], &basis).unwrap();
    assert_eq!(report.entries[0].ratio, 0.0);
    assert!(report.passed);
    for e in &report.entries[1..] {
        // conditional expectation contracts in L²
        assert!(e.ratio <= 1.05, "{e:?}");
    }
    let problem = rsmp_core::reproduce::example1_problem().unwrap();
    let run = base(&problem, 0.5, 64, 2048, false);
    let report = bsde_stability_check(&problem, &run.paths, &[1e-1, 1e-2, 1e-3], &basis).unwrap();
    assert!(report.passed && report.spread <= 2.0, "{report:?}");
    assert!(bsde_stability_check(&problem, &run.paths, &[-1.0], &basis).is_err());
}

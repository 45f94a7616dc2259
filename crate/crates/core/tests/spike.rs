use rsmp_core::problem::ParamValue;
use rsmp_core::reproduce::{example2_problem, BaseRun, Numerics};
use rsmp_core::spike::{
    cost_residual_second, run_spike, state_residuals, taylor_expansion, WindowAnchor, MIN_WINDOW_STEPS,
};
use rsmp_core::*;

fn grid(steps: usize) -> TimeGrid {
    TimeGrid::new(1.0, steps).unwrap()
}

fn value(u: &ControlProcess, k: usize, t: f64) -> f64 {
    let mut out = [0.0];
    u.eval(k, t, &[0.0], &mut out);
    out[0]
}

fn example1_plain() -> ControlProblem {
    let p: Params = [("a", 1.0), ("beta", 0.0), ("gamma", 0.0)]
        .iter()
        .map(|(k, v)| (k.to_string(), ParamValue::Scalar(*v)))
        .collect();
    build_registry_problem("example1", &p).unwrap()
}

#[test]
fn empty_windows_keep_the_base_control() {
    let g = grid(20);
    let base = ControlProcess::PiecewiseConstant((0..20).map(|k| vec![k as f64 / 20.0]).collect());
    let spike = SpikeSpec::empty(g, ControlProcess::constant(&[1.0])).unwrap();
    let u = build_spike(&base, &spike);
    for k in 0..20 {
        assert_eq!(value(&u, k, g.t(k)), value(&base, k, g.t(k)));
    }
    assert_eq!(spike.measure(), 0.0);
}

#[test]
fn leading_window_switches_control() {
    let g = grid(100);
    let spike = SpikeSpec::new(g, &[(0.0, 0.1)], ControlProcess::constant(&[1.0])).unwrap();
    let u = build_spike(&ControlProcess::constant(&[0.0]), &spike);
    for k in 0..100 {
        assert_eq!(value(&u, k, g.t(k)), if k < 10 { 1.0 } else { 0.0 }, "k = {k}");
    }
}

#[test]
fn two_windows_add_up() {
    let g = grid(100);
    let eps = 0.1;
    let spike = SpikeSpec::new(g, &[(0.0, eps / 2.0), (0.5, 0.5 + eps / 2.0)], ControlProcess::constant(&[1.0])).unwrap();
    assert!((spike.measure() - eps).abs() < 1e-12);
    assert_eq!(spike.windows(), &[0..5, 50..55]);
}

#[test]
fn malformed_windows_are_rejected() {
    let g = grid(100);
    let one = ControlProcess::constant(&[1.0]);
    assert!(SpikeSpec::new(g, &[(0.0, 0.2), (0.1, 0.3)], one.clone()).is_err());
    assert!(SpikeSpec::new(g, &[(0.0, 0.105)], one.clone()).is_err());
    assert!(SpikeSpec::snapped(g, &[(0.0, 0.105)], one.clone()).is_ok());
    assert!(SpikeSpec::new(g, &[(0.9, 1.2)], one.clone()).is_err());
    let short = SpikeSpec::new(g, &[(0.0, 0.05)], one).unwrap();
    assert!(short.check_resolvable().is_err());
    assert_eq!(MIN_WINDOW_STEPS, 8);
}

#[test]
fn empty_spike_has_zero_residuals() {
    let problem = example2_problem(1.0).unwrap();
    let noise = sample_for(&problem, 32, 64, 0).unwrap();
    let spike = SpikeSpec::empty(grid(32), ControlProcess::constant(&[1.0])).unwrap();
    let r = state_residuals(&problem, &ControlProcess::constant(&[0.0]), &spike, &noise).unwrap();
    for e in [r.diff_8, r.x1_8, r.first_2, r.x2_2, r.second_2] {
        assert_eq!(e.mean, 0.0);
    }
}

#[test]
fn replacement_equal_to_base_changes_nothing() {
    let problem = example1_plain();
    let noise = sample_for(&problem, 64, 64, 0).unwrap();
    let base = ControlProcess::constant(&[0.5]);
    let spike = SpikeSpec::new(grid(64), &[(0.25, 0.5)], base.clone()).unwrap();
    let run = run_spike(&problem, &base, &spike, &noise).unwrap();
    assert_eq!(run.base.state().unwrap(), run.perturbed.state().unwrap());
    let r = run.state_residuals().unwrap();
    for e in [r.diff_8, r.x1_8, r.first_2, r.x2_2, r.second_2] {
        assert_eq!(e.mean, 0.0);
    }
    let basis = RegressionBasis::default();
    let yb = solve_cost_bsde(&problem, &run.base, &basis).unwrap();
    let ye = solve_cost_bsde(&problem, &run.perturbed, &basis).unwrap();
    assert_eq!(yb.y.as_slice(), ye.y.as_slice());
}

#[test]
fn rate_fit_on_synthetic_ladders() {
    let eps: Vec<f64> = (3..=6).map(|k| 2f64.powi(-k)).collect();
    let quartic: Vec<f64> = eps.iter().map(|e| e.powi(4)).collect();
    let fit = fit_rate(&eps, &quartic).unwrap();
    assert!((fit.slope - 4.0).abs() < 1e-10 && fit.half_width < 1e-8);
    let octic: Vec<f64> = eps.iter().map(|e| 3.7 * e.powi(8)).collect();
    assert!((fit_rate(&eps, &octic).unwrap().slope - 8.0).abs() < 1e-10);
    let zeros = fit_rate(&eps, &[0.0; 4]).unwrap();
    assert!(zeros.exact && zeros.slope.is_infinite());
    let mut holed = quartic.clone();
    holed[3] = 0.0;
    let fit = fit_rate(&eps, &holed).unwrap();
    assert_eq!(fit.used, vec![true, true, true, false]);
    assert!((fit.slope - 4.0).abs() < 1e-10);
    holed[2] = 0.0;
    assert!(fit_rate(&eps, &holed).is_err());
    assert!(fit_rate(&eps[..3], &quartic[..3]).is_err());
    let rising: Vec<f64> = eps.iter().rev().copied().collect();
    assert!(fit_rate(&rising, &quartic).is_err());
}

#[test]
fn second_order_residual_requires_classification() {
    let problem = example2_problem(1.0).unwrap();
    let base_u = ControlProcess::constant(&[0.0]);
    let num = Numerics::new(32, 64, 0);
    let base = BaseRun::new(&problem, &base_u, &num, true).unwrap();
    let verdict = base.classify(&problem, &[vec![1.0]], None).unwrap();
    let spike = SpikeSpec::new(*base.paths.grid(), &[(0.0, 0.25)], ControlProcess::constant(&[-1.0])).unwrap();
    let run = run_spike(&problem, &base_u, &spike, &base.paths.noise_only()).unwrap();
    let basis = RegressionBasis::default();
    let spiked = solve_cost_bsde(&problem, &run.perturbed, &basis).unwrap();
    let adj2 = base.adj2.as_ref().unwrap();
    let y2 = solve_variation_cost_second(&problem, &spike, &run.base, &run.x1, &base.cost, &base.adj1, adj2, &basis).unwrap();
    // -1 lies outside the classified region {1}
    let err = cost_residual_second(&base_u, &run, &spike, &verdict, &base.cost, &spiked, &base.adj1, adj2, &y2);
    assert!(matches!(err, Err(Error::Precondition(_))));
}

#[test]
fn singular_spike_has_no_first_order_cost_variation() {
    let problem = example2_problem(1.0).unwrap();
    let base = BaseRun::new(&problem, &ControlProcess::constant(&[0.0]), &Numerics::new(32, 128, 0), false).unwrap();
    let spike = SpikeSpec::new(*base.paths.grid(), &[(0.0, 0.25)], ControlProcess::constant(&[1.0])).unwrap();
    let y1 = solve_variation_cost_first(&problem, &spike, &base.paths, &base.cost, &base.adj1, &RegressionBasis::default()).unwrap();
    assert!(y1.y.max_abs() == 0.0 && y1.z.max_abs() == 0.0);
}

#[test]
fn example1_state_expansion_orders() {
    // N = 256, M = 1024, seed 0; measured 7.98, 7.99, 4.11, 4.11, 6.35 and 3.99 ± 0.014
    let problem = example1_plain();
    let noise = sample_for(&problem, 256, 1024, 0).unwrap();
    let ladder = [0.25, 0.125, 0.0625, 0.03125];
    let report = taylor_expansion(
        &problem,
        &ControlProcess::constant(&[0.5]),
        &ControlProcess::constant(&[-0.5]),
        WindowAnchor::Start(0.0),
        &ladder,
        &noise,
        &RegressionBasis::default(),
        None,
    )
    .unwrap();
    let slope = |name: &str| report.fit(name).unwrap().slope;
    assert!((slope("state_diff_8") - 8.0).abs() <= 0.5);
    assert!((slope("state_x1_8") - 8.0).abs() <= 0.5);
    assert!((slope("state_first_2") - 4.0).abs() <= 0.5);
    assert!((slope("state_x2_2") - 4.0).abs() <= 0.5);
    let second = report.fit("state_second_2").unwrap();
    assert!(second.slope > 4.0 - second.half_width);
    // the y₁ regression bias is O(ε), so the cost residual sits on an ε⁴ floor here
    assert!((slope("cost_first_4") - 4.0).abs() <= 0.5);
    for pair in report.levels.windows(2) {
        let (a, b) = (pair[0].state.first_2, pair[1].state.first_2);
        assert!(b.mean <= a.mean + 2.0 * a.se.hypot(b.se));
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsmp_core::bsde::{solve_cost_bsde, solve_first_adjoint, RegressionBasis};
use rsmp_core::oracles::{example2_p, Example1Oracle};
use rsmp_core::principle::{
    delta_g, delta_h, directional_derivative_first, hamiltonian, second_order_quantity, NodePoint,
};
use rsmp_core::problem::ParamValue;
use rsmp_core::reproduce::{example2_problem, BaseRun, Numerics};
use rsmp_core::{
    build_registry_problem, integrate_gamma, ControlProblem, ControlProcess, Error, Estimate, Params, Singularity,
    Verdict,
};

fn params(entries: &[(&str, ParamValue)]) -> Params {
    entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Scalar affine problem with `b = u`, `σ = 0.3`, `f = fy·y + u²`, `h = x`.
/// Along any constant control `p(t) = exp(fy (T - t))`, so
/// `δH(t, v) = p (v - ū) + v² - ū²` in closed form.
fn rigged(fy: f64, points: &[f64], f0: f64) -> ControlProblem {
    build_registry_problem(
        "affine",
        &params(&[
            ("A", 0.0.into()),
            ("B", 1.0.into()),
            ("D", 0.3.into()),
            ("H", 0.0.into()),
            ("g", 1.0.into()),
            ("R", 2.0.into()),
            ("fy", fy.into()),
            ("f0", f0.into()),
            ("u_points", ParamValue::Matrix(points.iter().map(|v| vec![*v]).collect())),
        ]),
    )
    .unwrap()
}

const GRID5: [f64; 5] = [-1.0, -0.5, 0.0, 0.5, 1.0];

fn run(problem: &ControlProblem, u: f64, steps: usize, paths: usize) -> BaseRun {
    BaseRun::new(problem, &ControlProcess::constant(&[u]), &Numerics::new(steps, paths, 0), false).unwrap()
}

#[test]
fn zero_adjoints_leave_only_the_generator() {
    let problem = rigged(0.0, &GRID5, 0.0);
    let x = [0.7];
    let z = [0.2];
    let pt = NodePoint { t: 0.3, x: &x, y: 0.4, z: &z, u: &[0.0] };
    for &v in &GRID5 {
        let h = hamiltonian(&problem, pt, &[v], &[0.0], &[0.0]);
        let f = problem.coef().generator(0.3, &x, 0.4, &z, &[v]);
        assert_eq!(h.h, f);
        assert_eq!(h.delta_h(&[v]), v * v);
    }
}

#[test]
fn example1_hamiltonian_is_flat_in_the_control() {
    let oracle = Example1Oracle { a: 1.0, beta: 0.5, gamma: 0.3, horizon: 1.0, u: 0.5 };
    let problem = rsmp_core::reproduce::example1_problem().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let t = rng.random_range(0.0..1.0);
        let w = rng.random_range(-2.0..2.0);
        let v = rng.random_range(-1.0..1.0);
        let o = oracle.eval(t, w);
        let pt = NodePoint { t, x: &o.x, y: 0.1, z: &[0.0], u: &[0.5] };
        assert!(delta_h(&problem, &pt, &[v], &o.p).abs() < 1e-14);
    }
}

#[test]
fn example2_hamiltonian_vanishes_with_zero_adjoints() {
    let problem = example2_problem(1.0).unwrap();
    for &v in &[-1.0, 0.0, 1.0] {
        let pt = NodePoint { t: 0.5, x: &[1.3], y: 0.0, z: &[0.0], u: &[0.0] };
        assert_eq!(delta_h(&problem, &pt, &[v], &[0.0]), 0.0);
    }
}

#[test]
fn base_control_gives_exact_zeros() {
    let problem = rigged(0.4, &GRID5, 0.0);
    let pt = NodePoint { t: 0.2, x: &[0.9], y: 0.3, z: &[0.1], u: &[0.5] };
    let (p, q, pm) = ([1.7], [-0.4], [2.5]);
    assert_eq!(delta_h(&problem, &pt, &[0.5], &p), 0.0);
    assert_eq!(delta_g(&problem, &pt, &[0.5], &p, &q).delta_g, vec![0.0]);
    assert_eq!(second_order_quantity(&problem, &pt, &[0.5], &p, &q, &pm), 0.0);
}

#[test]
fn example1_second_order_quantity_cancels() {
    let oracle = Example1Oracle { a: 1.0, beta: 0.5, gamma: 0.3, horizon: 1.0, u: 0.5 };
    let problem = rsmp_core::reproduce::example1_problem().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let t = rng.random_range(0.0..1.0);
        let w = rng.random_range(-2.0..2.0);
        let v = rng.random_range(-1.0..1.0);
        let o = oracle.eval(t, w);
        let pt = NodePoint { t, x: &o.x, y: 0.0, z: &[0.0], u: &[0.5] };
        let dg = delta_g(&problem, &pt, &[v], &o.p, &o.q).delta_g;
        let expect = oracle.delta_g(t, w, v);
        assert!((dg[0] - expect[0]).abs() < 1e-12 && (dg[1] - expect[1]).abs() < 1e-12);
        let disc = (0.5 * (1.0 - t)).exp();
        let db = oracle.delta_b(t, w, v);
        let dg_db = dg[0] * db[0] + dg[1] * db[1];
        assert!((dg_db + disc * (v - 0.5) * (v - 0.5)).abs() < 1e-12);
        assert!((oracle.delta_b_p_delta_b(t, w, v) - disc * (v - 0.5) * (v - 0.5)).abs() < 1e-12);
        let s = second_order_quantity(&problem, &pt, &[v], &o.p, &o.q, &o.pmat);
        assert!(s.abs() < 1e-12, "S = {s}");
    }
}

#[test]
fn example2_negative_sign_second_order_quantity() {
    let problem = example2_problem(-1.0).unwrap();
    let pm = example2_p(-1.0, 0.0, 0.0, 0.0, 1.0);
    let pt = NodePoint { t: 0.0, x: &[1.0], y: 0.0, z: &[0.0], u: &[0.0] };
    let s = second_order_quantity(&problem, &pt, &[1.0], &[0.0], &[0.0], &[pm]);
    assert!((s + 0.5 * std::f64::consts::E).abs() < 1e-12);
    assert!((s - (-1.3591409142295225)).abs() < 1e-12);
}

#[test]
fn verdict_rules() {
    let e = |mean, se| Estimate { mean, se };
    assert_eq!(Verdict::classify(&e(-0.02, 0.001), 0.01), Verdict::Violated);
    assert_eq!(Verdict::classify(&e(-0.005, 0.1), 0.01), Verdict::Satisfied);
    assert_eq!(Verdict::classify(&e(-0.011, 0.01), 0.01), Verdict::Inconclusive);
    assert_eq!(Verdict::classify(&e(0.0, 0.0), 0.0), Verdict::Satisfied);
    use Verdict::*;
    assert_eq!(Verdict::combine([Satisfied, Inconclusive, Violated]), Violated);
    assert_eq!(Verdict::combine([Satisfied, Inconclusive]), Inconclusive);
    assert_eq!(Verdict::combine([Satisfied, Satisfied]), Satisfied);
}

#[test]
fn rigged_minimiser_is_satisfied_and_others_violate() {
    let problem = rigged(0.0, &GRID5, 0.0);
    // argmin of v + v² is -1/2
    let best = run(&problem, -0.5, 16, 256);
    let report = best.first_order(&problem, None).unwrap();
    assert_eq!(report.verdict, Verdict::Satisfied);
    for rec in &report.records {
        let v = rec.v[0];
        let brute = (v + 0.5) + v * v - 0.25;
        assert!((rec.mean - brute).abs() < 1e-10, "{rec:?}");
    }
    let verdict = best.classify(&problem, &[vec![-0.5]], None).unwrap();
    assert_eq!(verdict.classification, Singularity::Nonsingular);
    assert!(verdict.flat_on_region);
    assert_eq!(verdict.singular_set, vec![vec![-0.5]]);

    for &u in &[-1.0, 0.0, 0.5, 1.0] {
        let other = run(&problem, u, 16, 256);
        assert_eq!(other.first_order(&problem, None).unwrap().verdict, Verdict::Violated, "u = {u}");
    }
}

#[test]
fn second_order_check_refuses_without_singularity() {
    let problem = rigged(0.0, &GRID5, 0.0);
    let base = BaseRun::new(&problem, &ControlProcess::constant(&[-0.5]), &Numerics::new(16, 128, 0), true).unwrap();
    let verdict = base.classify(&problem, &[vec![1.0]], None).unwrap();
    assert!(!verdict.flat_on_region);
    assert!(matches!(base.second_order(&problem, &verdict, None), Err(Error::Precondition(_))));
}

#[test]
fn single_point_control_set_is_vacuous() {
    let problem = rigged(0.0, &[0.3], 0.0);
    let report = run(&problem, 0.3, 16, 128).first_order(&problem, None).unwrap();
    assert_eq!(report.verdict, Verdict::Satisfied);
    assert!(report.records.iter().all(|r| r.mean == 0.0));
}

#[test]
fn grid_order_does_not_change_verdicts() {
    let a = rigged(0.3, &GRID5, 0.0);
    let shuffled = [0.5, -1.0, 1.0, 0.0, -0.5];
    let b = rigged(0.3, &shuffled, 0.0);
    let ra = run(&a, 0.0, 16, 128).first_order(&a, Some(0.01)).unwrap();
    let rb = run(&b, 0.0, 16, 128).first_order(&b, Some(0.01)).unwrap();
    assert_eq!(ra.verdict, rb.verdict);
    for rec in &ra.records {
        let other = rb.record(rec.step, &rec.v).unwrap();
        assert_eq!(rec.mean, other.mean);
        assert_eq!(rec.verdict, other.verdict);
    }
}

#[test]
fn constant_shift_of_the_generator_is_invisible() {
    let a = rigged(0.3, &GRID5, 0.0);
    let b = rigged(0.3, &GRID5, 2.5);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let x = [rng.random_range(-2.0..2.0)];
        let z = [rng.random_range(-1.0..1.0)];
        let pt = NodePoint { t: rng.random_range(0.0..1.0), x: &x, y: rng.random_range(-1.0..1.0), z: &z, u: &[0.5] };
        let (p, q, pm) = ([rng.random_range(-2.0..2.0)], [rng.random_range(-1.0..1.0)], [rng.random_range(-2.0..2.0)]);
        for &v in &GRID5 {
            assert!((delta_h(&a, &pt, &[v], &p) - delta_h(&b, &pt, &[v], &p)).abs() < 1e-12);
            let (ga, gb) = (delta_g(&a, &pt, &[v], &p, &q), delta_g(&b, &pt, &[v], &p, &q));
            assert!((ga.delta_g[0] - gb.delta_g[0]).abs() < 1e-12);
            let sa = second_order_quantity(&a, &pt, &[v], &p, &q, &pm);
            let sb = second_order_quantity(&b, &pt, &[v], &p, &q, &pm);
            assert!((sa - sb).abs() < 1e-12);
        }
    }
}

#[test]
fn directional_derivative_matches_closed_form_integrand() {
    // p(t) γ(t) = exp(fy T) and δf = 0 for ū = -1/2 → u = 1/2, δb = 1.
    let fy = 0.5;
    let problem = rigged(fy, &GRID5, 0.0);
    let steps = 128;
    let base = run(&problem, -0.5, steps, 256);
    let gamma = integrate_gamma(&problem, &base.paths, &base.cost).unwrap();
    let candidate = ControlProcess::constant(&[0.5]);
    let j1 = directional_derivative_first(&problem, &candidate, &base.paths, &base.cost, &base.adj1, &gamma).unwrap();
    let exact = fy.exp();
    assert!(j1.mean > 0.0);
    assert!((j1.mean - exact).abs() <= 3.0 * j1.se + 1.0 / steps as f64, "{j1:?} vs {exact}");

    let same = ControlProcess::constant(&[-0.5]);
    let zero = directional_derivative_first(&problem, &same, &base.paths, &base.cost, &base.adj1, &gamma).unwrap();
    assert_eq!(zero.mean, 0.0);
}

#[test]
fn example1_is_fully_singular_and_derivative_vanishes() {
    let problem = rsmp_core::reproduce::example1_problem().unwrap();
    let base = run(&problem, 0.5, 64, 512);
    let verdict = base.classify(&problem, problem.control_set().grid(), None).unwrap();
    assert_eq!(verdict.classification, Singularity::FullySingular);
    let gamma = integrate_gamma(&problem, &base.paths, &base.cost).unwrap();
    let j1 = directional_derivative_first(
        &problem,
        &ControlProcess::constant(&[-0.5]),
        &base.paths,
        &base.cost,
        &base.adj1,
        &gamma,
    )
    .unwrap();
    assert!(j1.mean.abs() <= 3.0 * j1.se + 0.05, "{j1:?}");
}

#[test]
fn example2_zero_control_is_fully_singular() {
    let problem = example2_problem(1.0).unwrap();
    let base = run(&problem, 0.0, 32, 256);
    let verdict = base.classify(&problem, problem.control_set().grid(), None).unwrap();
    assert_eq!(verdict.classification, Singularity::FullySingular);
}

#[test]
fn basis_is_shared_by_cost_and_adjoint() {
    // sanity: the rigged adjoint is deterministic and equals exp(fy (T - t))
    let problem = rigged(0.5, &GRID5, 0.0);
    let paths = run(&problem, 0.0, 64, 128).paths;
    let basis = RegressionBasis::default();
    let cost = solve_cost_bsde(&problem, &paths, &basis).unwrap();
    let adj = solve_first_adjoint(&problem, &paths, &cost, &basis).unwrap();
    let h = paths.grid().h();
    for k in 0..=64 {
        let t = paths.grid().t(k);
        let exact = (0.5 * (1.0 - t)).exp();
        assert!((adj.p.at(k, 7)[0] - exact).abs() < 0.5 * h, "k = {k}");
    }
}

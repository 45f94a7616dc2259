use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rsmp_core::oracles::Example1Oracle;
use rsmp_core::principle::{delta_g, delta_h, second_order_quantity, NodePoint};
use rsmp_core::problem::ParamValue;
use rsmp_core::reproduce::{invariant_case, random_affine_params, random_problem};
use rsmp_core::sde::{integrate_variation_first, sample_brownian};
use rsmp_core::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn solver_invariants_hold_on_random_problems(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (problem, control) = random_problem(&mut rng).unwrap();
        let case = invariant_case(&problem, &control, seed).unwrap();
        prop_assert!(case.passed(), "{case:?}");
    }

    #[test]
    fn brownian_batches_are_reproducible(seed in any::<u64>(), steps in 2usize..40, paths in 1usize..40) {
        let grid = TimeGrid::new(1.0, steps).unwrap();
        let a = sample_brownian(grid, paths, 2, seed).unwrap();
        let b = sample_brownian(grid, paths, 2, seed).unwrap();
        prop_assert_eq!(a.increments(), b.increments());
    }

    #[test]
    fn generator_offset_is_invisible(
        seed in any::<u64>(),
        f0 in -5.0..5.0f64,
        x in prop::array::uniform2(-2.0..2.0f64),
        p in prop::array::uniform2(-2.0..2.0f64),
        q in prop::array::uniform2(-1.0..1.0f64),
        pm in prop::array::uniform3(-2.0..2.0f64),
        u in -1.0..1.0f64,
        v in -1.0..1.0f64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = random_affine_params(&mut rng);
        let mut shifted = base.clone();
        shifted.insert("f0".into(), ParamValue::Scalar(f0));
        let a = build_registry_problem("affine", &base).unwrap();
        let b = build_registry_problem("affine", &shifted).unwrap();
        let pmat = [pm[0], pm[1], pm[1], pm[2]];
        let pt = NodePoint { t: 0.4, x: &x, y: 0.2, z: &[0.1], u: &[u] };
        let close = |l: f64, r: f64| (l - r).abs() <= 1e-12 * (1.0 + l.abs());
        prop_assert!(close(delta_h(&a, &pt, &[v], &p), delta_h(&b, &pt, &[v], &p)));
        let (ga, gb) = (delta_g(&a, &pt, &[v], &p, &q), delta_g(&b, &pt, &[v], &p, &q));
        prop_assert!(ga.delta_g.iter().zip(&gb.delta_g).all(|(l, r)| close(*l, *r)));
        prop_assert!(close(
            second_order_quantity(&a, &pt, &[v], &p, &q, &pmat),
            second_order_quantity(&b, &pt, &[v], &p, &q, &pmat)
        ));
        prop_assert_eq!(delta_h(&a, &pt, &[u], &p), 0.0);
        prop_assert_eq!(second_order_quantity(&a, &pt, &[u], &p, &q, &pmat), 0.0);
    }

    #[test]
    fn example1_closed_forms_are_consistent(
        a in 0.1..2.0f64, beta in -1.0..1.0f64, u in -1.0..1.0f64,
        t in 0.0..1.0f64, w in -3.0..3.0f64, v in -1.0..1.0f64,
    ) {
        let o = Example1Oracle { a, beta, gamma: 0.0, horizon: 1.0, u };
        let x = o.eval(t, w).x;
        prop_assert!((x[0].hypot(x[1]) - 1.0).abs() < 1e-14);
        prop_assert!(o.second_order_quantity(t, w, v).abs() < 1e-13);
    }

    #[test]
    fn first_variation_is_linear_in_the_source(seed in 0u64..1000, scale in 0.1..0.5f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let problem = build_registry_problem("affine", &random_affine_params(&mut rng)).unwrap();
        let noise = sample_for(&problem, 16, 8, seed).unwrap();
        let base = euler_forward(&problem, &ControlProcess::constant(&[0.0]), &noise).unwrap();
        let grid = *noise.grid();
        let once = SpikeSpec::new(grid, &[(0.25, 0.75)], ControlProcess::constant(&[scale])).unwrap();
        let twice = SpikeSpec::new(grid, &[(0.25, 0.75)], ControlProcess::constant(&[2.0 * scale])).unwrap();
        let x1 = integrate_variation_first(&problem, &once, &base).unwrap();
        let x1d = integrate_variation_first(&problem, &twice, &base).unwrap();
        for (l, r) in x1.as_slice().iter().zip(x1d.as_slice()) {
            prop_assert!((2.0 * l - r).abs() <= 1e-12 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn rate_fit_recovers_power_laws(order in 0.5..10.0f64, c in 1e-3..1e3f64) {
        let eps = [0.2f64, 0.1, 0.05, 0.025];
        let norms: Vec<f64> = eps.iter().map(|e| c * e.powf(order)).collect();
        let fit = fit_rate(&eps, &norms).unwrap();
        prop_assert!((fit.slope - order).abs() < 1e-9);
    }

    #[test]
    fn verdicts_respect_dominance(parts in prop::collection::vec(0u8..3, 1..8)) {
        let vs: Vec<Verdict> = parts
            .iter()
            .map(|p| [Verdict::Satisfied, Verdict::Violated, Verdict::Inconclusive][*p as usize])
            .collect();
        let combined = Verdict::combine(vs.iter().copied());
        if vs.contains(&Verdict::Violated) {
            prop_assert_eq!(combined, Verdict::Violated);
        } else if vs.contains(&Verdict::Inconclusive) {
            prop_assert_eq!(combined, Verdict::Inconclusive);
        } else {
            prop_assert_eq!(combined, Verdict::Satisfied);
        }
    }

    #[test]
    fn window_measure_adds_up(starts in prop::collection::btree_set(0usize..12, 1..5), len in 1usize..4) {
        let grid = TimeGrid::new(1.0, 64).unwrap();
        let windows: Vec<(f64, f64)> = starts.iter().map(|s| {
            let a = (*s * 5) as f64 / 64.0;
            (a, a + len as f64 / 64.0)
        }).collect();
        let spike = SpikeSpec::new(grid, &windows, ControlProcess::constant(&[1.0])).unwrap();
        let expect = (starts.len() * len) as f64 / 64.0;
        prop_assert!((spike.measure() - expect).abs() < 1e-12);
    }
}

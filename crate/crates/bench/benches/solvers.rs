use criterion::{criterion_group, criterion_main, Criterion};
use rsmp_bench::example1_paths;
use rsmp_core::{
    euler_forward, first_order_check, sample_for, solve_cost_bsde, solve_first_adjoint, solve_second_adjoint,
    RegressionBasis,
};

const STEPS: usize = 128;
const PATHS: usize = 2048;

fn forward(c: &mut Criterion) {
    let (problem, control, _) = example1_paths(STEPS, PATHS);
    c.bench_function("sample_brownian 128x2048", |b| {
        b.iter(|| sample_for(&problem, STEPS, PATHS, 0).unwrap())
    });
    let noise = sample_for(&problem, STEPS, PATHS, 0).unwrap();
    c.bench_function("euler_forward 128x2048", |b| {
        b.iter(|| euler_forward(&problem, &control, &noise).unwrap())
    });
}

fn backward(c: &mut Criterion) {
    let (problem, _, paths) = example1_paths(STEPS, PATHS);
    let basis = RegressionBasis::default();
    let cost = solve_cost_bsde(&problem, &paths, &basis).unwrap();
    let adj1 = solve_first_adjoint(&problem, &paths, &cost, &basis).unwrap();
    c.bench_function("cost bsde 128x2048", |b| {
        b.iter(|| solve_cost_bsde(&problem, &paths, &basis).unwrap())
    });
    c.bench_function("first adjoint 128x2048", |b| {
        b.iter(|| solve_first_adjoint(&problem, &paths, &cost, &basis).unwrap())
    });
    let mut group = c.benchmark_group("second adjoint");
    group.sample_size(10);
    group.bench_function("128x2048", |b| {
        b.iter(|| solve_second_adjoint(&problem, &paths, &cost, &adj1, &basis).unwrap())
    });
    group.finish();
    c.bench_function("first-order check 128x2048", |b| {
        b.iter(|| first_order_check(&problem, &paths, &cost, &adj1, None).unwrap())
    });
}

criterion_group!(benches, forward, backward);
criterion_main!(benches);

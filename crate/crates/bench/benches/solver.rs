use std::hint::black_box;

use cmpc::av::{AvRunConfig, AvSimulation};
use cmpc::builder::build_cmpc;
use cmpc::toy::{run_closed_loop, toy_cmpc_spec, ToyController, ToyParams};
use cmpc::{solve_qp, SolverOptions};
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn toy_qp(c: &mut Criterion) {
    let problem = build_cmpc(&toy_cmpc_spec(-1.0, 10, None, 1.0, 0.25)).unwrap();
    let opts = SolverOptions::default();
    c.bench_function("qp/toy_cmpc_h10", |b| {
        b.iter(|| solve_qp(black_box(&problem.qp), &opts))
    });
}

fn toy_loop(c: &mut Criterion) {
    let params = ToyParams::default();
    c.bench_function("toy/closed_loop_pop4", |b| {
        b.iter(|| run_closed_loop(&params, ToyController::Cmpc(black_box(0.25)), Some(4)).unwrap())
    });
}

/// One control step (linearize, build, solve, integrate) before and after
/// the door is observed.
fn av_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("av/control_step");
    group.sample_size(30);
    for (name, steps) in [("quiet", 20), ("observed", 70)] {
        let mut sim = AvSimulation::new(AvRunConfig::default(), Some(1.2)).unwrap();
        for _ in 0..steps {
            sim.step().unwrap();
        }
        group.bench_function(name, |b| {
            b.iter_batched(
                || sim.clone(),
                |mut s| s.step().unwrap(),
                BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

criterion_group!(benches, toy_qp, toy_loop, av_step);
criterion_main!(benches);

use std::hint::black_box;

use broker_bench::{wwg_quotes, WWG_PLAN};
use broker_core::model::{QoSConstraints, Strategy};
use broker_core::scheduler::{plan_cost_opt, plan_time_opt, SchedulerParams};
use broker_core::{allocation_cost, expand_jobs, parse_plan};
use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

fn cost_formula(c: &mut Criterion) {
    let prices = [2, 3, 3, 4, 7, 8];
    c.bench_function("allocation_cost", |b| {
        b.iter(|| allocation_cost(black_box(&[64, 9, 7, 6, 42, 37]), black_box(&prices), 300))
    });
}

fn planners(c: &mut Criterion) {
    let (quotes, profile) = wwg_quotes();
    let params = SchedulerParams::default();
    let mut g = c.benchmark_group("plan");
    for jobs in [20, 165, 1000] {
        let qos = QoSConstraints::new(24 * 60, 10_000_000, Strategy::Cost);
        g.bench_with_input(BenchmarkId::new("cost_opt", jobs), &jobs, |b, &n| {
            b.iter(|| plan_cost_opt(n, &quotes, &profile, &qos, 0, 0, &params))
        });
        let qos = QoSConstraints::new(24 * 60, 10_000_000, Strategy::Time);
        g.bench_with_input(BenchmarkId::new("time_opt", jobs), &jobs, |b, &n| {
            b.iter(|| plan_time_opt(n, &quotes, &profile, &qos, 0, 0, &params))
        });
    }
    g.finish();
}

fn plan_expansion(c: &mut Criterion) {
    c.bench_function("parse_and_expand_wwg", |b| {
        b.iter(|| expand_jobs(&parse_plan(black_box(WWG_PLAN)).unwrap()).unwrap())
    });
}

criterion_group!(benches, cost_formula, planners, plan_expansion);
criterion_main!(benches);

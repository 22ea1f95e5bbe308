use broker_bench::wwg_broker;
use broker_core::model::Strategy;
use broker_core::replay;
use criterion::{criterion_group, criterion_main, BatchSize, Criterion};

fn full_runs(c: &mut Criterion) {
    let mut g = c.benchmark_group("wwg_run");
    g.sample_size(20);
    for (name, s) in [("cost", Strategy::Cost), ("time", Strategy::Time)] {
        g.bench_function(name, |b| {
            b.iter_batched(|| wwg_broker(s).0, |mut broker| broker.run().unwrap(), BatchSize::SmallInput)
        });
    }
    g.finish();
}

fn journal_replay(c: &mut Criterion) {
    let (mut broker, journal) = wwg_broker(Strategy::Cost);
    broker.run().unwrap();
    let lines = journal.snapshot();
    c.bench_function("replay_wwg_journal", |b| b.iter(|| replay(&lines).unwrap()));
}

criterion_group!(benches, full_runs, journal_replay);
criterion_main!(benches);

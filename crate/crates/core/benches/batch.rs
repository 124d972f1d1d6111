use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use dcast_core::batch::{run_parallel, run_sequential};
use dcast_core::scenario::Scenario;
use std::hint::black_box;

fn scenarios(count: u64) -> Vec<Scenario> {
    (0..count)
        .map(|seed| {
            let mut s = Scenario::default();
            s.cluster.seed = seed;
            s.cluster.n = 7;
            s.cluster.f = 2;
            s.cluster.duration = 4000;
            s.cluster.protocol = if seed % 2 == 0 {
                "raft"
            } else {
                "hotstuff-chained"
            }
            .into();
            s.channel.loss_prob = 0.05;
            s.channel.latency_min = 3;
            s.channel.latency_max = 20;
            s.workload.rate = 0.3;
            s
        })
        .collect()
}

fn batch(c: &mut Criterion) {
    let mut g = c.benchmark_group("batch");
    g.sample_size(10);
    for count in [8u64, 32] {
        let input = scenarios(count);
        g.bench_with_input(BenchmarkId::new("sequential", count), &input, |b, s| {
            b.iter(|| black_box(run_sequential(s)))
        });
        g.bench_with_input(BenchmarkId::new("parallel", count), &input, |b, s| {
            b.iter(|| black_box(run_parallel(s)))
        });
    }
    g.finish();
}

criterion_group!(benches, batch);
criterion_main!(benches);

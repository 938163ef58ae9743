use andnet_bench::synthetic_set;
use andnet_core::training::train;
use andnet_core::TrainConfig;
use criterion::{criterion_group, criterion_main, Criterion};

fn bench_epoch(c: &mut Criterion) {
    let set = synthetic_set(500, 7);
    let mut group = c.benchmark_group("training");
    group.sample_size(10);
    for defense in [true, false] {
        let config = TrainConfig {
            epochs: 1,
            defense,
            ..TrainConfig::default()
        };
        let name = if defense { "epoch 500 defended" } else { "epoch 500 baseline" };
        group.bench_function(name, |bench| bench.iter(|| train(&config, &set).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, bench_epoch);
criterion_main!(benches);

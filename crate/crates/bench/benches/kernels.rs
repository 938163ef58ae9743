use andnet_bench::{default_network, random_matrix, synthetic_set};
use andnet_core::measures::{loss2_backward, NeuronMeasures};
use andnet_core::network::{backward, classification_loss, forward};
use andnet_core::numerics::matmul;
use andnet_core::scramble::sds_type_b;
use andnet_core::RngStream;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn bench_matmul(c: &mut Criterion) {
    let a = random_matrix(100, 784, 1);
    let b = random_matrix(784, 512, 2);
    c.bench_function("matmul 100x784x512", |bench| {
        bench.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
    });
}

fn bench_passes(c: &mut Criterion) {
    let params = default_network(3);
    let set = synthetic_set(100, 4);
    let trace = forward(&params, set.images()).unwrap();
    let (_, output_grad) = classification_loss(&trace, set.labels()).unwrap();

    c.bench_function("forward batch 100", |bench| {
        bench.iter(|| forward(black_box(&params), black_box(set.images())).unwrap())
    });
    c.bench_function("backward batch 100", |bench| {
        bench.iter(|| backward(black_box(&params), black_box(&trace), black_box(&output_grad)).unwrap())
    });
    c.bench_function("sds type B batch 100", |bench| {
        let mut rng = RngStream::new(5);
        bench.iter(|| sds_type_b(black_box(&params), black_box(&trace), 100, &mut rng).unwrap())
    });

    let sds = sds_type_b(&params, &trace, 100, &mut RngStream::new(6)).unwrap();
    let back = backward(&params, &trace, &output_grad).unwrap();
    let measures = NeuronMeasures::compute(&trace, &sds, &back.activation_grads).unwrap();
    c.bench_function("loss2 backward batch 100", |bench| {
        bench.iter(|| loss2_backward(black_box(&params), &trace, &sds, &measures).unwrap())
    });
}

criterion_group!(benches, bench_matmul, bench_passes);
criterion_main!(benches);

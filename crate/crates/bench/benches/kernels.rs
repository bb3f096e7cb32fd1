use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use snri_core::grad::{Conv1dSpec, Graph, Tensor};
use snri_core::metrics::{sar_decompose, snri};
use snri_core::models::{JointWeights, ModelConfig, Models};
use snri_core::ThresholdConfig;

fn noise(seed: u64, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn bench_conv1d(c: &mut Criterion) {
    let x = Tensor::matrix(400, 64, noise(1, 400 * 64)).unwrap();
    let w = Tensor::matrix(3 * 64, 64, noise(2, 3 * 64 * 64)).unwrap();
    c.bench_function("conv1d 400x64 k3 d4 forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (xv, wv) = (g.param(&x), g.param(&w));
            let y = g.conv1d(xv, wv, Conv1dSpec::same(3, 4)).unwrap();
            let sq = g.square(y).unwrap();
            let loss = g.sum(sq).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn bench_snri_net(c: &mut Criterion) {
    let models = Models::new(&ModelConfig::default(), ThresholdConfig::default(), JointWeights::default()).unwrap();
    let params = models.init(0);
    let x = noise(3, 4000);
    c.bench_function("snri_net 0.25 s forward+backward", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true);
            let xv = g.constant(Tensor::column(x.clone()));
            let lambda = g.constant(Tensor::full(&[1, 1], 6.0));
            let (y1, _) = models.snri_net.forward(&mut g, &bound, xv, Some(lambda)).unwrap();
            let sq = g.square(y1).unwrap();
            let loss = g.sum(sq).unwrap();
            black_box(g.backward(loss).unwrap());
        })
    });
}

fn bench_metrics(c: &mut Criterion) {
    let (s, n, y) = (noise(4, 16_000), noise(5, 16_000), noise(6, 16_000));
    let mut group = c.benchmark_group("metrics 1 s");
    group.bench_function("snri", |b| b.iter(|| snri(black_box(&s), &n, &y).unwrap()));
    group.bench_function("sar_decompose", |b| b.iter(|| sar_decompose(black_box(&s), &n, &y, 1e-3).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_conv1d, bench_snri_net, bench_metrics);
criterion_main!(benches);

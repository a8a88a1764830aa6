use actmil::cca::fit_cca;
use actmil::model::{ModelConfig, Network, Variant};
use actmil::train::{train, TrainConfig};
use actmil_bench::{cca_views, toy_corpus};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn train_steps(c: &mut Criterion) {
    let corpus = toy_corpus(20);
    let mut g = c.benchmark_group("train");
    g.sample_size(10);
    for v in [Variant::BboxOnly, Variant::Fusion2] {
        let net = Network::build(ModelConfig::new(v, 8)).unwrap();
        let cfg = TrainConfig {
            total_iters: 5,
            ..TrainConfig::hico_desk()
        };
        g.bench_function(format!("5 steps {v:?}"), |bench| {
            bench.iter(|| train(black_box(net.clone()), &corpus, &cfg).unwrap())
        });
    }
    g.finish();
}

fn cca(c: &mut Criterion) {
    let mut g = c.benchmark_group("fit_cca");
    for (n, dx) in [(500, 8), (500, 64)] {
        let (x, y) = cca_views(n, dx, 300);
        g.bench_function(format!("n={n} dx={dx} dy=300"), |bench| {
            bench.iter(|| fit_cca(black_box(&x), &y, 1e-3, dx).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, train_steps, cca);
criterion_main!(benches);

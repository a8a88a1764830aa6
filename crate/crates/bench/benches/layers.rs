use actmil::layers::{conv2d, roi_max_pool};
use actmil::Roi;
use actmil_bench::{conv_case, filled};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn conv(c: &mut Criterion) {
    let mut g = c.benchmark_group("conv2d");
    for (cin, cout, size) in [(3, 8, 32), (8, 32, 16)] {
        let (x, w, b) = conv_case(cin, cout, size);
        g.bench_function(format!("forward {cin}->{cout} @{size}"), |bench| {
            bench.iter(|| conv2d(black_box(&x), &w, &b, 2).unwrap())
        });
        let (y, _) = conv2d(&x, &w, &b, 2).unwrap();
        let grad = filled(y.dims(), 6.0);
        g.bench_function(format!("backward {cin}->{cout} @{size}"), |bench| {
            bench.iter(|| {
                let (_, ctx) = conv2d(&x, &w, &b, 2).unwrap();
                ctx.backward(&w, black_box(&grad)).unwrap()
            })
        });
    }
    g.finish();
}

fn roi_pool(c: &mut Criterion) {
    let fmap = filled(&[32, 8, 8], 7.0);
    let roi = Roi::new(1.0, 0.5, 6.5, 7.0);
    c.bench_function("roi_max_pool 32x8x8 -> 3x3", |bench| {
        bench.iter(|| roi_max_pool(black_box(&fmap), &roi, 3, 3).unwrap())
    });
}

criterion_group!(benches, conv, roi_pool);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use tta_bench::{images, warmed_model};
use tta_core::adapt::adapt_batch;
use tta_core::{AdaptConfig, Method};

fn adapt(c: &mut Criterion) {
    let mut group = c.benchmark_group("adapt_batch");
    group.sample_size(20);
    let model = warmed_model(5, 2);
    for bs in [4, 64] {
        let x = images(bs, 32, 11);
        for method in [
            Method::Adabn,
            Method::AdamixbnNoFinetune,
            Method::Tent,
            Method::DomainadaptorT,
            Method::DomainadaptorAug,
        ] {
            let cfg = AdaptConfig::for_method(method);
            let mut m = model.clone();
            group.bench_with_input(BenchmarkId::new(method.name(), bs), &x, |b, x| {
                b.iter(|| adapt_batch(&mut m, x, None, &cfg, 0).unwrap())
            });
        }
    }
    group.finish();
}

criterion_group!(benches, adapt);
criterion_main!(benches);

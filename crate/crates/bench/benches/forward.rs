use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, criterion_group, criterion_main};
use lazyconv_bench::{FRACTIONS, reference_fixture};
use lazyconv_core::{KeepPolicy, forward_eager, forward_lazy};

fn eager_vs_lazy(c: &mut Criterion) {
    let fx = reference_fixture(200);
    let mut group = c.benchmark_group("forward");
    group.bench_function("eager", |b| {
        b.iter(|| forward_eager(&fx.net, black_box(&fx.input)).unwrap())
    });
    for fraction in FRACTIONS {
        let policy = KeepPolicy::uniform(&fx.net, fraction);
        group.bench_with_input(BenchmarkId::new("lazy", fraction), &policy, |b, policy| {
            b.iter(|| forward_lazy(&fx.net, &fx.predictors, policy, black_box(&fx.input)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, eager_vs_lazy);
criterion_main!(benches);

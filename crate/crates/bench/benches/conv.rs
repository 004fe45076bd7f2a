use std::hint::black_box;

use criterion::{BenchmarkId, Criterion, criterion_group, criterion_main};
use lazyconv_bench::{FRACTIONS, reference_fixture};
use lazyconv_core::inference::activation_before;
use lazyconv_core::lazy::{activation_strength, select_top_fraction};
use lazyconv_core::ops::conv2d_into;
use lazyconv_core::Tensor3;

fn masked_conv(c: &mut Criterion) {
    let fx = reference_fixture(64);
    for name in fx.net.conv_names() {
        let spec = fx.net.conv(&name).unwrap();
        let index = fx.net.layer_index(&name).unwrap();
        let x = activation_before(&fx.net, &fx.input, index).unwrap();
        let mut out = Tensor3::zeros(0, 0, 0);
        conv2d_into(&x, spec, None, None, &mut out).unwrap();
        let strengths = activation_strength(&out);

        let mut group = c.benchmark_group(format!("conv/{name}"));
        for fraction in FRACTIONS {
            let mask = select_top_fraction(&strengths, fraction, spec.out_filters).unwrap();
            group.bench_with_input(BenchmarkId::from_parameter(fraction), &mask, |b, mask| {
                b.iter(|| conv2d_into(black_box(&x), spec, Some(mask), None, &mut out).unwrap())
            });
        }
        group.finish();
    }
}

criterion_group!(benches, masked_conv);
criterion_main!(benches);

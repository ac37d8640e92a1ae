use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use segadapt_bench::scenes;
use segadapt_core::eval::{corrupt, CorruptionKind, CorruptionSpec};
use segadapt_core::source_prep::blur_with_kernel;

fn corruptions(c: &mut Criterion) {
    let image = scenes(1, 64).remove(0).image;
    let mut g = c.benchmark_group("corrupt_64");
    for kind in CorruptionKind::ALL {
        let spec = CorruptionSpec::new(kind, 0.5, 3).unwrap();
        g.bench_with_input(BenchmarkId::from_parameter(kind.column_name()), &spec, |b, s| {
            b.iter(|| corrupt(&image, s).unwrap())
        });
    }
    g.finish();
    c.bench_function("sp_blur_k7_64", |b| b.iter(|| blur_with_kernel(&image, 7)));
}

criterion_group!(benches, corruptions);
criterion_main!(benches);

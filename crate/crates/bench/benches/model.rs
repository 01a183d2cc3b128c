use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use hlstcm_core::model::{forward, loss_and_grad, random_sample};
use hlstcm_core::numerics::{Matrix, Vector};
use hlstcm_core::train::{gradient_check, GradCheckOptions};
use hlstcm_core::{ArchVariant, HlstcmConfig, HlstcmParams};

fn desk(variant: ArchVariant) -> HlstcmConfig {
    let mut c = HlstcmConfig { variant, ..HlstcmConfig::default() };
    c.resolve_groups();
    c
}

fn matvec(c: &mut Criterion) {
    let mut group = c.benchmark_group("matvec");
    for n in [16, 64, 256] {
        let m = Matrix::from_vec(n, n, (0..n * n).map(|i| (i % 7) as f64 * 0.1).collect());
        let v = Vector::from_vec((0..n).map(|i| i as f64).collect());
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| b.iter(|| black_box(&m).matvec(black_box(&v))));
    }
    group.finish();
}

fn sample_passes(c: &mut Criterion) {
    let mut group = c.benchmark_group("desk_sample");
    for (name, variant) in [
        ("hlstcm", ArchVariant::HLstcm),
        ("two-group", ArchVariant::two_group_split(3)),
        ("b3", ArchVariant::B3IndependentLstms),
        ("b4", ArchVariant::B4PooledLstms),
    ] {
        let config = desk(variant);
        let params = HlstcmParams::init(&config, 0).unwrap();
        let sample = random_sample(&config, 1);
        group.bench_function(format!("{name}/forward"), |b| b.iter(|| forward(&params, &config, black_box(&sample)).unwrap()));
        group.bench_function(format!("{name}/forward+backward"), |b| {
            b.iter(|| loss_and_grad(&params, &config, black_box(&sample)).unwrap())
        });
    }
    group.finish();
}

fn gradcheck(c: &mut Criterion) {
    let config = HlstcmConfig { p: 3, d_x: 3, d_sp: 4, d_proj: 3, d_co: 4, d_top: 4, k: 3, seq_len: 4, ..HlstcmConfig::default() };
    let params = HlstcmParams::init(&config, 7).unwrap();
    let sample = random_sample(&config, 7);
    let mut group = c.benchmark_group("gradcheck");
    group.sample_size(10);
    for extended in [false, true] {
        let opts = GradCheckOptions { extended_precision: extended, ..GradCheckOptions::default() };
        let name = if extended { "double-double" } else { "f64" };
        group.bench_function(name, |b| b.iter(|| gradient_check(&params, &config, &sample, &opts).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, matvec, sample_passes, gradcheck);
criterion_main!(benches);

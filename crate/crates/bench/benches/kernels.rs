use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use fsrwkv::nn::{conv2d, ConvGeometry};
use fsrwkv::rng::random_tensor;
use fsrwkv::suite::wkv_case;
use fsrwkv::wavelet::dwt2;
use fsrwkv::wkv::{bi_wkv_oracle, bi_wkv_scan};

fn wkv(c: &mut Criterion) {
    let mut group = c.benchmark_group("bi_wkv");
    group.sample_size(10);
    for t in [256usize, 1024, 4096] {
        let (k, v, p) = wkv_case::<f32>(t as u64, t, 16);
        group.throughput(Throughput::Elements(t as u64));
        group.bench_with_input(BenchmarkId::new("scan", t), &t, |b, _| {
            b.iter(|| bi_wkv_scan(black_box(&k), black_box(&v), &p).unwrap())
        });
        if t <= 1024 {
            group.bench_with_input(BenchmarkId::new("oracle", t), &t, |b, _| {
                b.iter(|| bi_wkv_oracle(black_box(&k), black_box(&v), &p).unwrap())
            });
        }
    }
    group.finish();
}

fn conv_and_wavelet(c: &mut Criterion) {
    let x = random_tensor::<f32>(&[1, 16, 64, 64], 1, 1.0);
    let w3 = random_tensor::<f32>(&[16, 16, 3, 3], 2, 0.1);
    let dw7 = random_tensor::<f32>(&[16, 1, 7, 7], 3, 0.1);
    c.bench_function("conv3x3_16ch_64px", |b| {
        b.iter(|| conv2d(black_box(&x), &w3, None, ConvGeometry::same(3)).unwrap())
    });
    c.bench_function("depthwise7x7_16ch_64px", |b| {
        b.iter(|| conv2d(black_box(&x), &dw7, None, ConvGeometry::depthwise(7, 16)).unwrap())
    });
    c.bench_function("dwt2_16ch_64px", |b| b.iter(|| dwt2(black_box(&x)).unwrap()));
}

criterion_group!(benches, wkv, conv_and_wavelet);
criterion_main!(benches);

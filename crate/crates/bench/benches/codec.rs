use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nxfp::{
    dequantize_tensor, gemm_dequant, quantize_tensor, synth_weights, DequantTarget, NanoSearch,
    Operand, QuantConfig, SynthModel, Tensor,
};
use std::hint::black_box;

const N: usize = 1 << 16;

fn configs() -> Vec<QuantConfig> {
    vec![
        QuantConfig::mxfp(4, 2),
        QuantConfig::bfp(4),
        QuantConfig::nxfp(4, 2),
        QuantConfig {
            nano_search: NanoSearch::AsAlgorithm1,
            ..QuantConfig::nxfp(4, 2)
        },
        QuantConfig::nxfp(6, 2),
    ]
}

fn quantize(c: &mut Criterion) {
    let v = synth_weights(SynthModel::Gaussian, N, 1);
    let mut g = c.benchmark_group("quantize_tensor");
    g.throughput(Throughput::Elements(N as u64));
    for cfg in configs() {
        let id = format!("{cfg}-{}", cfg.nano_search);
        g.bench_with_input(BenchmarkId::from_parameter(id), &cfg, |b, cfg| {
            b.iter(|| quantize_tensor(black_box(&v), &[N], cfg).unwrap())
        });
    }
    g.finish();
}

fn dequantize(c: &mut Criterion) {
    let v = synth_weights(SynthModel::Gaussian, N, 2);
    let p = quantize_tensor(&v, &[N], &QuantConfig::nxfp(4, 2)).unwrap();
    let mut g = c.benchmark_group("dequantize_tensor");
    g.throughput(Throughput::Elements(N as u64));
    for target in [
        DequantTarget::Binary32,
        DequantTarget::Binary16,
        DequantTarget::BFloat16,
    ] {
        g.bench_with_input(BenchmarkId::from_parameter(target), &target, |b, &t| {
            b.iter(|| dequantize_tensor(black_box(&p), t).unwrap())
        });
    }
    g.finish();
}

fn gemm(c: &mut Criterion) {
    let (m, k, n) = (128, 256, 64);
    let a = synth_weights(SynthModel::Gaussian, m * k, 3);
    let pa = quantize_tensor(&a, &[m, k], &QuantConfig::nxfp(4, 2)).unwrap();
    let x = Tensor::new(vec![k, n], synth_weights(SynthModel::Gaussian, k * n, 4)).unwrap();
    let mut g = c.benchmark_group("gemm_dequant");
    g.throughput(Throughput::Elements((m * k * n) as u64));
    g.bench_function("nxfp4_128x256x64", |b| {
        b.iter(|| {
            gemm_dequant(black_box(&pa), Operand::Dense(&x), DequantTarget::Binary32).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, quantize, dequantize, gemm);
criterion_main!(benches);

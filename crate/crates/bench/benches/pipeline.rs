//! Benchmarks for the hot paths: raw matmul, the purify forward pass, the
//! pipeline gradient (plain vs checkpointed), and rank mapping.

use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use dbplab_core::addt::rbgm;
use dbplab_core::diffusion::{make_linear_schedule, PurifyConfig, SamplerKind};
use dbplab_core::nets::{ClassifierNet, DenoiserNet};
use dbplab_core::purify::{purify, LossPipeline, PurifyPipeline};
use dbplab_core::rngtape::{record_tape, RngKey};
use dbplab_core::tensor::{matmul, Tensor};

fn bench_matmul(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for &n in &[64usize, 128, 256] {
        let key = RngKey::new(1);
        let a: Tensor<f32> = key.child(0).normal_tensor(&[n, n]);
        let b: Tensor<f32> = key.child(1).normal_tensor(&[n, n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| matmul(black_box(&a), black_box(&b)).unwrap())
        });
    }
    group.finish();
}

fn toy_setup() -> (
    dbplab_core::diffusion::Schedule<f32>,
    PurifyConfig,
    DenoiserNet<f32>,
    ClassifierNet<f32>,
    Tensor<f32>,
) {
    let s = make_linear_schedule(100, 1e-3, 0.2).unwrap();
    let cfg = PurifyConfig::new(SamplerKind::Ddpm, 10, 10).unwrap();
    let denoiser = DenoiserNet::new(256, 128, 16, 100, 7);
    let classifier = ClassifierNet::new(256, 64, 4, 8);
    let x = Tensor::from_fn(&[256], |i| 0.5 + 0.001 * (i as f32));
    (s, cfg, denoiser, classifier, x)
}

fn bench_purify_forward(c: &mut Criterion) {
    let (s, cfg, denoiser, _classifier, x) = toy_setup();
    let tape = record_tape(3, &[256], cfg.reverse_noise_count());
    c.bench_function("purify_forward_nfe10", |b| {
        b.iter(|| purify(black_box(&x), &cfg, &tape, &s, &denoiser).unwrap())
    });
}

fn bench_pipeline_gradient(c: &mut Criterion) {
    let (s, cfg, denoiser, classifier, x) = toy_setup();
    let tape = record_tape(3, &[256], cfg.reverse_noise_count());
    let mut group = c.benchmark_group("pipeline_gradient");
    for checkpoint in [false, true] {
        let mut pipe = PurifyPipeline::new(&cfg, &s, &denoiser, &classifier);
        pipe.checkpoint = checkpoint;
        group.bench_function(if checkpoint { "checkpointed" } else { "plain" }, |b| {
            b.iter(|| pipe.loss_and_grad(black_box(&x), 0, &tape).unwrap())
        });
    }
    group.finish();
}

fn bench_rbgm(c: &mut Criterion) {
    let mut group = c.benchmark_group("rbgm");
    for &n in &[256usize, 4096] {
        let key = RngKey::new(2);
        let delta: Tensor<f64> = key.child(0).normal_tensor(&[n]);
        let eps: Tensor<f64> = key.child(1).normal_tensor(&[n]);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| rbgm(black_box(&delta), black_box(&eps)).unwrap())
        });
    }
    group.finish();
}

criterion_group!(
    benches,
    bench_matmul,
    bench_purify_forward,
    bench_pipeline_gradient,
    bench_rbgm
);
criterion_main!(benches);

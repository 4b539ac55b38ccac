use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use desmoke::metrics::{dcp_desmoke, DcpConfig};
use desmoke::model::{Model, ModelConfig};
use desmoke::parallel::{self, Execution};
use desmoke::synth::{generate_texture_corpus, synthesize_sample, DensityLevel};
use desmoke::train::{batch_gradients, LossWeights, TrainSample};

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn batch_gradient_bench(c: &mut Criterion) {
    let cfg = ModelConfig::tiny();
    let imgs = generate_texture_corpus(8, 1, cfg.image_size).unwrap();
    let samples: Vec<TrainSample> = imgs
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let s = synthesize_sample(img, i as u64, DensityLevel::Medium).unwrap();
            TrainSample::from_synth(i.to_string(), &s).unwrap()
        })
        .collect();
    let batch: Vec<&TrainSample> = samples.iter().collect();
    let model = Model::new(cfg, 0).unwrap();
    let mut g = c.benchmark_group("batch_gradients");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| batch_gradients(&model, black_box(&batch), LossWeights::default(), exec).unwrap())
        });
    }
    g.finish();
}

fn synthesis_bench(c: &mut Criterion) {
    let imgs = generate_texture_corpus(8, 2, (64, 64)).unwrap();
    let mut g = c.benchmark_group("synthesis");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| {
                parallel::map(exec, black_box(&imgs), |img| {
                    synthesize_sample(img, 5, DensityLevel::Heavy).unwrap()
                })
            })
        });
    }
    g.finish();
}

fn dcp_bench(c: &mut Criterion) {
    let imgs = generate_texture_corpus(8, 3, (64, 64)).unwrap();
    let smoked: Vec<_> = imgs
        .iter()
        .map(|img| synthesize_sample(img, 9, DensityLevel::Medium).unwrap().smoke)
        .collect();
    let cfg = DcpConfig::default();
    let mut g = c.benchmark_group("dcp");
    for (name, exec) in MODES {
        g.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| parallel::map(exec, black_box(&smoked), |img| dcp_desmoke(img, &cfg).unwrap()))
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = batch_gradient_bench, synthesis_bench, dcp_bench
}
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use distvl_core::harness::retrieval;
use distvl_core::objectives::pretrain_step;
use distvl_core::{Model, PairedExample, RunConfig};

fn step(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let (train, _) = distvl_core::harness::train::load_splits(&cfg).unwrap();
    let batch: Vec<&PairedExample> = train[..cfg.batch_size].iter().collect();
    let mut model = Model::new(cfg.model_config().unwrap(), 0, cfg.loss_config().unwrap().log_tau_init).unwrap();
    let step_cfg = cfg.step_config(200).unwrap();
    let mut i = 0;
    c.bench_function("pretrain_step_toy_b8", |bench| {
        bench.iter(|| {
            i += 1;
            black_box(pretrain_step(&mut model, &batch, &step_cfg, 0, i).unwrap())
        })
    });
}

fn retrieval_eval(c: &mut Criterion) {
    let cfg = RunConfig::default();
    let (_, test) = distvl_core::harness::train::load_splits(&cfg).unwrap();
    let loss = cfg.loss_config().unwrap();
    let model = Model::new(cfg.model_config().unwrap(), 0, loss.log_tau_init).unwrap();
    let mut group = c.benchmark_group("retrieval");
    group.sample_size(10);
    group.bench_function("evaluate_256_candidates", |bench| {
        bench.iter(|| black_box(retrieval::evaluate(&model, &test, &loss, &[1, 5, 10]).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, step, retrieval_eval);
criterion_main!(benches);

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use patchmil::ctio::{apply_window, decode_slice, encode_slice};
use patchmil::mil::classify_bag;
use patchmil::nn::Arch;
use patchmil::patching::PatchInstance;
use patchmil::ssl::{ssl_step, SslConfig, SslOptimizers, SslState};
use patchmil_bench::{sample_model, sample_slice};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn io_and_window(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let generated = patchmil::synth::gen_slice(&patchmil::GenConfig::for_task(patchmil::Task::Core), &mut rng, true).unwrap();
    let bytes = encode_slice(&generated.hu);
    c.bench_function("decode_and_window_512", |b| {
        b.iter(|| apply_window(&decode_slice(black_box(&bytes)).unwrap()))
    });
}

fn patching(c: &mut Criterion) {
    let slice = sample_slice(1).unwrap();
    c.bench_function("slice_to_bag", |b| b.iter(|| black_box(&slice).bag().unwrap()));
}

fn encoders(c: &mut Criterion) {
    let bag = sample_slice(2).unwrap().bag().unwrap();
    let refs: Vec<&PatchInstance> = bag.instance_refs();
    let mut group = c.benchmark_group("encode_bag_256");
    group.sample_size(10);
    for arch in [Arch::Lenet5, Arch::Vggs] {
        let model = sample_model(arch, 3).unwrap();
        group.bench_function(arch.to_string(), |b| b.iter(|| model.encoder.encode_batch(black_box(&refs)).unwrap()));
    }
    group.finish();
}

fn mil_inference(c: &mut Criterion) {
    let bag = sample_slice(4).unwrap().bag().unwrap();
    let model = sample_model(Arch::Lenet5, 5).unwrap();
    let h = model.embed(&bag.instance_refs()).unwrap();
    let mut group = c.benchmark_group("mil");
    group.sample_size(10);
    group.bench_function("classify_bag_lenet5", |b| b.iter(|| classify_bag(&model, black_box(&bag)).unwrap()));
    group.bench_function("head_only", |b| b.iter(|| model.classify_embeddings(black_box(&h), 256).unwrap()));
    group.bench_function("finetune_loss_and_grads", |b| {
        b.iter(|| model.loss_and_grads(black_box(&bag.instance_refs()), 1, 2.0, 2.0).unwrap())
    });
    group.finish();
}

fn ssl(c: &mut Criterion) {
    let instances = sample_slice(6).unwrap().instances().unwrap();
    let config = SslConfig { arch: Arch::Lenet5, batch_size: 64, ..SslConfig::default() };
    let mut state = SslState::<f32>::new(config).unwrap();
    let mut opt = SslOptimizers::new(&state);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut group = c.benchmark_group("ssl");
    group.sample_size(10);
    group.bench_function("step_batch64_lenet5", |b| {
        b.iter(|| ssl_step(&mut state, &mut opt, &instances[..64], &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, io_and_window, patching, encoders, mil_inference, ssl);
criterion_main!(benches);

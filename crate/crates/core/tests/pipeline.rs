mod common;

use std::fs;

use patchmil::ctio::{self, Split};
use patchmil::dataset;
use patchmil::experiment::{self, Splits};
use patchmil::mil::{self, attention_weights, MilConfig, MilModel, TrainMode};
use patchmil::nn::{read_checkpoint, save_checkpoint, Arch, Encoder, OptimRule, ParamSet, Tensor};
use patchmil::ssl::{self, SslConfig, SslState};
use patchmil::synth::{gen_dataset, GenConfig, SplitCounts, Task};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_gen(task: Task, seed: u64) -> GenConfig {
    GenConfig {
        train: SplitCounts { total: 6, positive: 2 },
        valid: SplitCounts { total: 3, positive: 1 },
        test: SplitCounts { total: 3, positive: 1 },
        seed,
        ..GenConfig::for_task(task)
    }
}

fn tiny_mil(epochs: usize, mode: TrainMode) -> MilConfig {
    MilConfig {
        attention_dim: 8,
        epochs,
        mode,
        optimizer: OptimRule::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 },
        seed: 1,
    }
}

fn bits(p: &ParamSet<f32>) -> Vec<u32> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

#[test]
fn generated_datasets_are_byte_identical_per_seed() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let config = small_gen(Task::Core, 21);
    let ma = gen_dataset(&config, a.path()).unwrap();
    let mb = gen_dataset(&config, b.path()).unwrap();
    assert_eq!(ma, mb);
    assert_eq!(
        fs::read(a.path().join("manifest.jsonl")).unwrap(),
        fs::read(b.path().join("manifest.jsonl")).unwrap()
    );
    for e in &ma.entries {
        assert_eq!(fs::read(a.path().join(&e.slice_path)).unwrap(), fs::read(b.path().join(&e.slice_path)).unwrap());
    }
}

#[test]
fn generated_labels_satisfy_the_bag_rule() {
    for task in [Task::Blob, Task::Core] {
        let dir = tempfile::tempdir().unwrap();
        let manifest = gen_dataset(&small_gen(task, 4), dir.path()).unwrap();
        let reloaded = ctio::load_manifest(dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(manifest, reloaded);
        for e in &manifest.entries {
            e.validate().unwrap();
            let labels = e.instance_labels.as_ref().unwrap();
            assert_eq!(e.bag_label, labels.iter().copied().max().unwrap());
        }
        let pops = manifest.populations();
        assert_eq!((pops[&Split::Train], pops[&Split::Valid], pops[&Split::Test]), (6, 3, 3));
    }
}

#[test]
fn default_task_sizes() {
    for task in [Task::Blob, Task::Core] {
        assert_eq!(GenConfig::for_task(task).total_slices(), 1000);
    }
}

fn one_dim_model(v: f64, u: f64, w: f64, phi: f64, b: f64) -> ParamSet<f64> {
    let mut p = ParamSet::new();
    p.push("attention.V", Tensor::from_vec(&[1, 1], vec![v]).unwrap());
    p.push("attention.U", Tensor::from_vec(&[1, 1], vec![u]).unwrap());
    p.push("attention.w", Tensor::from_vec(&[1], vec![w]).unwrap());
    p.push("classifier.weight", Tensor::from_vec(&[1], vec![phi]).unwrap());
    p.push("classifier.bias", Tensor::from_vec(&[1], vec![b]).unwrap());
    p
}

#[test]
fn toy_bag_matches_hand_composition() {
    // Two 1-dim embeddings pushed through attention, pooling and the classifier.
    let head = one_dim_model(0.5, -2.0, 1.5, 2.0, -0.25);
    let h = [0.8f64, -0.3];
    let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
    let score = |x: f64| 1.5 * (0.5 * x).tanh() * sig(-2.0 * x);
    let (s0, s1) = (score(h[0]), score(h[1]));
    let a0 = s0.exp() / (s0.exp() + s1.exp());
    let z = a0 * h[0] + (1.0 - a0) * h[1];
    let theta = sig(2.0 * z - 0.25);

    let a = attention_weights(&h, 2, &head).unwrap();
    assert!((a[0] - a0).abs() < 1e-12 && (a[1] - (1.0 - a0)).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let encoder = Encoder::<f64>::new(Arch::Lenet5, 1, &mut rng).unwrap();
    let model = MilModel::from_parts(encoder, head).unwrap();
    let pred = model.classify_embeddings(&h, 2).unwrap();
    assert!((pred.theta - theta).abs() < 1e-12, "{} vs {theta}", pred.theta);
    assert_eq!(pred.predicted, u8::from(theta >= 0.5));
}

#[test]
fn mil_checkpoints_round_trip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let model = experiment::build_model(experiment::random_encoder(Arch::Vggs, 12, 3).unwrap(), 6, 3).unwrap();
    let path = dir.path().join("model.milc");
    save_checkpoint(&path, &model.params()).unwrap();
    let loaded = MilModel::from_params(&read_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(bits(&loaded.params()), bits(&model.params()));
    assert_eq!(loaded.params().names(), model.params().names());
    let mut again = dir.path().join("again.milc");
    save_checkpoint(&again, &loaded.params()).unwrap();
    assert_eq!(fs::read(&path).unwrap(), fs::read(&again).unwrap());
    again.set_extension("missing");
    assert!(read_checkpoint(&again).is_err());
}

fn small_splits(seed: u64) -> (tempfile::TempDir, Splits) {
    let dir = tempfile::tempdir().unwrap();
    gen_dataset(&small_gen(Task::Blob, seed), dir.path()).unwrap();
    let splits = Splits::load(dir.path().join("manifest.jsonl")).unwrap();
    (dir, splits)
}

#[test]
fn transfer_training_leaves_the_encoder_bit_identical() {
    let (_dir, splits) = small_splits(8);
    let model = experiment::build_model(experiment::random_encoder(Arch::Lenet5, 8, 2).unwrap(), 8, 2).unwrap();
    let before = bits(model.encoder.params());
    let head_before = bits(&model.head);
    let out = mil::train_mil(&tiny_mil(2, TrainMode::Transfer), model, &splits.train, &splits.valid).unwrap();
    assert!(out.model.encoder_frozen);
    assert_eq!(bits(out.model.encoder.params()), before);
    if out.best_epoch > 0 {
        assert_ne!(bits(&out.model.head), head_before);
    }
}

#[test]
fn finetune_training_updates_the_encoder() {
    let (_dir, splits) = small_splits(8);
    let model = experiment::build_model(experiment::random_encoder(Arch::Lenet5, 8, 2).unwrap(), 8, 2).unwrap();
    let before = bits(model.encoder.params());
    let mut m = model;
    let out = mil::train_mil_with(&tiny_mil(1, TrainMode::Finetune), &mut m, &splits.train, &splits.valid, |_| {}).unwrap();
    assert_eq!(out.best_epoch, 1);
    assert_ne!(bits(out.model.encoder.params()), before);
}

#[test]
fn zero_epochs_return_the_initialisation() {
    let (_dir, splits) = small_splits(9);
    let model = experiment::build_model(experiment::random_encoder(Arch::Lenet5, 8, 4).unwrap(), 8, 4).unwrap();
    let out = mil::train_mil(&tiny_mil(0, TrainMode::Finetune), model.clone(), &splits.train, &splits.valid).unwrap();
    assert_eq!(out.best_epoch, 0);
    assert!(out.log.is_empty());
    assert_eq!(bits(&out.model.params()), bits(&model.params()));

    let config = SslConfig { arch: Arch::Lenet5, epochs: 0, seed: 6, ..SslConfig::default() };
    let pre = ssl::pretrain(&config, &splits.train_gray()).unwrap();
    assert!(pre.log.is_empty());
    let init = SslState::<f32>::new(config).unwrap();
    assert_eq!(bits(pre.encoder.params()), bits(init.online.params()));
}

#[test]
fn training_runs_are_deterministic() {
    let (_dir, splits) = small_splits(10);
    let run = || {
        let model = experiment::build_model(experiment::random_encoder(Arch::Lenet5, 8, 5).unwrap(), 8, 5).unwrap();
        let out = mil::train_mil(&tiny_mil(1, TrainMode::Finetune), model, &splits.train, &splits.valid).unwrap();
        (bits(&out.model.params()), out.log)
    };
    assert_eq!(run(), run());

    let config = SslConfig {
        arch: Arch::Lenet5,
        epochs: 1,
        instances_per_bag: 8,
        batch_size: 16,
        queue_size: 32,
        seed: 3,
        ..SslConfig::default()
    };
    let a = ssl::pretrain(&config, &splits.train_gray()).unwrap();
    let b = ssl::pretrain(&config, &splits.train_gray()).unwrap();
    assert_eq!(bits(a.encoder.params()), bits(b.encoder.params()));
    assert_eq!(a.log, b.log);
    assert_eq!(a.steps_per_epoch, 3);
}

#[test]
fn without_reconstruction_the_total_is_the_contrastive_loss() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let config = SslConfig { arch: Arch::Lenet5, embed_dim: 6, proj_dim: 4, lambda_rec: 0.0, ..SslConfig::default() };
    let state = SslState::<f32>::new(config.clone()).unwrap().cast::<f64>();
    let instances = common::random_instances(&mut rng, 5);
    let batch = ssl::prepare_batch::<f64, _>(&instances, config.mixup_alpha, &mut rng).unwrap();
    let (losses, grads, _) = state.forward_backward(&batch, &[], true).unwrap();
    assert_eq!(losses.total, losses.contrastive);
    assert!(losses.rec_online > 0.0);
    // With no reconstruction weight, neither the decoder nor the
    // conditioning tensors receive gradient.
    let g = grads.unwrap();
    for (_, t) in g.decoder.iter().chain(g.conditioning.iter()) {
        assert!(t.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn supervised_pretraining_reduces_its_loss() {
    let (_dir, splits) = small_splits(12);
    let config = experiment::SupervisedConfig { epochs: 3, batch_size: 32, instances_per_bag: 64, ..Default::default() };
    let out = experiment::supervised_pretrain(&config, Arch::Lenet5, 8, 0, &splits.train).unwrap();
    assert_eq!(out.epoch_losses.len(), 3);
    assert!(out.epoch_losses[2] < out.epoch_losses[0], "{:?}", out.epoch_losses);
}

#[test]
fn splits_load_in_manifest_order() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = gen_dataset(&small_gen(Task::Core, 2), dir.path()).unwrap();
    let test = dataset::load_split(&manifest, dir.path(), Split::Test).unwrap();
    let expected: Vec<_> = manifest.split(Split::Test).map(|e| dir.path().join(&e.slice_path)).collect();
    assert_eq!(test.iter().map(|s| s.path.clone()).collect::<Vec<_>>(), expected);
}

#[test]
fn shipped_example_config_parses() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/core_task.conf");
    let config = patchmil::RunConfig::load(path).unwrap();
    assert_eq!(config.gen.task, Task::Core);
    assert_eq!(config.seeds, vec![0, 1, 2]);
    assert_eq!((config.mil.epochs, config.mil.mode), (30, TrainMode::Transfer));
}

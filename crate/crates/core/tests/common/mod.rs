//! Shared harnesses for integration tests and the acceptance suite.
#![allow(dead_code)]

use patchmil::mil::MilModel;
use patchmil::nn::gradcheck::{finite_diff_at, relative_error};
use patchmil::nn::{Arch, Encoder, ParamSet};
use patchmil::patching::PatchInstance;
use patchmil::ssl::{self, LossWeights, SslConfig, SslState};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn random_instances(rng: &mut impl Rng, k: usize) -> Vec<PatchInstance> {
    (0..k)
        .map(|i| {
            let gray: Vec<f32> = (0..1024).map(|_| rng.random::<f32>()).collect();
            PatchInstance::from_gray(&gray, i / 16, i % 16)
        })
        .collect()
}

/// Up to `per_tensor` random coordinates from each tensor; small tensors are
/// covered completely.
pub fn sample_coords(params: &ParamSet<f64>, per_tensor: usize, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    let mut coords = Vec::new();
    for (t, (_, tensor)) in params.iter().enumerate() {
        let n = tensor.len();
        if n <= per_tensor {
            coords.extend((0..n).map(|i| (t, i)));
        } else {
            coords.extend(sample(rng, n, per_tensor).into_iter().map(|i| (t, i)));
        }
    }
    coords
}

/// Worst relative error between analytic and numeric partials at `coords`.
pub fn worst_error(
    analytic: &ParamSet<f64>,
    params: &ParamSet<f64>,
    coords: &[(usize, usize)],
    loss: impl FnMut(&ParamSet<f64>) -> f64,
) -> (f64, String) {
    let numeric = finite_diff_at(loss, params, FD_EPS, coords);
    let mut worst = (0.0, String::new());
    for (&(t, i), n) in coords.iter().zip(numeric) {
        let a = analytic.tensor(t).data()[i];
        let e = relative_error(a, n);
        if e > worst.0 {
            worst = (e, format!("{}[{i}] analytic {a:e} numeric {n:e}", analytic.name(t)));
        }
    }
    worst
}

pub const BAG_SIZES: [usize; 3] = [1, 2, 5];

/// Gradient of weighted BCE of one bag with respect to every MIL parameter
/// group, configuration `index` (bag size cycles through 1, 2, 5).
pub fn mil_gradcheck(index: u64) -> (f64, String) {
    mil_gradcheck_with(Arch::Lenet5, index)
}

pub fn mil_gradcheck_with(arch: Arch, index: u64) -> (f64, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(1000 + index);
    let k = BAG_SIZES[index as usize % 3];
    let m = rng.random_range(3..=6);
    let l = rng.random_range(2..=5);
    let encoder = Encoder::<f64>::new(arch, m, &mut rng).unwrap();
    let model = MilModel::new(encoder, l, &mut rng).unwrap();
    let instances = random_instances(&mut rng, k);
    let refs: Vec<&PatchInstance> = instances.iter().collect();
    let y = rng.random_range(0..=1u8);
    let (w_pos, w_neg) = (rng.random_range(0.5..6.0), rng.random_range(0.5..6.0));

    let (_, head_grads, enc_grads) = model.loss_and_grads(&refs, y, w_pos, w_neg).unwrap();
    let analytic = enc_grads.unwrap().concat(&head_grads);
    let params = model.params();
    let coords = sample_coords(&params, 6, &mut rng);
    let mut probe = model.clone();
    worst_error(&analytic, &params, &coords, |p| {
        probe.encoder.params_mut().copy_matching(p).unwrap();
        probe.head.copy_matching(p).unwrap();
        let h = probe.embed(&refs).unwrap();
        probe.loss_from_embeddings(&h, k, y, w_pos, w_neg).unwrap()
    })
}

/// Builds a small random SSL state and batch for configuration `index`.
pub fn ssl_fixture(index: u64) -> (SslState<f64>, ssl::SslBatch<f64>, Vec<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(2000 + index);
    let b = BAG_SIZES[index as usize % 3];
    let config = SslConfig {
        arch: Arch::Lenet5,
        embed_dim: rng.random_range(3..=6),
        proj_dim: rng.random_range(2..=4),
        temperature: [0.2, 0.5, 1.0][rng.random_range(0..3)],
        queue_size: 16,
        lambda_rec: rng.random_range(0.1..2.0),
        seed: index,
        ..SslConfig::default()
    };
    let mut state = SslState::<f32>::new(config.clone()).unwrap().cast::<f64>();
    // Let the momentum copy drift away from the online encoder.
    for (_, t) in state.momentum.params_mut().iter_mut().chain(state.momentum_projection.iter_mut()) {
        for v in t.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    let n_neg = rng.random_range(0..=6);
    let mut negatives = Vec::with_capacity(n_neg * config.proj_dim);
    for _ in 0..n_neg {
        let v: Vec<f64> = (0..config.proj_dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        negatives.extend(v.iter().map(|x| x / norm));
    }
    let instances = random_instances(&mut rng, b);
    let batch = ssl::prepare_batch::<f64, _>(&instances, config.mixup_alpha, &mut rng).unwrap();
    (state, batch, negatives, rng)
}

fn ssl_trainable(state: &SslState<f64>) -> ParamSet<f64> {
    state
        .online
        .params()
        .clone()
        .concat(&state.projection)
        .concat(&state.conditioning)
        .concat(state.decoder.params())
}

fn ssl_load(state: &mut SslState<f64>, p: &ParamSet<f64>) {
    state.online.params_mut().copy_matching(p).unwrap();
    state.projection.copy_matching(p).unwrap();
    state.conditioning.copy_matching(p).unwrap();
    state.decoder.params_mut().copy_matching(p).unwrap();
}

/// The loss terms checked one at a time, then the configured total.
pub fn ssl_weight_sets(lambda_rec: f64) -> Vec<(&'static str, LossWeights)> {
    vec![
        ("contrastive", LossWeights { contrastive: 1.0, reconstruction: [0.0; 3] }),
        ("rec_online", LossWeights { contrastive: 0.0, reconstruction: [1.0, 0.0, 0.0] }),
        ("rec_momentum", LossWeights { contrastive: 0.0, reconstruction: [0.0, 1.0, 0.0] }),
        ("rec_mixed", LossWeights { contrastive: 0.0, reconstruction: [0.0, 0.0, 1.0] }),
        ("total", LossWeights::from_lambda_rec(lambda_rec)),
    ]
}

/// Worst relative error over every SSL loss term for configuration `index`.
pub fn ssl_gradcheck(index: u64) -> (f64, String) {
    let (state, batch, negatives, mut rng) = ssl_fixture(index);
    let params = ssl_trainable(&state);
    let coords = sample_coords(&params, 4, &mut rng);
    let mut worst = (0.0, String::new());
    for (name, weights) in ssl_weight_sets(state.config.lambda_rec) {
        let (_, grads, _) = state.forward_backward_weighted(&batch, &negatives, &weights, true).unwrap();
        let g = grads.unwrap();
        let analytic = g.encoder.concat(&g.projection).concat(&g.conditioning).concat(&g.decoder);
        let mut probe = state.clone();
        let (e, detail) = worst_error(&analytic, &params, &coords, |p| {
            ssl_load(&mut probe, p);
            probe.forward_backward_weighted(&batch, &negatives, &weights, false).unwrap().0.total
        });
        if e > worst.0 {
            worst = (e, format!("{name}: {detail}"));
        }
    }
    worst
}

//! Self-supervised pretraining of the patch encoder.
//!
//! One step combines an InfoNCE contrastive term between an online view and
//! a momentum-encoder view (negatives from a FIFO queue) with three
//! transformation-conditioned reconstruction branches decoding the online,
//! momentum and mixed features.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use rayon::prelude::*;

use crate::augment::{self, encode_transform, TRANSFORM_DIM};
use crate::ctio::GraySlice;
use crate::error::{Error, Result};
use crate::nn::encoder::{bias_uniform, kaiming_uniform};
use crate::nn::layers::{self, sigmoid, Spatial};
use crate::nn::tensor::{matmul, Op};
use crate::nn::{Arch, Decoder, Encoder, OptimRule, Optimizer, ParamSet, Real, Tensor};
use crate::patching::{self, PatchInstance, BAG_SIZE, CHANNELS, GRID, PATCH_SIZE};

#[derive(Clone, Debug, PartialEq)]
pub struct SslConfig {
    pub arch: Arch,
    pub embed_dim: usize,
    pub proj_dim: usize,
    pub temperature: f64,
    pub queue_size: usize,
    pub encoder_momentum: f64,
    pub lambda_rec: f64,
    /// Beta(alpha, alpha) for the mixup coefficient.
    pub mixup_alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Instances drawn from each bag per epoch; `BAG_SIZE` means all of them.
    pub instances_per_bag: usize,
    pub optimizer: OptimRule,
    pub seed: u64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            arch: Arch::Vggs,
            embed_dim: 128,
            proj_dim: 64,
            temperature: 0.2,
            queue_size: 4096,
            encoder_momentum: 0.99,
            lambda_rec: 1.0,
            mixup_alpha: 1.0,
            batch_size: 256,
            epochs: 10,
            instances_per_bag: BAG_SIZE,
            optimizer: OptimRule::ssl_default(),
            seed: 0,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, field: &str, detail: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(field, detail))
            }
        };
        check(self.embed_dim > 0, "embed_dim", "must be positive")?;
        check(self.proj_dim > 0, "proj_dim", "must be positive")?;
        check(self.temperature > 0.0, "temperature", "must be positive")?;
        check((0.0..1.0).contains(&self.encoder_momentum), "encoder_momentum", "must be in [0, 1)")?;
        check(self.lambda_rec >= 0.0, "lambda_rec", "must be non-negative")?;
        check(self.mixup_alpha > 0.0, "mixup_alpha", "must be positive")?;
        check(self.batch_size > 0, "ssl_batch_size", "must be positive")?;
        check(
            (1..=BAG_SIZE).contains(&self.instances_per_bag),
            "ssl_instances_per_bag",
            "must be in [1, 256]",
        )?;
        Ok(())
    }
}

/// FIFO ring of unit-norm negative features.
#[derive(Clone, Debug)]
pub struct NegativeQueue<T> {
    dim: usize,
    capacity: usize,
    items: VecDeque<Vec<T>>,
}

impl<T: Real> NegativeQueue<T> {
    pub fn new(dim: usize, capacity: usize) -> Self {
        Self { dim, capacity, items: VecDeque::with_capacity(capacity) }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &[T]> {
        self.items.iter().map(Vec::as_slice)
    }

    /// Enqueues each row of `rows` (`[B, dim]`), evicting the oldest entries.
    pub fn push_rows(&mut self, rows: &[T]) {
        if self.capacity == 0 {
            return;
        }
        for row in rows.chunks(self.dim) {
            if self.items.len() == self.capacity {
                self.items.pop_front();
            }
            self.items.push_back(row.to_vec());
        }
    }

    /// Row-major `[len, dim]` matrix of the queued features.
    pub fn matrix(&self) -> Vec<T> {
        let mut m = Vec::with_capacity(self.items.len() * self.dim);
        for it in &self.items {
            m.extend_from_slice(it);
        }
        m
    }

    pub fn cast<U: Real>(&self) -> NegativeQueue<U> {
        NegativeQueue {
            dim: self.dim,
            capacity: self.capacity,
            items: self
                .items
                .iter()
                .map(|v| v.iter().map(|&x| U::lit(x.to_f64().unwrap())).collect())
                .collect(),
        }
    }
}

/// `psi_m <- m * psi_m + (1 - m) * psi`, elementwise.
pub fn momentum_update<T: Real>(target: &mut ParamSet<T>, source: &ParamSet<T>, m: f64) -> Result<()> {
    if !target.same_layout(source) {
        return Err(Error::Training("momentum update: parameter layouts differ".into()));
    }
    let (m, one_minus) = (T::lit(m), T::lit(1.0 - m));
    for ((_, t), (_, s)) in target.iter_mut().zip(source.iter()) {
        for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
            *a = m * *a + one_minus * b;
        }
    }
    Ok(())
}

/// L2-normalizes each row of `[n, dim]`; returns the normalized rows and norms.
pub fn normalize_rows<T: Real>(x: &[T], dim: usize) -> Result<(Vec<T>, Vec<T>)> {
    let mut out = x.to_vec();
    let mut norms = Vec::with_capacity(x.len() / dim);
    for row in out.chunks_mut(dim) {
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::lit(1e-12)) {
            return Err(Error::Numeric("cannot normalize a zero-norm feature".into()));
        }
        row.iter_mut().for_each(|v| *v = *v / norm);
        norms.push(norm);
    }
    Ok((out, norms))
}

/// Backward of row normalization: `d_raw = (d_y - y (y . d_y)) / |raw|`.
pub fn normalize_rows_backward<T: Real>(y: &[T], norms: &[T], d_y: &[T], dim: usize) -> Vec<T> {
    let mut d = vec![T::zero(); y.len()];
    for (((yr, dr), out), &n) in y.chunks(dim).zip(d_y.chunks(dim)).zip(d.chunks_mut(dim)).zip(norms) {
        let dot: T = yr.iter().zip(dr).map(|(&a, &b)| a * b).sum();
        for ((o, &a), &b) in out.iter_mut().zip(yr).zip(dr) {
            *o = (b - a * dot) / n;
        }
    }
    d
}

fn check_unit_rows<T: Real>(x: &[T], dim: usize, what: &str) -> Result<()> {
    for row in x.chunks(dim) {
        let n2: T = row.iter().map(|&v| v * v).sum();
        if !(n2 > T::lit(1e-24)) || !n2.is_finite() {
            return Err(Error::Numeric(format!("{what} contains a zero-norm or non-finite feature")));
        }
    }
    Ok(())
}

/// InfoNCE value and gradient with respect to `q`.
pub struct ContrastiveOutput<T> {
    pub loss: T,
    pub d_q: Vec<T>,
}

/// Mean over the batch of `-log(exp(q.k/t) / (exp(q.k/t) + sum_n exp(q.n/t)))`
/// with negatives taken from `negatives` (`[Q, dim]`). Gradients flow to `q` only.
pub fn info_nce<T: Real>(q: &[T], k: &[T], negatives: &[T], dim: usize, temperature: f64) -> Result<ContrastiveOutput<T>> {
    if q.len() != k.len() || q.is_empty() || !q.len().is_multiple_of(dim) {
        return Err(Error::dim(format!("matching [B, {dim}] q and k"), format!("{} and {}", q.len(), k.len())));
    }
    check_unit_rows(q, dim, "q")?;
    check_unit_rows(k, dim, "k")?;
    let b = q.len() / dim;
    let n_neg = negatives.len() / dim;
    let inv_t = T::lit(1.0 / temperature);
    let mut neg_logits = vec![T::zero(); b * n_neg];
    if n_neg > 0 {
        matmul(b, dim, n_neg, q, Op::N, negatives, Op::T, &mut neg_logits, false);
    }
    let mut total = T::zero();
    let mut d_q = vec![T::zero(); q.len()];
    let scale = inv_t / T::lit(b as f64);
    let mut probs = vec![T::zero(); n_neg];
    for i in 0..b {
        let qi = &q[i * dim..(i + 1) * dim];
        let ki = &k[i * dim..(i + 1) * dim];
        let pos = qi.iter().zip(ki).map(|(&a, &c)| a * c).sum::<T>() * inv_t;
        let negs = &neg_logits[i * n_neg..(i + 1) * n_neg];
        let max = negs.iter().fold(pos, |m, &v| m.max(v * inv_t));
        let e_pos = (pos - max).exp();
        let mut denom = e_pos;
        for (p, &v) in probs.iter_mut().zip(negs) {
            *p = (v * inv_t - max).exp();
            denom = denom + *p;
        }
        total = total + (denom.ln() + max - pos);
        let p_pos = e_pos / denom;
        let dqi = &mut d_q[i * dim..(i + 1) * dim];
        for (d, &kv) in dqi.iter_mut().zip(ki) {
            *d = (p_pos - T::one()) * kv * scale;
        }
        for (j, &p) in probs.iter().enumerate() {
            let w = p / denom * scale;
            for (d, &nv) in dqi.iter_mut().zip(&negatives[j * dim..(j + 1) * dim]) {
                *d = *d + w * nv;
            }
        }
    }
    Ok(ContrastiveOutput { loss: total / T::lit(b as f64), d_q })
}

/// Contrastive loss against the queue, then enqueues `k` (FIFO).
pub fn contrastive_loss<T: Real>(
    q: &[T],
    k: &[T],
    queue: &mut NegativeQueue<T>,
    temperature: f64,
) -> Result<ContrastiveOutput<T>> {
    let out = info_nce(q, k, &queue.matrix(), queue.dim, temperature)?;
    queue.push_rows(k);
    Ok(out)
}

pub fn mixup_features<T: Real>(h_a: &[T], h_b: &[T], lambda: f64) -> Vec<T> {
    assert_eq!(h_a.len(), h_b.len(), "mixup operands differ in size");
    let (l, r) = (T::lit(lambda), T::lit(1.0 - lambda));
    h_a.iter().zip(h_b).map(|(&a, &b)| l * a + r * b).collect()
}

/// Transform-conditioned gating: `h * sigmoid(A t + c)` row by row.
/// `h` is `[R, M]`, `t` is `[R, 6]`, `A` is `[M, 6]`, `c` is `[M]`.
pub fn condition_on_transform<T: Real>(h: &[T], t: &[T], weight: &Tensor<T>, bias: &Tensor<T>) -> (Vec<T>, Vec<T>) {
    let rows = t.len() / TRANSFORM_DIM;
    let mut gate = layers::linear_forward(t, rows, weight, bias);
    gate.iter_mut().for_each(|g| *g = sigmoid(*g));
    let out = h.iter().zip(&gate).map(|(&a, &g)| a * g).collect();
    (out, gate)
}

/// Returns `(d_h, d_weight, d_bias)`.
pub fn condition_backward<T: Real>(
    h: &[T],
    t: &[T],
    gate: &[T],
    weight: &Tensor<T>,
    d_out: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = t.len() / TRANSFORM_DIM;
    let d_h = d_out.iter().zip(gate).map(|(&d, &g)| d * g).collect();
    let d_pre: Vec<T> = d_out
        .iter()
        .zip(h)
        .zip(gate)
        .map(|((&d, &x), &g)| d * x * g * (T::one() - g))
        .collect();
    let (d_w, d_b, _) = layers::linear_backward(t, rows, weight, &d_pre, false);
    (d_h, d_w, d_b)
}

/// Mean squared error and its gradient with respect to `decoded`.
pub fn reconstruction_loss<T: Real>(decoded: &[T], target: &[T]) -> Result<(T, Vec<T>)> {
    if decoded.len() != target.len() || decoded.is_empty() {
        return Err(Error::dim(decoded.len(), target.len()));
    }
    let n = T::lit(decoded.len() as f64);
    let two = T::lit(2.0);
    let mut sum = T::zero();
    let grad = decoded
        .iter()
        .zip(target)
        .map(|(&d, &t)| {
            let e = d - t;
            sum = sum + e * e;
            two * e / n
        })
        .collect();
    Ok((sum / n, grad))
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SslLosses {
    pub contrastive: f64,
    pub rec_online: f64,
    pub rec_momentum: f64,
    pub rec_mixed: f64,
    pub total: f64,
}

impl SslLosses {
    fn accumulate(&mut self, o: &SslLosses) {
        self.contrastive += o.contrastive;
        self.rec_online += o.rec_online;
        self.rec_momentum += o.rec_momentum;
        self.rec_mixed += o.rec_mixed;
        self.total += o.total;
    }

    fn scaled(&self, s: f64) -> SslLosses {
        SslLosses {
            contrastive: self.contrastive * s,
            rec_online: self.rec_online * s,
            rec_momentum: self.rec_momentum * s,
            rec_mixed: self.rec_mixed * s,
            total: self.total * s,
        }
    }
}

/// A batch of augmented inputs, fixed so that the loss is a deterministic
/// function of the parameters.
#[derive(Clone, Debug)]
pub struct SslBatch<T> {
    pub view1: Spatial<T>,
    pub view2: Spatial<T>,
    pub rec1: Spatial<T>,
    pub rec2: Spatial<T>,
    /// `[B, 6]` transform encodings of view 1 and view 2.
    pub t1: Vec<T>,
    pub t2: Vec<T>,
    /// Mixup coefficient shared by the batch.
    pub lambda: f64,
}

impl<T: Real> SslBatch<T> {
    pub fn len(&self) -> usize {
        self.view1.n
    }

    pub fn is_empty(&self) -> bool {
        self.view1.n == 0
    }
}

/// Draws views for every instance (one derived seed per instance) and a
/// batch-wide mixup coefficient.
pub fn prepare_batch<T: Real, R: Rng + ?Sized>(instances: &[PatchInstance], mixup_alpha: f64, rng: &mut R) -> Result<SslBatch<T>> {
    if instances.is_empty() {
        return Err(Error::Training("empty SSL batch".into()));
    }
    let seeds: Vec<u64> = instances.iter().map(|_| rng.random()).collect();
    let beta = Beta::new(mixup_alpha, mixup_alpha).map_err(|e| Error::config("mixup_alpha", e.to_string()))?;
    let lambda = beta.sample(rng);
    let pairs: Vec<_> = instances
        .par_iter()
        .zip(seeds.par_iter())
        .map(|(p, &s)| augment::make_views(p, &mut ChaCha8Rng::seed_from_u64(s)))
        .collect();
    let gather = |f: &dyn Fn(&augment::ViewPair) -> &PatchInstance| {
        let views: Vec<&[f32]> = pairs.iter().map(|v| f(v).data()).collect();
        Spatial::from_instances(CHANNELS, PATCH_SIZE, PATCH_SIZE, &views, T::from_f32)
    };
    let encode = |i: usize| -> Vec<T> {
        pairs.iter().flat_map(|v| encode_transform(&v.records[i]).0.map(T::lit)).collect()
    };
    Ok(SslBatch {
        view1: gather(&|v| &v.view1),
        view2: gather(&|v| &v.view2),
        rec1: gather(&|v| &v.rec1),
        rec2: gather(&|v| &v.rec2),
        t1: encode(0),
        t2: encode(1),
        lambda,
    })
}

/// Multipliers of the loss terms inside the total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub contrastive: f64,
    /// Online, momentum and mixed branches.
    pub reconstruction: [f64; 3],
}

impl LossWeights {
    pub fn from_lambda_rec(lambda_rec: f64) -> Self {
        Self { contrastive: 1.0, reconstruction: [lambda_rec; 3] }
    }
}

/// Gradients of the trainable parts of the SSL model.
#[derive(Clone, Debug)]
pub struct SslGrads<T> {
    pub encoder: ParamSet<T>,
    pub projection: ParamSet<T>,
    pub conditioning: ParamSet<T>,
    pub decoder: ParamSet<T>,
}

#[derive(Clone, Debug)]
pub struct SslState<T> {
    pub config: SslConfig,
    pub online: Encoder<T>,
    pub momentum: Encoder<T>,
    pub projection: ParamSet<T>,
    pub momentum_projection: ParamSet<T>,
    pub conditioning: ParamSet<T>,
    pub decoder: Decoder<T>,
    pub queue: NegativeQueue<T>,
}

fn projection_params<T: Real, R: Rng + ?Sized>(proj_dim: usize, embed_dim: usize, rng: &mut R) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.push("proj.weight", kaiming_uniform(&[proj_dim, embed_dim], embed_dim, rng));
    p.push("proj.bias", bias_uniform(proj_dim, embed_dim, rng));
    p
}

fn conditioning_params<T: Real, R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.push("cond.weight", kaiming_uniform(&[embed_dim, TRANSFORM_DIM], TRANSFORM_DIM, rng));
    p.push("cond.bias", Tensor::zeros(&[embed_dim]));
    p
}

impl<T: Real> SslState<T> {
    pub fn new(config: SslConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let online = Encoder::new(config.arch, config.embed_dim, &mut rng)?;
        Self::with_encoder(config, online, &mut rng)
    }

    /// Builds the state around an existing encoder (momentum copy starts equal).
    pub fn with_encoder<R: Rng + ?Sized>(config: SslConfig, online: Encoder<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        if online.embed_dim() != config.embed_dim {
            return Err(Error::config("embed_dim", "does not match the encoder"));
        }
        let projection = projection_params(config.proj_dim, config.embed_dim, rng);
        let conditioning = conditioning_params(config.embed_dim, rng);
        let decoder = Decoder::new(config.embed_dim, rng);
        Ok(Self {
            momentum: online.clone(),
            momentum_projection: projection.clone(),
            online,
            projection,
            conditioning,
            decoder,
            queue: NegativeQueue::new(config.proj_dim, config.queue_size),
            config,
        })
    }

    pub fn cast<U: Real>(&self) -> SslState<U> {
        SslState {
            config: self.config.clone(),
            online: self.online.cast(),
            momentum: self.momentum.cast(),
            projection: self.projection.cast(),
            momentum_projection: self.momentum_projection.cast(),
            conditioning: self.conditioning.cast(),
            decoder: self.decoder.cast(),
            queue: self.queue.cast(),
        }
    }

    /// Projected, normalized momentum features `k` for view 2.
    pub fn momentum_keys(&self, batch: &SslBatch<T>) -> Result<(Vec<T>, Vec<T>)> {
        let h2m = self.momentum.encode_spatial(batch.view2.clone())?;
        let k_raw = layers::linear_forward(
            &h2m,
            batch.len(),
            self.momentum_projection.tensor(0),
            self.momentum_projection.tensor(1),
        );
        let (k, _) = normalize_rows(&k_raw, self.config.proj_dim)?;
        Ok((h2m, k))
    }

    /// Loss components for a fixed batch against fixed negatives; gradients
    /// when `with_grads` is set. The queue is not modified.
    pub fn forward_backward(
        &self,
        batch: &SslBatch<T>,
        negatives: &[T],
        with_grads: bool,
    ) -> Result<(SslLosses, Option<SslGrads<T>>, Vec<T>)> {
        let weights = LossWeights::from_lambda_rec(self.config.lambda_rec);
        self.forward_backward_weighted(batch, negatives, &weights, with_grads)
    }

    /// As [`Self::forward_backward`] with an explicit weight per loss term;
    /// `total` and the gradients follow these weights.
    pub fn forward_backward_weighted(
        &self,
        batch: &SslBatch<T>,
        negatives: &[T],
        weights: &LossWeights,
        with_grads: bool,
    ) -> Result<(SslLosses, Option<SslGrads<T>>, Vec<T>)> {
        let cfg = &self.config;
        let b = batch.len();
        let m = cfg.embed_dim;
        let (h1, tape) = self.online.forward_train(batch.view1.clone())?;
        let (h2m, k) = self.momentum_keys(batch)?;

        let q_raw = layers::linear_forward(&h1, b, self.projection.tensor(0), self.projection.tensor(1));
        let (q, q_norms) = normalize_rows(&q_raw, cfg.proj_dim)?;
        let con = info_nce(&q, &k, negatives, cfg.proj_dim, cfg.temperature)?;

        // Three reconstruction branches decoded as one [3B, M] batch.
        let lam = batch.lambda;
        let h_mix = mixup_features(&h1, &h2m, lam);
        let t_mix = mixup_features(&batch.t1, &batch.t2, lam);
        let rec_mix = mixup_features(&batch.rec1.data, &batch.rec2.data, lam);
        let h_all: Vec<T> = [&h1[..], &h2m[..], &h_mix[..]].concat();
        let t_all: Vec<T> = [&batch.t1[..], &batch.t2[..], &t_mix[..]].concat();
        let (hc, gate) =
            condition_on_transform(&h_all, &t_all, self.conditioning.tensor(0), self.conditioning.tensor(1));
        let (decoded, dec_tape) = self.decoder.forward(&hc, 3 * b)?;

        // decoded is [3, 3B, 32, 32]; split per branch for the losses.
        let plane = PATCH_SIZE * PATCH_SIZE;
        let branch = |data: &[T], r: usize| -> Vec<T> {
            let mut out = Vec::with_capacity(CHANNELS * b * plane);
            for c in 0..CHANNELS {
                let start = (c * 3 * b + r * b) * plane;
                out.extend_from_slice(&data[start..start + b * plane]);
            }
            out
        };
        let targets = [&batch.rec1.data[..], &batch.rec2.data[..], &rec_mix[..]];
        let mut rec_losses = [T::zero(); 3];
        let mut rec_grads = Vec::with_capacity(3);
        for r in 0..3 {
            let (l, g) = reconstruction_loss(&branch(&decoded.data, r), targets[r])?;
            rec_losses[r] = l;
            rec_grads.push(g);
        }
        let w_con = T::lit(weights.contrastive);
        let w_rec = weights.reconstruction.map(T::lit);
        let total = w_con * con.loss + (0..3).map(|r| w_rec[r] * rec_losses[r]).sum::<T>();
        let to_f64 = |v: T| v.to_f64().unwrap();
        let losses = SslLosses {
            contrastive: to_f64(con.loss),
            rec_online: to_f64(rec_losses[0]),
            rec_momentum: to_f64(rec_losses[1]),
            rec_mixed: to_f64(rec_losses[2]),
            total: to_f64(total),
        };
        if !losses.total.is_finite() {
            return Err(Error::Training("non-finite SSL loss".into()));
        }
        if !with_grads {
            return Ok((losses, None, k));
        }

        // Decoder and conditioning.
        let mut d_decoded = Spatial::zeros(CHANNELS, 3 * b, PATCH_SIZE, PATCH_SIZE);
        for (r, g) in rec_grads.iter().enumerate() {
            for c in 0..CHANNELS {
                let dst = (c * 3 * b + r * b) * plane;
                let src = c * b * plane;
                for (d, &v) in d_decoded.data[dst..dst + b * plane].iter_mut().zip(&g[src..src + b * plane]) {
                    *d = v * w_rec[r];
                }
            }
        }
        let (dec_grads, d_hc) = self.decoder.backward(dec_tape, &d_decoded);
        let (d_h_all, d_cw, d_cb) = condition_backward(&h_all, &t_all, &gate, self.conditioning.tensor(0), &d_hc);
        let mut cond_grads = self.conditioning.zeros_like();
        cond_grads.tensor_mut(0).data_mut().copy_from_slice(&d_cw);
        cond_grads.tensor_mut(1).data_mut().copy_from_slice(&d_cb);

        // Projection head.
        let d_q: Vec<T> = con.d_q.iter().map(|&d| d * w_con).collect();
        let d_q_raw = normalize_rows_backward(&q, &q_norms, &d_q, cfg.proj_dim);
        let (d_pw, d_pb, d_h1_con) = layers::linear_backward(&h1, b, self.projection.tensor(0), &d_q_raw, true);
        let mut proj_grads = self.projection.zeros_like();
        proj_grads.tensor_mut(0).data_mut().copy_from_slice(&d_pw);
        proj_grads.tensor_mut(1).data_mut().copy_from_slice(&d_pb);

        // Online encoder: contrastive + online branch + lambda * mixed branch.
        let lam_t = T::lit(lam);
        let mut d_h1 = d_h1_con.expect("requested");
        for i in 0..b * m {
            d_h1[i] = d_h1[i] + d_h_all[i] + lam_t * d_h_all[2 * b * m + i];
        }
        let enc_grads = self.online.backward(tape, &d_h1);

        Ok((
            losses,
            Some(SslGrads {
                encoder: enc_grads,
                projection: proj_grads,
                conditioning: cond_grads,
                decoder: dec_grads,
            }),
            k,
        ))
    }
}

/// Optimizers for every trainable part of [`SslState`].
pub struct SslOptimizers<T> {
    encoder: Optimizer<T>,
    projection: Optimizer<T>,
    conditioning: Optimizer<T>,
    decoder: Optimizer<T>,
}

impl<T: Real> SslOptimizers<T> {
    pub fn new(state: &SslState<T>) -> Self {
        let rule = state.config.optimizer;
        Self {
            encoder: Optimizer::new(rule, state.online.params()),
            projection: Optimizer::new(rule, &state.projection),
            conditioning: Optimizer::new(rule, &state.conditioning),
            decoder: Optimizer::new(rule, state.decoder.params()),
        }
    }
}

/// One optimization step: draw views, update the trainable parameters,
/// then the momentum encoder, then the negative queue.
pub fn ssl_step<T: Real, R: Rng + ?Sized>(
    state: &mut SslState<T>,
    opt: &mut SslOptimizers<T>,
    instances: &[PatchInstance],
    rng: &mut R,
) -> Result<SslLosses> {
    let batch = prepare_batch::<T, _>(instances, state.config.mixup_alpha, rng)?;
    let negatives = state.queue.matrix();
    let (losses, grads, k) = state.forward_backward(&batch, &negatives, true)?;
    let grads = grads.expect("requested");
    opt.encoder.step(state.online.params_mut(), &grads.encoder)?;
    opt.projection.step(&mut state.projection, &grads.projection)?;
    opt.conditioning.step(&mut state.conditioning, &grads.conditioning)?;
    opt.decoder.step(state.decoder.params_mut(), &grads.decoder)?;
    let m = state.config.encoder_momentum;
    momentum_update(state.momentum.params_mut(), state.online.params(), m)?;
    momentum_update(&mut state.momentum_projection, &state.projection, m)?;
    state.queue.push_rows(&k);
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SslEpochLog {
    pub epoch: usize,
    pub losses: SslLosses,
}

pub struct PretrainOutput {
    pub encoder: Encoder<f32>,
    pub log: Vec<SslEpochLog>,
    pub steps_per_epoch: usize,
}

pub fn steps_per_epoch(num_instances: usize, batch_size: usize) -> usize {
    num_instances.div_ceil(batch_size)
}

/// Runs SSL over the instances of every given slice for the configured epochs.
pub fn pretrain(config: &SslConfig, slices: &[GraySlice]) -> Result<PretrainOutput> {
    pretrain_with(config, slices, |_| {})
}

/// As [`pretrain`], reporting each finished epoch to `on_epoch`.
pub fn pretrain_with(
    config: &SslConfig,
    slices: &[GraySlice],
    mut on_epoch: impl FnMut(&SslEpochLog),
) -> Result<PretrainOutput> {
    if slices.is_empty() {
        return Err(Error::Training("no training slices for pretraining".into()));
    }
    let mut state = SslState::<f32>::new(config.clone())?;
    let mut opt = SslOptimizers::new(&state);
    let tiles: Vec<Vec<patching::Tile>> = slices.iter().map(patching::split_into_patches).collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x55AA_55AA_0000_0001);
    let per_bag = config.instances_per_bag;
    let n_instances = tiles.len() * per_bag;
    let steps = steps_per_epoch(n_instances, config.batch_size);
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<(usize, usize)> = Vec::with_capacity(n_instances);
        let mut ks: Vec<usize> = (0..BAG_SIZE).collect();
        for bag in 0..tiles.len() {
            if per_bag < BAG_SIZE {
                ks.shuffle(&mut rng);
            }
            order.extend(ks[..per_bag].iter().map(|&k| (bag, k)));
        }
        order.shuffle(&mut rng);
        let mut sum = SslLosses::default();
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<PatchInstance> = chunk
                .iter()
                .map(|&(bag, k)| patching::to_instance(&tiles[bag][k], k / GRID, k % GRID))
                .collect();
            let l = ssl_step(&mut state, &mut opt, &batch, &mut rng)?;
            sum.accumulate(&l);
        }
        let entry = SslEpochLog { epoch: epoch + 1, losses: sum.scaled(1.0 / steps as f64) };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok(PretrainOutput { encoder: state.online, log, steps_per_epoch: steps })
}

/// CSV with header `epoch,contrastive,rec_online,rec_momentum,rec_mixed,total`.
pub fn log_to_csv(log: &[SslEpochLog]) -> String {
    let mut out = String::from("epoch,contrastive,rec_online,rec_momentum,rec_mixed,total\n");
    for e in log {
        let l = &e.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            e.epoch, l.contrastive, l.rec_online, l.rec_momentum, l.rec_mixed, l.total
        ));
    }
    out
}

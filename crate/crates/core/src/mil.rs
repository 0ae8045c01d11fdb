//! Attention-based deep MIL: instance embeddings are pooled with gated
//! attention and the pooled vector is classified by an affine layer and a
//! sigmoid. Training uses weighted binary cross-entropy, one bag per step.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::LabeledSlice;
use crate::error::{Error, Result};
use crate::nn::encoder::kaiming_uniform;
use crate::nn::layers::{self, sigmoid};
use crate::nn::tensor::{matmul, Op};
use crate::nn::{Encoder, OptimRule, Optimizer, ParamSet, Real, Tensor};
use crate::patching::{Bag, PatchInstance};

/// Probability clamp used inside the loss.
pub const BCE_EPS: f64 = 1e-7;
pub const DECISION_THRESHOLD: f64 = 0.5;

const ATT_V: usize = 0;
const ATT_U: usize = 1;
const ATT_W: usize = 2;
const CLS_W: usize = 3;
const CLS_B: usize = 4;

/// Attention and classifier tensors: `attention.V` `[L, M]`,
/// `attention.U` `[L, M]`, `attention.w` `[L]`, `classifier.weight` `[M]`,
/// `classifier.bias` `[1]`.
pub fn new_head<T: Real, R: Rng + ?Sized>(embed_dim: usize, attention_dim: usize, rng: &mut R) -> ParamSet<T> {
    let mut p = ParamSet::new();
    p.push("attention.V", kaiming_uniform(&[attention_dim, embed_dim], embed_dim, rng));
    p.push("attention.U", kaiming_uniform(&[attention_dim, embed_dim], embed_dim, rng));
    p.push("attention.w", kaiming_uniform(&[attention_dim], attention_dim, rng));
    p.push("classifier.weight", kaiming_uniform(&[embed_dim], embed_dim, rng));
    p.push("classifier.bias", Tensor::zeros(&[1]));
    p
}

fn check_head<T: Real>(head: &ParamSet<T>, embed_dim: usize) -> Result<usize> {
    let names = ["attention.V", "attention.U", "attention.w", "classifier.weight", "classifier.bias"];
    if head.len() != names.len() || head.names().iter().zip(names).any(|(a, b)| a != b) {
        return Err(Error::Checkpoint(format!(
            "head tensors must be {}; got {}",
            names.join(", "),
            head.names().join(", ")
        )));
    }
    let l = head.tensor(ATT_W).shape()[0];
    let ok = l > 0
        && head.tensor(ATT_V).shape() == [l, embed_dim]
        && head.tensor(ATT_U).shape() == [l, embed_dim]
        && head.tensor(CLS_W).shape() == [embed_dim]
        && head.tensor(CLS_B).shape() == [1];
    if !ok {
        return Err(Error::Checkpoint(format!("head shapes inconsistent with embedding dimension {embed_dim}")));
    }
    Ok(l)
}

/// Intermediate values of the attention head for one bag.
#[derive(Clone, Debug)]
pub struct HeadForward<T> {
    k: usize,
    tanh_v: Vec<T>,
    sigm_u: Vec<T>,
    pub attention: Vec<T>,
    pub pooled: Vec<T>,
    pub logit: T,
    pub theta: T,
}

fn head_forward<T: Real>(head: &ParamSet<T>, h: &[T], k: usize, m: usize) -> Result<HeadForward<T>> {
    if k == 0 || h.len() != k * m {
        return Err(Error::dim(format!("K >= 1 embeddings of size {m}"), h.len()));
    }
    if !h.iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite instance embedding".into()));
    }
    let l = head.tensor(ATT_W).len();
    let mut tanh_v = vec![T::zero(); k * l];
    let mut sigm_u = vec![T::zero(); k * l];
    matmul(k, m, l, h, Op::N, head.tensor(ATT_V).data(), Op::T, &mut tanh_v, false);
    matmul(k, m, l, h, Op::N, head.tensor(ATT_U).data(), Op::T, &mut sigm_u, false);
    layers::tanh_inplace(&mut tanh_v);
    sigm_u.iter_mut().for_each(|v| *v = sigmoid(*v));
    let w = head.tensor(ATT_W).data();
    let scores: Vec<T> = tanh_v
        .chunks(l)
        .zip(sigm_u.chunks(l))
        .map(|(t, s)| t.iter().zip(s).zip(w).map(|((&a, &b), &c)| a * b * c).sum())
        .collect();
    let attention = softmax(&scores);
    let pooled = pool(h, &attention, m);
    let logit = pooled.iter().zip(head.tensor(CLS_W).data()).map(|(&a, &b)| a * b).sum::<T>()
        + head.tensor(CLS_B).data()[0];
    Ok(HeadForward { k, tanh_v, sigm_u, attention, pooled, logit, theta: sigmoid(logit) })
}

/// Backward of the head given `d loss / d logit`; returns head grads and
/// `d loss / d H`.
fn head_backward<T: Real>(head: &ParamSet<T>, h: &[T], fwd: &HeadForward<T>, d_logit: T) -> (ParamSet<T>, Vec<T>) {
    let k = fwd.k;
    let m = fwd.pooled.len();
    let l = head.tensor(ATT_W).len();
    let phi = head.tensor(CLS_W).data();
    let w = head.tensor(ATT_W).data();
    let a = &fwd.attention;
    let mut grads = head.zeros_like();
    for (g, &z) in grads.tensor_mut(CLS_W).data_mut().iter_mut().zip(&fwd.pooled) {
        *g = d_logit * z;
    }
    grads.tensor_mut(CLS_B).data_mut()[0] = d_logit;
    let d_z: Vec<T> = phi.iter().map(|&p| d_logit * p).collect();

    // Pooling: z = sum_k a_k h_k.
    let mut d_h = vec![T::zero(); k * m];
    let mut d_a = vec![T::zero(); k];
    for i in 0..k {
        let row = &h[i * m..(i + 1) * m];
        d_a[i] = row.iter().zip(&d_z).map(|(&x, &d)| x * d).sum();
        for (dh, &d) in d_h[i * m..(i + 1) * m].iter_mut().zip(&d_z) {
            *dh = a[i] * d;
        }
    }
    // Softmax.
    let dot: T = a.iter().zip(&d_a).map(|(&x, &y)| x * y).sum();
    let d_score: Vec<T> = a.iter().zip(&d_a).map(|(&x, &y)| x * (y - dot)).collect();
    // Gated scores: e = tanh(Vh) * sigm(Uh), score = w . e.
    let mut d_pre_v = vec![T::zero(); k * l];
    let mut d_pre_u = vec![T::zero(); k * l];
    let d_w = grads.tensor_mut(ATT_W).data_mut();
    for i in 0..k {
        for j in 0..l {
            let idx = i * l + j;
            let (t, s) = (fwd.tanh_v[idx], fwd.sigm_u[idx]);
            d_w[j] = d_w[j] + d_score[i] * t * s;
            let de = d_score[i] * w[j];
            d_pre_v[idx] = de * s * (T::one() - t * t);
            d_pre_u[idx] = de * t * s * (T::one() - s);
        }
    }
    matmul(l, k, m, &d_pre_v, Op::T, h, Op::N, grads.tensor_mut(ATT_V).data_mut(), false);
    matmul(l, k, m, &d_pre_u, Op::T, h, Op::N, grads.tensor_mut(ATT_U).data_mut(), false);
    matmul(k, l, m, &d_pre_v, Op::N, head.tensor(ATT_V).data(), Op::N, &mut d_h, true);
    matmul(k, l, m, &d_pre_u, Op::N, head.tensor(ATT_U).data(), Op::N, &mut d_h, true);
    (grads, d_h)
}

fn softmax<T: Real>(x: &[T]) -> Vec<T> {
    // Exponentials and the normaliser are accumulated in f64 so that the
    // weights sum to one up to a single rounding per entry, even for long
    // bags in f32.
    let max = x.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v.to_f64().unwrap_or(f64::NAN)));
    let e: Vec<f64> = x.iter().map(|&v| (v.to_f64().unwrap_or(f64::NAN) - max).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| T::lit(v / sum)).collect()
}

/// Gated attention weights for `K` embeddings of size `M` (row-major `[K, M]`).
pub fn attention_weights<T: Real>(h: &[T], k: usize, head: &ParamSet<T>) -> Result<Vec<T>> {
    let m = head.tensor(CLS_W).len();
    Ok(head_forward(head, h, k, m)?.attention)
}

/// `z = sum_k a_k h_k`.
pub fn pool<T: Real>(h: &[T], a: &[T], m: usize) -> Vec<T> {
    let mut z = vec![T::zero(); m];
    for (row, &ak) in h.chunks(m).zip(a) {
        for (zi, &x) in z.iter_mut().zip(row) {
            *zi = *zi + ak * x;
        }
    }
    z
}

/// `w_p = N / n_p`, `w_n = N / n_n`.
pub fn class_weights(total: usize, positives: usize, negatives: usize) -> Result<(f64, f64)> {
    if positives == 0 || negatives == 0 {
        return Err(Error::config(
            "class_counts",
            format!("both classes need at least one bag (positives {positives}, negatives {negatives})"),
        ));
    }
    Ok((total as f64 / positives as f64, total as f64 / negatives as f64))
}

/// `-(w_p y log(theta) + w_n (1 - y) log(1 - theta))` with theta clamped to
/// `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce<T: Real>(theta: T, y: u8, w_pos: f64, w_neg: f64) -> T {
    let eps = T::lit(BCE_EPS);
    let t = theta.max(eps).min(T::one() - eps);
    if y == 1 {
        -T::lit(w_pos) * t.ln()
    } else {
        -T::lit(w_neg) * (T::one() - t).ln()
    }
}

/// `d weighted_bce / d logit`; zero where the clamp is active.
pub(crate) fn weighted_bce_grad_logit<T: Real>(theta: T, y: u8, w_pos: f64, w_neg: f64) -> T {
    let eps = T::lit(BCE_EPS);
    if theta < eps || theta > T::one() - eps {
        return T::zero();
    }
    if y == 1 {
        T::lit(w_pos) * (theta - T::one())
    } else {
        T::lit(w_neg) * theta
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainMode {
    /// Encoder frozen; only attention and classifier are trained.
    Transfer,
    Finetune,
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Transfer => "transfer",
            TrainMode::Finetune => "finetune",
        })
    }
}

impl FromStr for TrainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transfer" => Ok(TrainMode::Transfer),
            "finetune" => Ok(TrainMode::Finetune),
            other => Err(Error::config("mode", format!("expected transfer or finetune, got `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BagPrediction {
    pub theta: f64,
    /// One weight per instance, in the bag's instance order.
    pub attention: Vec<f64>,
    pub predicted: u8,
}

#[derive(Clone, Debug)]
pub struct MilModel<T> {
    pub encoder: Encoder<T>,
    pub head: ParamSet<T>,
    pub encoder_frozen: bool,
}

impl<T: Real> MilModel<T> {
    pub fn new<R: Rng + ?Sized>(encoder: Encoder<T>, attention_dim: usize, rng: &mut R) -> Result<Self> {
        if attention_dim == 0 {
            return Err(Error::config("attention_dim", "must be positive"));
        }
        let head = new_head(encoder.embed_dim(), attention_dim, rng);
        Ok(Self { encoder, head, encoder_frozen: false })
    }

    pub fn from_parts(encoder: Encoder<T>, head: ParamSet<T>) -> Result<Self> {
        check_head(&head, encoder.embed_dim())?;
        Ok(Self { encoder, head, encoder_frozen: false })
    }

    pub fn embed_dim(&self) -> usize {
        self.encoder.embed_dim()
    }

    pub fn attention_dim(&self) -> usize {
        self.head.tensor(ATT_W).len()
    }

    /// Encoder tensors followed by head tensors.
    pub fn params(&self) -> ParamSet<T> {
        self.encoder.params().clone().concat(&self.head)
    }

    pub fn cast<U: Real>(&self) -> MilModel<U> {
        MilModel { encoder: self.encoder.cast(), head: self.head.cast(), encoder_frozen: self.encoder_frozen }
    }

    pub fn head_forward(&self, h: &[T], k: usize) -> Result<HeadForward<T>> {
        head_forward(&self.head, h, k, self.embed_dim())
    }

    pub fn embed(&self, instances: &[&PatchInstance]) -> Result<Vec<T>> {
        self.encoder.encode_batch(instances)
    }

    /// Classifies precomputed embeddings `[K, M]`.
    pub fn classify_embeddings(&self, h: &[T], k: usize) -> Result<BagPrediction> {
        let f = self.head_forward(h, k)?;
        let theta = f.theta.to_f64().unwrap();
        Ok(BagPrediction {
            theta,
            attention: f.attention.iter().map(|v| v.to_f64().unwrap()).collect(),
            predicted: u8::from(theta >= DECISION_THRESHOLD),
        })
    }

    /// Weighted BCE of one bag given precomputed embeddings.
    pub fn loss_from_embeddings(&self, h: &[T], k: usize, y: u8, w_pos: f64, w_neg: f64) -> Result<T> {
        Ok(weighted_bce(self.head_forward(h, k)?.theta, y, w_pos, w_neg))
    }

    /// Loss and gradients for one bag. Encoder gradients are computed only
    /// when the encoder is trainable.
    pub fn loss_and_grads(
        &self,
        instances: &[&PatchInstance],
        y: u8,
        w_pos: f64,
        w_neg: f64,
    ) -> Result<(T, ParamSet<T>, Option<ParamSet<T>>)> {
        let k = instances.len();
        if self.encoder_frozen {
            let h = self.embed(instances)?;
            let (loss, head, _) = self.head_loss_and_grads(&h, k, y, w_pos, w_neg)?;
            return Ok((loss, head, None));
        }
        let (h, tape) = self.encoder.forward_train_instances(instances)?;
        let (loss, head, d_h) = self.head_loss_and_grads(&h, k, y, w_pos, w_neg)?;
        let enc = self.encoder.backward(tape, &d_h);
        Ok((loss, head, Some(enc)))
    }

    /// Loss, head gradients and `d loss / d H` for precomputed embeddings.
    pub fn head_loss_and_grads(
        &self,
        h: &[T],
        k: usize,
        y: u8,
        w_pos: f64,
        w_neg: f64,
    ) -> Result<(T, ParamSet<T>, Vec<T>)> {
        let f = self.head_forward(h, k)?;
        let loss = weighted_bce(f.theta, y, w_pos, w_neg);
        if !loss.is_finite() {
            return Err(Error::Training("non-finite MIL loss".into()));
        }
        let d_logit = weighted_bce_grad_logit(f.theta, y, w_pos, w_neg);
        let (grads, d_h) = head_backward(&self.head, h, &f, d_logit);
        Ok((loss, grads, d_h))
    }
}

impl<T: Real> MilModel<T> {
    /// Splits a combined checkpoint into encoder and head tensors.
    pub fn from_params(params: &ParamSet<T>) -> Result<Self> {
        let encoder = Encoder::from_params(params.filter_prefix("encoder."))?;
        let mut head = ParamSet::new();
        for (name, t) in params.iter().filter(|(n, _)| !n.starts_with("encoder.")) {
            head.push(name, t.clone());
        }
        Self::from_parts(encoder, head)
    }
}

pub fn classify_bag<T: Real>(model: &MilModel<T>, bag: &Bag) -> Result<BagPrediction> {
    if bag.is_empty() {
        return Err(Error::Validation("cannot classify an empty bag".into()));
    }
    let h = model.embed(&bag.instance_refs())?;
    model.classify_embeddings(&h, bag.len())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Metrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Metrics {
    pub fn from_predictions(pairs: impl IntoIterator<Item = (u8, u8)>) -> Self {
        let mut m = Metrics::default();
        for (truth, pred) in pairs {
            match (truth, pred) {
                (1, 1) => m.tp += 1,
                (0, 1) => m.fp += 1,
                (1, 0) => m.fn_ += 1,
                _ => m.tn += 1,
            }
        }
        m
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

pub const METRICS_CSV_HEADER: &str = "split,acc,prec,rec,f1,TP,FP,FN,TN";

pub fn metrics_csv_row(split: &str, m: &Metrics) -> String {
    format!(
        "{split},{:.6},{:.6},{:.6},{:.6},{},{},{},{}",
        m.accuracy(),
        m.precision(),
        m.recall(),
        m.f1(),
        m.tp,
        m.fp,
        m.fn_,
        m.tn
    )
}

/// Classifies every slice (in parallel) and tallies the confusion counts.
pub fn evaluate(model: &MilModel<f32>, slices: &[LabeledSlice]) -> Result<(Metrics, Vec<BagPrediction>)> {
    if slices.is_empty() {
        return Err(Error::Validation("evaluation split is empty".into()));
    }
    let preds: Vec<BagPrediction> = slices
        .par_iter()
        .map(|s| classify_bag(model, &s.bag()?))
        .collect::<Result<_>>()?;
    let metrics = Metrics::from_predictions(slices.iter().zip(&preds).map(|(s, p)| (s.label, p.predicted)));
    Ok((metrics, preds))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MilConfig {
    pub attention_dim: usize,
    pub epochs: usize,
    pub optimizer: OptimRule,
    pub mode: TrainMode,
    pub seed: u64,
}

impl Default for MilConfig {
    fn default() -> Self {
        Self {
            attention_dim: 64,
            epochs: 50,
            optimizer: OptimRule::mil_default(),
            mode: TrainMode::Finetune,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MilEpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

pub fn log_to_csv(log: &[MilEpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,valid_loss\n");
    for e in log {
        out.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.valid_loss));
    }
    out
}

pub struct MilTrainOutput {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: MilModel<f32>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub log: Vec<MilEpochLog>,
    pub class_weights: (f64, f64),
}

fn embed_all(encoder: &Encoder<f32>, slices: &[LabeledSlice]) -> Result<Vec<Vec<f32>>> {
    slices
        .par_iter()
        .map(|s| {
            let inst = s.instances()?;
            encoder.encode_batch(&inst.iter().collect::<Vec<_>>())
        })
        .collect()
}

fn mean_loss(
    model: &MilModel<f32>,
    embeddings: &[Vec<f32>],
    slices: &[LabeledSlice],
    weights: (f64, f64),
) -> Result<f64> {
    let losses: Vec<f64> = embeddings
        .par_iter()
        .zip(slices.par_iter())
        .map(|(h, s)| {
            let k = h.len() / model.embed_dim();
            Ok(f64::from(model.loss_from_embeddings(h, k, s.label, weights.0, weights.1)?))
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Bag-level training loop. Class weights come from the training split;
/// the returned model is the one with minimum validation loss.
pub fn train_mil(
    config: &MilConfig,
    mut model: MilModel<f32>,
    train: &[LabeledSlice],
    valid: &[LabeledSlice],
) -> Result<MilTrainOutput> {
    train_mil_with(config, &mut model, train, valid, |_| {})
}

pub fn train_mil_with(
    config: &MilConfig,
    model: &mut MilModel<f32>,
    train: &[LabeledSlice],
    valid: &[LabeledSlice],
    mut on_epoch: impl FnMut(&MilEpochLog),
) -> Result<MilTrainOutput> {
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Validation("MIL training needs nonempty train and valid splits".into()));
    }
    if model.attention_dim() != config.attention_dim {
        return Err(Error::config("attention_dim", "does not match the model"));
    }
    let positives = train.iter().filter(|s| s.label == 1).count();
    let weights = class_weights(train.len(), positives, train.len() - positives)?;
    model.encoder_frozen = config.mode == TrainMode::Transfer;
    let mut head_opt = Optimizer::new(config.optimizer, &model.head);
    let mut enc_opt = Optimizer::new(config.optimizer, model.encoder.params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x4D49_4C00);

    // A frozen encoder makes embeddings constant, so compute them once.
    let frozen = model.encoder_frozen;
    let train_cache = if frozen { Some(embed_all(&model.encoder, train)?) } else { None };
    let mut valid_cache = if frozen { Some(embed_all(&model.encoder, valid)?) } else { None };

    let mut best: Option<(f64, usize, MilModel<f32>)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let s = &train[i];
            let loss = if let Some(cache) = &train_cache {
                let h = &cache[i];
                let (loss, grads, _) = model.head_loss_and_grads(h, h.len() / model.embed_dim(), s.label, weights.0, weights.1)?;
                head_opt.step(&mut model.head, &grads)?;
                loss
            } else {
                let inst = s.instances()?;
                let refs: Vec<&PatchInstance> = inst.iter().collect();
                let (loss, grads, enc_grads) = model.loss_and_grads(&refs, s.label, weights.0, weights.1)?;
                head_opt.step(&mut model.head, &grads)?;
                if let Some(g) = enc_grads {
                    enc_opt.step(model.encoder.params_mut(), &g)?;
                }
                loss
            };
            total += f64::from(loss);
        }
        if !frozen {
            valid_cache = Some(embed_all(&model.encoder, valid)?);
        }
        let valid_loss = mean_loss(model, valid_cache.as_ref().expect("computed above"), valid, weights)?;
        let entry = MilEpochLog { epoch, train_loss: total / train.len() as f64, valid_loss };
        if !entry.train_loss.is_finite() || !valid_loss.is_finite() {
            return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
        }
        on_epoch(&entry);
        log.push(entry);
        if best.as_ref().is_none_or(|(l, _, _)| valid_loss < *l) {
            best = Some((valid_loss, epoch, model.clone()));
        }
    }
    let (best_epoch, best_model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model.clone()),
    };
    Ok(MilTrainOutput { model: best_model, best_epoch, log, class_weights: weights })
}

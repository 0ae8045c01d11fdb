//! Run configuration and the condition harness that ties pretraining and MIL
//! together: random init (A), supervised instance pretraining (B analog) and
//! self-supervised pretraining on another dataset (C) or the same one (D).

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::ctio::{self, GraySlice, Split};
use crate::dataset::{self, LabeledSlice};
use crate::error::{Error, Result};
use crate::mil::{self, class_weights, weighted_bce, Metrics, MilConfig, MilModel, MilTrainOutput, TrainMode};
use crate::nn::layers::{linear_backward, linear_forward, sigmoid};
use crate::nn::{read_checkpoint, Arch, Encoder, OptimRule, Optimizer, ParamSet, Tensor};
use crate::patching::{self, PatchInstance, BAG_SIZE, GRID};
use crate::ssl::{self, SslConfig, SslEpochLog};
use crate::synth::GenConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    /// Random initialization.
    A,
    /// Supervised pretraining on oracle instance labels, standing in for
    /// ImageNet weights.
    B,
    /// Self-supervised pretraining on a separate source dataset.
    C,
    /// Self-supervised pretraining on the training split of the target dataset.
    D,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::A, Condition::B, Condition::C, Condition::D];

    /// Short description of where the encoder weights come from.
    pub fn encoder_init(self) -> &'static str {
        match self {
            Condition::A => "random",
            Condition::B => "supervised instance pretraining (analog of ImageNet weights)",
            Condition::C => "self-supervised on source dataset",
            Condition::D => "self-supervised on target train split",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::A => "A",
            Condition::B => "B-analog",
            Condition::C => "C",
            Condition::D => "D",
        })
    }
}

impl FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "A" => Ok(Condition::A),
            "B" | "B-ANALOG" => Ok(Condition::B),
            "C" => Ok(Condition::C),
            "D" => Ok(Condition::D),
            _ => Err(Error::config("condition", format!("unknown condition `{s}` (expected A, B, C or D)"))),
        }
    }
}

/// Settings for the supervised instance pretraining used by condition B.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisedConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub instances_per_bag: usize,
    pub optimizer: OptimRule,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            instances_per_bag: 32,
            optimizer: OptimRule::Adam { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-5 },
        }
    }
}

/// Every tunable of a run, read from a flat key=value file.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenConfig,
    pub ssl: SslConfig,
    pub mil: MilConfig,
    pub supervised: SupervisedConfig,
    pub condition: Condition,
    /// Encoder checkpoint for conditions B, C and D when training a single model.
    pub encoder_checkpoint: Option<PathBuf>,
    /// Unlabeled source data for condition C in the comparison harness.
    pub ssl_source_manifest: Option<PathBuf>,
    /// Seeds for the comparison harness; single runs use `seed`.
    pub seeds: Vec<u64>,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            gen: GenConfig::for_task(crate::synth::Task::Blob),
            ssl: SslConfig::default(),
            mil: MilConfig::default(),
            supervised: SupervisedConfig::default(),
            condition: Condition::D,
            encoder_checkpoint: None,
            ssl_source_manifest: None,
            seeds: vec![0],
            seed: 0,
        }
    }
}

fn parse_seeds(raw: &str) -> Result<Vec<u64>> {
    raw.split(',')
        .map(|s| s.trim().parse::<u64>().map_err(|e| Error::config("seeds", format!("cannot parse `{s}`: {e}"))))
        .collect()
}

fn take_adam(kv: &mut KvConfig, prefix: &str, rule: &mut OptimRule) -> Result<()> {
    if let OptimRule::Adam { lr, beta1, beta2, weight_decay, .. } = rule {
        kv.take(&format!("{prefix}_lr"), lr)?;
        kv.take(&format!("{prefix}_beta1"), beta1)?;
        kv.take(&format!("{prefix}_beta2"), beta2)?;
        kv.take(&format!("{prefix}_weight_decay"), weight_decay)?;
    }
    Ok(())
}

fn check_rule(prefix: &str, rule: &OptimRule) -> Result<()> {
    let (lr, wd) = match *rule {
        OptimRule::SgdMomentum { lr, momentum, weight_decay } => {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::config(format!("{prefix}_momentum"), "must be in [0, 1)"));
            }
            (lr, weight_decay)
        }
        OptimRule::Adam { lr, beta1, beta2, weight_decay, .. } => {
            for (name, b) in [("beta1", beta1), ("beta2", beta2)] {
                if !(0.0..1.0).contains(&b) {
                    return Err(Error::config(format!("{prefix}_{name}"), "must be in [0, 1)"));
                }
            }
            (lr, weight_decay)
        }
    };
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::config(format!("{prefix}_lr"), "must be positive"));
    }
    if !(wd >= 0.0 && wd.is_finite()) {
        return Err(Error::config(format!("{prefix}_weight_decay"), "must be non-negative"));
    }
    Ok(())
}

impl RunConfig {
    /// Reads every known key; unknown keys are errors.
    pub fn from_kv(mut kv: KvConfig) -> Result<Self> {
        let mut c = RunConfig { gen: GenConfig::from_kv(&mut kv)?, ..RunConfig::default() };
        c.seed = c.gen.seed;
        kv.take("condition", &mut c.condition)?;
        c.encoder_checkpoint = kv.take_opt("encoder_checkpoint")?;
        c.ssl_source_manifest = kv.take_opt("ssl_source_manifest")?;
        if let Some(raw) = kv.take_opt::<String>("seeds")? {
            c.seeds = parse_seeds(&raw)?;
        } else {
            c.seeds = vec![c.seed];
        }

        let s = &mut c.ssl;
        kv.take("arch", &mut s.arch)?;
        kv.take("embed_dim", &mut s.embed_dim)?;
        kv.take("proj_dim", &mut s.proj_dim)?;
        kv.take("temperature", &mut s.temperature)?;
        kv.take("queue_size", &mut s.queue_size)?;
        kv.take("encoder_momentum", &mut s.encoder_momentum)?;
        kv.take("lambda_rec", &mut s.lambda_rec)?;
        kv.take("mixup_alpha", &mut s.mixup_alpha)?;
        kv.take("ssl_batch_size", &mut s.batch_size)?;
        kv.take("ssl_epochs", &mut s.epochs)?;
        kv.take("ssl_instances_per_bag", &mut s.instances_per_bag)?;
        if let OptimRule::SgdMomentum { lr, momentum, weight_decay } = &mut s.optimizer {
            kv.take("ssl_lr", lr)?;
            kv.take("ssl_momentum", momentum)?;
            kv.take("ssl_weight_decay", weight_decay)?;
        }

        let m = &mut c.mil;
        kv.take("attention_dim", &mut m.attention_dim)?;
        kv.take("mil_epochs", &mut m.epochs)?;
        kv.take("mode", &mut m.mode)?;
        take_adam(&mut kv, "mil", &mut m.optimizer)?;

        let b = &mut c.supervised;
        kv.take("sup_epochs", &mut b.epochs)?;
        kv.take("sup_batch_size", &mut b.batch_size)?;
        kv.take("sup_instances_per_bag", &mut b.instances_per_bag)?;
        take_adam(&mut kv, "sup", &mut b.optimizer)?;

        kv.finish()?;
        c.set_seed(c.seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_kv(KvConfig::load(path)?)
    }

    /// Propagates one seed to every stage.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gen.seed = seed;
        self.ssl.seed = seed;
        self.mil.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.ssl.validate()?;
        check_rule("ssl", &self.ssl.optimizer)?;
        check_rule("mil", &self.mil.optimizer)?;
        check_rule("sup", &self.supervised.optimizer)?;
        if self.mil.attention_dim == 0 {
            return Err(Error::config("attention_dim", "must be positive"));
        }
        if self.supervised.batch_size == 0 {
            return Err(Error::config("sup_batch_size", "must be positive"));
        }
        if !(1..=BAG_SIZE).contains(&self.supervised.instances_per_bag) {
            return Err(Error::config("sup_instances_per_bag", "must be in [1, 256]"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "needs at least one seed"));
        }
        if self.condition == Condition::A && self.encoder_checkpoint.is_some() {
            return Err(Error::config("encoder_checkpoint", "condition A trains from random init and takes no checkpoint"));
        }
        Ok(())
    }

    /// Condition A always uses LeNet-5; the others use the configured arch.
    pub fn arch_for(&self, condition: Condition) -> Arch {
        if condition == Condition::A {
            Arch::Lenet5
        } else {
            self.ssl.arch
        }
    }

    fn mil_for(&self, mode: TrainMode, seed: u64) -> MilConfig {
        MilConfig { mode, seed, ..self.mil.clone() }
    }
}

/// Random instances drawn from each bag with their oracle labels.
fn sample_labeled_instances(
    slices: &[LabeledSlice],
    per_bag: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(PatchInstance, u8)>> {
    let mut out = Vec::with_capacity(slices.len() * per_bag);
    let mut ks: Vec<usize> = (0..BAG_SIZE).collect();
    for s in slices {
        let labels = s
            .instance_labels
            .as_ref()
            .ok_or_else(|| Error::Validation(format!("{} has no instance labels", s.path.display())))?;
        let tiles = s.tiles()?;
        ks.shuffle(rng);
        for &k in &ks[..per_bag] {
            out.push((patching::to_instance(&tiles[k], k / GRID, k % GRID), labels[k]));
        }
    }
    Ok(out)
}

pub struct SupervisedOutput {
    pub encoder: Encoder<f32>,
    /// Mean weighted BCE per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Trains an encoder plus a linear probe on oracle instance labels with
/// class-weighted BCE, then discards the probe.
pub fn supervised_pretrain(
    config: &SupervisedConfig,
    arch: Arch,
    embed_dim: usize,
    seed: u64,
    train: &[LabeledSlice],
) -> Result<SupervisedOutput> {
    if train.is_empty() {
        return Err(Error::Validation("supervised pretraining needs a nonempty train split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5355_5000);
    let mut encoder = Encoder::<f32>::new(arch, embed_dim, &mut rng)?;
    let mut probe = ParamSet::new();
    probe.push("probe.weight", crate::nn::encoder::kaiming_uniform(&[1, embed_dim], embed_dim, &mut rng));
    probe.push("probe.bias", Tensor::zeros(&[1]));

    let mut positives = 0usize;
    let mut total = 0usize;
    for s in train {
        if let Some(l) = &s.instance_labels {
            positives += l.iter().filter(|&&v| v == 1).count();
            total += l.len();
        }
    }
    let (w_pos, w_neg) = class_weights(total, positives, total - positives)?;
    let mut enc_opt = Optimizer::new(config.optimizer, encoder.params());
    let mut probe_opt = Optimizer::new(config.optimizer, &probe);
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut pool = sample_labeled_instances(train, config.instances_per_bag, &mut rng)?;
        pool.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in pool.chunks(config.batch_size) {
            let refs: Vec<&PatchInstance> = chunk.iter().map(|(p, _)| p).collect();
            let n = refs.len();
            let (h, tape) = encoder.forward_train_instances(&refs)?;
            let logits = linear_forward(&h, n, probe.tensor(0), probe.tensor(1));
            let scale = 1.0 / n as f32;
            let mut d_logits = Vec::with_capacity(n);
            for (&z, (_, y)) in logits.iter().zip(chunk) {
                let theta = sigmoid(z);
                sum += f64::from(weighted_bce(theta, *y, w_pos, w_neg)) / n as f64;
                d_logits.push(mil::weighted_bce_grad_logit(theta, *y, w_pos, w_neg) * scale);
            }
            let (dw, db, d_h) = linear_backward(&h, n, probe.tensor(0), &d_logits, true);
            let mut probe_grads = probe.zeros_like();
            probe_grads.tensor_mut(0).data_mut().copy_from_slice(&dw);
            probe_grads.tensor_mut(1).data_mut().copy_from_slice(&db);
            let enc_grads = encoder.backward(tape, &d_h.expect("requested"));
            enc_opt.step(encoder.params_mut(), &enc_grads)?;
            probe_opt.step(&mut probe, &probe_grads)?;
        }
        let mean = sum / pool.len().div_ceil(config.batch_size) as f64;
        if !mean.is_finite() {
            return Err(Error::Training(format!("non-finite supervised loss at epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }
    Ok(SupervisedOutput { encoder, epoch_losses })
}

/// Loads the encoder tensors of an encoder-only or full MIL checkpoint.
pub fn load_encoder(path: impl AsRef<Path>) -> Result<Encoder<f32>> {
    Encoder::from_params(read_checkpoint(path)?.filter_prefix("encoder."))
}

/// Fresh MIL model around `encoder`, head initialized from `seed`.
pub fn build_model(encoder: Encoder<f32>, attention_dim: usize, seed: u64) -> Result<MilModel<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4845_4144);
    MilModel::new(encoder, attention_dim, &mut rng)
}

/// Random encoder for condition A.
pub fn random_encoder(arch: Arch, embed_dim: usize, seed: u64) -> Result<Encoder<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x454E_4300);
    Encoder::new(arch, embed_dim, &mut rng)
}

/// Self-supervised pretraining on the train split of a manifest.
pub fn pretrain_on(ssl_config: &SslConfig, manifest: impl AsRef<Path>) -> Result<ssl::PretrainOutput> {
    let slices: Vec<GraySlice> = dataset::load_split_from(manifest, Split::Train)?.into_iter().map(|s| s.slice).collect();
    ssl::pretrain(ssl_config, &slices)
}

/// Train, valid and test splits of one manifest, windowed in memory.
pub struct Splits {
    pub train: Vec<LabeledSlice>,
    pub valid: Vec<LabeledSlice>,
    pub test: Vec<LabeledSlice>,
}

impl Splits {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path.as_ref();
        let manifest = ctio::load_manifest(path)?;
        let dir = path.parent().unwrap_or(Path::new("."));
        Ok(Self {
            train: dataset::load_split(&manifest, dir, Split::Train)?,
            valid: dataset::load_split(&manifest, dir, Split::Valid)?,
            test: dataset::load_split(&manifest, dir, Split::Test)?,
        })
    }

    pub fn train_gray(&self) -> Vec<GraySlice> {
        self.train.iter().map(|s| s.slice.clone()).collect()
    }
}

/// Outcome of one condition, mode and seed.
pub struct RunOutcome {
    pub condition: Condition,
    pub mode: TrainMode,
    pub seed: u64,
    pub train: MilTrainOutput,
    pub test_metrics: Metrics,
}

/// Trains MIL from `encoder` and evaluates on the test split.
pub fn train_and_test(
    config: &RunConfig,
    condition: Condition,
    mode: TrainMode,
    seed: u64,
    encoder: Encoder<f32>,
    splits: &Splits,
) -> Result<RunOutcome> {
    let model = build_model(encoder, config.mil.attention_dim, seed)?;
    let train = mil::train_mil(&config.mil_for(mode, seed), model, &splits.train, &splits.valid)?;
    let (test_metrics, _) = mil::evaluate(&train.model, &splits.test)?;
    Ok(RunOutcome { condition, mode, seed, train, test_metrics })
}

/// Pretrained (or random) encoders for one seed, keyed by condition.
pub struct SeedEncoders {
    pub seed: u64,
    pub encoders: Vec<(Condition, Encoder<f32>)>,
    /// SSL logs of conditions C and D.
    pub ssl_logs: Vec<(Condition, Vec<SslEpochLog>)>,
}

/// Builds the initial encoder of every condition that applies: C only when
/// a source manifest is configured.
pub fn seed_encoders(config: &RunConfig, seed: u64, splits: &Splits) -> Result<SeedEncoders> {
    let mut ssl_config = config.ssl.clone();
    ssl_config.seed = seed;
    let mut encoders = vec![(Condition::A, random_encoder(Arch::Lenet5, config.ssl.embed_dim, seed)?)];
    let b = supervised_pretrain(&config.supervised, config.ssl.arch, config.ssl.embed_dim, seed, &splits.train)?;
    encoders.push((Condition::B, b.encoder));
    let mut ssl_logs = Vec::new();
    if let Some(source) = &config.ssl_source_manifest {
        let c = pretrain_on(&ssl_config, source)?;
        encoders.push((Condition::C, c.encoder));
        ssl_logs.push((Condition::C, c.log));
    }
    let d = ssl::pretrain(&ssl_config, &splits.train_gray())?;
    encoders.push((Condition::D, d.encoder));
    ssl_logs.push((Condition::D, d.log));
    Ok(SeedEncoders { seed, encoders, ssl_logs })
}

/// One row of the comparison table: a condition and mode summarized over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub condition: Condition,
    pub mode: TrainMode,
    /// Test metrics per seed, in seed order.
    pub per_seed: Vec<(u64, Metrics)>,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl CompareRow {
    fn median_of(&self, f: impl Fn(&Metrics) -> f64) -> f64 {
        median(self.per_seed.iter().map(|(_, m)| f(m)).collect())
    }

    pub fn median_acc(&self) -> f64 {
        self.median_of(Metrics::accuracy)
    }

    pub fn median_prec(&self) -> f64 {
        self.median_of(Metrics::precision)
    }

    pub fn median_rec(&self) -> f64 {
        self.median_of(Metrics::recall)
    }

    pub fn median_f1(&self) -> f64 {
        self.median_of(Metrics::f1)
    }
}

/// Header of the comparison summary; metrics are medians over seeds.
pub const COMPARE_CSV_HEADER: &str = "condition,mode,encoder_init,seeds,acc,prec,rec,f1,f1_min,f1_max";

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let mut out = format!("{COMPARE_CSV_HEADER}\n");
    for r in rows {
        let f1s: Vec<f64> = r.per_seed.iter().map(|(_, m)| m.f1()).collect();
        let seeds: Vec<String> = r.per_seed.iter().map(|(s, _)| s.to_string()).collect();
        out.push_str(&format!(
            "{},{},\"{}\",{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            r.condition,
            r.mode,
            r.condition.encoder_init(),
            seeds.join(";"),
            r.median_acc(),
            r.median_prec(),
            r.median_rec(),
            r.median_f1(),
            f1s.iter().copied().fold(f64::INFINITY, f64::min),
            f1s.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ));
    }
    out
}

/// Header of the per-seed detail table.
pub const COMPARE_DETAIL_HEADER: &str = "condition,mode,seed,best_epoch,acc,prec,rec,f1,TP,FP,FN,TN";

pub fn compare_detail_csv(rows: &[CompareRow], best_epochs: &[(Condition, TrainMode, u64, usize)]) -> String {
    let mut out = format!("{COMPARE_DETAIL_HEADER}\n");
    for r in rows {
        for (seed, m) in &r.per_seed {
            let best = best_epochs
                .iter()
                .find(|(c, md, s, _)| *c == r.condition && *md == r.mode && s == seed)
                .map_or(0, |e| e.3);
            out.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6},{},{},{},{}\n",
                r.condition,
                r.mode,
                seed,
                best,
                m.accuracy(),
                m.precision(),
                m.recall(),
                m.f1(),
                m.tp,
                m.fp,
                m.fn_,
                m.tn
            ));
        }
    }
    out
}

pub struct CompareOutput {
    pub rows: Vec<CompareRow>,
    pub outcomes: Vec<RunOutcome>,
    pub ssl_logs: Vec<(u64, Condition, Vec<SslEpochLog>)>,
}

impl CompareOutput {
    pub fn summary_csv(&self) -> String {
        compare_csv(&self.rows)
    }

    pub fn detail_csv(&self) -> String {
        let best: Vec<_> = self.outcomes.iter().map(|o| (o.condition, o.mode, o.seed, o.train.best_epoch)).collect();
        compare_detail_csv(&self.rows, &best)
    }
}

/// Runs every applicable condition in both modes for every seed. Seeds run
/// concurrently; each training run is single-threaded in its updates and
/// deterministic.
pub fn compare(config: &RunConfig, manifest: impl AsRef<Path>) -> Result<CompareOutput> {
    config.validate()?;
    let splits = Splits::load(manifest)?;
    let per_seed: Vec<(SeedEncoders, Vec<RunOutcome>)> = config
        .seeds
        .par_iter()
        .map(|&seed| {
            let enc = seed_encoders(config, seed, &splits)?;
            let jobs: Vec<(Condition, TrainMode, Encoder<f32>)> = enc
                .encoders
                .iter()
                .flat_map(|(c, e)| [TrainMode::Transfer, TrainMode::Finetune].map(|m| (*c, m, e.clone())))
                .collect();
            let outcomes = jobs
                .into_par_iter()
                .map(|(c, m, e)| train_and_test(config, c, m, seed, e, &splits))
                .collect::<Result<Vec<_>>>()?;
            Ok((enc, outcomes))
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<CompareRow> = Vec::new();
    let mut outcomes = Vec::new();
    let mut ssl_logs = Vec::new();
    for (enc, runs) in per_seed {
        for (c, log) in enc.ssl_logs {
            ssl_logs.push((enc.seed, c, log));
        }
        for o in runs {
            match rows.iter_mut().find(|r| r.condition == o.condition && r.mode == o.mode) {
                Some(r) => r.per_seed.push((o.seed, o.test_metrics)),
                None => rows.push(CompareRow { condition: o.condition, mode: o.mode, per_seed: vec![(o.seed, o.test_metrics)] }),
            }
            outcomes.push(o);
        }
    }
    rows.sort_by_key(|r| (r.condition, r.mode == TrainMode::Finetune));
    Ok(CompareOutput { rows, outcomes, ssl_logs })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(text: &str) -> KvConfig {
        KvConfig::parse(text).unwrap()
    }

    #[test]
    fn defaults_parse_and_validate() {
        let c = RunConfig::from_kv(kv("")).unwrap();
        assert_eq!(c.ssl, SslConfig::default());
        assert_eq!(c.mil, MilConfig::default());
        assert_eq!(c.seeds, vec![0]);
    }

    #[test]
    fn keys_reach_their_stage() {
        let c = RunConfig::from_kv(kv(
            "task = core\nseed = 9\nseeds = 1, 2,3\narch = lenet5\nssl_epochs = 2\nssl_lr = 0.01\n\
             mil_lr = 1e-4\nmil_epochs = 3\nmode = transfer\ncondition = B\nsup_epochs = 1\n",
        ))
        .unwrap();
        assert_eq!(c.gen.task, crate::synth::Task::Core);
        assert_eq!((c.seed, c.ssl.seed, c.mil.seed), (9, 9, 9));
        assert_eq!(c.seeds, vec![1, 2, 3]);
        assert_eq!(c.ssl.arch, Arch::Lenet5);
        assert_eq!(c.ssl.epochs, 2);
        assert!(matches!(c.ssl.optimizer, OptimRule::SgdMomentum { lr, .. } if lr == 0.01));
        assert!(matches!(c.mil.optimizer, OptimRule::Adam { lr, .. } if lr == 1e-4));
        assert_eq!((c.mil.epochs, c.mil.mode), (3, TrainMode::Transfer));
        assert_eq!(c.condition, Condition::B);
        assert_eq!(c.supervised.epochs, 1);
    }

    #[test]
    fn out_of_range_values_name_the_field() {
        for (text, field) in [
            ("mil_lr = 0", "mil_lr"),
            ("ssl_lr = -1", "ssl_lr"),
            ("ssl_momentum = 1", "ssl_momentum"),
            ("mil_beta1 = 1.5", "mil_beta1"),
            ("sup_weight_decay = -0.1", "sup_weight_decay"),
            ("temperature = 0", "temperature"),
            ("encoder_momentum = 1.0", "encoder_momentum"),
            ("attention_dim = 0", "attention_dim"),
            ("ssl_batch_size = 0", "ssl_batch_size"),
            ("sup_instances_per_bag = 300", "sup_instances_per_bag"),
            ("mil_epochs = -1", "mil_epochs"),
            ("condition = Z", "condition"),
            ("mystery = 1", "mystery"),
        ] {
            let err = RunConfig::from_kv(kv(text)).unwrap_err();
            assert!(err.is_validation(), "{text}: {err}");
            assert!(err.to_string().contains(field), "{text}: {err}");
        }
    }

    #[test]
    fn condition_a_rejects_a_checkpoint() {
        let err = RunConfig::from_kv(kv("condition = A\nencoder_checkpoint = enc.milc\n")).unwrap_err();
        assert!(err.to_string().contains("encoder_checkpoint"), "{err}");
        assert!(RunConfig::from_kv(kv("condition = D\nencoder_checkpoint = enc.milc\n")).is_ok());
    }

    #[test]
    fn condition_a_is_lenet5() {
        let c = RunConfig::default();
        assert_eq!(c.arch_for(Condition::A), Arch::Lenet5);
        assert_eq!(c.arch_for(Condition::D), c.ssl.arch);
    }

    #[test]
    fn condition_names_round_trip() {
        for c in Condition::ALL {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
    }

    #[test]
    fn median_of_odd_and_even_counts() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn summary_has_one_row_per_condition_and_mode() {
        let m = Metrics { tp: 3, fp: 1, fn_: 2, tn: 4 };
        let rows: Vec<CompareRow> = [Condition::A, Condition::D]
            .iter()
            .flat_map(|&c| {
                [TrainMode::Transfer, TrainMode::Finetune].map(|mode| CompareRow { condition: c, mode, per_seed: vec![(0, m), (1, m)] })
            })
            .collect();
        let csv = compare_csv(&rows);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], COMPARE_CSV_HEADER);
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("A,transfer,\"random\",0;1,0.700000,0.750000,0.600000,0.666667"), "{}", lines[1]);
    }
}

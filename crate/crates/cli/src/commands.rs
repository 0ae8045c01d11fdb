use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use patchmil::config::KvConfig;
use patchmil::ctio::{self, Split};
use patchmil::experiment::{self, Condition, RunConfig, Splits};
use patchmil::mil::{self, MilModel, TrainMode};
use patchmil::nn::{read_checkpoint, save_checkpoint, Arch};
use patchmil::{ssl, synth, viz, LabeledSlice};

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or flag combinations.
    Usage(String),
    Core(patchmil::Error),
    Io(PathBuf, io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(p, e) => write!(f, "cannot write {}: {e}", p.display()),
        }
    }
}

impl From<patchmil::Error> for CliError {
    fn from(e: patchmil::Error) -> Self {
        CliError::Core(e)
    }
}

type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(name = "patchmil", version, about = "Attention MIL over CT slice patches with self-supervised pretraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// key = value configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every stage; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
    /// Extra `key=value` setting, applied after the config file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset and its manifest.
    Gen {
        #[command(flatten)]
        common: Common,
    },
    /// Self-supervised encoder pretraining on the train split.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Train one MIL model for a condition and mode.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        /// A, B, C or D; overrides the config file.
        #[arg(long)]
        condition: Option<Condition>,
        /// transfer or finetune; overrides the config file.
        #[arg(long)]
        mode: Option<TrainMode>,
        /// Encoder checkpoint for conditions B, C and D.
        #[arg(long)]
        encoder: Option<PathBuf>,
    },
    /// Metrics of a trained model on one split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Directory for metrics and per-slice predictions.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the attention map of one slice as a PPM overlay.
    Viz {
        #[arg(long)]
        model: PathBuf,
        /// CTSL slice file.
        #[arg(long)]
        slice: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Run every condition in both modes over the configured seeds.
    Compare {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut kv = match &common.config {
        Some(path) => KvConfig::load(path)?,
        None => KvConfig::default(),
    };
    for pair in &common.set {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{pair}`")))?;
        kv.set(k.trim(), v.trim());
    }
    if let Some(seed) = common.seed {
        kv.set("seed", seed);
    }
    Ok(RunConfig::from_kv(kv)?)
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(dir.to_path_buf(), e))
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { common } => gen(&common),
        Command::Pretrain { common, manifest } => pretrain(&common, &manifest),
        Command::Train { common, manifest, condition, mode, encoder } => {
            train(&common, &manifest, condition, mode, encoder)
        }
        Command::Eval { model, manifest, split, out } => eval(&model, &manifest, split, out.as_deref()),
        Command::Viz { model, slice, out } => render(&model, &slice, &out),
        Command::Compare { common, manifest } => compare(&common, &manifest),
    }
}

fn gen(common: &Common) -> Result<()> {
    let config = load_config(common)?;
    let manifest = synth::gen_dataset(&config.gen, &common.out)?;
    let mut csv = String::from("split,slices,positives\n");
    for split in [Split::Train, Split::Valid, Split::Test] {
        let entries: Vec<_> = manifest.split(split).collect();
        let pos = entries.iter().filter(|e| e.bag_label == 1).count();
        csv.push_str(&format!("{split},{},{pos}\n", entries.len()));
    }
    print!("{csv}");
    eprintln!("wrote {}", common.out.join("manifest.jsonl").display());
    Ok(())
}

fn pretrain(common: &Common, manifest: &Path) -> Result<()> {
    let config = load_config(common)?;
    ensure_dir(&common.out)?;
    let slices: Vec<_> = patchmil::dataset::load_split_from(manifest, Split::Train)?
        .into_iter()
        .map(|s| s.slice)
        .collect();
    let out = ssl::pretrain_with(&config.ssl, &slices, |e| {
        eprintln!("ssl epoch {}: total {:.6} contrastive {:.6}", e.epoch, e.losses.total, e.losses.contrastive);
    })?;
    let ckpt = common.out.join("encoder.milc");
    save_checkpoint(&ckpt, out.encoder.params())?;
    let csv = ssl::log_to_csv(&out.log);
    write_file(&common.out.join("ssl_log.csv"), &csv)?;
    print!("{csv}");
    eprintln!("wrote {}", ckpt.display());
    Ok(())
}

fn train(
    common: &Common,
    manifest: &Path,
    condition: Option<Condition>,
    mode: Option<TrainMode>,
    encoder: Option<PathBuf>,
) -> Result<()> {
    let mut config = load_config(common)?;
    if let Some(c) = condition {
        config.condition = c;
    }
    if let Some(m) = mode {
        config.mil.mode = m;
    }
    if encoder.is_some() {
        config.encoder_checkpoint = encoder;
    }
    config.validate()?;
    ensure_dir(&common.out)?;
    let splits = Splits::load(manifest)?;
    let seed = config.seed;
    let enc = match (config.condition, &config.encoder_checkpoint) {
        (Condition::A, _) => experiment::random_encoder(Arch::Lenet5, config.ssl.embed_dim, seed)?,
        (_, Some(path)) => experiment::load_encoder(path)?,
        (Condition::B, None) => {
            eprintln!("supervised instance pretraining (condition B analog)");
            experiment::supervised_pretrain(&config.supervised, config.ssl.arch, config.ssl.embed_dim, seed, &splits.train)?
                .encoder
        }
        (c, None) => {
            return Err(patchmil::Error::Config {
                field: "encoder_checkpoint".into(),
                detail: format!("condition {c} needs a pretrained encoder (see `patchmil pretrain`)"),
            }
            .into())
        }
    };
    let mut model = experiment::build_model(enc, config.mil.attention_dim, seed)?;
    let out = mil::train_mil_with(&config.mil, &mut model, &splits.train, &splits.valid, |e| {
        eprintln!("mil epoch {}: train {:.6} valid {:.6}", e.epoch, e.train_loss, e.valid_loss);
    })?;
    let ckpt = common.out.join("model.milc");
    save_checkpoint(&ckpt, &out.model.params())?;
    let csv = mil::log_to_csv(&out.log);
    write_file(&common.out.join("train_log.csv"), &csv)?;
    print!("{csv}");
    eprintln!(
        "condition {} {}: best epoch {} (class weights {:.6}, {:.6}); wrote {}",
        config.condition,
        config.mil.mode,
        out.best_epoch,
        out.class_weights.0,
        out.class_weights.1,
        ckpt.display()
    );
    Ok(())
}

fn load_model(path: &Path) -> Result<MilModel<f32>> {
    Ok(MilModel::from_params(&read_checkpoint(path)?)?)
}

fn eval(model: &Path, manifest: &Path, split: Split, out: Option<&Path>) -> Result<()> {
    let model = load_model(model)?;
    let slices = patchmil::dataset::load_split_from(manifest, split)?;
    let (metrics, preds) = mil::evaluate(&model, &slices)?;
    let csv = format!("{}\n{}\n", mil::METRICS_CSV_HEADER, mil::metrics_csv_row(&split.to_string(), &metrics));
    print!("{csv}");
    if let Some(dir) = out {
        write_file(&dir.join(format!("metrics_{split}.csv")), &csv)?;
        let mut rows = String::from("slice,label,theta,predicted\n");
        for (s, p) in slices.iter().zip(&preds) {
            rows.push_str(&format!("{},{},{:.8},{}\n", s.path.display(), s.label, p.theta, p.predicted));
        }
        write_file(&dir.join(format!("predictions_{split}.csv")), rows)?;
    }
    Ok(())
}

fn render(model: &Path, slice: &Path, out: &Path) -> Result<()> {
    let model = load_model(model)?;
    let gray = ctio::apply_window(&ctio::read_slice(slice)?);
    let labeled = LabeledSlice { path: slice.to_path_buf(), slice: gray, label: 0, instance_labels: None };
    let pred = mil::classify_bag(&model, &labeled.bag()?)?;
    let image = viz::render_attention(&labeled.slice, &pred.attention)?;
    ensure_dir(out)?;
    let ppm = out.join("attention.ppm");
    write_file(&ppm, viz::encode_ppm(&image))?;
    write_file(&out.join("attention_grid.csv"), viz::attention_grid_csv(&pred.attention)?)?;
    println!("slice,theta,predicted");
    println!("{},{:.8},{}", slice.display(), pred.theta, pred.predicted);
    eprintln!("wrote {}", ppm.display());
    Ok(())
}

fn compare(common: &Common, manifest: &Path) -> Result<()> {
    let config = load_config(common)?;
    ensure_dir(&common.out)?;
    eprintln!(
        "note: condition B-analog replaces ImageNet weights with supervised pretraining on oracle instance labels"
    );
    let out = experiment::compare(&config, manifest)?;
    let summary = out.summary_csv();
    write_file(&common.out.join("summary.csv"), &summary)?;
    write_file(&common.out.join("detail.csv"), out.detail_csv())?;
    for (seed, condition, log) in &out.ssl_logs {
        write_file(&common.out.join(format!("ssl_log_{condition}_seed{seed}.csv")), ssl::log_to_csv(log))?;
    }
    print!("{summary}");
    Ok(())
}

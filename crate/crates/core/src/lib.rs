//! Attention-based multiple instance learning over CT slice patch bags, with
//! self-supervised encoder pretraining, a synthetic data generator and
//! attention-map rendering.

pub mod augment;
pub mod config;
pub mod ctio;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod mil;
pub mod nn;
pub mod patching;
pub mod ssl;
pub mod synth;
pub mod viz;

pub use ctio::{GraySlice, HuSlice, Manifest, ManifestEntry, Split};
pub use dataset::LabeledSlice;
pub use error::{Error, Result};
pub use experiment::{Condition, RunConfig};
pub use mil::{BagPrediction, Metrics, MilConfig, MilModel, TrainMode};
pub use nn::{Arch, Encoder, OptimRule, ParamSet, Tensor};
pub use patching::{Bag, PatchInstance};
pub use ssl::{SslConfig, SslState};
pub use synth::{GenConfig, Task};
pub use viz::RgbImage;

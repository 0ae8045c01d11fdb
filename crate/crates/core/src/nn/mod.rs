//! Neural building blocks shared by pretraining and MIL: tensors, layers,
//! encoders, optimizers, checkpoints and the finite-difference oracle.

pub mod checkpoint;
pub mod decoder;
pub mod encoder;
pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint};
pub use decoder::Decoder;
pub use encoder::{Arch, Encoder};
pub use gradcheck::finite_diff_grad;
pub use optim::{OptimRule, Optimizer};
pub use tensor::{ParamSet, Real, Tensor};

//! Reconstruction decoder used during self-supervised pretraining:
//! affine `M -> 16x8x8`, tanh, 2x2 transposed conv to `8x16x16`, tanh,
//! 2x2 transposed conv to `3x32x32`. The output is left linear.

use rand::Rng;

use super::encoder::kaiming_uniform;
use super::layers::{self, Spatial};
use super::tensor::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};
use crate::patching::{CHANNELS, PATCH_SIZE};

const SEED_C: usize = 16;
const SEED_HW: usize = 8;
const MID_C: usize = 8;

#[derive(Clone, Debug)]
pub struct Decoder<T> {
    embed_dim: usize,
    params: ParamSet<T>,
}

pub struct DecoderTape<T> {
    h: Vec<T>,
    seed: Spatial<T>,
    mid: Spatial<T>,
}

const FC_W: usize = 0;
const FC_B: usize = 1;
const UP1_W: usize = 2;
const UP1_B: usize = 3;
const UP2_W: usize = 4;
const UP2_B: usize = 5;

impl<T: Real> Decoder<T> {
    pub fn new<R: Rng + ?Sized>(embed_dim: usize, rng: &mut R) -> Self {
        let mut params = ParamSet::new();
        let seed_len = SEED_C * SEED_HW * SEED_HW;
        params.push("decoder.fc.weight", kaiming_uniform(&[seed_len, embed_dim], embed_dim, rng));
        params.push("decoder.fc.bias", Tensor::zeros(&[seed_len]));
        params.push("decoder.up1.weight", kaiming_uniform(&[SEED_C, MID_C, 2, 2], SEED_C, rng));
        params.push("decoder.up1.bias", Tensor::zeros(&[MID_C]));
        params.push("decoder.up2.weight", kaiming_uniform(&[MID_C, CHANNELS, 2, 2], MID_C, rng));
        params.push("decoder.up2.bias", Tensor::zeros(&[CHANNELS]));
        Self { embed_dim, params }
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn set_params(&mut self, params: ParamSet<T>) -> Result<()> {
        if !params.same_layout(&self.params) {
            return Err(Error::Checkpoint("decoder parameter layout mismatch".into()));
        }
        self.params = params;
        Ok(())
    }

    /// Decodes `[N, M]` features into a `[3, N, 32, 32]` batch.
    pub fn forward(&self, h: &[T], n: usize) -> Result<(Spatial<T>, DecoderTape<T>)> {
        if h.len() != n * self.embed_dim {
            return Err(Error::dim(format!("{n} x {}", self.embed_dim), h.len()));
        }
        let p = &self.params;
        let mut a = layers::linear_forward(h, n, p.tensor(FC_W), p.tensor(FC_B));
        layers::tanh_inplace(&mut a);
        let seed = layers::unflatten(&a, [SEED_C, n, SEED_HW, SEED_HW]);
        let mut mid = layers::tconv_forward(&seed, p.tensor(UP1_W), p.tensor(UP1_B));
        layers::tanh_inplace(&mut mid.data);
        let out = layers::tconv_forward(&mid, p.tensor(UP2_W), p.tensor(UP2_B));
        debug_assert_eq!(out.shape(), [CHANNELS, n, PATCH_SIZE, PATCH_SIZE]);
        Ok((out, DecoderTape { h: h.to_vec(), seed, mid }))
    }

    /// Returns parameter gradients and `d_h` (`[N, M]`).
    pub fn backward(&self, tape: DecoderTape<T>, d_out: &Spatial<T>) -> (ParamSet<T>, Vec<T>) {
        let p = &self.params;
        let n = d_out.n;
        let mut grads = p.zeros_like();
        let (dw2, db2, d_mid) = layers::tconv_backward(&tape.mid, p.tensor(UP2_W), d_out, true);
        grads.tensor_mut(UP2_W).data_mut().copy_from_slice(&dw2);
        grads.tensor_mut(UP2_B).data_mut().copy_from_slice(&db2);
        let mut d_mid = d_mid.expect("requested");
        layers::tanh_backward(&tape.mid.data, &mut d_mid.data);
        let (dw1, db1, d_seed) = layers::tconv_backward(&tape.seed, p.tensor(UP1_W), &d_mid, true);
        grads.tensor_mut(UP1_W).data_mut().copy_from_slice(&dw1);
        grads.tensor_mut(UP1_B).data_mut().copy_from_slice(&db1);
        let d_seed = d_seed.expect("requested");
        let mut d_a = layers::flatten(&d_seed);
        let a = layers::flatten(&tape.seed);
        layers::tanh_backward(&a, &mut d_a);
        let (dw0, db0, d_h) = layers::linear_backward(&tape.h, n, p.tensor(FC_W), &d_a, true);
        grads.tensor_mut(FC_W).data_mut().copy_from_slice(&dw0);
        grads.tensor_mut(FC_B).data_mut().copy_from_slice(&db0);
        (grads, d_h.expect("requested"))
    }

    pub fn cast<U: Real>(&self) -> Decoder<U> {
        Decoder { embed_dim: self.embed_dim, params: self.params.cast() }
    }
}

//! Patch encoders `f_psi`: a LeNet5-shaped net and a reduced VGG stack.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::layers::{self, ConvCache, Spatial};
use super::tensor::{ParamSet, Real, Tensor};
use crate::error::{Error, Result};
use crate::patching::{PatchInstance, CHANNELS, PATCH_SIZE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arch {
    Lenet5,
    Vggs,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::Lenet5 => "lenet5",
            Arch::Vggs => "vggs",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lenet5" => Ok(Arch::Lenet5),
            "vggs" => Ok(Arch::Vggs),
            other => Err(Error::config("encoder", format!("unknown architecture `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Layer {
    Conv { w: usize, b: usize, pad: usize },
    Tanh,
    Relu,
    AvgPool,
    MaxPool,
    Flatten,
    Linear { w: usize, b: usize },
}

/// Uniform He/Kaiming fan-in initialisation: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`.
pub fn kaiming_uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let len = shape.iter().product();
    let data = (0..len).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data).expect("shape/len agree by construction")
}

/// Bias initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`. Nonzero biases keep
/// all-black patches from mapping to an exactly zero embedding.
pub fn bias_uniform<T: Real, R: Rng + ?Sized>(len: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..len).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(&[len], data).expect("shape/len agree by construction")
}

fn conv_params<T: Real, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    name: &str,
    out_c: usize,
    in_c: usize,
    k: usize,
    rng: &mut R,
) -> (usize, usize) {
    let w = params.push(
        format!("encoder.{name}.weight"),
        kaiming_uniform(&[out_c, in_c, k, k], in_c * k * k, rng),
    );
    let b = params.push(format!("encoder.{name}.bias"), bias_uniform(out_c, in_c * k * k, rng));
    (w, b)
}

fn linear_params<T: Real, R: Rng + ?Sized>(
    params: &mut ParamSet<T>,
    name: &str,
    out_f: usize,
    in_f: usize,
    rng: &mut R,
) -> (usize, usize) {
    let w = params.push(format!("encoder.{name}.weight"), kaiming_uniform(&[out_f, in_f], in_f, rng));
    let b = params.push(format!("encoder.{name}.bias"), bias_uniform(out_f, in_f, rng));
    (w, b)
}

#[derive(Clone, Debug)]
pub struct Encoder<T> {
    arch: Arch,
    embed_dim: usize,
    params: ParamSet<T>,
    layers: Vec<Layer>,
}

enum Act<T> {
    Spatial(Spatial<T>),
    Dense { n: usize, data: Vec<T> },
}

enum Cache<T> {
    Conv(ConvCache<T>),
    Tanh(Act<T>),
    Relu(Act<T>),
    AvgPool,
    MaxPool(Vec<u32>),
    Flatten([usize; 4]),
    Linear(Vec<T>),
    /// Inference mode: nothing kept.
    Skip,
}

/// Intermediate values kept by [`Encoder::forward_train`] for backprop.
pub struct EncoderTape<T> {
    n: usize,
    caches: Vec<Cache<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new<R: Rng + ?Sized>(arch: Arch, embed_dim: usize, rng: &mut R) -> Result<Self> {
        if embed_dim == 0 {
            return Err(Error::config("embed_dim", "must be positive"));
        }
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        match arch {
            Arch::Lenet5 => {
                let (w, b) = conv_params(&mut params, "conv1", 6, CHANNELS, 5, rng);
                layers.extend([Layer::Conv { w, b, pad: 0 }, Layer::Tanh, Layer::AvgPool]);
                let (w, b) = conv_params(&mut params, "conv2", 16, 6, 5, rng);
                layers.extend([Layer::Conv { w, b, pad: 0 }, Layer::Tanh, Layer::AvgPool]);
                layers.push(Layer::Flatten);
                let (w, b) = linear_params(&mut params, "fc1", 120, 16 * 5 * 5, rng);
                layers.extend([Layer::Linear { w, b }, Layer::Tanh]);
                let (w, b) = linear_params(&mut params, "fc2", embed_dim, 120, rng);
                layers.push(Layer::Linear { w, b });
            }
            Arch::Vggs => {
                let widths = [CHANNELS, 32, 64, 128, 128];
                for (i, pair) in widths.windows(2).enumerate() {
                    let (w, b) = conv_params(&mut params, &format!("block{}", i + 1), pair[1], pair[0], 3, rng);
                    layers.extend([Layer::Conv { w, b, pad: 1 }, Layer::Relu, Layer::MaxPool]);
                }
                layers.push(Layer::Flatten);
                let (w, b) = linear_params(&mut params, "head", embed_dim, 128 * 2 * 2, rng);
                layers.push(Layer::Linear { w, b });
            }
        }
        Ok(Self { arch, embed_dim, params, layers })
    }

    /// Rebuilds an encoder around existing tensors, e.g. from a checkpoint.
    /// The architecture and embedding dimension are inferred from the names.
    pub fn from_params(params: ParamSet<T>) -> Result<Self> {
        let arch = if params.get("encoder.conv1.weight").is_some() {
            Arch::Lenet5
        } else if params.get("encoder.block1.weight").is_some() {
            Arch::Vggs
        } else {
            return Err(Error::Checkpoint("no encoder tensors found".into()));
        };
        let head = match arch {
            Arch::Lenet5 => "encoder.fc2.weight",
            Arch::Vggs => "encoder.head.weight",
        };
        let embed_dim = params
            .get(head)
            .map(|t| t.shape()[0])
            .ok_or_else(|| Error::Checkpoint(format!("missing {head}")))?;
        // Rebuild a template to get the layer program and validate shapes.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut enc = Self::new(arch, embed_dim, &mut rng)?;
        let expected: Vec<_> = enc.params.names().to_vec();
        let mut unknown: Vec<_> = params
            .names()
            .iter()
            .filter(|n| !expected.contains(n))
            .cloned()
            .collect();
        unknown.sort();
        if !unknown.is_empty() {
            return Err(Error::Checkpoint(format!("unknown encoder tensors: {}", unknown.join(", "))));
        }
        let missing: Vec<_> = expected.iter().filter(|n| params.get(n).is_none()).cloned().collect();
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing encoder tensors: {}", missing.join(", "))));
        }
        enc.params.copy_matching(&params)?;
        Ok(enc)
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cast<U: Real>(&self) -> Encoder<U> {
        Encoder {
            arch: self.arch,
            embed_dim: self.embed_dim,
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    fn input_batch(instances: &[&PatchInstance]) -> Spatial<T> {
        let views: Vec<&[f32]> = instances.iter().map(|p| p.data()).collect();
        Spatial::from_instances(CHANNELS, PATCH_SIZE, PATCH_SIZE, &views, T::from_f32)
    }

    /// Embeds a batch of instances; returns row-major `[N, M]`.
    pub fn encode_batch(&self, instances: &[&PatchInstance]) -> Result<Vec<T>> {
        self.encode_spatial(Self::input_batch(instances))
    }

    /// Embeds an input already laid out as `[3, N, 32, 32]`.
    pub fn encode_spatial(&self, x: Spatial<T>) -> Result<Vec<T>> {
        let n = x.n;
        let out = self.run(x, None)?;
        let h = match out {
            Act::Dense { data, .. } => data,
            Act::Spatial(_) => unreachable!("encoders end in a linear layer"),
        };
        if !h.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("encoder produced a non-finite embedding".into()));
        }
        debug_assert_eq!(h.len(), n * self.embed_dim);
        Ok(h)
    }

    pub fn encode(&self, instance: &PatchInstance) -> Result<Vec<T>> {
        self.encode_batch(&[instance])
    }

    /// Forward pass that keeps what backprop needs.
    pub fn forward_train(&self, x: Spatial<T>) -> Result<(Vec<T>, EncoderTape<T>)> {
        let n = x.n;
        let mut caches = Vec::with_capacity(self.layers.len());
        let out = self.run(x, Some(&mut caches))?;
        let Act::Dense { data, .. } = out else { unreachable!() };
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric("encoder produced a non-finite embedding".into()));
        }
        Ok((data, EncoderTape { n, caches }))
    }

    pub fn forward_train_instances(&self, instances: &[&PatchInstance]) -> Result<(Vec<T>, EncoderTape<T>)> {
        self.forward_train(Self::input_batch(instances))
    }

    fn run(&self, x: Spatial<T>, mut caches: Option<&mut Vec<Cache<T>>>) -> Result<Act<T>> {
        if x.c != CHANNELS || x.h != PATCH_SIZE || x.w != PATCH_SIZE {
            return Err(Error::dim(
                format!("[{CHANNELS}, N, {PATCH_SIZE}, {PATCH_SIZE}]"),
                format!("{:?}", x.shape()),
            ));
        }
        let mut act = Act::Spatial(x);
        for layer in &self.layers {
            let (next, cache) = match (*layer, act) {
                (Layer::Conv { w, b, pad }, Act::Spatial(x)) => {
                    let y = layers::conv2d_infer(&x, self.params.tensor(w), self.params.tensor(b), pad);
                    let cache = if caches.is_some() { Cache::Conv(ConvCache::new(x)) } else { Cache::Skip };
                    (Act::Spatial(y), cache)
                }
                (Layer::Tanh, a) => {
                    let a = map_act(a, layers::tanh_inplace);
                    let keep = caches.is_some().then(|| clone_act(&a));
                    (a, keep.map_or(Cache::Skip, Cache::Tanh))
                }
                (Layer::Relu, a) => {
                    let a = map_act(a, layers::relu_inplace);
                    let keep = caches.is_some().then(|| clone_act(&a));
                    (a, keep.map_or(Cache::Skip, Cache::Relu))
                }
                (Layer::AvgPool, Act::Spatial(x)) => (Act::Spatial(layers::avgpool2_forward(&x)), Cache::AvgPool),
                (Layer::MaxPool, Act::Spatial(x)) => {
                    let (y, arg) = layers::maxpool2_forward(&x);
                    (Act::Spatial(y), Cache::MaxPool(arg))
                }
                (Layer::Flatten, Act::Spatial(x)) => {
                    let shape = x.shape();
                    (Act::Dense { n: x.n, data: layers::flatten(&x) }, Cache::Flatten(shape))
                }
                (Layer::Linear { w, b }, Act::Dense { n, data }) => {
                    let y = layers::linear_forward(&data, n, self.params.tensor(w), self.params.tensor(b));
                    (Act::Dense { n, data: y }, Cache::Linear(data))
                }
                (layer, _) => unreachable!("layer {layer:?} received the wrong activation kind"),
            };
            if let Some(c) = caches.as_deref_mut() {
                c.push(cache);
            }
            act = next;
        }
        Ok(act)
    }

    /// Backpropagates `d_h` (`[N, M]`) and returns parameter gradients.
    pub fn backward(&self, tape: EncoderTape<T>, d_h: &[T]) -> ParamSet<T> {
        assert_eq!(d_h.len(), tape.n * self.embed_dim, "d_h has wrong size");
        let mut grads = self.params.zeros_like();
        let mut grad = Act::Dense { n: tape.n, data: d_h.to_vec() };
        let n_layers = self.layers.len();
        for (i, (layer, cache)) in self.layers.iter().zip(tape.caches).enumerate().rev() {
            // The first layer never needs an input gradient.
            let need_input = i > 0;
            grad = match (*layer, cache, grad) {
                (Layer::Linear { w, b }, Cache::Linear(x), Act::Dense { n, data }) => {
                    let (dw, db, dx) = layers::linear_backward(&x, n, self.params.tensor(w), &data, need_input);
                    grads.tensor_mut(w).data_mut().copy_from_slice(&dw);
                    grads.tensor_mut(b).data_mut().copy_from_slice(&db);
                    Act::Dense { n, data: dx.unwrap_or_default() }
                }
                (Layer::Flatten, Cache::Flatten(shape), Act::Dense { data, .. }) => {
                    Act::Spatial(layers::unflatten(&data, shape))
                }
                (Layer::Tanh, Cache::Tanh(y), g) => zip_act(g, &y, layers::tanh_backward),
                (Layer::Relu, Cache::Relu(y), g) => zip_act(g, &y, layers::relu_backward),
                (Layer::AvgPool, Cache::AvgPool, Act::Spatial(g)) => Act::Spatial(layers::avgpool2_backward(&g)),
                (Layer::MaxPool, Cache::MaxPool(arg), Act::Spatial(g)) => {
                    Act::Spatial(layers::maxpool2_backward(&g, &arg))
                }
                (Layer::Conv { w, b, pad }, Cache::Conv(c), Act::Spatial(g)) => {
                    let (dw, db, dx) = layers::conv2d_backward(&c, self.params.tensor(w), &g, pad, need_input);
                    grads.tensor_mut(w).data_mut().copy_from_slice(&dw);
                    grads.tensor_mut(b).data_mut().copy_from_slice(&db);
                    match dx {
                        Some(dx) => Act::Spatial(dx),
                        None => Act::Dense { n: 0, data: Vec::new() },
                    }
                }
                _ => unreachable!("tape does not match layer program ({n_layers} layers)"),
            };
        }
        grads
    }
}

fn map_act<T: Real>(a: Act<T>, f: impl Fn(&mut [T])) -> Act<T> {
    match a {
        Act::Spatial(mut s) => {
            f(&mut s.data);
            Act::Spatial(s)
        }
        Act::Dense { n, mut data } => {
            f(&mut data);
            Act::Dense { n, data }
        }
    }
}

fn clone_act<T: Real>(a: &Act<T>) -> Act<T> {
    match a {
        Act::Spatial(s) => Act::Spatial(s.clone()),
        Act::Dense { n, data } => Act::Dense { n: *n, data: data.clone() },
    }
}

fn zip_act<T: Real>(g: Act<T>, y: &Act<T>, f: impl Fn(&[T], &mut [T])) -> Act<T> {
    match (g, y) {
        (Act::Spatial(mut g), Act::Spatial(y)) => {
            f(&y.data, &mut g.data);
            Act::Spatial(g)
        }
        (Act::Dense { n, mut data }, Act::Dense { data: y, .. }) => {
            f(y, &mut data);
            Act::Dense { n, data }
        }
        _ => unreachable!("activation kinds disagree"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patching::PatchInstance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn patch(seed: u64) -> PatchInstance {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gray: Vec<f32> = (0..PATCH_SIZE * PATCH_SIZE).map(|_| rng.random()).collect();
        PatchInstance::from_gray(&gray, 0, 0)
    }

    #[test]
    fn zero_final_layer_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for arch in [Arch::Lenet5, Arch::Vggs] {
            let mut enc = Encoder::<f64>::new(arch, 4, &mut rng).unwrap();
            let head = if arch == Arch::Lenet5 { "encoder.fc2" } else { "encoder.head" };
            enc.params_mut().get_mut(&format!("{head}.weight")).unwrap().data_mut().fill(0.0);
            enc.params_mut()
                .get_mut(&format!("{head}.bias"))
                .unwrap()
                .data_mut()
                .copy_from_slice(&[0.1, -0.2, 0.3, 0.0]);
            let h = enc.encode(&patch(3)).unwrap();
            assert_eq!(h, vec![0.1, -0.2, 0.3, 0.0]);
        }
    }

    #[test]
    fn identical_instances_identical_embeddings() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let enc = Encoder::<f32>::new(Arch::Lenet5, 8, &mut rng).unwrap();
        let p = patch(5);
        let h = enc.encode_batch(&[&p, &p]).unwrap();
        assert_eq!(h[..8], h[8..]);
    }

    #[test]
    fn batching_matches_per_instance_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for arch in [Arch::Lenet5, Arch::Vggs] {
            let enc = Encoder::<f32>::new(arch, 16, &mut rng).unwrap();
            let patches: Vec<_> = (0..7).map(patch).collect();
            let refs: Vec<_> = patches.iter().collect();
            let batched = enc.encode_batch(&refs).unwrap();
            for (i, p) in patches.iter().enumerate() {
                let single = enc.encode(p).unwrap();
                for (a, b) in single.iter().zip(&batched[i * 16..(i + 1) * 16]) {
                    assert!((a - b).abs() < 1e-6, "{arch}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn param_shapes_follow_architecture() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let enc = Encoder::<f32>::new(Arch::Lenet5, 128, &mut rng).unwrap();
        assert_eq!(enc.params().get("encoder.conv1.weight").unwrap().shape(), &[6, 3, 5, 5]);
        assert_eq!(enc.params().get("encoder.fc1.weight").unwrap().shape(), &[120, 400]);
        assert_eq!(enc.params().get("encoder.fc2.weight").unwrap().shape(), &[128, 120]);
        let vgg = Encoder::<f32>::new(Arch::Vggs, 32, &mut rng).unwrap();
        assert_eq!(vgg.params().get("encoder.block4.weight").unwrap().shape(), &[128, 128, 3, 3]);
        assert_eq!(vgg.params().get("encoder.head.weight").unwrap().shape(), &[32, 512]);
    }

    #[test]
    fn from_params_infers_architecture_and_rejects_unknown() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let enc = Encoder::<f32>::new(Arch::Vggs, 24, &mut rng).unwrap();
        let back = Encoder::from_params(enc.params().clone()).unwrap();
        assert_eq!(back.arch(), Arch::Vggs);
        assert_eq!(back.embed_dim(), 24);
        let mut extra = enc.params().clone();
        extra.push("encoder.bogus", Tensor::zeros(&[1]));
        let err = Encoder::from_params(extra).unwrap_err().to_string();
        assert!(err.contains("encoder.bogus"), "{err}");
    }

    #[test]
    fn initial_weights_and_biases_are_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let enc = Encoder::<f64>::new(Arch::Lenet5, 8, &mut rng).unwrap();
        let w = enc.params().get("encoder.conv2.weight").unwrap();
        let bound = (6.0f64 / 150.0).sqrt();
        assert!(w.data().iter().all(|v| v.abs() <= bound));
        let b = enc.params().get("encoder.conv2.bias").unwrap();
        let b_bound = 1.0 / 150.0f64.sqrt();
        assert!(b.data().iter().all(|v| v.abs() <= b_bound));
        assert!(b.data().iter().any(|&v| v != 0.0));
    }
}

//! Fixtures shared by the criterion benchmarks under `benches/`.

use patchmil::ctio::apply_window;
use patchmil::mil::MilModel;
use patchmil::nn::{Arch, Encoder};
use patchmil::synth::{gen_slice, GenConfig, Task};
use patchmil::{LabeledSlice, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A positive synthetic core-task slice ready for patching.
pub fn sample_slice(seed: u64) -> Result<LabeledSlice> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let generated = gen_slice(&GenConfig::for_task(Task::Core), &mut rng, true)?;
    Ok(LabeledSlice {
        path: "bench.ctsl".into(),
        slice: apply_window(&generated.hu),
        label: 1,
        instance_labels: Some(generated.instance_labels),
    })
}

pub fn sample_model(arch: Arch, seed: u64) -> Result<MilModel<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let encoder = Encoder::new(arch, 128, &mut rng)?;
    MilModel::new(encoder, 64, &mut rng)
}

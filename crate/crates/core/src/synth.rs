//! Synthetic head-CT-like slices with known instance labels.
//!
//! Every slice has air outside an elliptical skull ring and a noisy brain
//! field inside. Task `blob`: positive slices contain bright elliptical blobs.
//! Task `core`: every slice contains blobs and positive slices additionally
//! have a darker core inside one of them, so blob presence says nothing about
//! the label.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::KvConfig;
use crate::ctio::{self, HuSlice, Manifest, ManifestEntry, Split, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::patching::{bag_label_from_instances, BAG_SIZE, GRID, PATCH_PIXELS, PATCH_SIZE, SLICE_SIZE};

const AIR_HU: i16 = -1000;
const BONE_HU: i16 = 1000;
/// Retries before giving up on placing a blob or drawing a labelled positive.
const MAX_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Task {
    Blob,
    Core,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Blob => "blob",
            Task::Core => "core",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blob" => Ok(Task::Blob),
            "core" => Ok(Task::Core),
            other => Err(Error::config("task", format!("expected blob or core, got `{other}`"))),
        }
    }
}

/// Bags and positive bags in one split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub total: usize,
    pub positive: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub task: Task,
    pub train: SplitCounts,
    pub valid: SplitCounts,
    pub test: SplitCounts,
    pub blob_hu: (i16, i16),
    pub core_hu: (i16, i16),
    pub blob_radius: (f64, f64),
    /// Per-pixel uniform range of the brain background.
    pub noise_hu: (i16, i16),
    pub seed: u64,
}

impl GenConfig {
    /// 800/100/100 slices with the positive share of the matching dataset:
    /// about 17% for `blob`, about 8% for `core`.
    pub fn for_task(task: Task) -> Self {
        let (train, valid, test) = match task {
            Task::Blob => (135, 17, 16),
            Task::Core => (67, 9, 8),
        };
        Self {
            task,
            train: SplitCounts { total: 800, positive: train },
            valid: SplitCounts { total: 100, positive: valid },
            test: SplitCounts { total: 100, positive: test },
            blob_hu: (50, 70),
            core_hu: (5, 20),
            blob_radius: (20.0, 50.0),
            noise_hu: (20, 40),
            seed: 0,
        }
    }

    pub fn counts(&self, split: Split) -> SplitCounts {
        match split {
            Split::Train => self.train,
            Split::Valid => self.valid,
            Split::Test => self.test,
        }
    }

    pub fn total_slices(&self) -> usize {
        self.train.total + self.valid.total + self.test.total
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (DEFAULT_WINDOW.0 as i16, DEFAULT_WINDOW.1 as i16);
        for (name, (a, b)) in [("blob_hu", self.blob_hu), ("core_hu", self.core_hu), ("noise_hu", self.noise_hu)] {
            if a > b || a < lo || b > hi {
                return Err(Error::config(name, format!("range {a}..{b} must be ordered and inside [{lo}, {hi}]")));
            }
        }
        let (r0, r1) = self.blob_radius;
        if !(20.0..=80.0).contains(&r0) || !(20.0..=80.0).contains(&r1) || r0 > r1 {
            return Err(Error::config("blob_radius", format!("range {r0}..{r1} must be ordered and inside [20, 80]")));
        }
        for split in [Split::Train, Split::Valid, Split::Test] {
            let c = self.counts(split);
            if c.positive > c.total {
                return Err(Error::config(format!("{split}_positives"), "exceeds the split size"));
            }
        }
        Ok(())
    }

    /// Starts from the task defaults and applies the remaining keys.
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self> {
        let mut task = Task::Blob;
        kv.take("task", &mut task)?;
        let mut c = Self::for_task(task);
        kv.take("seed", &mut c.seed)?;
        kv.take("train_count", &mut c.train.total)?;
        kv.take("train_positives", &mut c.train.positive)?;
        kv.take("valid_count", &mut c.valid.total)?;
        kv.take("valid_positives", &mut c.valid.positive)?;
        kv.take("test_count", &mut c.test.total)?;
        kv.take("test_positives", &mut c.test.positive)?;
        kv.take("blob_hu_min", &mut c.blob_hu.0)?;
        kv.take("blob_hu_max", &mut c.blob_hu.1)?;
        kv.take("core_hu_min", &mut c.core_hu.0)?;
        kv.take("core_hu_max", &mut c.core_hu.1)?;
        kv.take("blob_radius_min", &mut c.blob_radius.0)?;
        kv.take("blob_radius_max", &mut c.blob_radius.1)?;
        kv.take("noise_hu_min", &mut c.noise_hu.0)?;
        kv.take("noise_hu_max", &mut c.noise_hu.1)?;
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn contains(&self, row: usize, col: usize) -> bool {
        let (dy, dx) = (row as f64 - self.cy, col as f64 - self.cx);
        let (s, c) = self.angle.sin_cos();
        let u = (dx * c + dy * s) / self.rx;
        let v = (-dx * s + dy * c) / self.ry;
        u * u + v * v <= 1.0
    }

    /// Rows and columns of the axis-aligned bounding box, clipped to the slice.
    fn bbox(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let r = self.rx.max(self.ry).ceil();
        let clip = |c: f64| {
            let lo = (c - r).floor().max(0.0) as usize;
            let hi = ((c + r).ceil() as usize + 1).min(SLICE_SIZE);
            lo..hi
        };
        (clip(self.cy), clip(self.cx))
    }

    fn rasterize(&self, mask: &mut [bool]) {
        let (rows, cols) = self.bbox();
        for r in rows {
            for c in cols.clone() {
                if self.contains(r, c) {
                    mask[r * SLICE_SIZE + c] = true;
                }
            }
        }
    }
}

/// A generated slice with its region masks (row-major, 512x512).
#[derive(Clone, Debug)]
pub struct GeneratedSlice {
    pub hu: HuSlice,
    pub instance_labels: Vec<u8>,
    pub blob_mask: Vec<bool>,
    pub core_mask: Vec<bool>,
}

/// Patch `k` is positive iff at least 5% of its pixels are in `mask`.
pub fn instance_labels_from_mask(mask: &[bool]) -> Vec<u8> {
    assert_eq!(mask.len(), SLICE_SIZE * SLICE_SIZE);
    (0..BAG_SIZE)
        .map(|k| {
            let (r0, c0) = ((k / GRID) * PATCH_SIZE, (k % GRID) * PATCH_SIZE);
            let count = (r0..r0 + PATCH_SIZE)
                .map(|r| mask[r * SLICE_SIZE + c0..r * SLICE_SIZE + c0 + PATCH_SIZE].iter().filter(|&&b| b).count())
                .sum::<usize>();
            // count / 1024 >= 0.05, in integers.
            u8::from(count * 20 >= PATCH_PIXELS)
        })
        .collect()
}

fn draw_head<R: Rng + ?Sized>(rng: &mut R) -> (Ellipse, Ellipse) {
    let c = SLICE_SIZE as f64 / 2.0;
    let outer = Ellipse {
        cy: c + rng.random_range(-6.0..6.0),
        cx: c + rng.random_range(-6.0..6.0),
        ry: rng.random_range(215.0..235.0),
        rx: rng.random_range(180.0..200.0),
        angle: rng.random_range(-0.1..0.1),
    };
    let thickness = rng.random_range(10.0..16.0);
    let inner = Ellipse { ry: outer.ry - thickness, rx: outer.rx - thickness, ..outer };
    (outer, inner)
}

fn draw_blob<R: Rng + ?Sized>(rng: &mut R, brain: &Ellipse, radius: (f64, f64)) -> Result<Ellipse> {
    for _ in 0..MAX_ATTEMPTS {
        let ry = rng.random_range(radius.0..=radius.1);
        let rx = rng.random_range(radius.0..=radius.1);
        let r = ry.max(rx);
        // Keep the whole blob inside the brain: its center must lie in the
        // brain ellipse shrunk by the blob's largest radius plus a margin.
        let shrunk = Ellipse { ry: brain.ry - r - 4.0, rx: brain.rx - r - 4.0, ..*brain };
        if shrunk.ry <= 0.0 || shrunk.rx <= 0.0 {
            continue;
        }
        let cy = brain.cy + rng.random_range(-shrunk.ry..shrunk.ry);
        let cx = brain.cx + rng.random_range(-shrunk.rx..shrunk.rx);
        if shrunk.contains(cy.round() as usize, cx.round() as usize) {
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            return Ok(Ellipse { cy, cx, ry, rx, angle });
        }
    }
    Err(Error::config("blob_radius", "could not place a blob inside the brain"))
}

/// Dark core sharing the blob's orientation, scaled by 0.35..0.6 and offset
/// so that it stays inside the blob.
fn draw_core<R: Rng + ?Sized>(rng: &mut R, blob: &Ellipse) -> Ellipse {
    let f = rng.random_range(0.35..0.6);
    let max_off = 0.5 * (1.0 - f) * blob.rx.min(blob.ry);
    let (dist, dir) = (rng.random_range(0.0..max_off), rng.random_range(0.0..std::f64::consts::TAU));
    Ellipse {
        cy: blob.cy + dist * dir.sin(),
        cx: blob.cx + dist * dir.cos(),
        ry: f * blob.ry,
        rx: f * blob.rx,
        angle: blob.angle,
    }
}

fn render<R: Rng + ?Sized>(
    config: &GenConfig,
    rng: &mut R,
    outer: &Ellipse,
    inner: &Ellipse,
    blob_mask: &[bool],
    core_mask: &[bool],
) -> Result<HuSlice> {
    let mut data = vec![AIR_HU; SLICE_SIZE * SLICE_SIZE];
    let (ro, co) = outer.bbox();
    for r in ro {
        for c in co.clone() {
            let i = r * SLICE_SIZE + c;
            if !outer.contains(r, c) {
                continue;
            }
            data[i] = if !inner.contains(r, c) {
                BONE_HU
            } else if core_mask[i] {
                rng.random_range(config.core_hu.0..=config.core_hu.1)
            } else if blob_mask[i] {
                rng.random_range(config.blob_hu.0..=config.blob_hu.1)
            } else {
                rng.random_range(config.noise_hu.0..=config.noise_hu.1)
            };
        }
    }
    HuSlice::new(SLICE_SIZE, SLICE_SIZE, DEFAULT_WINDOW.0, DEFAULT_WINDOW.1, data)
}

/// One slice. Positive slices are redrawn until at least one instance label
/// is set, so the bag label always agrees with the instance labels.
pub fn gen_slice<R: Rng + ?Sized>(config: &GenConfig, rng: &mut R, positive: bool) -> Result<GeneratedSlice> {
    for _ in 0..MAX_ATTEMPTS {
        let (outer, inner) = draw_head(rng);
        let n_blobs = match (config.task, positive) {
            (Task::Blob, false) => 0,
            _ => rng.random_range(1..=2),
        };
        let mut blob_mask = vec![false; SLICE_SIZE * SLICE_SIZE];
        let mut core_mask = vec![false; SLICE_SIZE * SLICE_SIZE];
        let mut blobs = Vec::with_capacity(n_blobs);
        for _ in 0..n_blobs {
            let b = draw_blob(rng, &inner, config.blob_radius)?;
            b.rasterize(&mut blob_mask);
            blobs.push(b);
        }
        if config.task == Task::Core && positive {
            draw_core(rng, &blobs[0]).rasterize(&mut core_mask);
        }
        let labels = match config.task {
            Task::Blob => instance_labels_from_mask(&blob_mask),
            Task::Core => instance_labels_from_mask(&core_mask),
        };
        if bag_label_from_instances(&labels) != u8::from(positive) {
            continue;
        }
        let hu = render(config, rng, &outer, &inner, &blob_mask, &core_mask)?;
        return Ok(GeneratedSlice { hu, instance_labels: labels, blob_mask, core_mask });
    }
    Err(Error::config("blob_radius", "positive slices never produced a labelled instance"))
}

/// Relative path of slice `index` within `split`.
pub fn slice_file_name(split: Split, index: usize) -> String {
    format!("slices/{split}_{index:04}.ctsl")
}

/// Plans the labels of every slice: `(split, index in split, positive)`,
/// positives placed at seeded random positions within each split.
pub fn plan(config: &GenConfig) -> Vec<(Split, usize, bool)> {
    let mut out = Vec::with_capacity(config.total_slices());
    for (s, split) in [Split::Train, Split::Valid, Split::Test].into_iter().enumerate() {
        let c = config.counts(split);
        let mut labels: Vec<bool> = (0..c.total).map(|i| i < c.positive).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(1 << 32 | s as u64);
        labels.shuffle(&mut rng);
        out.extend(labels.into_iter().enumerate().map(|(i, y)| (split, i, y)));
    }
    out
}

/// The RNG that generates slice number `global_index` of the dataset.
pub fn slice_rng(seed: u64, global_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(global_index as u64);
    rng
}

/// Writes `slices/*.ctsl` and `manifest.jsonl` under `out_dir`; returns the
/// manifest. Generation is parallel; each slice has its own seeded stream.
pub fn gen_dataset(config: &GenConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    let slice_dir = out_dir.join("slices");
    fs::create_dir_all(&slice_dir).map_err(|e| Error::io(&slice_dir, e))?;
    let plan = plan(config);
    let entries: Vec<ManifestEntry> = plan
        .par_iter()
        .enumerate()
        .map(|(g, &(split, index, positive))| {
            let generated = gen_slice(config, &mut slice_rng(config.seed, g), positive)?;
            let rel = slice_file_name(split, index);
            ctio::write_slice(&generated.hu, out_dir.join(&rel))?;
            Ok(ManifestEntry {
                slice_path: rel,
                bag_label: u8::from(positive),
                instance_labels: Some(generated.instance_labels),
                split,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = Manifest { entries };
    ctio::write_manifest(&manifest, out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

//! Loading manifest splits into windowed slices held in memory.
//!
//! Slices stay as 8-bit planes (256 KiB each); bags of float instances are
//! materialized only when a model needs them.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::ctio::{self, GraySlice, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::patching::{self, Bag, PatchInstance, Tile, GRID};

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSlice {
    pub path: PathBuf,
    pub slice: GraySlice,
    pub label: u8,
    /// Evaluation-only ground truth.
    pub instance_labels: Option<Vec<u8>>,
}

impl LabeledSlice {
    pub fn tiles(&self) -> Result<Vec<Tile>> {
        patching::split_into_patches(&self.slice)
    }

    pub fn instances(&self) -> Result<Vec<PatchInstance>> {
        Ok(self
            .tiles()?
            .iter()
            .enumerate()
            .map(|(k, t)| patching::to_instance(t, k / GRID, k % GRID))
            .collect())
    }

    pub fn bag(&self) -> Result<Bag> {
        Ok(Bag {
            instances: self.instances()?,
            label: self.label,
            oracle_instance_labels: self.instance_labels.clone(),
        })
    }
}

/// Relative slice paths are resolved against the manifest's directory.
pub fn resolve_slice_path(manifest_dir: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.slice_path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_dir.join(p)
    }
}

pub fn load_entry(manifest_dir: &Path, entry: &ManifestEntry) -> Result<LabeledSlice> {
    let path = resolve_slice_path(manifest_dir, entry);
    let hu = ctio::read_slice(&path)?;
    Ok(LabeledSlice {
        slice: ctio::apply_window(&hu),
        path,
        label: entry.bag_label,
        instance_labels: entry.instance_labels.clone(),
    })
}

/// All slices of one split, in manifest order. An empty split is an error.
pub fn load_split(manifest: &Manifest, manifest_dir: &Path, split: Split) -> Result<Vec<LabeledSlice>> {
    let entries: Vec<&ManifestEntry> = manifest.split(split).collect();
    if entries.is_empty() {
        return Err(Error::Validation(format!("split `{split}` is empty")));
    }
    entries.par_iter().map(|e| load_entry(manifest_dir, e)).collect()
}

/// Reads the manifest at `path` and loads one split.
pub fn load_split_from(path: impl AsRef<Path>, split: Split) -> Result<Vec<LabeledSlice>> {
    let path = path.as_ref();
    let manifest = ctio::load_manifest(path)?;
    load_split(&manifest, path.parent().unwrap_or(Path::new(".")), split)
}

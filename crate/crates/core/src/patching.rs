//! Grid decomposition of a windowed slice into a bag of patch instances.

use crate::ctio::{GraySlice, ManifestEntry};
use crate::error::{Error, Result};

pub const SLICE_SIZE: usize = 512;
pub const PATCH_SIZE: usize = 32;
pub const GRID: usize = SLICE_SIZE / PATCH_SIZE;
pub const BAG_SIZE: usize = GRID * GRID;
pub const CHANNELS: usize = 3;
pub const PATCH_PIXELS: usize = PATCH_SIZE * PATCH_SIZE;

/// One 32x32 8-bit tile, row-major.
pub type Tile = Vec<u8>;

/// A 32x32x3 instance in `[C, H, W]` order with values in `[0, 1]`.
/// All three channels are identical.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchInstance {
    data: Vec<f32>,
    grid_row: usize,
    grid_col: usize,
}

impl PatchInstance {
    /// Replicates one gray plane (values already in `[0, 1]`) across channels.
    pub fn from_gray(gray: &[f32], grid_row: usize, grid_col: usize) -> Self {
        assert_eq!(gray.len(), PATCH_PIXELS, "gray plane must be 32x32");
        let mut data = Vec::with_capacity(CHANNELS * PATCH_PIXELS);
        for _ in 0..CHANNELS {
            data.extend_from_slice(gray);
        }
        Self { data, grid_row, grid_col }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// The shared gray plane (channel 0).
    pub fn gray(&self) -> &[f32] {
        &self.data[..PATCH_PIXELS]
    }

    pub fn grid_row(&self) -> usize {
        self.grid_row
    }

    pub fn grid_col(&self) -> usize {
        self.grid_col
    }

    /// Same pixels with a different grid position.
    pub fn with_position(mut self, grid_row: usize, grid_col: usize) -> Self {
        self.grid_row = grid_row;
        self.grid_col = grid_col;
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub instances: Vec<PatchInstance>,
    pub label: u8,
    /// Evaluation-only ground truth; never read by training.
    pub oracle_instance_labels: Option<Vec<u8>>,
}

impl Bag {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn instance_refs(&self) -> Vec<&PatchInstance> {
        self.instances.iter().collect()
    }
}

/// Tile `k` covers rows `[32*(k/16), +32)` and columns `[32*(k%16), +32)`.
pub fn split_into_patches(slice: &GraySlice) -> Result<Vec<Tile>> {
    if slice.width() != SLICE_SIZE || slice.height() != SLICE_SIZE {
        return Err(Error::dim(
            format!("{SLICE_SIZE}x{SLICE_SIZE} slice"),
            format!("{}x{}", slice.width(), slice.height()),
        ));
    }
    let data = slice.data();
    let tiles = (0..BAG_SIZE)
        .map(|k| {
            let (r0, c0) = ((k / GRID) * PATCH_SIZE, (k % GRID) * PATCH_SIZE);
            let mut tile = Vec::with_capacity(PATCH_PIXELS);
            for r in r0..r0 + PATCH_SIZE {
                tile.extend_from_slice(&data[r * SLICE_SIZE + c0..r * SLICE_SIZE + c0 + PATCH_SIZE]);
            }
            tile
        })
        .collect();
    Ok(tiles)
}

/// Normalizes a tile to `[0, 1]` and replicates it across three channels.
pub fn to_instance(tile: &[u8], grid_row: usize, grid_col: usize) -> PatchInstance {
    let gray: Vec<f32> = tile.iter().map(|&v| f32::from(v) / 255.0).collect();
    PatchInstance::from_gray(&gray, grid_row, grid_col)
}

pub fn make_bag(slice: &GraySlice, entry: &ManifestEntry) -> Result<Bag> {
    let instances = split_into_patches(slice)?
        .iter()
        .enumerate()
        .map(|(k, tile)| to_instance(tile, k / GRID, k % GRID))
        .collect();
    Ok(Bag {
        instances,
        label: entry.bag_label,
        oracle_instance_labels: entry.instance_labels.clone(),
    })
}

/// A bag is positive iff at least one instance is.
pub fn bag_label_from_instances(labels: &[u8]) -> u8 {
    u8::from(labels.iter().any(|&y| y != 0))
}

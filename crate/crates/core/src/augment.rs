//! Texture-preserving augmentations (crop, rotation, horizontal flip, cutout)
//! and paired-view generation for contrastive pretraining.
//!
//! Every random op has a deterministic `*_with` twin taking the drawn
//! parameter, so records can be replayed exactly.

use rand::Rng;

use crate::patching::{PatchInstance, PATCH_PIXELS, PATCH_SIZE};

pub const CROP_PAD: usize = 4;
pub const MAX_CROP_OFFSET: usize = 2 * CROP_PAD;
pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const CUTOUT_BOXES: usize = 3;
pub const CUTOUT_SIZE: usize = 4;
pub const MAX_CUTOUT_ORIGIN: usize = PATCH_SIZE - CUTOUT_SIZE;
pub const TRANSFORM_DIM: usize = 6;

/// Parameters drawn for one augmented view.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugRecord {
    /// `(dy, dx)` of the crop window inside the zero-padded 40x40 patch.
    pub crop_offset: (usize, usize),
    pub rotation_deg: f64,
    pub flipped: bool,
    /// `(top, left)` of each 4x4 cutout box.
    pub cutout_boxes: [(usize, usize); CUTOUT_BOXES],
}

impl AugRecord {
    pub fn is_valid(&self) -> bool {
        let (dy, dx) = self.crop_offset;
        dy <= MAX_CROP_OFFSET
            && dx <= MAX_CROP_OFFSET
            && self.rotation_deg.abs() <= MAX_ROTATION_DEG
            && self.cutout_boxes.iter().all(|&(t, l)| t <= MAX_CUTOUT_ORIGIN && l <= MAX_CUTOUT_ORIGIN)
    }
}

/// Encoded transformation used to condition reconstruction:
/// `[dy/8, dx/8, rotation/10, flipped, n_cutout/3, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformVector(pub [f64; TRANSFORM_DIM]);

pub fn encode_transform(record: &AugRecord) -> TransformVector {
    let (dy, dx) = record.crop_offset;
    TransformVector([
        dy as f64 / MAX_CROP_OFFSET as f64,
        dx as f64 / MAX_CROP_OFFSET as f64,
        record.rotation_deg / MAX_ROTATION_DEG,
        if record.flipped { 1.0 } else { 0.0 },
        record.cutout_boxes.len() as f64 / CUTOUT_BOXES as f64,
        1.0,
    ])
}

fn map_gray(patch: &PatchInstance, f: impl FnOnce(&[f32]) -> Vec<f32>) -> PatchInstance {
    let out = f(patch.gray());
    PatchInstance::from_gray(&out, patch.grid_row(), patch.grid_col())
}

pub fn crop_with(patch: &PatchInstance, offset: (usize, usize)) -> PatchInstance {
    let (dy, dx) = offset;
    assert!(dy <= MAX_CROP_OFFSET && dx <= MAX_CROP_OFFSET, "crop offset out of range");
    map_gray(patch, |src| {
        let mut out = vec![0.0; PATCH_PIXELS];
        for y in 0..PATCH_SIZE {
            // Padded coordinate y + dy maps to source row y + dy - 4.
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if !(0..PATCH_SIZE as isize).contains(&sy) {
                continue;
            }
            for x in 0..PATCH_SIZE {
                let sx = (x + dx) as isize - CROP_PAD as isize;
                if (0..PATCH_SIZE as isize).contains(&sx) {
                    out[y * PATCH_SIZE + x] = src[sy as usize * PATCH_SIZE + sx as usize];
                }
            }
        }
        out
    })
}

/// Zero-pads by 4 pixels and takes a uniformly placed 32x32 window.
pub fn random_crop<R: Rng + ?Sized>(patch: &PatchInstance, rng: &mut R) -> (PatchInstance, (usize, usize)) {
    let offset = (rng.random_range(0..=MAX_CROP_OFFSET), rng.random_range(0..=MAX_CROP_OFFSET));
    (crop_with(patch, offset), offset)
}

pub fn cutout_with(patch: &PatchInstance, boxes: &[(usize, usize)]) -> PatchInstance {
    map_gray(patch, |src| {
        let mut out = src.to_vec();
        for &(top, left) in boxes {
            assert!(top <= MAX_CUTOUT_ORIGIN && left <= MAX_CUTOUT_ORIGIN, "cutout box out of range");
            for y in top..top + CUTOUT_SIZE {
                out[y * PATCH_SIZE + left..y * PATCH_SIZE + left + CUTOUT_SIZE].fill(0.0);
            }
        }
        out
    })
}

/// Zeroes three independently placed 4x4 boxes (they may overlap).
pub fn cutout<R: Rng + ?Sized>(patch: &PatchInstance, rng: &mut R) -> (PatchInstance, [(usize, usize); CUTOUT_BOXES]) {
    let mut boxes = [(0, 0); CUTOUT_BOXES];
    for b in &mut boxes {
        *b = (rng.random_range(0..=MAX_CUTOUT_ORIGIN), rng.random_range(0..=MAX_CUTOUT_ORIGIN));
    }
    (cutout_with(patch, &boxes), boxes)
}

/// Counter-clockwise (as displayed, rows pointing down) rotation about the
/// patch centre with bilinear sampling; samples outside the patch read zero.
/// Any angle is accepted here; the random op limits it to +/-10 degrees.
pub fn rotate_with(patch: &PatchInstance, angle_deg: f64) -> PatchInstance {
    if angle_deg == 0.0 {
        return patch.clone();
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let c = (PATCH_SIZE as f64 - 1.0) / 2.0;
    map_gray(patch, |src| {
        let at = |y: isize, x: isize| -> f64 {
            if (0..PATCH_SIZE as isize).contains(&y) && (0..PATCH_SIZE as isize).contains(&x) {
                f64::from(src[y as usize * PATCH_SIZE + x as usize])
            } else {
                0.0
            }
        };
        let mut out = vec![0.0; PATCH_PIXELS];
        for y in 0..PATCH_SIZE {
            for x in 0..PATCH_SIZE {
                let (ox, oy) = (x as f64 - c, y as f64 - c);
                // Inverse map: output (x', y') samples source at R(-theta) applied in display coords.
                let sx = c + ox * cos - oy * sin;
                let sy = c + ox * sin + oy * cos;
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as isize, y0 as isize);
                let v = at(y0, x0) * (1.0 - fx) * (1.0 - fy)
                    + at(y0, x0 + 1) * fx * (1.0 - fy)
                    + at(y0 + 1, x0) * (1.0 - fx) * fy
                    + at(y0 + 1, x0 + 1) * fx * fy;
                out[y * PATCH_SIZE + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
        out
    })
}

pub fn rotate<R: Rng + ?Sized>(patch: &PatchInstance, rng: &mut R) -> (PatchInstance, f64) {
    let angle = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    (rotate_with(patch, angle), angle)
}

/// Mirrors columns: column `j` moves to `31 - j`.
pub fn hflip_with(patch: &PatchInstance, flip: bool) -> PatchInstance {
    if !flip {
        return patch.clone();
    }
    map_gray(patch, |src| {
        let mut out = src.to_vec();
        out.chunks_mut(PATCH_SIZE).for_each(<[f32]>::reverse);
        out
    })
}

pub fn hflip<R: Rng + ?Sized>(patch: &PatchInstance, rng: &mut R) -> (PatchInstance, bool) {
    let flip = rng.random_bool(0.5);
    (hflip_with(patch, flip), flip)
}

/// Applies a full record in the fixed order crop, rotate, flip, cutout.
pub fn apply_record(patch: &PatchInstance, record: &AugRecord) -> PatchInstance {
    let p = crop_with(patch, record.crop_offset);
    let p = rotate_with(&p, record.rotation_deg);
    let p = hflip_with(&p, record.flipped);
    cutout_with(&p, &record.cutout_boxes)
}

/// Reconstruction target for a record: rotation and flip of the original only.
pub fn reconstruction_target(patch: &PatchInstance, record: &AugRecord) -> PatchInstance {
    hflip_with(&rotate_with(patch, record.rotation_deg), record.flipped)
}

pub fn draw_record<R: Rng + ?Sized>(rng: &mut R) -> AugRecord {
    let crop_offset = (rng.random_range(0..=MAX_CROP_OFFSET), rng.random_range(0..=MAX_CROP_OFFSET));
    let rotation_deg = rng.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let flipped = rng.random_bool(0.5);
    let mut cutout_boxes = [(0, 0); CUTOUT_BOXES];
    for b in &mut cutout_boxes {
        *b = (rng.random_range(0..=MAX_CUTOUT_ORIGIN), rng.random_range(0..=MAX_CUTOUT_ORIGIN));
    }
    AugRecord { crop_offset, rotation_deg, flipped, cutout_boxes }
}

/// Two contrastive views and their reconstruction targets.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewPair {
    pub view1: PatchInstance,
    pub view2: PatchInstance,
    pub rec1: PatchInstance,
    pub rec2: PatchInstance,
    pub records: [AugRecord; 2],
}

pub fn make_views<R: Rng + ?Sized>(patch: &PatchInstance, rng: &mut R) -> ViewPair {
    let r1 = draw_record(rng);
    let r2 = draw_record(rng);
    ViewPair {
        view1: apply_record(patch, &r1),
        view2: apply_record(patch, &r2),
        rec1: reconstruction_target(patch, &r1),
        rec2: reconstruction_target(patch, &r2),
        records: [r1, r2],
    }
}

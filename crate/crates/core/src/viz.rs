//! Attention maps: a jet-colored 16x16 attention grid upsampled to the slice
//! and alpha-blended over it, written as binary PPM.

use std::fs;
use std::path::Path;

use crate::ctio::GraySlice;
use crate::error::{Error, Result};
use crate::patching::{BAG_SIZE, GRID, PATCH_SIZE, SLICE_SIZE};

pub const OVERLAY_ALPHA: f64 = 0.4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * width * height {
            return Err(Error::dim(3 * width * height, data.len()));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self { width, height, data: rgb.repeat(width * height) }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }
}

fn channel(v: f64, center: f64) -> u8 {
    // Values are non-negative, so `round` is round-half-away-from-zero.
    ((1.5 - (4.0 * v - center).abs()).clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Piecewise-linear jet colormap; `v` is clamped to `[0, 1]`.
pub fn jet(v: f64) -> [u8; 3] {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    [channel(v, 3.0), channel(v, 2.0), channel(v, 1.0)]
}

/// Blends the max-normalized attention grid over the slice with
/// `(1 - alpha) * gray + alpha * jet`.
pub fn render_attention(slice: &GraySlice, attention: &[f64]) -> Result<RgbImage> {
    if slice.width() != SLICE_SIZE || slice.height() != SLICE_SIZE {
        return Err(Error::dim(format!("{SLICE_SIZE}x{SLICE_SIZE} slice"), format!("{}x{}", slice.width(), slice.height())));
    }
    if attention.len() != BAG_SIZE {
        return Err(Error::dim(format!("{BAG_SIZE} attention weights"), attention.len()));
    }
    let max = attention.iter().copied().fold(0.0, f64::max);
    if !(max > 0.0) || attention.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(Error::Numeric("attention weights must be finite, non-negative and not all zero".into()));
    }
    let colors: Vec<[u8; 3]> = attention.iter().map(|&a| jet(a / max)).collect();
    let mut data = Vec::with_capacity(3 * SLICE_SIZE * SLICE_SIZE);
    for r in 0..SLICE_SIZE {
        for c in 0..SLICE_SIZE {
            let gray = f64::from(slice.get(r, c));
            let color = colors[(r / PATCH_SIZE) * GRID + c / PATCH_SIZE];
            for ch in color {
                let v = (1.0 - OVERLAY_ALPHA) * gray + OVERLAY_ALPHA * f64::from(ch);
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    RgbImage::new(SLICE_SIZE, SLICE_SIZE, data)
}

/// Binary P6 bytes: `P6\n<w> <h>\n255\n` followed by the RGB triples.
pub fn encode_ppm(image: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn write_ppm(image: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)).map_err(|e| Error::io(path, e))
}

/// The attention vector as a 16x16 CSV grid (row-major, no header row
/// beyond the column labels).
pub fn attention_grid_csv(attention: &[f64]) -> Result<String> {
    if attention.len() != BAG_SIZE {
        return Err(Error::dim(BAG_SIZE, attention.len()));
    }
    let mut out = String::from("row");
    for c in 0..GRID {
        out.push_str(&format!(",c{c}"));
    }
    out.push('\n');
    for (r, row) in attention.chunks(GRID).enumerate() {
        out.push_str(&r.to_string());
        for a in row {
            out.push_str(&format!(",{a:.8}"));
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: u8) -> GraySlice {
        GraySlice::new(SLICE_SIZE, SLICE_SIZE, vec![v; SLICE_SIZE * SLICE_SIZE]).unwrap()
    }

    #[test]
    fn jet_reference_points() {
        assert_eq!(jet(0.0), [0, 0, 128]);
        assert_eq!(jet(1.0), [128, 0, 0]);
        assert_eq!(jet(0.5), [128, 255, 128]);
        assert_eq!(jet(-3.0), jet(0.0));
        assert_eq!(jet(7.0), jet(1.0));
    }

    #[test]
    fn jet_is_continuous() {
        for i in 0..512 {
            let (a, b) = (jet(i as f64 / 512.0), jet((i + 1) as f64 / 512.0));
            for ch in 0..3 {
                assert!((i32::from(a[ch]) - i32::from(b[ch])).abs() <= 3, "jump at {i}");
            }
        }
    }

    #[test]
    fn uniform_attention_is_one_color() {
        let img = render_attention(&gray(100), &[1.0 / 256.0; 256]).unwrap();
        let first = img.pixel(0, 0);
        assert!(img.data().chunks(3).all(|p| p == first));
        // 0.6 * 100 + 0.4 * jet(1).
        assert_eq!(first, [111, 60, 60]);
    }

    #[test]
    fn one_hot_attention_marks_one_block() {
        let mut a = vec![0.0; 256];
        a[17] = 1.0;
        let img = render_attention(&gray(0), &a).unwrap();
        let hot = jet(1.0).map(|c| (0.4 * f64::from(c)).round() as u8);
        let cold = jet(0.0).map(|c| (0.4 * f64::from(c)).round() as u8);
        for r in 0..SLICE_SIZE {
            for c in 0..SLICE_SIZE {
                let inside = (32..64).contains(&r) && (32..64).contains(&c);
                assert_eq!(img.pixel(r, c), if inside { hot } else { cold });
            }
        }
        // Block boundary between pixel 31 and 32 on the grid row of the hot block.
        assert_ne!(img.pixel(40, 31), img.pixel(40, 32));
        assert_eq!(img.pixel(40, 30), img.pixel(40, 31));
    }

    #[test]
    fn overlay_is_scale_invariant() {
        let a: Vec<f64> = (0..256).map(|i| (i % 7) as f64 + 1.0).collect();
        let s: f64 = a.iter().sum();
        let norm: Vec<f64> = a.iter().map(|v| v / s).collect();
        let scaled: Vec<f64> = a.iter().map(|v| v * 3.0 / s).collect();
        assert_eq!(render_attention(&gray(50), &norm).unwrap(), render_attention(&gray(50), &scaled).unwrap());
    }

    #[test]
    fn ppm_bytes() {
        let white = RgbImage::filled(1, 1, [255, 255, 255]);
        let bytes = encode_ppm(&white);
        assert_eq!(bytes, b"P6\n1 1\n255\n\xff\xff\xff");
        let big = RgbImage::filled(512, 512, [1, 2, 3]);
        let bytes = encode_ppm(&big);
        let header = b"P6\n512 512\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 786_432);
    }

    #[test]
    fn wrong_sizes_are_rejected() {
        assert!(render_attention(&gray(0), &[1.0; 255]).is_err());
        let small = GraySlice::new(16, 16, vec![0; 256]).unwrap();
        assert!(render_attention(&small, &[1.0; 256]).is_err());
        assert!(RgbImage::new(2, 2, vec![0; 11]).is_err());
    }

    #[test]
    fn grid_csv_shape() {
        let csv = attention_grid_csv(&[1.0 / 256.0; 256]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 17);
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 17));
    }
}

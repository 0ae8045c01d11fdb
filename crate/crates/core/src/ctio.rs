//! Slice files, HU windowing and the dataset manifest.
//!
//! CTSL layout (little-endian): `"CTSL"` | version `u32` (=1) | width `u32` |
//! height `u32` | window_low `i32` | window_high `i32` | `width*height` x `i16`
//! HU values, row-major.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CTSL_MAGIC: &[u8; 4] = b"CTSL";
pub const CTSL_VERSION: u32 = 1;
const HEADER_LEN: usize = 24;

/// Fallback window (a common brain window) when the source carries none.
pub const DEFAULT_WINDOW: (i32, i32) = (0, 80);

/// A raw slice of Hounsfield units with its display window `[low, high]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HuSlice {
    width: usize,
    height: usize,
    window_low: i32,
    window_high: i32,
    data: Vec<i16>,
}

impl HuSlice {
    pub fn new(width: usize, height: usize, window_low: i32, window_high: i32, data: Vec<i16>) -> Result<Self> {
        if window_low >= window_high {
            return Err(Error::Format {
                field: "window",
                detail: format!("window_low {window_low} must be below window_high {window_high}"),
            });
        }
        if data.len() != width * height {
            return Err(Error::dim(format!("{width}x{height} pixels"), data.len()));
        }
        Ok(Self { width, height, window_low, window_high, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn window(&self) -> (i32, i32) {
        (self.window_low, self.window_high)
    }

    pub fn data(&self) -> &[i16] {
        &self.data
    }
}

/// An 8-bit windowed slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraySlice {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl GraySlice {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::dim(format!("{width}x{height} pixels"), data.len()));
        }
        Ok(Self { width, height, data })
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

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.width + col]
    }
}

pub fn encode_slice(slice: &HuSlice) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 2 * slice.data.len());
    out.extend_from_slice(CTSL_MAGIC);
    out.extend_from_slice(&CTSL_VERSION.to_le_bytes());
    out.extend_from_slice(&(slice.width as u32).to_le_bytes());
    out.extend_from_slice(&(slice.height as u32).to_le_bytes());
    out.extend_from_slice(&slice.window_low.to_le_bytes());
    out.extend_from_slice(&slice.window_high.to_le_bytes());
    for v in &slice.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes(b.try_into().unwrap())
}

pub fn decode_slice(bytes: &[u8]) -> Result<HuSlice> {
    let fmt_err = |field, detail: String| Error::Format { field, detail };
    if bytes.len() < 4 || &bytes[..4] != CTSL_MAGIC {
        let got = String::from_utf8_lossy(&bytes[..bytes.len().min(4)]).into_owned();
        return Err(fmt_err("magic", format!("expected \"CTSL\", got {got:?}")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(fmt_err("header", format!("need {HEADER_LEN} bytes, file has {}", bytes.len())));
    }
    let version = le_u32(&bytes[4..8]);
    if version != CTSL_VERSION {
        return Err(fmt_err("version", format!("unsupported version {version}")));
    }
    let width = le_u32(&bytes[8..12]) as usize;
    let height = le_u32(&bytes[12..16]) as usize;
    let low = i32::from_le_bytes(bytes[16..20].try_into().unwrap());
    let high = i32::from_le_bytes(bytes[20..24].try_into().unwrap());
    if low >= high {
        return Err(fmt_err("window", format!("window_low {low} must be below window_high {high}")));
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(2))
        .ok_or_else(|| fmt_err("dimensions", format!("{width}x{height} overflows")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected {
        return Err(fmt_err(
            "payload",
            format!("expected {expected} bytes for {width}x{height}, found {}", payload.len()),
        ));
    }
    let data = payload.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect();
    HuSlice::new(width, height, low, high, data)
}

pub fn write_slice(slice: &HuSlice, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_slice(slice)).map_err(|e| Error::io(path, e))
}

pub fn read_slice(path: impl AsRef<Path>) -> Result<HuSlice> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_slice(&bytes)
}

/// Contrast adjustment of one HU value: 0 below the window, 255 above it,
/// linear in between with round-half-away-from-zero.
pub fn window_value(hu: i32, low: i32, high: i32) -> u8 {
    debug_assert!(low < high);
    if hu < low {
        0
    } else if hu > high {
        255
    } else {
        // Exact rational rounding: floor((2*(hu-a)*255 + (b-a)) / (2*(b-a))).
        let num = 2 * (hu as i64 - low as i64) * 255 + (high as i64 - low as i64);
        let den = 2 * (high as i64 - low as i64);
        (num / den) as u8
    }
}

pub fn apply_window(slice: &HuSlice) -> GraySlice {
    let (low, high) = slice.window();
    let data = slice.data.iter().map(|&hu| window_value(hu as i32, low, high)).collect();
    GraySlice { width: slice.width, height: slice.height, data }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Validation(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub slice_path: String,
    pub bag_label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub instance_labels: Option<Vec<u8>>,
    pub split: Split,
}

impl ManifestEntry {
    /// Checks label ranges and that the bag label is the OR of instance labels.
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.bag_label > 1 {
            return Err(format!("bag_label must be 0 or 1, got {}", self.bag_label));
        }
        if let Some(labels) = &self.instance_labels {
            if labels.len() != crate::patching::BAG_SIZE {
                return Err(format!(
                    "instance_labels must have {} entries, got {}",
                    crate::patching::BAG_SIZE,
                    labels.len()
                ));
            }
            if let Some(bad) = labels.iter().find(|&&y| y > 1) {
                return Err(format!("instance label {bad} is not 0 or 1"));
            }
            let implied = crate::patching::bag_label_from_instances(labels);
            if implied != self.bag_label {
                return Err(format!(
                    "bag_label {} disagrees with instance labels (implied {implied})",
                    self.bag_label
                ));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Number of entries per split.
    pub fn populations(&self) -> BTreeMap<Split, usize> {
        let mut counts = BTreeMap::new();
        for e in &self.entries {
            *counts.entry(e.split).or_insert(0) += 1;
        }
        counts
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries always serialize"));
            out.push('\n');
        }
        out
    }
}

pub fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(line)
            .map_err(|e| Error::Manifest { line: line_no, detail: e.to_string() })?;
        entry.validate().map_err(|detail| Error::Manifest { line: line_no, detail })?;
        entries.push(entry);
    }
    Ok(Manifest { entries })
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

pub fn write_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_jsonl()).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassCounts {
    pub total: usize,
    pub positive: usize,
    pub negative: usize,
}

pub fn class_counts<'a>(entries: impl IntoIterator<Item = &'a ManifestEntry>, split: Split) -> Result<ClassCounts> {
    let (mut positive, mut negative) = (0, 0);
    for e in entries.into_iter().filter(|e| e.split == split) {
        if e.bag_label == 1 {
            positive += 1;
        } else {
            negative += 1;
        }
    }
    if positive + negative == 0 {
        return Err(Error::Validation(format!("split `{split}` is empty")));
    }
    Ok(ClassCounts { total: positive + negative, positive, negative })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn entry(label: u8, split: Split) -> ManifestEntry {
        ManifestEntry { slice_path: "x.ctsl".into(), bag_label: label, instance_labels: None, split }
    }

    #[test]
    fn hand_built_constant_slice_decodes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CTSL");
        bytes.extend_from_slice(&[1, 0, 0, 0]);
        bytes.extend_from_slice(&[0, 2, 0, 0]); // 512
        bytes.extend_from_slice(&[0, 2, 0, 0]);
        bytes.extend_from_slice(&[0, 0, 0, 0]); // a = 0
        bytes.extend_from_slice(&[80, 0, 0, 0]); // b = 80
        for _ in 0..512 * 512 {
            bytes.extend_from_slice(&[0x18, 0xFC]); // -1000
        }
        let s = decode_slice(&bytes).unwrap();
        assert_eq!((s.width(), s.height(), s.window()), (512, 512, (0, 80)));
        assert!(s.data().iter().all(|&v| v == -1000));
        assert_eq!(encode_slice(&s), bytes);
    }

    #[test]
    fn bad_magic_names_field() {
        let err = decode_slice(b"XXXX\x01\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Format { field: "magic", .. }), "{err}");
    }

    #[test]
    fn truncated_payload_and_bad_window() {
        let s = HuSlice::new(2, 2, 0, 80, vec![1, 2, 3, 4]).unwrap();
        let bytes = encode_slice(&s);
        let err = decode_slice(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { field: "payload", .. }), "{err}");
        let mut inverted = bytes.clone();
        inverted[16..20].copy_from_slice(&90i32.to_le_bytes());
        let err = decode_slice(&inverted).unwrap_err();
        assert!(matches!(err, Error::Format { field: "window", .. }), "{err}");
        assert!(HuSlice::new(1, 1, 5, 5, vec![0]).is_err());
    }

    #[test]
    fn window_examples() {
        let (a, b) = (0, 80);
        assert_eq!(window_value(a - 1, a, b), 0);
        assert_eq!(window_value(b + 1, a, b), 255);
        assert_eq!(window_value(a, a, b), 0);
        assert_eq!(window_value(b, a, b), 255);
        assert_eq!(window_value(40, a, b), 128);
    }

    #[test]
    fn window_is_monotone_with_full_range() {
        let (a, b) = (-20, 113);
        let mut prev = 0;
        for hu in -100..200 {
            let v = window_value(hu, a, b);
            assert!(v >= prev);
            prev = v;
        }
        assert_eq!(window_value(-100, a, b), 0);
        assert_eq!(window_value(200, a, b), 255);
    }

    #[test]
    fn manifest_eq1_validation() {
        let mut labels = vec![0u8; 256];
        let bad = format!(
            r#"{{"slice_path":"a.ctsl","bag_label":1,"instance_labels":{labels:?},"split":"train"}}"#
        );
        let err = parse_manifest(&bad).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 1, .. }), "{err}");
        labels[17] = 1;
        let good = format!(
            r#"{{"slice_path":"a.ctsl","bag_label":1,"instance_labels":{labels:?},"split":"train"}}"#
        );
        assert_eq!(parse_manifest(&good).unwrap().entries.len(), 1);
    }

    #[test]
    fn manifest_errors_carry_line_numbers() {
        let text = "{\"slice_path\":\"a\",\"bag_label\":0,\"split\":\"train\"}\n\nnot json\n";
        let err = parse_manifest(text).unwrap_err();
        assert!(matches!(err, Error::Manifest { line: 3, .. }), "{err}");
        let bad_split = "{\"slice_path\":\"a\",\"bag_label\":0,\"split\":\"holdout\"}";
        assert!(parse_manifest(bad_split).is_err());
    }

    #[test]
    fn empty_manifest_is_empty() {
        assert!(parse_manifest("").unwrap().entries.is_empty());
    }

    #[test]
    fn class_counts_examples() {
        let two = [entry(1, Split::Train), entry(0, Split::Train)];
        assert_eq!(class_counts(&two, Split::Train).unwrap(), ClassCounts { total: 2, positive: 1, negative: 1 });
        let ten: Vec<_> = (0..10).map(|i| entry(u8::from(i < 3), Split::Valid)).collect();
        assert_eq!(class_counts(&ten, Split::Valid).unwrap(), ClassCounts { total: 10, positive: 3, negative: 7 });
        assert!(class_counts(&ten, Split::Test).is_err());
    }

    #[test]
    fn class_counts_table_shaped_split() {
        let entries: Vec<_> = (0..8072).map(|i| entry(u8::from(i < 1363), Split::Train)).collect();
        let c = class_counts(&entries, Split::Train).unwrap();
        assert_eq!((c.total, c.positive, c.negative), (8072, 1363, 6709));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]

        #[test]
        fn slice_roundtrip(w in 1usize..40, h in 1usize..40, a in -2000i32..2000, span in 1i32..3000, seed in any::<u64>()) {
            let data: Vec<i16> = (0..w * h)
                .map(|i| (seed.wrapping_mul(6364136223846793005).wrapping_add((i as u64).wrapping_mul(1442695040888963407)) >> 48) as i16)
                .collect();
            let s = HuSlice::new(w, h, a, a + span, data).unwrap();
            let bytes = encode_slice(&s);
            let back = decode_slice(&bytes).unwrap();
            prop_assert_eq!(&back, &s);
            prop_assert_eq!(encode_slice(&back), bytes);
        }

        #[test]
        fn class_counts_sum(labels in proptest::collection::vec(0u8..2, 1..200)) {
            let entries: Vec<_> = labels.iter().map(|&l| entry(l, Split::Train)).collect();
            let c = class_counts(&entries, Split::Train).unwrap();
            prop_assert_eq!(c.total, c.positive + c.negative);
        }
    }
}

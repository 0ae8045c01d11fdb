//! MILC checkpoint files.
//!
//! Layout (little-endian): `"MILC"` | version `u32` (=1) | tensor count `u32` |
//! per tensor: name length `u16`, UTF-8 name, rank `u8`, dims `u32` x rank,
//! payload `f32` row-major.

use std::fs;
use std::path::Path;

use super::tensor::{ParamSet, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MILC";
pub const VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ParamSet<f32>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, t) in params.iter() {
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Checkpoint(format!("tensor name too long: {name}")))?;
        let rank = u8::try_from(t.shape().len())
            .map_err(|_| Error::Checkpoint(format!("rank too large for {name}")))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim too large in {name}")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file while reading {what} at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic (expected MILC)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = u16::from_le_bytes(r.take(2, "name length")?.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_owned();
        if params.index_of(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name}")));
        }
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dims")? as usize);
        }
        let len = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).ok_or_else(|| {
            Error::Checkpoint(format!("dims overflow for {name}"))
        })?;
        let payload = r.take(len.saturating_mul(4), "payload")?;
        let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        params.push(name, Tensor::from_vec(&dims, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(params)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamSet<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Loads a checkpoint into `into`, which fixes the expected names and shapes.
/// Unknown names, missing names and shape mismatches are all errors.
pub fn load_checkpoint(path: impl AsRef<Path>, into: &mut ParamSet<f32>) -> Result<()> {
    let loaded = read_checkpoint(path)?;
    let mut unknown: Vec<&str> = loaded.names().iter().map(String::as_str).filter(|n| into.get(n).is_none()).collect();
    if !unknown.is_empty() {
        unknown.sort_unstable();
        return Err(Error::Checkpoint(format!("unknown tensors: {}", unknown.join(", "))));
    }
    let missing: Vec<&str> = into.names().iter().map(String::as_str).filter(|n| loaded.get(n).is_none()).collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing tensors: {}", missing.join(", "))));
    }
    into.copy_matching(&loaded)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.push("a", Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, f32::MIN_POSITIVE, 0.0, -0.0]).unwrap());
        p.push("bb", Tensor::from_vec(&[4], vec![0.25; 4]).unwrap());
        p.push("scalar", Tensor::from_vec(&[], vec![7.0]).unwrap());
        p
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let p = sample();
        let bytes = encode_checkpoint(&p).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        for ((_, x), (_, y)) in p.iter().zip(back.iter()) {
            let xb: Vec<u32> = x.data().iter().map(|v| v.to_bits()).collect();
            let yb: Vec<u32> = y.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(xb, yb);
        }
    }

    #[test]
    fn size_matches_layout_arithmetic() {
        // header 12; "a": 2+1+1+8+24; "bb": 2+2+1+4+16; "scalar": 2+6+1+0+4
        let bytes = encode_checkpoint(&sample()).unwrap();
        assert_eq!(bytes.len(), 12 + 36 + 25 + 13);
    }

    #[test]
    fn truncated_and_bad_magic_rejected() {
        let bytes = encode_checkpoint(&sample()).unwrap();
        for cut in [0, 3, 11, 20, bytes.len() - 1] {
            assert!(decode_checkpoint(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).unwrap_err().to_string().contains("magic"));
        let mut ver = bytes;
        ver[4] = 2;
        assert!(decode_checkpoint(&ver).unwrap_err().to_string().contains("version"));
    }

    #[test]
    fn load_lists_unknown_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.milc");
        save_checkpoint(&path, &sample()).unwrap();
        let mut expected = ParamSet::<f32>::new();
        expected.push("a", Tensor::zeros(&[2, 3]));
        let err = load_checkpoint(&path, &mut expected).unwrap_err().to_string();
        assert!(err.contains("bb") && err.contains("scalar"), "{err}");
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.milc");
        save_checkpoint(&path, &sample()).unwrap();
        let mut expected = sample();
        *expected.get_mut("bb").unwrap() = Tensor::zeros(&[5]);
        assert!(load_checkpoint(&path, &mut expected).is_err());
    }
}

//! Binary tensor container.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset 0   8 bytes   magic "CTXTENS1"
//! offset 8   u32       rank
//! offset 12  u64 x r   extents
//! ...        f64 x n   row-major data
//! ```
//!
//! Each `.bin` file is accompanied by a JSON descriptor with the same stem
//! holding `shape`, `dtype` and `name`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};

pub const MAGIC: &[u8; 8] = b"CTXTENS1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Descriptor {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub name: String,
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 8 * t.rank() + 8 * t.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {what}: need {n} bytes, {} remain",
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Decodes a container; `path` is used only for error messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let rank = r.u32("rank")? as usize;
    if rank > MAX_RANK {
        r.pos -= 4;
        return Err(r.fail(format!("rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: u64 = 1;
    for axis in 0..rank {
        let e = r.u64("extent")?;
        if e == 0 {
            r.pos -= 8;
            return Err(r.fail(format!("extent of axis {axis} is zero")));
        }
        count = count
            .checked_mul(e)
            .filter(|&c| c <= (bytes.len() as u64) / 8 + 1)
            .ok_or_else(|| r.fail("extents exceed file size"))?;
        shape.push(e as usize);
    }
    let count = count as usize;
    let payload = r.take(count * 8, "payload")?;
    let data: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        r.pos -= (count - i) * 8;
        return Err(r.fail("non-finite value"));
    }
    if r.pos != bytes.len() {
        return Err(r.fail(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Tensor::new(&shape, data)
}

pub fn descriptor_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes `path` and its JSON descriptor.
pub fn write_tensor(path: &Path, t: &Tensor, name: &str) -> Result<()> {
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))?;
    let desc = Descriptor {
        shape: t.shape().to_vec(),
        dtype: "f64".into(),
        name: name.into(),
    };
    let dpath = descriptor_path(path);
    let json = serde_json::to_string_pretty(&desc).expect("descriptor serializes");
    fs::write(&dpath, json).map_err(|e| Error::io(&dpath, e))
}

/// Reads a container. If a descriptor exists its shape must agree.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let t = decode(&bytes, path)?;
    let dpath = descriptor_path(path);
    if dpath.exists() {
        let text = fs::read_to_string(&dpath).map_err(|e| Error::io(&dpath, e))?;
        let desc: Descriptor = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: dpath.clone(),
            offset: 0,
            message: e.to_string(),
        })?;
        if desc.shape != t.shape() || desc.dtype != "f64" {
            return Err(Error::Parse {
                path: dpath,
                offset: 0,
                message: format!("descriptor shape {:?} disagrees with container {:?}", desc.shape, t.shape()),
            });
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.bin")
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(shape in prop::collection::vec(1usize..4, 0..=5), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits((seed ^ (i as u64 * 0x9e37_79b9)) % 0x7fe0_0000_0000_0000)).collect();
            let t = Tensor::new(&shape, data).unwrap();
            let back = decode(&encode(&t), p()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let t = Tensor::ones(&[2, 3]).unwrap();
        let bytes = encode(&t);
        match decode(&bytes[..bytes.len() - 3], p()) {
            Err(Error::Parse { offset, message, .. }) => {
                assert_eq!(offset, 12 + 16);
                assert!(message.contains("payload"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(&bytes[..10], p()), Err(Error::Parse { offset: 8, .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, p()), Err(Error::Parse { offset: 0, .. })));
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long, p()).is_err());
    }

    #[test]
    fn header_claims_beyond_file() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(decode(&bytes, p()).is_err());
    }

    #[test]
    fn files_and_descriptor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let t = Tensor::from_fn(&[3, 2], |i| i as f64 * 0.1).unwrap();
        write_tensor(&path, &t, "x").unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        let desc: Descriptor = serde_json::from_str(&fs::read_to_string(dir.path().join("x.json")).unwrap()).unwrap();
        assert_eq!(desc.shape, vec![3, 2]);
        assert_eq!(desc.name, "x");
    }
}

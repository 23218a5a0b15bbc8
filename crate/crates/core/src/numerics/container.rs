//! Named-array container used for checkpoints and datasets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   "LOCAARRS"
//! version    u8        FORMAT_VERSION
//! header     u64 len + UTF-8 text (structured metadata, opaque here)
//! count      u64
//! repeated count times:
//!   name     u32 len + UTF-8
//!   rank     u32
//!   dims     rank x u64
//!   payload  prod(dims) x f64
//! ```
//!
//! Files are written to a sibling temporary path and renamed into place, so
//! an interrupted write never leaves a truncated container behind.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{LocaError, Result};

pub const MAGIC: &[u8; 8] = b"LOCAARRS";
pub const FORMAT_VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LocaError::shape(
                format!("array {name}"),
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { name, shape, data })
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub header: String,
    pub arrays: Vec<NamedArray>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(self.err(format!("truncated at byte {}", self.pos)));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err(format!("length {v} overflows")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.err("invalid UTF-8".into()))
    }

    fn err(&self, detail: String) -> LocaError {
        LocaError::Format {
            path: self.path.to_path_buf(),
            detail,
        }
    }
}

impl Container {
    pub fn new(header: impl Into<String>) -> Self {
        Self {
            header: header.into(),
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, array: NamedArray) -> Result<()> {
        if self.get(&array.name).is_some() {
            return Err(LocaError::Data(format!("duplicate array name {}", array.name)));
        }
        self.arrays.push(array);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    /// Looks up an array and checks its shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&NamedArray> {
        let a = self
            .get(name)
            .ok_or_else(|| LocaError::Data(format!("missing array {name}")))?;
        if a.shape != shape {
            return Err(LocaError::shape(
                format!("array {name}"),
                format!("stored {:?}, expected {shape:?}", a.shape),
            ));
        }
        Ok(a)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let payload: usize = self.arrays.iter().map(|a| a.data.len() * 8 + 64).sum();
        let mut out = Vec::with_capacity(32 + self.header.len() + payload);
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.arrays.len() as u64).to_le_bytes());
        for a in &self.arrays {
            out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
            out.extend_from_slice(a.name.as_bytes());
            out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
            for &d in &a.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &a.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(8)? != MAGIC {
            return Err(r.err("bad magic".into()));
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(r.err(format!("unsupported format version {version}")));
        }
        let header_len = r.len()?;
        let header = r.string(header_len)?;
        let count = r.len()?;
        let mut arrays = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = r.string(name_len)?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.err(format!("array {name} too large")))?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| r.err("overflow".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push(NamedArray { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { header, arrays })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| LocaError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Writes `bytes` to a temporary sibling, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| LocaError::io(parent, e))?;
    }
    let mut tmp = PathBuf::from(path);
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    static COUNTER: AtomicUsize = AtomicUsize::new(0);
    let unique = COUNTER.fetch_add(1, Ordering::Relaxed);
    tmp.set_file_name(format!(".{file_name}.tmp-{}-{unique}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| LocaError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| LocaError::io(&tmp, e))?;
    f.sync_all().map_err(|e| LocaError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| LocaError::io(path, e))
}

/// Lowercase hex SHA-256 digest.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn bytes_round_trip(
            header in ".{0,40}",
            arrays in proptest::collection::vec(
                (proptest::collection::vec(0usize..4, 0..3), any::<u64>()), 0..4),
        ) {
            let mut c = Container::new(header);
            for (i, (shape, seed)) in arrays.into_iter().enumerate() {
                let n: usize = shape.iter().product();
                let data = (0..n).map(|k| f64::from_bits(seed.wrapping_add(k as u64) >> 2)).collect();
                c.push(NamedArray::new(format!("a{i}"), shape, data).unwrap()).unwrap();
            }
            let back = Container::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back.header, c.header);
            prop_assert_eq!(back.arrays.len(), c.arrays.len());
            for (a, b) in back.arrays.iter().zip(&c.arrays) {
                prop_assert_eq!(&a.shape, &b.shape);
                let bits_a: Vec<u64> = a.data.iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = b.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
        }
    }

    #[test]
    fn rejects_wrong_version_and_truncation() {
        let mut c = Container::new("{}");
        c.push(NamedArray::new("w", vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        let mut bytes = c.to_bytes();
        let p = Path::new("mem");
        assert!(Container::from_bytes(&bytes[..bytes.len() - 3], p).is_err());
        bytes[8] = 99;
        let err = Container::from_bytes(&bytes, p).unwrap_err();
        assert!(err.to_string().contains("version"));
    }

    #[test]
    fn shape_checked_lookup() {
        let mut c = Container::new("");
        c.push(NamedArray::new("w", vec![2, 1], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(c.expect("w", &[2, 1]).is_ok());
        assert!(c.expect("w", &[1, 2]).is_err());
        assert!(c.expect("b", &[2]).is_err());
        assert!(NamedArray::new("x", vec![3], vec![0.0]).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/c.bin");
        Container::new("hdr").write(&path).unwrap();
        let names: Vec<_> = fs::read_dir(path.parent().unwrap())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(names.len(), 1);
        assert_eq!(Container::read(&path).unwrap().header, "hdr");
    }
}

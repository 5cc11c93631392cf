//! Self-describing binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic       8 bytes  "IPRCKPT\0"
//! version     u32
//! header_len  u32, followed by that many bytes of UTF-8 JSON
//! n_tensors   u32
//! per tensor: u16 name_len, name bytes, u8 ndim, ndim × u32 dims,
//!             product(dims) × f64 values
//! ```
//!
//! Decoding never trusts a length field: every read is bounds-checked and
//! trailing bytes are an error.

use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"IPRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NDIM: usize = 8;
const MAX_HEADER: usize = 1 << 20;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: serde_json::Value,
    pub tensors: Vec<Tensor>,
}

#[derive(Debug, Clone, Serialize)]
struct TensorEntry<'a> {
    name: &'a str,
    shape: &'a [usize],
}

impl Checkpoint {
    pub fn new(header: serde_json::Value, tensors: Vec<Tensor>) -> Result<Self> {
        let ck = Self { header, tensors };
        ck.validate()?;
        Ok(ck)
    }

    fn validate(&self) -> Result<()> {
        let mut names = std::collections::BTreeSet::new();
        for t in &self.tensors {
            if t.name.is_empty() || t.name.len() > u16::MAX as usize {
                return Err(Error::Checkpoint(format!(
                    "bad tensor name length {}",
                    t.name.len()
                )));
            }
            if !names.insert(t.name.as_str()) {
                return Err(Error::Checkpoint(format!("duplicate tensor {}", t.name)));
            }
            if t.shape.len() > MAX_NDIM || t.shape.iter().any(|&d| d > u32::MAX as usize) {
                return Err(Error::Checkpoint(format!(
                    "unsupported shape for {}",
                    t.name
                )));
            }
            if t.shape.iter().product::<usize>() != t.data.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} data does not match shape",
                    t.name
                )));
            }
            if !t.data.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("checkpoint tensor {}", t.name)));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header)?;
        if header.len() > MAX_HEADER {
            return Err(Error::Checkpoint("header too large".into()));
        }
        let n_values: usize = self.tensors.iter().map(|t| t.data.len()).sum();
        let mut out = Vec::with_capacity(24 + header.len() + 8 * n_values);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u16).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.shape.len() as u8);
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let header_len = r.u32()? as usize;
        if header_len > MAX_HEADER {
            return Err(Error::Checkpoint("header too large".into()));
        }
        let header: serde_json::Value = serde_json::from_slice(r.take(header_len)?)
            .map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let n_tensors = r.u32()? as usize;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u8()? as usize;
            if ndim > MAX_NDIM {
                return Err(Error::Checkpoint(format!("tensor {name} has {ndim} dims")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut count: usize = 1;
            for _ in 0..ndim {
                let d = r.u32()? as usize;
                count = count
                    .checked_mul(d)
                    .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
                shape.push(d);
            }
            let n_bytes = count
                .checked_mul(8)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
            let raw = r.take(n_bytes)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Self::new(header, tensors)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    /// Hex SHA-256 of the encoded bytes.
    pub fn sha256_hex(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.encode()?)))
    }

    /// Human-readable summary: header, tensor names and shapes, and hash.
    pub fn manifest(&self) -> Result<serde_json::Value> {
        let entries: Vec<TensorEntry> = self
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: &t.name,
                shape: &t.shape,
            })
            .collect();
        Ok(serde_json::json!({
            "format_version": CHECKPOINT_VERSION,
            "header": self.header,
            "tensors": entries,
            "sha256": self.sha256_hex()?,
        }))
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Checkpoint {
        Checkpoint::new(
            serde_json::json!({"arch": {"widths": [2, 3, 1]}, "step": 7}),
            vec![
                Tensor {
                    name: "layer0.weight".into(),
                    shape: vec![3, 2],
                    data: vec![0.5, -1.25, 3.0, 1e-300, -0.0, 7.0],
                },
                Tensor {
                    name: "scalar".into(),
                    shape: vec![],
                    data: vec![42.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let bytes = ck.encode().unwrap();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back.header, ck.header);
        for (a, b) in ck.tensors.iter().zip(&back.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            assert!(a
                .data
                .iter()
                .zip(&b.data)
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back.encode().unwrap(), bytes);
    }

    #[test]
    fn file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let ck = sample();
        ck.write(&path).unwrap();
        let back = Checkpoint::read(&path).unwrap();
        assert_eq!(back.sha256_hex().unwrap(), ck.sha256_hex().unwrap());
        assert_eq!(ck.sha256_hex().unwrap().len(), 64);
        let m = ck.manifest().unwrap();
        assert_eq!(m["tensors"][0]["name"], "layer0.weight");
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = sample().encode().unwrap();
        for n in 0..bytes.len() {
            assert!(
                Checkpoint::decode(&bytes[..n]).is_err(),
                "prefix {n} accepted"
            );
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::decode(&extra).is_err());
    }

    #[test]
    fn header_corruptions_rejected() {
        let bytes = sample().encode().unwrap();
        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 1;
        assert!(Checkpoint::decode(&bad_magic).is_err());
        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(Checkpoint::decode(&bad_version).is_err());
    }

    #[test]
    fn invalid_contents_rejected() {
        let nan = Tensor {
            name: "x".into(),
            shape: vec![1],
            data: vec![f64::NAN],
        };
        assert!(Checkpoint::new(serde_json::Value::Null, vec![nan]).is_err());
        let t = Tensor {
            name: "x".into(),
            shape: vec![1],
            data: vec![1.0],
        };
        assert!(Checkpoint::new(serde_json::Value::Null, vec![t.clone(), t]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..256)) {
            let _ = Checkpoint::decode(&bytes);
        }

        #[test]
        fn arbitrary_tensors_round_trip(
            values in proptest::collection::vec(-1e6f64..1e6, 0..40),
            rows in 1usize..5,
        ) {
            let cols = values.len() / rows;
            let data = values[..rows * cols].to_vec();
            let ck = Checkpoint::new(
                serde_json::json!({"k": rows}),
                vec![Tensor { name: "w".into(), shape: vec![rows, cols], data }],
            ).unwrap();
            let back = Checkpoint::decode(&ck.encode().unwrap()).unwrap();
            prop_assert_eq!(back, ck);
        }
    }
}

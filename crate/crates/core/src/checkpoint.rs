//! Single-file parameter archives.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes   b"CGCKPT\0\0"
//! version    u32       FORMAT_VERSION
//! meta_len   u32       length of the metadata block
//! meta       bytes     UTF-8 JSON (configuration, human-readable)
//! n_tensors  u32
//! repeated n_tensors times:
//!   name_len u32, name UTF-8 bytes,
//!   rows u32, cols u32,
//!   rows*cols f64 values, row-major, IEEE-754 little-endian
//! ```
//!
//! Values are written from their bit patterns, so a save/load cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamStore};

pub const MAGIC: &[u8; 8] = b"CGCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode<M: Serialize>(meta: &M, store: &ParamStore) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec_pretty(meta)?;
    let mut out = Vec::with_capacity(32 + meta.len() + store.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    push_len(&mut out, meta.len())?;
    out.extend_from_slice(&meta);
    push_len(&mut out, store.entries().len())?;
    let data = store.as_slice();
    for e in store.entries() {
        push_len(&mut out, e.name.len())?;
        out.extend_from_slice(e.name.as_bytes());
        push_len(&mut out, e.rows)?;
        push_len(&mut out, e.cols)?;
        for v in &data[e.offset..e.offset + e.rows * e.cols] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn push_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated archive at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

pub fn decode<M: DeserializeOwned>(bytes: &[u8]) -> Result<(M, ParamStore)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint archive".into()));
    }
    let version = r.u32()? as u32;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
        )));
    }
    let meta_len = r.u32()?;
    let meta: M = serde_json::from_slice(r.take(meta_len)?)?;
    let n = r.u32()?;
    let mut entries = Vec::with_capacity(n);
    let mut data = Vec::new();
    for _ in 0..n {
        let name_len = r.u32()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rows = r.u32()?;
        let cols = r.u32()?;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name} too large")))?;
        let raw = r.take(count.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        entries.push(ParamEntry {
            name,
            rows,
            cols,
            offset: data.len(),
        });
        data.extend(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])),
        );
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((meta, ParamStore::from_parts(entries, data)))
}

pub fn save<M: Serialize>(path: &Path, meta: &M, store: &ParamStore) -> Result<()> {
    let bytes = encode(meta, store)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load<M: DeserializeOwned>(path: &Path) -> Result<(M, ParamStore)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(vals in proptest::collection::vec(proptest::num::f64::ANY, 1..40), cols in 1usize..5) {
            let rows = vals.len() / cols;
            prop_assume!(rows > 0);
            let mut s = ParamStore::new();
            let mut it = vals.iter().copied();
            s.add_with("w", rows, cols, || it.next().unwrap());
            s.add_const("b", 1, 2, -0.0);
            let bytes = encode(&serde_json::json!({"kind": "test"}), &s).unwrap();
            let (meta, back): (serde_json::Value, ParamStore) = decode(&bytes).unwrap();
            prop_assert_eq!(meta["kind"].as_str(), Some("test"));
            prop_assert!(back.same_layout(&s));
            prop_assert_eq!(back.snapshot_bits(), s.snapshot_bits());
        }
    }

    #[test]
    fn rejects_corrupt_archives() {
        let mut s = ParamStore::new();
        s.add_const("w", 2, 2, 1.5);
        let bytes = encode(&serde_json::json!({}), &s).unwrap();
        assert!(decode::<serde_json::Value>(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<serde_json::Value>(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode::<serde_json::Value>(&long).is_err());
    }
}

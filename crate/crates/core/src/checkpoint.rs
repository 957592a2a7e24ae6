//! Named-parameter checkpoint files.
//!
//! Layout (little-endian): `b"MVCK"`, version `u32 = 1`, then one record per
//! parameter until end of file: name length `u32`, UTF-8 name, rank `u32`,
//! `rank` dims as `u32`, and the `f32` payload.

use std::fs;
use std::path::Path;

use entivid_tensor::{ParamStore, TensorF32};

use crate::error::io_err;
use crate::mvff::Reader;
use crate::{FormatError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in p.value.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<(String, TensorF32)>> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::Version(version).into());
    }
    let mut out = Vec::new();
    while !r.at_end() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| FormatError::Malformed("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = r.u32s(rank)?.into_iter().map(|d| d as usize).collect();
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| FormatError::Malformed(format!("`{name}` size overflows")))?;
        let data = r.f32s(numel)?;
        let tensor = TensorF32::new(shape, data)
            .map_err(|e| FormatError::Malformed(format!("`{name}`: {e}")))?;
        out.push((name, tensor));
    }
    r.finish()?;
    Ok(out)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(store)).map_err(io_err(path))
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, TensorF32)>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn round_trip_and_layout() {
        let mut store = ParamStore::new();
        store
            .insert("a", TensorF32::new(vec![2], vec![1.0, -2.0]).unwrap())
            .unwrap();
        store
            .insert(
                "bb",
                TensorF32::new(vec![1, 3], vec![0.5, 0.25, 8.0]).unwrap(),
            )
            .unwrap();
        let bytes = encode_checkpoint(&store);
        // 8 header, then (4 + 1 + 4 + 4 + 8) and (4 + 2 + 4 + 8 + 12)
        assert_eq!(bytes.len(), 8 + 21 + 30);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].0, "bb");
        assert_eq!(back[1].1.shape(), &[1, 3]);
        assert_eq!(back[1].1.data(), &[0.5, 0.25, 8.0]);

        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 2]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            decode_checkpoint(&bad),
            Err(Error::Format(FormatError::BadMagic { .. }))
        ));
    }
}

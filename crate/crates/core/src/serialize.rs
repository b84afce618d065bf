//! Tensor blobs: a flat little-endian f64 payload described by a list of
//! `{name, shape, dtype, byte_offset, byte_length}` entries, plus small file
//! helpers shared by checkpoints and datasets.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HebaError, Result};
use crate::tensor::Tensor;
use crate::Scalar;

pub const DTYPE_F64: &str = "f64";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub byte_offset: u64,
    pub byte_length: u64,
}

/// Values are widened to f64 regardless of `T`.
pub fn encode_tensors<T: Scalar>(tensors: &[(String, &Tensor<T>)]) -> (Vec<u8>, Vec<TensorEntry>) {
    let mut blob = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let offset = blob.len() as u64;
        for &v in t.data() {
            blob.extend_from_slice(&v.as_f64().to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: DTYPE_F64.into(),
            byte_offset: offset,
            byte_length: blob.len() as u64 - offset,
        });
    }
    (blob, entries)
}

pub fn decode_tensors<T: Scalar>(
    blob: &[u8],
    entries: &[TensorEntry],
    path: &Path,
) -> Result<Vec<(String, Tensor<T>)>> {
    entries
        .iter()
        .map(|e| {
            if e.dtype != DTYPE_F64 {
                return Err(HebaError::format(
                    path,
                    format!("{}: unsupported dtype {}", e.name, e.dtype),
                ));
            }
            let n: usize = e.shape.iter().product();
            let (start, len) = (e.byte_offset as usize, e.byte_length as usize);
            if len != n * 8 || start.checked_add(len).is_none_or(|end| end > blob.len()) {
                return Err(HebaError::format(
                    path,
                    format!("{}: byte range out of bounds", e.name),
                ));
            }
            let data = blob[start..start + len]
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
                .collect();
            let t = Tensor::new(e.shape.clone(), data)
                .map_err(|err| HebaError::format(path, err.to_string()))?;
            Ok((e.name.clone(), t))
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HebaError::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| HebaError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| HebaError::io(path, e))
}

pub fn read_json<V: DeserializeOwned>(path: &Path) -> Result<V> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| HebaError::json(path, e))
}

/// Pretty JSON with a trailing newline.
pub fn write_json<V: Serialize>(path: &Path, value: &V) -> Result<()> {
    let mut s = serde_json::to_vec_pretty(value).map_err(|e| HebaError::json(path, e))?;
    s.push(b'\n');
    write_bytes(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bit_exact() {
        let a = Tensor::<f64>::from_f64(&[2, 2], &[1.0, -0.0, f64::MIN_POSITIVE, 1e300]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3], &[0.1, 0.2, 0.3]).unwrap();
        let (blob, entries) = encode_tensors(&[("a".into(), &a), ("b".into(), &b)]);
        assert_eq!(blob.len(), 56);
        assert_eq!(entries[1].byte_offset, 32);
        let back = decode_tensors::<f64>(&blob, &entries, Path::new("x")).unwrap();
        assert!(back[0].1.bitwise_eq(&a));
        assert!(back[1].1.bitwise_eq(&b));
    }

    #[test]
    fn rejects_truncated_blob() {
        let a = Tensor::<f64>::ones(&[4]);
        let (blob, entries) = encode_tensors(&[("a".into(), &a)]);
        assert!(decode_tensors::<f64>(&blob[..24], &entries, Path::new("x")).is_err());
    }
}

//! Raw little-endian arrays, JSON sidecars and content hashing.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn hash_bytes(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// SHA-256 of the compact JSON encoding.
pub fn hash_json<T: Serialize + ?Sized>(value: &T) -> String {
    hash_bytes(&serde_json::to_vec(value).expect("serializable value"))
}

/// Hashes several hex digests (or any strings) in order.
pub fn hash_parts<S: AsRef<str>>(parts: &[S]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_ref().as_bytes());
        h.update([0u8]);
    }
    hex::encode(h.finalize())
}

pub fn hash_file(path: &Path) -> Result<String> {
    Ok(hash_bytes(&read_bytes(path)?))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        ensure_dir(parent)?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn f32_bytes(values: impl IntoIterator<Item = f32>) -> Vec<u8> {
    values.into_iter().flat_map(f32::to_le_bytes).collect()
}

pub fn write_f32(path: &Path, values: impl IntoIterator<Item = f32>) -> Result<()> {
    write_bytes(path, &f32_bytes(values))
}

pub fn read_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = read_bytes(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Data(format!(
            "{} is not a whole number of f32 values",
            path.display()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value)?;
    text.push(b'\n');
    write_bytes(path, &text)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read_bytes(path)?)?)
}

/// `<dir>/obj00042` style stem shared by all per-object artifacts.
pub fn object_stem(object: u32) -> String {
    format!("obj{object:05}")
}

pub fn sidecar_path(data: &Path) -> PathBuf {
    data.with_extension("json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_files_round_trip(values in proptest::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 0..64)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("a.f32");
            write_f32(&path, values.iter().copied()).unwrap();
            prop_assert_eq!(read_f32(&path).unwrap(), values);
        }
    }

    #[test]
    fn hashes_are_stable_and_distinct() {
        assert_eq!(hash_json(&[1, 2]), hash_json(&[1, 2]));
        assert_ne!(hash_json(&[1, 2]), hash_json(&[2, 1]));
        assert_ne!(hash_parts(&["ab", "c"]), hash_parts(&["a", "bc"]));
    }

    #[test]
    fn truncated_f32_file_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.f32");
        write_bytes(&path, &[0, 1, 2]).unwrap();
        assert!(matches!(read_f32(&path), Err(Error::Data(_))));
    }
}

//! On-disk feature cache keyed by a content hash of (checkpoint, dataset).

use std::path::{Path, PathBuf};

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Result, SorcenError};

const FEAT_MAGIC: [u8; 4] = *b"SFEA";

/// Hex digest of the checkpoint and dataset contents; identical inputs map
/// to the same cache entry.
pub fn feature_cache_key(checkpoint: impl AsRef<Path>, dataset: impl AsRef<Path>) -> Result<String> {
    let mut hasher = Sha256::new();
    for p in [checkpoint.as_ref(), dataset.as_ref()] {
        let bytes = std::fs::read(p).map_err(|e| SorcenError::io(p.display().to_string(), e))?;
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

fn cache_path(dir: &Path, key: &str) -> PathBuf {
    dir.join(format!("{key}.feat"))
}

pub fn store_cached_features(dir: impl AsRef<Path>, key: &str, features: &Array2<f64>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| SorcenError::io(dir.display().to_string(), e))?;
    let path = cache_path(dir, key);
    let mut buf = Vec::with_capacity(20 + features.len() * 8);
    buf.extend_from_slice(&FEAT_MAGIC);
    buf.extend_from_slice(&(features.nrows() as u64).to_le_bytes());
    buf.extend_from_slice(&(features.ncols() as u64).to_le_bytes());
    for v in features.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(&path, buf).map_err(|e| SorcenError::io(path.display().to_string(), e))
}

/// `Ok(None)` when the entry does not exist.
pub fn load_cached_features(dir: impl AsRef<Path>, key: &str) -> Result<Option<Array2<f64>>> {
    let path = cache_path(dir.as_ref(), key);
    let bytes = match std::fs::read(&path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(SorcenError::io(path.display().to_string(), e)),
    };
    if bytes.len() < 20 || bytes[0..4] != FEAT_MAGIC {
        return Err(SorcenError::invalid(format!("{}: not a feature cache file", path.display())));
    }
    let rows = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let cols = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let expected = 20 + rows * cols * 8;
    if bytes.len() != expected {
        return Err(SorcenError::PayloadLength { expected, actual: bytes.len() });
    }
    let data: Vec<f64> = bytes[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Some(Array2::from_shape_vec((rows, cols), data).unwrap()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cache_roundtrip_and_key_sensitivity() {
        let dir = std::env::temp_dir().join("sorcen-cache-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let ckpt = dir.join("model.bin");
        let data = dir.join("data.bin");
        std::fs::write(&ckpt, b"model-a").unwrap();
        std::fs::write(&data, b"data-a").unwrap();
        let key1 = feature_cache_key(&ckpt, &data).unwrap();
        std::fs::write(&data, b"data-b").unwrap();
        let key2 = feature_cache_key(&ckpt, &data).unwrap();
        assert_ne!(key1, key2);

        let features = Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 * 0.25);
        store_cached_features(&dir, &key1, &features).unwrap();
        let loaded = load_cached_features(&dir, &key1).unwrap().unwrap();
        assert_eq!(loaded, features);
        assert!(load_cached_features(&dir, "missing").unwrap().is_none());
    }
}

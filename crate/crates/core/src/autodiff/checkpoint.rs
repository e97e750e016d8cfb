//! Checkpoints: one flat little-endian f64 blob per parameter set plus a
//! JSON manifest mapping names to shapes and byte offsets.

use crate::autodiff::{ParamMap, Tensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of the first element inside the blob.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    total_bytes: usize,
    tensors: Vec<ManifestEntry>,
}

const FORMAT: &str = "f64-le";

/// Write `<stem>.bin` and `<stem>.json` into `dir`. Serialization order is
/// the `ParamMap` insertion order, so identical parameters produce
/// byte-identical files.
pub fn save_checkpoint(dir: &Path, stem: &str, params: &ParamMap) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(params.len());
    let mut blob: Vec<u8> = Vec::with_capacity(params.numel() * 8);
    for (name, tensor) in params.iter() {
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape: tensor.shape().to_vec(),
            offset: blob.len(),
        });
        for &v in tensor.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        total_bytes: blob.len(),
        tensors: entries,
    };
    let mut bin = fs::File::create(dir.join(format!("{stem}.bin")))?;
    bin.write_all(&blob)?;
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

/// Read a checkpoint written by `save_checkpoint`. Validates the format
/// tag, blob length, offsets, and shape products.
pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<ParamMap> {
    let json_path = dir.join(format!("{stem}.json"));
    let bin_path = dir.join(format!("{stem}.bin"));
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json_path).map_err(
        |e| Error::Checkpoint(format!("cannot read {}: {e}", json_path.display())),
    )?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint format {:?}",
            manifest.format
        )));
    }
    let blob = fs::read(&bin_path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", bin_path.display())))?;
    if blob.len() != manifest.total_bytes {
        return Err(Error::Checkpoint(format!(
            "blob length {} does not match manifest {}",
            blob.len(),
            manifest.total_bytes
        )));
    }
    let mut params = ParamMap::new();
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = entry.offset + numel * 8;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns blob ({} > {})",
                entry.name,
                end,
                blob.len()
            )));
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = entry.offset + i * 8;
            let bytes: [u8; 8] = blob[at..at + 8].try_into().unwrap();
            data.push(f64::from_le_bytes(bytes));
        }
        params.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params() -> ParamMap {
        let mut p = ParamMap::new();
        p.insert("emb", Tensor::new(vec![3, 2], vec![0.1, -0.2, 0.3, 0.4, -0.5, 0.6]).unwrap());
        p.insert("bias", Tensor::from_vec(vec![1.5, -2.5]));
        p
    }

    #[test]
    fn roundtrip_is_bitwise_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = sample_params();
        save_checkpoint(dir.path(), "model", &p).unwrap();
        let q = load_checkpoint(dir.path(), "model").unwrap();
        assert!(p.bitwise_eq(&q));
    }

    #[test]
    fn identical_params_produce_identical_bytes() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        save_checkpoint(d1.path(), "m", &sample_params()).unwrap();
        save_checkpoint(d2.path(), "m", &sample_params()).unwrap();
        let b1 = std::fs::read(d1.path().join("m.bin")).unwrap();
        let b2 = std::fs::read(d2.path().join("m.bin")).unwrap();
        assert_eq!(b1, b2);
        let j1 = std::fs::read(d1.path().join("m.json")).unwrap();
        let j2 = std::fs::read(d2.path().join("m.json")).unwrap();
        assert_eq!(j1, j2);
    }

    #[test]
    fn corrupt_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), "m", &sample_params()).unwrap();
        let bin = dir.path().join("m.bin");
        let mut blob = std::fs::read(&bin).unwrap();
        blob.truncate(blob.len() - 8);
        std::fs::write(&bin, blob).unwrap();
        assert!(load_checkpoint(dir.path(), "m").is_err());
    }

    #[test]
    fn missing_checkpoint_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(dir.path(), "absent").unwrap_err();
        assert!(err.to_string().contains("absent.json"), "{err}");
    }
}

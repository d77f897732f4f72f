//! Checkpoints: a JSON manifest plus one flat little-endian `f32` blob.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use super::NumericsError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub blob: String,
    pub config: serde_json::Value,
    pub params: Vec<ManifestEntry>,
}

pub const FORMAT_TAG: &str = "flmlab-checkpoint-v1";

fn io_err(path: &Path, e: std::io::Error) -> NumericsError {
    NumericsError::Io(format!("{}: {e}", path.display()))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), NumericsError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
    f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
    f.sync_all().map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Writes `<stem>.json` and `<stem>.bin` next to each other.
pub fn save_checkpoint(
    manifest_path: &Path,
    params: &ParamStore<f32>,
    config: serde_json::Value,
) -> Result<(), NumericsError> {
    let blob_path = manifest_path.with_extension("bin");
    let blob_name = blob_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .ok_or_else(|| NumericsError::Io("checkpoint path has no file name".into()))?;
    let mut bytes = Vec::with_capacity(params.total_len() * 4);
    let mut entries = Vec::with_capacity(params.len());
    for (_, name, t) in params.iter() {
        entries.push(ManifestEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: bytes.len() });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest { format: FORMAT_TAG.into(), blob: blob_name, config, params: entries };
    write_atomic(&blob_path, &bytes)?;
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| NumericsError::Io(e.to_string()))?;
    write_atomic(manifest_path, &json)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(Manifest, ParamStore<f32>), NumericsError> {
    let text = fs::read(manifest_path).map_err(|e| io_err(manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_slice(&text).map_err(|e| NumericsError::Io(format!("{}: {e}", manifest_path.display())))?;
    if manifest.format != FORMAT_TAG {
        return Err(NumericsError::Io(format!("unknown checkpoint format {}", manifest.format)));
    }
    let blob_path: PathBuf = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.blob);
    let bytes = fs::read(&blob_path).map_err(|e| io_err(&blob_path, e))?;
    let mut store = ParamStore::new();
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let end = e.offset + 4 * n;
        if end > bytes.len() {
            return Err(NumericsError::Io(format!("blob too short for {}", e.name)));
        }
        let data = bytes[e.offset..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        store.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok((manifest, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_then_load_preserves_values() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new();
        s.insert("layer.1.shared.attn.wq", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.25, f32::MIN_POSITIVE]).unwrap());
        s.insert("tok_emb", Tensor::new(vec![3], vec![0.1, 0.2, 0.3]).unwrap());
        let path = dir.path().join("model.json");
        save_checkpoint(&path, &s, serde_json::json!({"d_model": 2})).unwrap();
        let (m, back) = load_checkpoint(&path).unwrap();
        assert_eq!(m.params[1].offset, 16);
        assert_eq!(m.config["d_model"], 2);
        back.check_same_layout(&s).unwrap();
        for ((_, _, a), (_, _, b)) in s.iter().zip(back.iter()) {
            assert_eq!(a, b);
        }
        let raw = fs::read(dir.path().join("model.bin")).unwrap();
        assert_eq!(&raw[0..4], &1.0f32.to_le_bytes());
    }

    #[test]
    fn missing_manifest_is_io_error() {
        assert!(matches!(load_checkpoint(Path::new("/nonexistent/x.json")), Err(NumericsError::Io(_))));
    }
}

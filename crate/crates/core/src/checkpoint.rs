//! Parameter checkpoints: a little-endian `f64` blob of the flattened
//! parameters plus a JSON sidecar with the layer layout.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::params::LayeredParams;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub layers: Vec<LayerEntry>,
    pub total_dim: usize,
    pub seed: u64,
    pub stage: String,
}

/// `stem.bin` and `stem.json` for a checkpoint path given with or without
/// either extension.
pub fn checkpoint_paths(path: &Path) -> (PathBuf, PathBuf) {
    let stem = match path.extension().and_then(|e| e.to_str()) {
        Some("bin" | "json") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (stem.with_extension("bin"), stem.with_extension("json"))
}

pub fn save_checkpoint(path: &Path, params: &LayeredParams, seed: u64, stage: &str) -> Result<PathBuf> {
    let (bin, json) = checkpoint_paths(path);
    let bytes: Vec<u8> = params.flatten().iter().flat_map(|x| x.to_le_bytes()).collect();
    std::fs::write(&bin, bytes).map_err(|e| Error::io(&bin, e))?;
    let meta = CheckpointMeta {
        layers: params
            .layers()
            .iter()
            .map(|l| LayerEntry {
                name: l.id.name.clone(),
                size: l.values.len(),
            })
            .collect(),
        total_dim: params.total_dim(),
        seed,
        stage: stage.to_string(),
    };
    let text = serde_json::to_string_pretty(&meta)? + "\n";
    std::fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    Ok(bin)
}

pub fn load_checkpoint(path: &Path) -> Result<(LayeredParams, CheckpointMeta)> {
    let (bin, json) = checkpoint_paths(path);
    let text = std::fs::read_to_string(&json).map_err(|e| Error::io(&json, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let bytes = std::fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() != 8 * meta.total_dim {
        return Err(Error::LengthMismatch {
            expected: 8 * meta.total_dim,
            got: bytes.len(),
        });
    }
    let mut values = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")));
    let blocks = meta
        .layers
        .iter()
        .map(|l| (l.name.clone(), values.by_ref().take(l.size).collect::<Vec<f64>>()))
        .collect();
    let params = LayeredParams::new(blocks)?;
    if params.total_dim() != meta.total_dim {
        return Err(Error::LengthMismatch {
            expected: meta.total_dim,
            got: params.total_dim(),
        });
    }
    Ok((params, meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let p = LayeredParams::new(vec![("fc0", vec![0.1, -0.0, f64::MIN_POSITIVE]), ("fc1", vec![1e300])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = save_checkpoint(&dir.path().join("stage1"), &p, 7, "align").unwrap();
        assert_eq!(bin.extension().unwrap(), "bin");
        let (q, meta) = load_checkpoint(&dir.path().join("stage1.json")).unwrap();
        let bits = |p: &LayeredParams| p.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p), bits(&q));
        assert_eq!(q.layer_ids(), p.layer_ids());
        assert_eq!((meta.seed, meta.stage.as_str()), (7, "align"));
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let p = LayeredParams::single(vec![1.0, 2.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let bin = save_checkpoint(&dir.path().join("c"), &p, 0, "x").unwrap();
        std::fs::write(&bin, [0u8; 12]).unwrap();
        assert!(matches!(load_checkpoint(&bin), Err(Error::LengthMismatch { .. })));
    }
}

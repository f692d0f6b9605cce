//! Model checkpoints: a JSON manifest describing config, vocabulary hash,
//! and tensor layout, next to a raw little-endian `f64` tensor file.
//! Save -> load -> save is byte identical.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::encoder::{EncoderConfig, EncoderModel, EncoderParams, Mat};
use crate::error::{Error, Result};
use crate::objectives::ClassifierHead;

const FORMAT: &str = "mtb.checkpoint";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the tensor file, in f64 elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct HeadMeta {
    classes: usize,
    rep_dim: usize,
    nil_index: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    config: EncoderConfig,
    vocab_hash: String,
    head: Option<HeadMeta>,
    tensors: Vec<TensorMeta>,
}

/// Paths derived from a checkpoint stem: `<stem>.json` + `<stem>.bin`.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    (stem.with_extension("json"), stem.with_extension("bin"))
}

pub fn save_checkpoint(
    stem: &Path,
    model: &EncoderModel,
    head: Option<&ClassifierHead>,
    vocab_hash: &str,
) -> Result<()> {
    let mut named: Vec<(String, &Mat)> = model.params.named_tensors();
    if let Some(head) = head {
        named.push(("head.w".into(), &head.w));
        named.push(("head.b".into(), &head.b));
    }

    let mut tensors = Vec::with_capacity(named.len());
    let mut offset = 0usize;
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in &named {
        let (rows, cols) = tensor.dim();
        tensors.push(TensorMeta {
            name: name.clone(),
            rows,
            cols,
            offset,
        });
        offset += rows * cols;
        for v in tensor.iter() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }

    let manifest = Manifest {
        format: FORMAT.into(),
        version: VERSION,
        config: model.config.clone(),
        vocab_hash: vocab_hash.into(),
        head: head.map(|h| HeadMeta {
            classes: h.num_classes(),
            rep_dim: h.w.ncols(),
            nil_index: h.nil_index,
        }),
        tensors,
    };

    let (json_path, bin_path) = checkpoint_paths(stem);
    if let Some(parent) = json_path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(json_path, serde_json::to_string(&manifest)?)?;
    fs::write(bin_path, blob)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub model: EncoderModel,
    pub head: Option<ClassifierHead>,
    pub vocab_hash: String,
}

pub fn load_checkpoint(stem: &Path) -> Result<LoadedCheckpoint> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&json_path)?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unexpected manifest format {:?}",
            manifest.format
        )));
    }
    if manifest.version != VERSION {
        return Err(Error::Version {
            format: FORMAT.into(),
            got: manifest.version,
            want: VERSION,
        });
    }
    manifest.config.validate()?;

    let blob = fs::read(&bin_path)?;
    if blob.len() % 8 != 0 {
        return Err(Error::Checkpoint("tensor file length not a multiple of 8".into()));
    }
    let values: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let read_tensor = |meta: &TensorMeta| -> Result<Mat> {
        let n = meta.rows * meta.cols;
        let end = meta.offset + n;
        if end > values.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} overruns the data file",
                meta.name
            )));
        }
        let slice = values[meta.offset..end].to_vec();
        if !slice.iter().all(|v| v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {} is not finite", meta.name)));
        }
        Mat::from_shape_vec((meta.rows, meta.cols), slice)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    };

    let by_name: HashMap<&str, &TensorMeta> = manifest
        .tensors
        .iter()
        .map(|m| (m.name.as_str(), m))
        .collect();

    let mut params = EncoderParams::zeros(&manifest.config);
    for (name, tensor) in params.named_tensors_mut() {
        let meta = by_name.get(name.as_str()).ok_or_else(|| {
            Error::Checkpoint(format!("manifest is missing tensor {name}"))
        })?;
        let loaded = read_tensor(meta)?;
        if loaded.dim() != tensor.dim() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?}, expected {:?}",
                loaded.dim(),
                tensor.dim()
            )));
        }
        tensor.assign(&loaded);
    }

    let head = match &manifest.head {
        None => None,
        Some(meta) => {
            let w_meta = by_name
                .get("head.w")
                .ok_or_else(|| Error::Checkpoint("manifest is missing tensor head.w".into()))?;
            let b_meta = by_name
                .get("head.b")
                .ok_or_else(|| Error::Checkpoint("manifest is missing tensor head.b".into()))?;
            let w = read_tensor(w_meta)?;
            let b = read_tensor(b_meta)?;
            if w.dim() != (meta.classes, meta.rep_dim) || b.dim() != (1, meta.classes) {
                return Err(Error::Checkpoint("head tensor shape mismatch".into()));
            }
            Some(ClassifierHead {
                w,
                b,
                nil_index: meta.nil_index,
            })
        }
    };

    Ok(LoadedCheckpoint {
        model: EncoderModel {
            config: manifest.config,
            params,
        },
        head,
        vocab_hash: manifest.vocab_hash,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn model() -> EncoderModel {
        EncoderModel::new(EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            ffn_mult: 2,
            max_len: 16,
            vocab_size: 20,
            seed: 9,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let model = model();
        let head = ClassifierHead::new(4, model.config.rep_dim(), Some(0), 1);
        let a = dir.path().join("a");
        save_checkpoint(&a, &model, Some(&head), "hash123").unwrap();

        let loaded = load_checkpoint(&a).unwrap();
        assert_eq!(loaded.model, model);
        assert_eq!(loaded.head.as_ref().unwrap(), &head);
        assert_eq!(loaded.vocab_hash, "hash123");

        let b = dir.path().join("b");
        save_checkpoint(&b, &loaded.model, loaded.head.as_ref(), &loaded.vocab_hash).unwrap();
        assert_eq!(
            std::fs::read(a.with_extension("json")).unwrap(),
            std::fs::read(b.with_extension("json")).unwrap()
        );
        assert_eq!(
            std::fs::read(a.with_extension("bin")).unwrap(),
            std::fs::read(b.with_extension("bin")).unwrap()
        );
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let model = model();
        let stem = dir.path().join("ckpt");
        save_checkpoint(&stem, &model, None, "h").unwrap();
        let json_path = stem.with_extension("json");
        let text = std::fs::read_to_string(&json_path)
            .unwrap()
            .replace("\"version\":1", "\"version\":7");
        std::fs::write(&json_path, text).unwrap();
        assert!(matches!(
            load_checkpoint(&stem),
            Err(Error::Version { got: 7, .. })
        ));
    }
}

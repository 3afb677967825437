//! Checkpoint directory format: raw little-endian weights plus a JSON
//! metadata file. Save→load→forward is bit-exact because parameter bytes are
//! stored verbatim.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::geometry::ExtractConfig;
use crate::nn::{EncoderSpec, ParamSet, ParamTensor};
use crate::scalar::Real;

const WEIGHTS_MAGIC: &[u8; 6] = b"MRBW1\n";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint metadata error: {0}")]
    Meta(String),
    #[error("checkpoint scalar type is {stored}, expected {expected}")]
    DtypeMismatch { stored: String, expected: String },
    #[error("geometry config hash mismatch: checkpoint {stored}, current {current}")]
    GeometryMismatch { stored: String, current: String },
}

/// Which model a checkpoint holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKindTag {
    Multi,
    Single { inputs: Vec<String> },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub seed: u64,
    pub epoch: usize,
    pub encoder: EncoderSpec,
    pub model: ModelKindTag,
    pub scalar: String,
    pub geometry_hash: String,
    pub crop_size: usize,
}

/// Hash of the geometry parameters + crop size a model was trained with.
pub fn geometry_hash(extract: &ExtractConfig) -> String {
    let mut hasher = Sha256::new();
    hasher.update(extract.geo.canonical_string().as_bytes());
    hasher.update(format!(";crop_size={}", extract.crop_size).as_bytes());
    hex_string(&hasher.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Write `meta.json` and `weights.bin` under `dir` (created if needed).
pub fn save_checkpoint<F: Real>(
    dir: &Path,
    params: &ParamSet<F>,
    meta: &CheckpointMeta,
) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(meta)
        .map_err(|e| CheckpointError::Meta(e.to_string()))?;
    fs::write(&meta_path, meta_json).map_err(io_err(&meta_path))?;

    let mut buf = Vec::new();
    buf.extend_from_slice(WEIGHTS_MAGIC);
    let dtype = F::DTYPE.as_bytes();
    buf.push(dtype.len() as u8);
    buf.extend_from_slice(dtype);
    buf.extend_from_slice(&(params.tensors.len() as u32).to_le_bytes());
    for tensor in &params.tensors {
        let name = tensor.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(tensor.shape.len() as u8);
        for &d in &tensor.shape {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &tensor.data {
            v.write_le(&mut buf);
        }
    }
    let weights_path = dir.join("weights.bin");
    fs::write(&weights_path, buf).map_err(io_err(&weights_path))
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let meta_path = dir.join("meta.json");
    let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
    serde_json::from_str(&text).map_err(|e| CheckpointError::Meta(e.to_string()))
}

/// Load raw parameter tensors; the caller matches them to a freshly built
/// model by name.
pub fn load_weights<F: Real>(dir: &Path) -> Result<Vec<ParamTensor<F>>, CheckpointError> {
    let weights_path = dir.join("weights.bin");
    let mut file = fs::File::open(&weights_path).map_err(io_err(&weights_path))?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf).map_err(io_err(&weights_path))?;

    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
        if *pos + n > buf.len() {
            return Err(CheckpointError::Corrupt("truncated weights file".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };

    if take(&mut pos, WEIGHTS_MAGIC.len())? != WEIGHTS_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic".into()));
    }
    let dtype_len = take(&mut pos, 1)?[0] as usize;
    let dtype = String::from_utf8(take(&mut pos, dtype_len)?.to_vec())
        .map_err(|_| CheckpointError::Corrupt("bad dtype".into()))?;
    if dtype != F::DTYPE {
        return Err(CheckpointError::DtypeMismatch {
            stored: dtype,
            expected: F::DTYPE.to_string(),
        });
    }
    let n_tensors = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| CheckpointError::Corrupt("bad tensor name".into()))?;
        let ndim = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
        }
        let len: usize = shape.iter().product();
        let raw = take(&mut pos, len * F::BYTE_WIDTH)?;
        let data = raw
            .chunks_exact(F::BYTE_WIDTH)
            .map(|c| F::read_le(c))
            .collect();
        tensors.push(ParamTensor { name, shape, data });
    }
    if pos != buf.len() {
        return Err(CheckpointError::Corrupt("trailing bytes".into()));
    }
    Ok(tensors)
}

/// Copy loaded tensors into a freshly built parameter set, matching by name
/// and shape.
pub fn restore_params<F: Real>(
    params: &mut ParamSet<F>,
    loaded: Vec<ParamTensor<F>>,
) -> Result<(), CheckpointError> {
    if loaded.len() != params.tensors.len() {
        return Err(CheckpointError::Corrupt(format!(
            "tensor count mismatch: checkpoint {}, model {}",
            loaded.len(),
            params.tensors.len()
        )));
    }
    for (dst, src) in params.tensors.iter_mut().zip(loaded) {
        if dst.name != src.name || dst.shape != src.shape {
            return Err(CheckpointError::Corrupt(format!(
                "tensor mismatch: model {} {:?} vs checkpoint {} {:?}",
                dst.name, dst.shape, src.name, src.shape
            )));
        }
        dst.data = src.data;
    }
    Ok(())
}

/// Checkpoint directory names used by the trainer.
pub fn best_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint_best")
}

pub fn final_dir(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint_final")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_round_trip_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::<f32>::default();
        params.add("a.w", vec![2, 3], vec![0.1, -0.2, 0.3, f32::MIN_POSITIVE, 1.5e-7, -0.0]);
        params.add("a.b", vec![2], vec![1.0, 2.0]);
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            seed: 7,
            epoch: 3,
            encoder: EncoderSpec::by_name("tiny").unwrap(),
            model: ModelKindTag::Multi,
            scalar: "f32".into(),
            geometry_hash: geometry_hash(&ExtractConfig::default()),
            crop_size: 256,
        };
        save_checkpoint(dir.path(), &params, &meta).unwrap();

        let back_meta = load_meta(dir.path()).unwrap();
        assert_eq!(back_meta.seed, 7);
        assert_eq!(back_meta.model, ModelKindTag::Multi);

        let tensors = load_weights::<f32>(dir.path()).unwrap();
        assert_eq!(tensors.len(), 2);
        for (orig, got) in params.tensors.iter().zip(&tensors) {
            assert_eq!(orig.name, got.name);
            assert_eq!(orig.shape, got.shape);
            for (a, b) in orig.data.iter().zip(&got.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn dtype_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::<f64>::default();
        params.add("x", vec![1], vec![1.0]);
        let meta = CheckpointMeta {
            format_version: FORMAT_VERSION,
            seed: 0,
            epoch: 0,
            encoder: EncoderSpec::by_name("tiny").unwrap(),
            model: ModelKindTag::Multi,
            scalar: "f64".into(),
            geometry_hash: String::new(),
            crop_size: 64,
        };
        save_checkpoint(dir.path(), &params, &meta).unwrap();
        assert!(matches!(
            load_weights::<f32>(dir.path()),
            Err(CheckpointError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn geometry_hash_tracks_config_changes() {
        let a = geometry_hash(&ExtractConfig::default());
        let mut other = ExtractConfig::default();
        other.geo.width_margin = 1.3;
        let b = geometry_hash(&other);
        assert_ne!(a, b);
        let mut resized = ExtractConfig::default();
        resized.crop_size = 64;
        assert_ne!(a, geometry_hash(&resized));
        assert_eq!(a, geometry_hash(&ExtractConfig::default()));
    }
}

//! Checkpoint persistence: `manifest.json` describing every tensor plus a
//! `weights.bin` blob of little-endian f32s concatenated in manifest order.
//! Round-trips are bit-identical.

use super::{ModelConfig, ModelParams, ParamTensor};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestTensor {
    name: String,
    shape: Vec<usize>,
    offset_bytes: u64,
    byte_len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    freeze_encoder: bool,
    freeze_core: bool,
    tensors: Vec<ManifestTensor>,
}

pub fn save_checkpoint(params: &ModelParams, dir: &Path) -> Result<()> {
    params.validate()?;
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for pt in params.all_tensors() {
        let offset = blob.len() as u64;
        for v in &pt.data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(ManifestTensor {
            name: pt.name.clone(),
            shape: pt.shape.clone(),
            offset_bytes: offset,
            byte_len: (pt.data.len() * 4) as u64,
        });
    }
    let manifest = Manifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        dtype: "f32".into(),
        config: params.config.clone(),
        freeze_encoder: params.freeze_encoder,
        freeze_core: params.freeze_core,
        tensors,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelParams> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: manifest.format_version,
            supported: CHECKPOINT_FORMAT_VERSION,
        });
    }
    if manifest.dtype != "f32" {
        return Err(Error::BadCheckpoint(format!("unsupported dtype {}", manifest.dtype)));
    }
    let blob = fs::read(dir.join("weights.bin"))?;
    let mut encoder = Vec::new();
    let mut core = Vec::new();
    let mut head = Vec::new();
    for mt in &manifest.tensors {
        let start = mt.offset_bytes as usize;
        let end = start + mt.byte_len as usize;
        if end > blob.len() || mt.byte_len % 4 != 0 {
            return Err(Error::BadCheckpoint(format!("tensor {} overruns weights.bin", mt.name)));
        }
        let numel: usize = mt.shape.iter().product();
        if numel * 4 != mt.byte_len as usize {
            return Err(Error::BadCheckpoint(format!("tensor {} shape/bytes mismatch", mt.name)));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::BadCheckpoint(format!("tensor {} holds non-finite values", mt.name)));
        }
        let pt = ParamTensor { name: mt.name.clone(), shape: mt.shape.clone(), data };
        if mt.name.starts_with("encoder.") {
            encoder.push(pt);
        } else if mt.name.starts_with("core.") {
            core.push(pt);
        } else if mt.name.starts_with("head.") {
            head.push(pt);
        } else {
            return Err(Error::BadCheckpoint(format!("tensor {} belongs to no group", mt.name)));
        }
    }
    let params = ModelParams {
        config: manifest.config,
        encoder,
        core,
        head,
        freeze_encoder: manifest.freeze_encoder,
        freeze_core: manifest.freeze_core,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_bit_identically() {
        let dir = std::env::temp_dir().join(format!("gf_ckpt_test_{}", std::process::id()));
        let params = ModelParams::init(ModelConfig::default(), 123).unwrap();
        save_checkpoint(&params, &dir).unwrap();
        let loaded = load_checkpoint(&dir).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(params.digest(), loaded.digest());
        // saving the loaded copy reproduces the same bytes
        let dir2 = dir.join("again");
        save_checkpoint(&loaded, &dir2).unwrap();
        let a = std::fs::read(dir.join("weights.bin")).unwrap();
        let b = std::fs::read(dir2.join("weights.bin")).unwrap();
        assert_eq!(a, b);
        std::fs::remove_dir_all(&dir).unwrap();
    }

    #[test]
    fn future_format_version_is_refused() {
        let dir = std::env::temp_dir().join(format!("gf_ckpt_ver_{}", std::process::id()));
        let params = ModelParams::init(ModelConfig::default(), 5).unwrap();
        save_checkpoint(&params, &dir).unwrap();
        let path = dir.join("manifest.json");
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(&path, text).unwrap();
        match load_checkpoint(&dir) {
            Err(Error::VersionMismatch { found, supported }) => {
                assert_eq!(found, 99);
                assert_eq!(supported, CHECKPOINT_FORMAT_VERSION);
            }
            other => panic!("expected version mismatch, got {other:?}"),
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}

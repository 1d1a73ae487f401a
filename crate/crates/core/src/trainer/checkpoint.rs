//! Single-file checkpoints: a safetensors archive whose tensor names carry a
//! component prefix and whose metadata holds one JSON record.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::model::Tokenizer;
use crate::params::ParamStore;
use crate::perceptual::sha256_hex;
use crate::{Error, Result};

pub const SCHEMA: &str = "ocr-vqgan-checkpoint/1";
const METADATA_KEY: &str = "ocr_vqgan";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    /// Number of completed training steps.
    pub step: u64,
    pub opt_gen_step: u64,
    pub opt_disc_step: u64,
    pub config: TrainConfig,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    /// Component prefix (`generator`, `opt_gen`, ...) -> name -> tensor.
    pub groups: BTreeMap<String, BTreeMap<String, Tensor>>,
    pub sha256: String,
}

impl Checkpoint {
    pub fn group(&self, name: &str) -> Result<&BTreeMap<String, Tensor>> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Shape(format!("checkpoint has no `{name}` tensors")))
    }
}

pub fn write_checkpoint(path: &Path, meta: &CheckpointMeta, groups: &[(&str, BTreeMap<String, Tensor>)]) -> Result<String> {
    let mut flat: BTreeMap<String, Tensor> = BTreeMap::new();
    for (prefix, tensors) in groups {
        for (name, t) in tensors {
            flat.insert(format!("{prefix}/{name}"), t.contiguous()?);
        }
    }
    let json = serde_json::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    let metadata = HashMap::from([(METADATA_KEY.to_string(), json)]);
    let bytes = safetensors::serialize(flat.iter().map(|(k, v)| (k.as_str(), v)), Some(metadata))
        .map_err(|e| Error::Numeric(format!("serializing checkpoint: {e}")))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // write-then-rename so an interrupted save never leaves a truncated file
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let sha256 = sha256_hex(&bytes);
    let corrupt = |reason: String| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::new(std::io::ErrorKind::InvalidData, reason),
    };
    let (_, header) =
        safetensors::SafeTensors::read_metadata(&bytes).map_err(|e| corrupt(format!("not a checkpoint: {e}")))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(METADATA_KEY))
        .ok_or_else(|| corrupt("checkpoint metadata is missing".into()))?;
    let value: serde_json::Value = serde_json::from_str(json).map_err(|e| corrupt(e.to_string()))?;
    let found = value.get("schema").and_then(|s| s.as_str()).unwrap_or("<none>");
    if found != SCHEMA {
        return Err(Error::SchemaVersion {
            found: found.to_string(),
            expected: SCHEMA.to_string(),
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(value).map_err(|e| corrupt(e.to_string()))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut groups: BTreeMap<String, BTreeMap<String, Tensor>> = BTreeMap::new();
    for (key, t) in tensors {
        let (prefix, name) = key
            .split_once('/')
            .ok_or_else(|| corrupt(format!("tensor `{key}` has no component prefix")))?;
        groups.entry(prefix.to_string()).or_default().insert(name.to_string(), t);
    }
    Ok(Checkpoint { meta, groups, sha256 })
}

/// Rebuilds the tokenizer stored in a checkpoint. Returns it with the training
/// config and the checkpoint's SHA-256.
pub fn load_tokenizer(path: &Path) -> Result<(Tokenizer, TrainConfig, String)> {
    let ckpt = read_checkpoint(path)?;
    let cfg = ckpt.meta.config.clone();
    let tok = Tokenizer::new(&cfg.codec, cfg.codebook_size, cfg.beta, ParamStore::new(cfg.seed), DType::F32)?;
    tok.store.load(ckpt.group("generator")?)?;
    Ok((tok, cfg, ckpt.sha256))
}

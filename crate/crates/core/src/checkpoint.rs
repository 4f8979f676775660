//! Checkpoint directories: `manifest.json`, `params.bin` (little-endian f32)
//! and `vocab.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::objective::PretrainModel;
use crate::params::{ParamStore, Precision};
use crate::tensor::Tensor;
use crate::vocab::Vocab;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub tool_version: String,
    pub step: usize,
    pub metrics: BTreeMap<String, f64>,
    pub encoder: EncoderConfig,
    /// Resolved run configuration at save time.
    pub config: serde_json::Value,
    pub params: Vec<ParamEntry>,
    pub params_sha256: String,
    pub params_bytes: usize,
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: PretrainModel,
    pub vocab: Vocab,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn save_checkpoint(
    dir: &Path,
    model: &PretrainModel,
    vocab: &Vocab,
    step: usize,
    metrics: BTreeMap<String, f64>,
    config: serde_json::Value,
) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::with_capacity(model.store.num_scalars() * 4);
    let mut params = Vec::with_capacity(model.store.len());
    let mut offset = 0;
    for (_, name, t) in model.store.iter() {
        params.push(ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset,
        });
        for &v in t.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        offset += t.numel();
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        step,
        metrics,
        encoder: model.config().clone(),
        config,
        params,
        params_sha256: sha256_hex(&bytes),
        params_bytes: bytes.len(),
    };
    let p = dir.join(PARAMS_FILE);
    fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
    vocab.save(&dir.join(VOCAB_FILE))?;
    let p = dir.join(MANIFEST_FILE);
    fs::write(&p, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let p = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: p.clone(),
        msg: format!("manifest is not valid JSON: {e}"),
    })?;
    // Check the version before the full schema so old formats get a clear error.
    let found = raw.get("format_version").and_then(|v| v.as_u64()).map(|v| v.min(u32::MAX as u64) as u32).ok_or_else(|| Error::Checkpoint {
        path: p.clone(),
        msg: "manifest has no format_version".into(),
    })?;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    serde_json::from_value(raw).map_err(|e| Error::Checkpoint {
        path: p,
        msg: format!("malformed manifest: {e}"),
    })
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let p = dir.join(PARAMS_FILE);
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let corrupt = |msg: String| Error::Checkpoint { path: p.clone(), msg };
    if bytes.len() != manifest.params_bytes {
        return Err(corrupt(format!(
            "expected {} bytes, found {}",
            manifest.params_bytes,
            bytes.len()
        )));
    }
    if sha256_hex(&bytes) != manifest.params_sha256 {
        return Err(corrupt("checksum mismatch".into()));
    }
    let floats: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    let mut store = ParamStore::new(Precision::F32);
    for e in &manifest.params {
        let n: usize = e.shape.iter().product();
        let slice = floats
            .get(e.offset..e.offset + n)
            .ok_or_else(|| corrupt(format!("parameter {} lies outside the data", e.name)))?;
        store.add(e.name.clone(), Tensor::new(e.shape.clone(), slice.to_vec())?);
    }
    let model = PretrainModel::from_store(&manifest.encoder, &store)?;
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    if vocab.len() != manifest.encoder.vocab_size {
        return Err(Error::Checkpoint {
            path: dir.join(VOCAB_FILE),
            msg: format!(
                "vocabulary has {} tokens but the encoder expects {}",
                vocab.len(),
                manifest.encoder.vocab_size
            ),
        });
    }
    Ok(Checkpoint { manifest, model, vocab })
}

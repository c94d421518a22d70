//! Model checkpoints: a JSON manifest next to a little-endian f32 blob.
//! `<prefix>.json` names every parameter with its shape and offset and
//! carries the sha256 of `<prefix>.bin`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::style::{RegressionStats, StyleEncoderConfig, StyleModel};
use crate::tensor::{ParamStore, Tensor};
use crate::training::Normalizer;
use crate::tts::{TtsBundle, TtsConfig};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f32 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: String,
    pub blob_sha256: String,
    pub params: Vec<ParamEntry>,
    pub meta: serde_json::Value,
}

fn with_suffix(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(ext);
    PathBuf::from(s)
}

pub fn manifest_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".json")
}

pub fn blob_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, ".bin")
}

pub fn save_store(prefix: &Path, kind: &str, store: &ParamStore<f32>, meta: serde_json::Value) -> Result<()> {
    let mut blob = Vec::with_capacity(store.num_scalars() * 4);
    let mut params = Vec::with_capacity(store.len());
    for p in store.iter() {
        params.push(ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset: blob.len() / 4 });
        for &x in p.value.data() {
            blob.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_VERSION,
        kind: kind.to_string(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        params,
        meta,
    };
    if let Some(dir) = prefix.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(blob_path(prefix), &blob)?;
    std::fs::write(manifest_path(prefix), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(prefix: &Path, kind: &str) -> Result<CheckpointManifest> {
    let path = manifest_path(prefix);
    let text = std::fs::read(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_slice(&text)?;
    let version = raw.get("format_version").and_then(|v| v.as_u64());
    if version != Some(CHECKPOINT_VERSION as u64) {
        return Err(Error::Checkpoint(format!("format version {version:?}, expected {CHECKPOINT_VERSION}")));
    }
    let m: CheckpointManifest = serde_json::from_value(raw)?;
    if m.kind != kind {
        return Err(Error::Checkpoint(format!("checkpoint holds a `{}` model, expected `{kind}`", m.kind)));
    }
    Ok(m)
}

/// Fill `store` from the checkpoint. Every parameter of the store must
/// appear exactly once with a matching shape, and nothing else may.
pub fn load_store(prefix: &Path, kind: &str, store: &mut ParamStore<f32>) -> Result<serde_json::Value> {
    let m = read_manifest(prefix, kind)?;
    let path = blob_path(prefix);
    let blob = std::fs::read(&path).map_err(|e| Error::Missing(format!("{}: {e}", path.display())))?;
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != m.blob_sha256 {
        return Err(Error::Checkpoint(format!("blob checksum mismatch (truncated or corrupt {})", path.display())));
    }
    if blob.len() % 4 != 0 {
        return Err(Error::Checkpoint("blob length is not a multiple of 4".into()));
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let mut seen = HashSet::new();
    for e in &m.params {
        if !seen.insert(e.name.as_str()) {
            return Err(Error::Checkpoint(format!("parameter `{}` listed twice", e.name)));
        }
        let id = store.find(&e.name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter `{}`", e.name)))?;
        if store.value(id).shape() != e.shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter `{}` has shape {:?}, model expects {:?}", e.name, e.shape, store.value(id).shape())));
        }
        let n: usize = e.shape.iter().product();
        let data = floats.get(e.offset..e.offset + n).ok_or_else(|| Error::Checkpoint(format!("parameter `{}` runs past the blob", e.name)))?;
        store.set(id, Tensor::new(&e.shape, data.to_vec())?)?;
    }
    if let Some(p) = store.iter().find(|p| !seen.contains(p.name.as_str())) {
        return Err(Error::Checkpoint(format!("parameter `{}` missing from checkpoint", p.name)));
    }
    Ok(m.meta)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TtsMeta {
    config: TtsConfig,
    vocab: usize,
    channels: usize,
    teacher_dim: usize,
    normalizer: Normalizer,
}

pub fn save_bundle(prefix: &Path, bundle: &TtsBundle, norm: &Normalizer) -> Result<()> {
    let m = &bundle.model;
    let meta = TtsMeta { config: m.config.clone(), vocab: m.vocab, channels: m.channels, teacher_dim: m.teacher_dim, normalizer: norm.clone() };
    save_store(prefix, "tts", &bundle.store, serde_json::to_value(meta)?)
}

/// Load parameters into an existing bundle of the same architecture.
pub fn load_bundle(prefix: &Path, bundle: &mut TtsBundle) -> Result<Normalizer> {
    let meta: TtsMeta = serde_json::from_value(load_store(prefix, "tts", &mut bundle.store)?)?;
    Ok(meta.normalizer)
}

/// Rebuild a TTS model from the configuration stored in the checkpoint.
pub fn open_bundle(prefix: &Path) -> Result<(TtsBundle, Normalizer)> {
    let m = read_manifest(prefix, "tts")?;
    let meta: TtsMeta = serde_json::from_value(m.meta)?;
    let mut bundle = TtsBundle::new(&meta.config, meta.vocab, meta.channels, meta.teacher_dim, 0);
    let norm = load_bundle(prefix, &mut bundle)?;
    Ok((bundle, norm))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StyleMeta {
    config: StyleEncoderConfig,
    channels: usize,
    stats: RegressionStats,
}

pub fn save_style(prefix: &Path, model: &StyleModel) -> Result<()> {
    let meta = StyleMeta { config: model.encoder.config.clone(), channels: model.encoder.channels, stats: model.stats };
    save_store(prefix, "style", &model.store, serde_json::to_value(meta)?)
}

pub fn open_style(prefix: &Path) -> Result<StyleModel> {
    let m = read_manifest(prefix, "style")?;
    let meta: StyleMeta = serde_json::from_value(m.meta)?;
    let mut model = StyleModel::new(&meta.config, meta.channels, 0);
    load_store(prefix, "style", &mut model.store)?;
    model.stats = meta.stats;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> TtsBundle {
        let cfg = TtsConfig { width: 16, heads: 2, mlp_hidden: 16, text_blocks: 1, speaker_blocks: 1, dit_blocks: 2, student_block: 0, speaker_dim: 8, style_dim: 8, time_dim: 8, dur_hidden: 8, ..TtsConfig::default() };
        TtsBundle::new(&cfg, 6, 4, 13, 3)
    }

    fn norm() -> Normalizer {
        Normalizer { mean: vec![0.5; 4], std: vec![2.0; 4] }
    }

    #[test]
    fn save_load_restores_every_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        let a = tiny();
        save_bundle(&prefix, &a, &norm()).unwrap();
        let (b, n) = open_bundle(&prefix).unwrap();
        assert_eq!(n, norm());
        for (p, q) in a.store.iter().zip(b.store.iter()) {
            assert_eq!(p.name, q.name);
            assert_eq!(p.value, q.value);
        }
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        save_bundle(&prefix, &tiny(), &norm()).unwrap();
        let blob = std::fs::read(blob_path(&prefix)).unwrap();
        std::fs::write(blob_path(&prefix), &blob[..blob.len() - 8]).unwrap();
        assert!(matches!(open_bundle(&prefix), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        save_bundle(&prefix, &tiny(), &norm()).unwrap();
        let text = std::fs::read_to_string(manifest_path(&prefix)).unwrap();
        let text = text.replace("\"format_version\": 1", "\"format_version\": 99");
        std::fs::write(manifest_path(&prefix), text).unwrap();
        assert!(matches!(open_bundle(&prefix), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_parameter_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        let a = tiny();
        let mut partial = ParamStore::new();
        for p in a.store.iter().skip(1) {
            partial.add(p.name.clone(), p.value.clone());
        }
        save_store(&prefix, "tts", &partial, serde_json::json!({})).unwrap();
        let mut b = tiny();
        assert!(matches!(load_store(&prefix, "tts", &mut b.store), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("m");
        save_bundle(&prefix, &tiny(), &norm()).unwrap();
        assert!(matches!(open_style(&prefix), Err(Error::Checkpoint(_))));
    }
}

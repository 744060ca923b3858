//! Binary model checkpoints.
//!
//! Layout: magic bytes `IDPF`, a little-endian u32 format version, then three
//! length-prefixed sections — a JSON metadata blob (identity set, backbone
//! architecture, trainable stages, training config), the backbone parameters
//! and the head parameters as raw little-endian f64 arrays. Parameters round
//! trip bit-exactly, so a loaded model scores identically to the saved one.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::IdentitySet;
use crate::model::nn::Linear;
use crate::model::{BackboneConfig, ConvBackbone, IdentificationModel, ModelError, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"IDPF";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint version {found} unsupported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    identity_set: Vec<String>,
    backbone: BackboneConfig,
    trainable_stages: Vec<String>,
    training_config: TrainConfig,
}

fn write_section(out: &mut Vec<u8>, payload: &[u8]) {
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

fn bytes_to_f64s(bytes: &[u8]) -> Result<Vec<f64>, CheckpointError> {
    if bytes.len() % 8 != 0 {
        return Err(CheckpointError::Corrupt("parameter section length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

/// Serializes a model plus the config it was trained with.
pub fn save_checkpoint(
    model: &IdentificationModel,
    training_config: &TrainConfig,
    path: &Path,
) -> Result<(), CheckpointError> {
    let names = model.backbone.stage_names();
    let trainable_stages: Vec<String> = names
        .iter()
        .zip(model.backbone.trainable_mask())
        .filter(|&(_, &t)| t)
        .map(|(n, _)| n.clone())
        .collect();
    let meta = CheckpointMeta {
        identity_set: model.identity_set.labels().to_vec(),
        backbone: model.backbone.config().clone(),
        trainable_stages,
        training_config: training_config.clone(),
    };
    let meta_json = serde_json::to_vec(&meta).expect("meta serializes");

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    write_section(&mut out, &meta_json);
    write_section(&mut out, &f64s_to_bytes(&model.backbone.params_flat()));
    write_section(&mut out, &f64s_to_bytes(&model.head_params_flat()));

    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Corrupt(format!("truncated while reading {what}")));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn section(&mut self, what: &str) -> Result<&'a [u8], CheckpointError> {
        let len_bytes = self.take(8, "section length")?;
        let len = u64::from_le_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
        self.take(len, what)
    }
}

/// Loads a model and its recorded training config.
pub fn load_checkpoint(path: &Path) -> Result<(IdentificationModel, TrainConfig), CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut reader = Reader { data: &bytes, pos: 0 };

    let magic = reader.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(reader.take(4, "version")?.try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }

    let meta: CheckpointMeta = serde_json::from_slice(reader.section("metadata")?)
        .map_err(|e| CheckpointError::Corrupt(format!("metadata: {e}")))?;
    let backbone_params = bytes_to_f64s(reader.section("backbone parameters")?)?;
    let head_params = bytes_to_f64s(reader.section("head parameters")?)?;
    if reader.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after last section".into()));
    }

    let identity_set = IdentitySet::new(meta.identity_set)
        .map_err(|e| CheckpointError::Corrupt(format!("identity set: {e}")))?;
    let mut backbone = ConvBackbone::new(meta.backbone.clone(), 0);
    backbone.load_flat(&backbone_params)?;
    backbone.set_trainable(&meta.trainable_stages)?;
    let head = Linear::new(meta.backbone.embed_dim, identity_set.len());
    let mut model = IdentificationModel::new(backbone, head, identity_set);
    model.load_head_flat(&head_params)?;
    Ok((model, meta.training_config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::train_baseline;
    use crate::synth::{build_benchmark, BenchmarkConfig, RenderConfig, SwapMechanism};
    use crate::store::ImageStore;

    fn trained_model() -> (IdentificationModel, TrainConfig, crate::synth::Benchmark) {
        let bench = build_benchmark(&BenchmarkConfig {
            n_ids: 2,
            per_id_train: 3,
            n_real_test: 5,
            n_fake_test: 2,
            lambda_range: (0.6, 0.9),
            mechanisms: vec![SwapMechanism::LatentBlend],
            seed: 3,
            render: RenderConfig { height: 16, width: 16, ..RenderConfig::default() },
        })
        .unwrap();
        let arch = BackboneConfig {
            input: (16, 16, 3),
            stage_channels: vec![4, 8],
            embed_dim: 12,
            normalize: true,
        };
        let backbone = ConvBackbone::new(arch, 1);
        let cfg = TrainConfig { epochs: 2, batch_size: 8, ..TrainConfig::default() };
        let model = train_baseline(&bench.manifest, &bench.store, &backbone, &cfg, 2).unwrap();
        (model, cfg, bench)
    }

    #[test]
    fn round_trip_scores_bit_identically() {
        let (model, cfg, bench) = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.idpf");
        save_checkpoint(&model, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded_cfg, cfg);
        assert_eq!(loaded.identity_set, model.identity_set);
        for record in bench.manifest.test_records().take(5) {
            let img = bench.store.load(&record.image_ref).unwrap();
            let a = model.predict(&img).unwrap();
            let b = loaded.predict(&img).unwrap();
            let bits_a: Vec<u64> = a.probs().iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = b.probs().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn wrong_version_is_reported() {
        let (model, cfg, _) = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.idpf");
        save_checkpoint(&model, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // bump version field
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::VersionMismatch { found: 99, expected: 1 })
        ));
    }

    #[test]
    fn truncated_file_is_corrupt() {
        let (model, cfg, _) = trained_model();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.idpf");
        save_checkpoint(&model, &cfg, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn bad_magic_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.idpf");
        std::fs::write(&path, b"NOPEextra").unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Corrupt(_))));
    }
}

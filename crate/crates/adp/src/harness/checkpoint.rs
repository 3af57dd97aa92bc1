//! Model checkpoints.
//!
//! Layout (little-endian): 4-byte magic `ADPW`, `u32` version (= 1), `u8`
//! model kind, `u32` width count, the widths as `u32`s, all parameters as
//! `f64` in layer-major order (weights row-major then biases per layer), and
//! a length-prefixed UTF-8 metadata blob (JSON) carrying the activation and
//! training provenance.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::models::{Activation, MlpModel, MlpSpec};
use crate::training::NoiseSchedule;
use crate::{Error, Result};

use super::io::{Reader, Writer};

const CHECKPOINT_MAGIC: &[u8; 4] = b"ADPW";
const CHECKPOINT_VERSION: u32 = 1;

/// Which role the stored network plays.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Score,
    Classifier,
}

impl ModelKind {
    fn to_byte(self) -> u8 {
        match self {
            ModelKind::Score => 0,
            ModelKind::Classifier => 1,
        }
    }

    fn from_byte(b: u8) -> Result<Self> {
        match b {
            0 => Ok(ModelKind::Score),
            1 => Ok(ModelKind::Classifier),
            other => Err(Error::Format(format!("unknown model kind byte {other}"))),
        }
    }
}

/// Training provenance stored in the metadata blob.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub activation: Activation,
    /// Noise schedule the score network was trained on; absent for
    /// classifiers.
    pub schedule: Option<Vec<f64>>,
    pub seed: u64,
    pub epochs: usize,
}

impl CheckpointMeta {
    pub fn noise_schedule(&self) -> Result<NoiseSchedule> {
        match &self.schedule {
            Some(levels) => NoiseSchedule::new(levels.clone()),
            None => Err(Error::Config(
                "checkpoint carries no noise schedule".into(),
            )),
        }
    }
}

/// A loaded checkpoint.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MlpModel,
    pub kind: ModelKind,
    pub meta: CheckpointMeta,
}

pub fn save_checkpoint(
    model: &MlpModel,
    kind: ModelKind,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<()> {
    if meta.activation != model.spec().activation {
        return Err(Error::Mismatch(
            "metadata activation disagrees with model spec".into(),
        ));
    }
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(kind.to_byte());
    let dims = &model.spec().dims;
    w.u32(dims.len() as u32);
    for &d in dims {
        w.u32(d as u32);
    }
    for v in model.flatten_params() {
        w.f64(v);
    }
    w.str(&serde_json::to_string(meta)?);
    fs::write(path, w.into_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    let mut r = Reader::new(&bytes);
    let magic = r.bytes(4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {version} unsupported, reader expects {CHECKPOINT_VERSION}"
        )));
    }
    let kind = ModelKind::from_byte(r.u8()?)?;
    let width_count = r.u32()? as usize;
    if width_count < 2 {
        return Err(Error::Format(format!(
            "checkpoint declares {width_count} layer widths"
        )));
    }
    let mut dims = Vec::with_capacity(width_count);
    for _ in 0..width_count {
        dims.push(r.u32()? as usize);
    }
    let param_count: usize = dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum();
    let mut flat = Vec::with_capacity(param_count);
    for _ in 0..param_count {
        flat.push(r.f64()?);
    }
    let meta: CheckpointMeta = serde_json::from_str(&r.str()?)?;
    r.finish()?;
    let spec = MlpSpec::new(dims, meta.activation)?;
    let model = MlpModel::from_flat(spec, &flat)?;
    Ok(Checkpoint { model, kind, meta })
}

/// Load a checkpoint and insist on its role.
pub fn load_checkpoint_as(path: &Path, kind: ModelKind) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.kind != kind {
        return Err(Error::Format(format!(
            "{}: expected a {kind:?} checkpoint, found {:?}",
            path.display(),
            ckpt.kind
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn sample_model() -> MlpModel {
        let mut rng = RngStream::new(3);
        MlpModel::init(
            MlpSpec::new(vec![4, 8, 4], Activation::Tanh).unwrap(),
            &mut rng,
        )
    }

    fn sample_meta() -> CheckpointMeta {
        CheckpointMeta {
            activation: Activation::Tanh,
            schedule: Some(vec![1.0, 0.1, 0.01]),
            seed: 9,
            epochs: 25,
        }
    }

    #[test]
    fn round_trip_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = sample_model();
        let meta = sample_meta();
        save_checkpoint(&model, ModelKind::Score, &meta, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model, model);
        assert_eq!(back.kind, ModelKind::Score);
        assert_eq!(back.meta, meta);
    }

    #[test]
    fn magic_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_model(), ModelKind::Score, &sample_meta(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format(_))));
    }

    #[test]
    fn version_mismatch_names_versions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_model(), ModelKind::Classifier, &sample_meta(), &path).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format(msg)) => {
                assert!(msg.contains('2') && msg.contains('1'), "message: {msg}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_model(), ModelKind::Score, &sample_meta(), &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Truncated(_))));
    }

    #[test]
    fn kind_check_is_enforced() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&sample_model(), ModelKind::Score, &sample_meta(), &path).unwrap();
        assert!(load_checkpoint_as(&path, ModelKind::Score).is_ok());
        assert!(load_checkpoint_as(&path, ModelKind::Classifier).is_err());
    }
}

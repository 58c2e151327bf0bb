//! JSON checkpoints: model weights plus the configs needed to rebuild the
//! exact training setup.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::array::Array;
use crate::error::{Error, Result};
use crate::model::{GdifdModel, ModelConfig};
use crate::synth::BenchmarkConfig;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub benchmark: BenchmarkConfig,
    /// Parameter values keyed by the model's canonical names. BTreeMap keeps
    /// the file diffable.
    pub parameters: BTreeMap<String, Array>,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &GdifdModel,
    train_config: &TrainConfig,
    benchmark: &BenchmarkConfig,
) -> Result<()> {
    let parameters: BTreeMap<String, Array> = model
        .named_parameters()
        .into_iter()
        .map(|(name, p)| (name, p.value.clone()))
        .collect();
    let ckpt = Checkpoint {
        version: CHECKPOINT_VERSION,
        train_config: train_config.clone(),
        model_config: model.config.clone(),
        benchmark: benchmark.clone(),
        parameters,
    };
    let json = serde_json::to_string(&ckpt)
        .map_err(|e| Error::Checkpoint(format!("serialize failed: {e}")))?;
    fs::write(path, json)?;
    Ok(())
}

/// Rebuild the model from a checkpoint file. The architecture comes from the
/// embedded model config; every stored tensor must match it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GdifdModel, Checkpoint)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    let mut model = GdifdModel::new(ckpt.model_config.clone())?;
    let values: HashMap<String, Array> =
        ckpt.parameters.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    model.load_values(&values)?;
    Ok((model, ckpt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("gdifd-ckpt-{name}-{}", std::process::id()))
    }

    fn small_model() -> (GdifdModel, TrainConfig, BenchmarkConfig) {
        let tc = TrainConfig { channels: 4, ..TrainConfig::default() };
        let bench = BenchmarkConfig::default();
        let model = GdifdModel::new(tc.model_config(bench.num_classes, 2)).unwrap();
        (model, tc, bench)
    }

    #[test]
    fn roundtrip_preserves_every_parameter() {
        let (model, tc, bench) = small_model();
        let path = tmp("roundtrip");
        save_checkpoint(&path, &model, &tc, &bench).unwrap();
        let (restored, ckpt) = load_checkpoint(&path).unwrap();
        std::fs::remove_file(&path).unwrap();

        assert_eq!(ckpt.version, CHECKPOINT_VERSION);
        assert_eq!(ckpt.model_config, model.config);
        let orig = model.named_parameters();
        let back = restored.named_parameters();
        assert_eq!(orig.len(), back.len());
        for ((n0, p0), (n1, p1)) in orig.iter().zip(back.iter()) {
            assert_eq!(n0, n1);
            assert_eq!(p0.value, p1.value, "parameter {n0} changed");
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let (model, tc, bench) = small_model();
        let path = tmp("version");
        save_checkpoint(&path, &model, &tc, &bench).unwrap();
        let mut text = std::fs::read_to_string(&path).unwrap();
        text = text.replacen("\"version\":1", "\"version\":99", 1);
        std::fs::write(&path, text).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn corrupt_file_rejected() {
        let path = tmp("corrupt");
        std::fs::write(&path, "{ not json").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(matches!(err, Error::Checkpoint(_)));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_checkpoint(tmp("does-not-exist")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}

//! Param checkpoint: a JSON manifest mapping tensor names to binary tensor
//! files, plus the block config.

use crate::cage::config::CageConfig;
use crate::cage::params::{init_params, CageParams};
use crate::error::{Error, Result};
use crate::tensor::serial;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub config: CageConfig,
    /// Tensor name -> file name relative to the manifest directory.
    pub tensors: BTreeMap<String, String>,
}

/// Write `manifest.json` and one `.cagt` file per tensor into `dir`.
pub fn save(dir: &Path, cfg: &CageConfig, params: &CageParams) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut tensors = BTreeMap::new();
    for (name, tensor) in params.all_tensors() {
        let file = format!("{name}.cagt");
        serial::save(&dir.join(&file), tensor)?;
        tensors.insert(name.to_string(), file);
    }
    let manifest = CheckpointManifest {
        config: cfg.clone(),
        tensors,
    };
    let json = serde_json::to_vec_pretty(&manifest)?;
    std::fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(())
}

/// Load a checkpoint directory written by [`save`].
pub fn load(dir: &Path) -> Result<(CageConfig, CageParams)> {
    let manifest_path = dir.join(MANIFEST_NAME);
    let manifest: CheckpointManifest =
        serde_json::from_slice(&std::fs::read(&manifest_path)?)?;
    manifest.config.validate()?;
    let mut params = init_params(&manifest.config, 0)?;
    let expected: Vec<&'static str> = params.all_tensors().iter().map(|(n, _)| *n).collect();
    for name in &expected {
        let file = manifest.tensors.get(*name).ok_or_else(|| {
            Error::Manifest(format!("checkpoint missing tensor {name}"))
        })?;
        let tensor = serial::load(&dir.join(file))?;
        let slot = params.tensor_mut(name).unwrap();
        if tensor.shape() != slot.shape() {
            return Err(Error::Dimension {
                op: "checkpoint_load",
                detail: format!(
                    "{name}: file shape {:?} != config shape {:?}",
                    tensor.shape(),
                    slot.shape()
                ),
            });
        }
        *slot = tensor;
    }
    for name in manifest.tensors.keys() {
        if !expected.iter().any(|e| e == name) {
            return Err(Error::Manifest(format!("unknown tensor {name} in checkpoint")));
        }
    }
    params.shape_audit(&manifest.config)?;
    Ok((manifest.config, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CageConfig::for_neck_level(8, 8, 16);
        let params = init_params(&cfg, 42).unwrap();
        save(dir.path(), &cfg, &params).unwrap();
        let (cfg2, params2) = load(dir.path()).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params, params2);
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CageConfig::for_neck_level(8, 8, 16);
        let params = init_params(&cfg, 0).unwrap();
        save(dir.path(), &cfg, &params).unwrap();
        std::fs::remove_file(dir.path().join("w_k.cagt")).unwrap();
        assert!(load(dir.path()).is_err());
    }
}

use std::path::Path;

use hpn_autograd::checkpoint::TensorFile;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::HpnModel;
use super::{ModelError, Result};

pub(crate) const MODEL_FORMAT: &str = "hpn-model";

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    format: String,
    model: ModelConfig,
}

/// Reads the model config out of a checkpoint's JSON metadata. Extra keys
/// (such as a trainer's state) are ignored.
pub fn config_from_meta(meta: &str) -> Result<ModelConfig> {
    let value: serde_json::Value = serde_json::from_str(meta)?;
    let model = value
        .get("model")
        .ok_or_else(|| ModelError::Mismatch("metadata has no model config".into()))?;
    Ok(serde_json::from_value(model.clone())?)
}

impl HpnModel {
    /// Appends every parameter to `file` under `prefix`.
    pub fn write_entries(&self, file: &mut TensorFile, prefix: &str) {
        for (name, t) in self.params().iter() {
            file.push(format!("{prefix}{name}"), t.detached());
        }
    }

    /// Overwrites parameter values from `file`; every name must be present
    /// with the same shape.
    pub fn read_entries(&mut self, file: &TensorFile, prefix: &str) -> Result<()> {
        let names = self.params().names().to_vec();
        for (slot, name) in names.iter().enumerate() {
            let key = format!("{prefix}{name}");
            let t = file
                .get(&key)
                .ok_or_else(|| ModelError::Mismatch(format!("missing tensor {key}")))?;
            let id = hpn_autograd::ParamId(slot);
            let expected = self.params().get(id).shape().to_vec();
            if t.shape() != expected.as_slice() {
                return Err(ModelError::Mismatch(format!(
                    "{key}: shape {:?}, model expects {expected:?}",
                    t.shape()
                )));
            }
            self.params_mut().set_values(id, t.data())?;
        }
        Ok(())
    }

    pub fn to_tensor_file(&self) -> TensorFile {
        let meta = Meta {
            format: MODEL_FORMAT.into(),
            model: self.config().clone(),
        };
        let mut file = TensorFile::new(serde_json::to_string(&meta).expect("config serializes"));
        self.write_entries(&mut file, "");
        file
    }

    /// Builds a model from a model file or a training checkpoint (whose
    /// policy tensors carry a `policy.` prefix).
    pub fn from_tensor_file(file: &TensorFile) -> Result<Self> {
        let cfg = config_from_meta(&file.meta)?;
        let mut model = HpnModel::new(cfg, 0)?;
        let prefix = if file.entries.iter().any(|(n, _)| n.starts_with("policy.")) {
            "policy."
        } else {
            ""
        };
        model.read_entries(file, prefix)?;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_tensor_file().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::load(path)?)
    }

    /// Loads a checkpoint and rejects it unless its config equals `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(path)?;
        if model.config() != expected {
            return Err(ModelError::Mismatch(format!(
                "checkpoint config {:?} differs from {:?}",
                model.config(),
                expected
            )));
        }
        Ok(model)
    }
}

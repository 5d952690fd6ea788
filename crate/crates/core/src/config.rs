//! Run configuration: one JSON document covering data, model and training,
//! with dotted-path overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{load_manifest, split_dataset, Dataset, GeneratorConfig};
use crate::error::{Error, Result};
use crate::model::EncoderConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub model: EncoderConfig,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
    /// Train on real images listed in this JSON-lines manifest instead of
    /// the synthetic benchmark. `data.val_size` records are held out.
    pub manifest: Option<PathBuf>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.data.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "data.image_size {} differs from model.image_size {}",
                self.data.image_size, self.model.image_size
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading config {}", path.display()), e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Set a dotted key such as `train.loss.beta` from a JSON literal (bare
    /// words are taken as strings). The result is re-validated.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        self.set_all(&[(key, raw)])
    }

    /// Apply several overrides at once, validating only the final result.
    pub fn set_all(&mut self, overrides: &[(&str, &str)]) -> Result<()> {
        let mut doc = serde_json::to_value(&*self)?;
        for &(key, raw) in overrides {
            let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            let mut slot = &mut doc;
            for part in key.split('.') {
                slot = slot
                    .as_object_mut()
                    .and_then(|m| m.get_mut(part))
                    .ok_or_else(|| Error::Config(format!("unknown config key {key:?}")))?;
            }
            *slot = value;
        }
        let updated: RunConfig = serde_json::from_value(doc).map_err(|e| Error::Config(e.to_string()))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// `(train, validation)` datasets: the manifest when given, else the
    /// synthetic benchmark.
    pub fn datasets(&self) -> Result<(Dataset, Dataset)> {
        match &self.manifest {
            Some(path) => {
                let samples = load_manifest(path)?;
                let split = GeneratorConfig {
                    size: samples.len(),
                    val_size: self.data.val_size.min(samples.len()),
                    ..self.data.clone()
                };
                let (train, val) = split_dataset(&split);
                let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect();
                Ok((
                    Dataset::from_samples(pick(&train), self.model.image_size),
                    Dataset::from_samples(pick(&val), self.model.image_size),
                ))
            }
            None => {
                let (train, val) = split_dataset(&self.data);
                Ok((Dataset::synthetic(&self.data, &train), Dataset::synthetic(&self.data, &val)))
            }
        }
    }
}

//! Resolved run configuration and the checkpoint sidecar.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::SpecAugmentPolicy;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::frontend::FrontendConfig;
use crate::model::DecoderConfig;
use crate::synthcorpus::SynthConfig;
use crate::train::TrainConfig;

/// Every tunable, grouped by the module that owns it.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub frontend: FrontendConfig,
    pub encoder: EncoderConfig,
    pub augment: SpecAugmentPolicy,
    pub model: DecoderConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// The training config with the `augment` section applied.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig {
            augment: self.augment.clone(),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.frontend.validate()?;
        self.encoder.validate()?;
        self.augment.validate()?;
        self.model.validate()?;
        self.resolved_train().validate()?;
        self.synth.validate()
    }
}

/// Written next to every checkpoint as `<checkpoint>.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: DecoderConfig,
    pub class_names: Vec<String>,
    pub best_step: usize,
    pub config: RunConfig,
}

pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_meta(checkpoint: &Path, meta: &CheckpointMeta) -> Result<()> {
    let path = sidecar_path(checkpoint);
    let text = serde_json::to_string_pretty(meta).expect("config serializes");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn read_meta(checkpoint: &Path) -> Result<CheckpointMeta> {
    let path = sidecar_path(checkpoint);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

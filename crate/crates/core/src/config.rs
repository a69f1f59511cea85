//! Merged run configuration: one JSON document with `model`, `train`,
//! `mask` and `scene` sections, each defaulting field by field.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SceneSpec;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::patching::MaskSpec;
use crate::training::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub mask: MaskSpec,
    pub scene: SceneSpec,
}

impl RunConfig {
    /// Parses JSON; unknown fields and type errors are reported with the
    /// dotted path of the offending field.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                field: if path == "." { "<root>".into() } else { path },
                reason: e.into_inner().to_string(),
            }
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Checks every section. `model.bands = 0` (take the band count from
    /// the cube) is accepted.
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.bands == 0 {
            model.bands = 1;
        }
        model.validate()?;
        self.train_config().validate(model.patch)?;
        self.scene.validate()
    }

    /// Training settings with the `mask` section applied.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            mask: self.mask,
            ..self.train.clone()
        }
    }
}

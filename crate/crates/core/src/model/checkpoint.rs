//! Checkpoint file: one JSON manifest line terminated by `\n`, followed by
//! every parameter's values as little-endian `f32`, concatenated in manifest
//! order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::DualBranchModel;
use crate::compute::{ParamInfo, ParamStore, Tensor};
use crate::error::{Error, Result};

const FORMAT: &str = "dualscan-checkpoint";
const VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u64,
    pub config: ModelConfig,
    pub seed: u64,
    pub epoch: usize,
    /// Validation loss of the stored weights, when one was measured.
    pub val_loss: Option<f64>,
    pub params: Vec<ParamInfo>,
}

/// Trained (or freshly initialized) weights plus their provenance.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: DualBranchModel,
    pub store: ParamStore<f32>,
    pub seed: u64,
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            config: self.model.config.clone(),
            seed: self.seed,
            epoch: self.epoch,
            val_loss: self.val_loss,
            params: self.store.schema(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.manifest())?;
        out.push(b'\n');
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Corrupt("checkpoint has no manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Corrupt(format!("checkpoint manifest: {e}")))?;
        if manifest.format != FORMAT {
            return Err(Error::Corrupt(format!("not a checkpoint (format `{}`)", manifest.format)));
        }
        if manifest.version != VERSION {
            return Err(Error::UnsupportedVersion(manifest.version));
        }
        let (model, mut store) = DualBranchModel::init::<f32>(manifest.config.clone())?;
        if store.schema() != manifest.params {
            return Err(Error::Corrupt(
                "parameter list does not match the architecture in the manifest".into(),
            ));
        }
        let payload = &bytes[nl + 1..];
        let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
        if payload.len() != expected * 4 {
            return Err(Error::Corrupt(format!(
                "payload holds {} bytes, manifest requires {}",
                payload.len(),
                expected * 4
            )));
        }
        let mut words = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.value.shape().to_vec())).collect();
        for (id, shape) in ids {
            let n = shape.iter().product();
            let vals: Vec<f32> = words.by_ref().take(n).collect();
            store.set_value(id, Tensor::new(&shape, vals)?)?;
        }
        Ok(Checkpoint {
            model,
            store,
            seed: manifest.seed,
            epoch: manifest.epoch,
            val_loss: manifest.val_loss,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Stable digest of manifest and weights.
    pub fn digest(&self) -> Result<u64> {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(&self.to_bytes()?);
        Ok(h.finish())
    }
}

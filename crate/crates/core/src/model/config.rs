use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::MambaConfig;

/// How the spatial and spectral features are merged before the decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Learned per-element sigmoid gate blending the two branches.
    #[default]
    Gated,
    /// Unweighted sum of the two branches.
    Addition,
    SpatialOnly,
    SpectralOnly,
}

impl Fusion {
    pub const ALL: [Fusion; 4] = [
        Fusion::Gated,
        Fusion::Addition,
        Fusion::SpatialOnly,
        Fusion::SpectralOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::Gated => "gated",
            Fusion::Addition => "addition",
            Fusion::SpatialOnly => "spatial_only",
            Fusion::SpectralOnly => "spectral_only",
        }
    }

    pub fn uses_spatial(self) -> bool {
        self != Fusion::SpectralOnly
    }

    pub fn uses_spectral(self) -> bool {
        self != Fusion::SpatialOnly
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Fusion::ALL
            .into_iter()
            .find(|f| f.as_str() == s)
            .ok_or_else(|| {
                Error::config(
                    "model.fusion",
                    format!("unknown variant `{s}` (expected gated|addition|spatial_only|spectral_only)"),
                )
            })
    }
}

/// Architecture of the dual-branch reconstruction network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Spectral bands of the input cube; 0 means "take it from the cube".
    pub bands: usize,
    /// Square patch side.
    pub patch: usize,
    /// Embedding width after the input projection.
    pub embed: usize,
    /// Channels per spectral group.
    pub group_len: usize,
    /// Offset between consecutive spectral groups.
    pub group_stride: usize,
    pub spatial: MambaConfig,
    /// Block used on spectral group sequences; `d_model` is the token width
    /// each scalar channel value is lifted to.
    pub spectral: MambaConfig,
    pub decoder: MambaConfig,
    pub fusion: Fusion,
    /// Seed of the weight initialization.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            bands: 0,
            patch: 16,
            embed: 64,
            group_len: 16,
            group_stride: 8,
            spatial: MambaConfig::new(64),
            spectral: MambaConfig {
                d_model: 8,
                d_state: 4,
                d_conv: 4,
                expand: 1,
            },
            decoder: MambaConfig::new(64),
            fusion: Fusion::Gated,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_bands(bands: usize) -> Self {
        ModelConfig {
            bands,
            ..Self::default()
        }
    }

    /// Copy with `bands` taken from a cube. A config that already names a
    /// band count must agree with it.
    pub fn resolve_bands(&self, cube_bands: usize) -> Result<Self> {
        match self.bands {
            0 => Ok(ModelConfig {
                bands: cube_bands,
                ..self.clone()
            }),
            b if b == cube_bands => Ok(self.clone()),
            b => Err(Error::InvalidInput(format!(
                "model expects {b} bands, cube has {cube_bands}"
            ))),
        }
    }

    /// Number of spectral groups, `(embed - group_len) / group_stride + 1`.
    pub fn group_count(&self) -> usize {
        (self.embed - self.group_len) / self.group_stride + 1
    }

    /// Channels shared by neighbouring groups.
    pub fn group_overlap(&self) -> usize {
        self.group_len - self.group_stride
    }

    /// Channel range covered by each group.
    pub fn group_ranges(&self) -> Vec<Range<usize>> {
        (0..self.group_count())
            .map(|j| j * self.group_stride..j * self.group_stride + self.group_len)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bands == 0 {
            return Err(Error::config("model.bands", "must be at least 1"));
        }
        if self.patch == 0 {
            return Err(Error::config("model.patch", "must be positive"));
        }
        if self.embed == 0 {
            return Err(Error::config("model.embed", "must be positive"));
        }
        if self.group_len == 0 || self.group_len > self.embed {
            return Err(Error::config(
                "model.group_len",
                format!("must be in 1..={} (embed), got {}", self.embed, self.group_len),
            ));
        }
        if self.group_stride == 0 || self.group_stride > self.group_len {
            return Err(Error::config(
                "model.group_stride",
                format!("must be in 1..={} (group_len), got {}", self.group_len, self.group_stride),
            ));
        }
        if !(self.embed - self.group_len).is_multiple_of(self.group_stride) {
            return Err(Error::config(
                "model.group_stride",
                format!(
                    "embed - group_len = {} is not a multiple of {}",
                    self.embed - self.group_len,
                    self.group_stride
                ),
            ));
        }
        self.spatial.validate("model.spatial")?;
        self.spectral.validate("model.spectral")?;
        self.decoder.validate("model.decoder")?;
        if self.spatial.d_model != self.embed {
            return Err(Error::config("model.spatial.d_model", "must equal model.embed"));
        }
        if self.decoder.d_model != self.embed {
            return Err(Error::config("model.decoder.d_model", "must equal model.embed"));
        }
        Ok(())
    }

    /// Stable 64-bit digest of the serialized config.
    pub fn digest(&self) -> u64 {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(serde_json::to_string(self).expect("config serializes").as_bytes());
        h.finish()
    }
}

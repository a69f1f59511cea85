//! The dual-branch reconstruction network.

mod checkpoint;
mod config;
mod network;

pub use checkpoint::{Checkpoint, Manifest};
pub use config::{Fusion, ModelConfig};
pub use network::{
    BnUpdate, Decoder, DualBranchModel, ForwardOutput, FusionLayer, InputProjection, LayerAudit, ModelAudit,
    SpatialBranch, SpectralBranch, Taps,
};

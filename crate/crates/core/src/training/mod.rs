//! Adam and the masked-reconstruction training loop.

mod adam;
mod fit;

pub use adam::{AdamConfig, AdamState};
pub use fit::{fit, fit_with, EpochRecord, History, TrainConfig};


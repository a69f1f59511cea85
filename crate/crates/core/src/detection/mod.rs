//! Per-pixel anomaly scores: reconstruction residuals and the global RX
//! baseline.

mod residual;
mod rx;
mod score;

pub use residual::{detect, reconstruct_cube, residual_map};
pub use rx::{rx_score, rx_score_with, RxOptions};
pub use score::ScoreMap;

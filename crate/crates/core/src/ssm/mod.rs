//! Selective state-space sequence modeling.

mod block;
mod scan;

pub use block::{MambaBlock, MambaConfig};
pub use scan::{
    selective_scan, selective_scan_backward, selective_scan_backward_with_states, selective_scan_blocked,
    selective_scan_with_states, ScanDims, ScanGrads, ScanInputs,
};

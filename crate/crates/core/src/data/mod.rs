//! Cubes, the HSIC file format, normalization and synthetic scenes.

mod cube;
pub mod hsic;
mod synth;

pub use cube::{normalize, HsiCube, Mask};
pub use hsic::{load_cube, load_mask, mask_path, save_cube, save_mask};
pub use synth::{synth_scene, SceneSpec};

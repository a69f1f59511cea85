use super::score::ScoreMap;
use crate::compute::Tensor;
use crate::data::HsiCube;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::patching::{extract_patches, Reassembler};

const BATCH: usize = 32;

/// Per-pixel L2 norm over bands of `cube - recon`, `recon` being
/// `[height, width, bands]`.
pub fn residual_map(cube: &HsiCube, recon: &Tensor<f32>) -> Result<ScoreMap> {
    let want = [cube.height, cube.width, cube.bands];
    if recon.shape() != want {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs cube {want:?}",
            recon.shape()
        )));
    }
    let c = cube.bands;
    let scores = cube
        .values
        .chunks_exact(c)
        .zip(recon.data().chunks_exact(c))
        .map(|(x, y)| {
            x.iter()
                .zip(y)
                .map(|(&a, &b)| f64::from(a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    ScoreMap::new(cube.height, cube.width, scores, "residual", 0)
}

/// Whole-cube reconstruction: unmasked patches at `stride`, eval-mode
/// forward in batches, overlap-averaged back to `[height, width, bands]`.
pub fn reconstruct_cube(cube: &HsiCube, checkpoint: &Checkpoint, stride: usize) -> Result<Tensor<f32>> {
    let cfg = &checkpoint.model.config;
    if cfg.bands != cube.bands {
        return Err(Error::InvalidInput(format!(
            "checkpoint expects {} bands, cube has {}",
            cfg.bands, cube.bands
        )));
    }
    let p = cfg.patch;
    let set = extract_patches(cube, p, p, stride)?;
    let mut acc = Reassembler::new(cube.height, cube.width, cube.bands);
    let idx: Vec<usize> = (0..set.len()).collect();
    let per_patch = p * p * cube.bands;
    for chunk in idx.chunks(BATCH) {
        let out = checkpoint.model.reconstruct(&checkpoint.store, set.batch(chunk))?;
        for (k, &i) in chunk.iter().enumerate() {
            acc.add(set.origins[i], p, p, &out.data()[k * per_patch..(k + 1) * per_patch])?;
        }
    }
    acc.finish()
}

/// Residual score map of a trained model on `cube`.
pub fn detect(cube: &HsiCube, checkpoint: &Checkpoint, stride: usize) -> Result<ScoreMap> {
    let recon = reconstruct_cube(cube, checkpoint, stride)?;
    let mut map = residual_map(cube, &recon)?;
    map.detector = format!("dualscan-{}", checkpoint.model.config.fusion);
    map.config_hash = checkpoint.digest()?;
    Ok(map)
}

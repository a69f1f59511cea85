use nalgebra::{DMatrix, DVector};

use super::score::ScoreMap;
use crate::data::HsiCube;
use crate::error::{Error, Result};

/// Covariance regularization for [`rx_score_with`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RxOptions {
    /// `lambda = ridge * trace(cov) / bands` is added to the diagonal.
    pub ridge: f64,
}

impl Default for RxOptions {
    fn default() -> Self {
        RxOptions { ridge: 1e-6 }
    }
}

/// Global RX: squared Mahalanobis distance of every pixel to the scene
/// mean under the scene covariance, with the default ridge.
pub fn rx_score(cube: &HsiCube) -> Result<ScoreMap> {
    rx_score_with(cube, RxOptions::default())
}

pub fn rx_score_with(cube: &HsiCube, opts: RxOptions) -> Result<ScoreMap> {
    let c = cube.bands;
    let n = cube.pixels();
    let mut mean = DVector::<f64>::zeros(c);
    for px in cube.values.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(px) {
            *m += f64::from(v);
        }
    }
    mean /= n as f64;
    let mut centered = DMatrix::<f64>::zeros(c, n);
    for (j, px) in cube.values.chunks_exact(c).enumerate() {
        for i in 0..c {
            centered[(i, j)] = f64::from(px[i]) - mean[i];
        }
    }
    let mut cov = &centered * centered.transpose() / n as f64;
    let lambda = opts.ridge * cov.trace() / c as f64;
    for i in 0..c {
        cov[(i, i)] += lambda;
    }
    let chol = cov.clone().cholesky().ok_or_else(|| {
        let min_diag = (0..c).map(|i| cov[(i, i)]).fold(f64::INFINITY, f64::min);
        Error::Singular(format!(
            "{c}x{c} covariance from {n} pixels is not positive definite \
             (trace {:.3e}, lambda {lambda:.3e}, smallest diagonal {min_diag:.3e})",
            cov.trace()
        ))
    })?;
    let whitened = chol.l().solve_lower_triangular(&centered).ok_or_else(|| {
        Error::Singular("covariance factor has a zero pivot".into())
    })?;
    let scores: Vec<f64> = whitened.column_iter().map(|col| col.norm_squared()).collect();
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Singular(format!(
            "covariance too ill-conditioned for {c} bands (lambda {lambda:.3e})"
        )));
    }
    ScoreMap::new(cube.height, cube.width, scores, "rx", 0)
}

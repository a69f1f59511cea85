use crate::compute::Tensor;
use crate::error::{Error, Result};

/// Boolean `height x width` ground-truth map, `true` marking anomalies.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape(format!("mask {height}x{width} is empty")));
        }
        if values.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} given {} values",
                values.len()
            )));
        }
        Ok(Mask { height, width, values })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            values: vec![false; height * width],
        }
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.values[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.values[row * self.width + col] = v;
    }

    pub fn positives(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Hyperspectral cube stored band-interleaved-by-pixel: the `bands` values
/// of pixel `(r, c)` start at `(r * width + c) * bands`.
#[derive(Clone, Debug, PartialEq)]
pub struct HsiCube {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub values: Vec<f32>,
    pub mask: Option<Mask>,
}

impl HsiCube {
    pub fn new(height: usize, width: usize, bands: usize, values: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || bands == 0 {
            return Err(Error::Shape(format!("cube {height}x{width}x{bands} has an empty axis")));
        }
        if values.len() != height * width * bands {
            return Err(Error::Shape(format!(
                "cube {height}x{width}x{bands} given {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("cube value {i} is not finite")));
        }
        Ok(HsiCube {
            height,
            width,
            bands,
            values,
            mask: None,
        })
    }

    pub fn with_mask(mut self, mask: Mask) -> Result<Self> {
        if mask.height != self.height || mask.width != self.width {
            return Err(Error::Shape(format!(
                "mask {}x{} does not match cube {}x{}",
                mask.height, mask.width, self.height, self.width
            )));
        }
        self.mask = Some(mask);
        Ok(self)
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f32] {
        let o = (row * self.width + col) * self.bands;
        &self.values[o..o + self.bands]
    }

    /// `[height, width, bands]` view of the values.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[self.height, self.width, self.bands], self.values.clone())
    }
}

/// Per-band min-max scaling to `[0, 1]`; constant bands map to 0.
pub fn normalize(cube: &HsiCube) -> Result<HsiCube> {
    if let Some(i) = cube.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("cannot normalize: value {i} is not finite")));
    }
    let c = cube.bands;
    let mut lo = vec![f32::INFINITY; c];
    let mut hi = vec![f32::NEG_INFINITY; c];
    for px in cube.values.chunks(c) {
        for b in 0..c {
            lo[b] = lo[b].min(px[b]);
            hi[b] = hi[b].max(px[b]);
        }
    }
    let mut values = cube.values.clone();
    for px in values.chunks_mut(c) {
        for b in 0..c {
            let range = hi[b] - lo[b];
            px[b] = if range > 0.0 { (px[b] - lo[b]) / range } else { 0.0 };
        }
    }
    Ok(HsiCube {
        values,
        ..cube.clone()
    })
}

//! Sliding-window patches, random rectangular masking and overlap-averaged
//! reassembly.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::data::HsiCube;
use crate::error::{Error, Result};

/// Window start positions along one axis: `0, s, 2s, ...` while the window
/// fits, plus a final window ending exactly at the border.
pub fn window_origins(extent: usize, size: usize, stride: usize) -> Result<Vec<usize>> {
    if size == 0 || stride == 0 {
        return Err(Error::InvalidInput(format!(
            "window size {size} and stride {stride} must be positive"
        )));
    }
    if size > extent {
        return Err(Error::InvalidInput(format!(
            "window {size} larger than extent {extent}"
        )));
    }
    let last = extent - size;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if out.last() != Some(&last) {
        out.push(last);
    }
    Ok(out)
}

/// Patches cut from one cube, each `[patch_h, patch_w, bands]`.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub patch_h: usize,
    pub patch_w: usize,
    /// Top-left `(row, col)` of every patch.
    pub origins: Vec<(usize, usize)>,
    pub patches: Vec<Tensor<f32>>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Stacks the selected patches into `[n, patch_h, patch_w, bands]`.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        stack(indices.iter().map(|&i| &self.patches[i]), [self.patch_h, self.patch_w, self.bands])
    }
}

pub(crate) fn stack<'a>(items: impl Iterator<Item = &'a Tensor<f32>>, dims: [usize; 3]) -> Tensor<f32> {
    let mut data = Vec::new();
    let mut n = 0;
    for t in items {
        data.extend_from_slice(t.data());
        n += 1;
    }
    Tensor::from_vec(&[n, dims[0], dims[1], dims[2]], data)
}

/// Cuts every `h x w` window at the clamped stride grid, row-major over
/// origins.
pub fn extract_patches(cube: &HsiCube, h: usize, w: usize, stride: usize) -> Result<PatchSet> {
    let rows = window_origins(cube.height, h, stride)?;
    let cols = window_origins(cube.width, w, stride)?;
    let c = cube.bands;
    let mut origins = Vec::with_capacity(rows.len() * cols.len());
    let mut patches = Vec::with_capacity(rows.len() * cols.len());
    for &r in &rows {
        for &q in &cols {
            let mut data = Vec::with_capacity(h * w * c);
            for i in 0..h {
                let start = ((r + i) * cube.width + q) * c;
                data.extend_from_slice(&cube.values[start..start + w * c]);
            }
            origins.push((r, q));
            patches.push(Tensor::from_vec(&[h, w, c], data));
        }
    }
    Ok(PatchSet {
        height: cube.height,
        width: cube.width,
        bands: c,
        patch_h: h,
        patch_w: w,
        origins,
        patches,
    })
}

/// Random rectangular masking applied to training patches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskSpec {
    /// Chance that a patch receives a mask.
    pub probability: f64,
    pub min_side: usize,
    pub max_side: usize,
    pub fill: f32,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            probability: 0.5,
            min_side: 4,
            max_side: 8,
            fill: 0.0,
        }
    }
}

impl MaskSpec {
    /// Checks the spec against a patch side length.
    pub fn validate(&self, patch: usize) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::config("mask.probability", "must lie in [0, 1]"));
        }
        if self.min_side == 0 || self.min_side > self.max_side {
            return Err(Error::config("mask.min_side", "need 1 <= min_side <= max_side"));
        }
        if self.max_side > patch {
            return Err(Error::config(
                "mask.max_side",
                format!("{} exceeds patch side {patch}", self.max_side),
            ));
        }
        if !self.fill.is_finite() {
            return Err(Error::config("mask.fill", "must be finite"));
        }
        Ok(())
    }
}

/// Rectangle blanked by [`random_mask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MaskRegion {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

impl MaskRegion {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.row..self.row + self.height).contains(&row) && (self.col..self.col + self.width).contains(&col)
    }
}

/// With probability `spec.probability`, fills one random rectangle of a
/// `[h, w, c]` patch with `spec.fill` across all bands.
pub fn random_mask<R: Rng + ?Sized>(
    patch: &Tensor<f32>,
    spec: &MaskSpec,
    rng: &mut R,
) -> Result<(Tensor<f32>, Option<MaskRegion>)> {
    let &[h, w, c] = patch.shape() else {
        return Err(Error::Shape(format!("mask expects [h,w,c], got {:?}", patch.shape())));
    };
    spec.validate(h.min(w))?;
    if !rng.gen_bool(spec.probability) {
        return Ok((patch.clone(), None));
    }
    let rh = rng.gen_range(spec.min_side..=spec.max_side);
    let rw = rng.gen_range(spec.min_side..=spec.max_side);
    let region = MaskRegion {
        row: rng.gen_range(0..=h - rh),
        col: rng.gen_range(0..=w - rw),
        height: rh,
        width: rw,
    };
    let mut data = patch.data().to_vec();
    for r in region.row..region.row + rh {
        let start = (r * w + region.col) * c;
        data[start..start + rw * c].fill(spec.fill);
    }
    Ok((Tensor::from_vec(patch.shape(), data), Some(region)))
}

/// Accumulates patch values and coverage counts over a `height x width`
/// grid; [`Reassembler::finish`] returns the per-pixel mean.
#[derive(Clone, Debug)]
pub struct Reassembler {
    height: usize,
    width: usize,
    bands: usize,
    sum: Vec<f64>,
    count: Vec<u32>,
}

impl Reassembler {
    pub fn new(height: usize, width: usize, bands: usize) -> Self {
        Reassembler {
            height,
            width,
            bands,
            sum: vec![0.0; height * width * bands],
            count: vec![0; height * width],
        }
    }

    /// Adds one `[ph, pw, bands]` patch laid out row-major at `origin`.
    pub fn add(&mut self, origin: (usize, usize), ph: usize, pw: usize, values: &[f32]) -> Result<()> {
        let (r0, c0) = origin;
        if r0 + ph > self.height || c0 + pw > self.width {
            return Err(Error::Shape(format!(
                "patch {ph}x{pw} at {origin:?} leaves the {}x{} grid",
                self.height, self.width
            )));
        }
        if values.len() != ph * pw * self.bands {
            return Err(Error::Shape(format!(
                "patch {ph}x{pw}x{} given {} values",
                self.bands,
                values.len()
            )));
        }
        let c = self.bands;
        for i in 0..ph {
            for j in 0..pw {
                let px = (r0 + i) * self.width + c0 + j;
                self.count[px] += 1;
                let src = &values[(i * pw + j) * c..][..c];
                for (s, &v) in self.sum[px * c..][..c].iter_mut().zip(src) {
                    *s += f64::from(v);
                }
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Tensor<f32>> {
        if let Some(px) = self.count.iter().position(|&n| n == 0) {
            return Err(Error::InvalidInput(format!(
                "pixel ({}, {}) is not covered by any patch",
                px / self.width,
                px % self.width
            )));
        }
        let c = self.bands;
        let data = self
            .sum
            .iter()
            .enumerate()
            .map(|(i, &s)| (s / f64::from(self.count[i / c])) as f32)
            .collect();
        Ok(Tensor::from_vec(&[self.height, self.width, c], data))
    }
}

/// Averages `[h, w, c]` patch outputs placed at `origins` into a
/// `[height, width, c]` map.
pub fn reassemble(outputs: &[Tensor<f32>], origins: &[(usize, usize)], height: usize, width: usize) -> Result<Tensor<f32>> {
    if outputs.len() != origins.len() {
        return Err(Error::Shape(format!(
            "{} patches but {} origins",
            outputs.len(),
            origins.len()
        )));
    }
    let Some(first) = outputs.first() else {
        return Err(Error::InvalidInput("no patches to reassemble".into()));
    };
    let &[_, _, c] = first.shape() else {
        return Err(Error::Shape(format!("patches must be [h,w,c], got {:?}", first.shape())));
    };
    let mut acc = Reassembler::new(height, width, c);
    for (t, &o) in outputs.iter().zip(origins) {
        let &[ph, pw, pc] = t.shape() else {
            return Err(Error::Shape(format!("patches must be [h,w,c], got {:?}", t.shape())));
        };
        if pc != c {
            return Err(Error::Shape(format!("patch bands {pc} vs {c}")));
        }
        acc.add(o, ph, pw, t.data())?;
    }
    acc.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp_cube(h: usize, w: usize, c: usize) -> HsiCube {
        let values = (0..h * w * c).map(|v| v as f32 * 0.25).collect();
        HsiCube::new(h, w, c, values).unwrap()
    }

    #[test]
    fn origins_clamp_final_window_to_border() {
        let o = window_origins(100, 16, 8).unwrap();
        let mut want: Vec<usize> = (0..=80).step_by(8).collect();
        want.push(84);
        assert_eq!(o, want);
        assert_eq!(o.len(), 12);
        assert_eq!(window_origins(64, 16, 8).unwrap().len(), 7);
        assert_eq!(window_origins(16, 16, 8).unwrap(), vec![0]);
        assert!(window_origins(8, 16, 8).is_err());
        assert!(window_origins(8, 4, 0).is_err());
    }

    #[test]
    fn extract_counts_and_contents() {
        let cube = ramp_cube(100, 100, 2);
        let set = extract_patches(&cube, 16, 16, 8).unwrap();
        assert_eq!(set.len(), 144);
        let (r, q) = set.origins[13];
        assert_eq!((r, q), (8, 8));
        assert_eq!(set.patches[13].at(&[2, 3, 1]), cube.pixel(r + 2, q + 3)[1]);
        let single = extract_patches(&cube, 100, 100, 5).unwrap();
        assert_eq!(single.origins, vec![(0, 0)]);
    }

    #[test]
    fn disjoint_tiling_round_trip_exact() {
        let cube = ramp_cube(12, 8, 3);
        let set = extract_patches(&cube, 4, 4, 4).unwrap();
        assert_eq!(set.len(), 6);
        let back = reassemble(&set.patches, &set.origins, 12, 8).unwrap();
        assert_eq!(back.data(), cube.values.as_slice());
    }

    #[test]
    fn overlap_mean() {
        let a = Tensor::full(&[1, 2, 1], 1.0f32);
        let b = Tensor::full(&[1, 2, 1], 3.0f32);
        let out = reassemble(&[a, b], &[(0, 0), (0, 1)], 1, 3).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn uncovered_pixel_rejected() {
        let a = Tensor::full(&[1, 1, 1], 1.0f32);
        assert!(reassemble(&[a], &[(0, 0)], 1, 2).is_err());
    }

    #[test]
    fn mask_extremes() {
        let patch = Tensor::full(&[8, 8, 3], 2.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let never = MaskSpec { probability: 0.0, ..MaskSpec::default() };
        for _ in 0..20 {
            let (m, r) = random_mask(&patch, &never, &mut rng).unwrap();
            assert!(r.is_none());
            assert_eq!(m.data(), patch.data());
        }
        let full = MaskSpec { probability: 1.0, min_side: 8, max_side: 8, fill: -1.0 };
        let (m, r) = random_mask(&patch, &full, &mut rng).unwrap();
        assert_eq!(r, Some(MaskRegion { row: 0, col: 0, height: 8, width: 8 }));
        assert!(m.data().iter().all(|&v| v == -1.0));
    }

    #[test]
    fn mask_frequency_near_probability() {
        let patch = Tensor::full(&[8, 8, 1], 1.0f32);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = MaskSpec { max_side: 6, ..MaskSpec::default() };
        let hits = (0..10_000)
            .filter(|_| random_mask(&patch, &spec, &mut rng).unwrap().1.is_some())
            .count();
        let freq = hits as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&freq), "{freq}");
    }

    #[test]
    fn mask_spec_validation() {
        assert!(MaskSpec::default().validate(16).is_ok());
        assert!(MaskSpec::default().validate(6).is_err());
        assert!(MaskSpec { probability: 1.5, ..MaskSpec::default() }.validate(16).is_err());
        assert!(MaskSpec { min_side: 0, ..MaskSpec::default() }.validate(16).is_err());
        assert!(MaskSpec { min_side: 9, ..MaskSpec::default() }.validate(16).is_err());
    }
}

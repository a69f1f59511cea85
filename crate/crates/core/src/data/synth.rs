//! Deterministic synthetic scenes: a smooth mixture of endmember spectra
//! with rare rectangular spectral implants.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::cube::{HsiCube, Mask};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub bands: usize,
    pub endmembers: usize,
    pub anomalies: usize,
    /// Smallest implant side, pixels.
    pub min_side: usize,
    /// Largest implant side, pixels.
    pub max_side: usize,
    /// Implant deviation in units of the background's per-band spread.
    pub contrast: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 64,
            width: 64,
            bands: 32,
            endmembers: 4,
            anomalies: 3,
            min_side: 2,
            max_side: 4,
            contrast: 3.0,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("scene.height", self.height),
            ("scene.width", self.width),
            ("scene.bands", self.bands),
            ("scene.endmembers", self.endmembers),
            ("scene.min_side", self.min_side),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if self.max_side < self.min_side {
            return Err(Error::config("scene.max_side", "must be >= scene.min_side"));
        }
        if self.max_side > self.height || self.max_side > self.width {
            return Err(Error::config(
                "scene.max_side",
                format!(
                    "anomaly side {} does not fit a {}x{} scene",
                    self.max_side, self.height, self.width
                ),
            ));
        }
        if !(self.contrast >= 0.0 && self.contrast.is_finite()) {
            return Err(Error::config("scene.contrast", "must be finite and non-negative"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("scene.noise_std", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Smooth positive spectrum: baseline plus a few Gaussian bumps, in
/// roughly `[0.1, 0.9]`.
fn smooth_spectrum(bands: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let base = rng.gen_range(0.15..0.35);
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.0..1.0),
                rng.gen_range(0.08..0.3),
                rng.gen_range(-0.2..0.5),
            )
        })
        .collect();
    (0..bands)
        .map(|b| {
            let x = if bands > 1 { b as f64 / (bands - 1) as f64 } else { 0.5 };
            let v = base
                + bumps
                    .iter()
                    .map(|&(c, w, a)| a * (-(x - c).powi(2) / (2.0 * w * w)).exp())
                    .sum::<f64>();
            v.clamp(0.05, 0.95)
        })
        .collect()
}

/// Low-frequency random field over the scene.
fn smooth_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.5..1.5),
            )
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (y, x) = (r as f64 / h as f64, c as f64 / w as f64);
            out.push(
                waves
                    .iter()
                    .map(|&(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * y + fx * x) + ph).sin())
                    .sum(),
            );
        }
    }
    out
}

/// Generates the scene and its ground-truth mask. Identical specs give
/// bit-identical cubes.
pub fn synth_scene(spec: &SceneSpec) -> Result<HsiCube> {
    spec.validate()?;
    let (h, w, c) = (spec.height, spec.width, spec.bands);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let members: Vec<Vec<f64>> = (0..spec.endmembers).map(|_| smooth_spectrum(c, &mut rng)).collect();
    let fields: Vec<Vec<f64>> = (0..spec.endmembers).map(|_| smooth_field(h, w, &mut rng)).collect();
    let mut background = vec![0.0f64; h * w * c];
    for p in 0..h * w {
        let logits: Vec<f64> = fields.iter().map(|f| 2.0 * f[p]).collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = weights.iter().sum();
        for (m, wgt) in members.iter().zip(&weights) {
            for b in 0..c {
                background[p * c + b] += wgt / total * m[b];
            }
        }
    }

    // per-band spread of the noiseless background
    let spread: f64 = {
        let n = (h * w) as f64;
        (0..c)
            .map(|b| {
                let mean = (0..h * w).map(|p| background[p * c + b]).sum::<f64>() / n;
                let var = (0..h * w).map(|p| (background[p * c + b] - mean).powi(2)).sum::<f64>() / n;
                var.sqrt()
            })
            .sum::<f64>()
            / c as f64
    };

    let mut mask = Mask::empty(h, w);
    let mut placed: Vec<(usize, usize, usize, usize)> = Vec::new();
    for k in 0..spec.anomalies {
        let signature = {
            let s = smooth_spectrum(c, &mut rng);
            let mean = s.iter().sum::<f64>() / c as f64;
            let centered: Vec<f64> = s.iter().map(|v| v - mean).collect();
            let rms = (centered.iter().map(|v| v * v).sum::<f64>() / c as f64).sqrt();
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            if rms > 1e-12 {
                centered.iter().map(|v| sign * v / rms).collect::<Vec<_>>()
            } else {
                vec![sign; c]
            }
        };
        let mut found = None;
        for _ in 0..10_000 {
            let rh = rng.gen_range(spec.min_side..=spec.max_side);
            let rw = rng.gen_range(spec.min_side..=spec.max_side);
            let r0 = rng.gen_range(0..=h - rh);
            let c0 = rng.gen_range(0..=w - rw);
            let clear = placed.iter().all(|&(pr, pc, ph, pw)| {
                r0 + rh < pr || pr + ph < r0 || c0 + rw < pc || pc + pw < c0
            });
            if clear {
                found = Some((r0, c0, rh, rw));
                break;
            }
        }
        let (r0, c0, rh, rw) = found.ok_or_else(|| {
            Error::config("scene.anomalies", format!("could not place anomaly {k} without overlap"))
        })?;
        placed.push((r0, c0, rh, rw));
        for r in r0..r0 + rh {
            for cc in c0..c0 + rw {
                mask.set(r, cc, true);
                let p = r * w + cc;
                for b in 0..c {
                    background[p * c + b] += spec.contrast * spread * signature[b];
                }
            }
        }
    }

    let noise = Normal::new(0.0, spec.noise_std.max(0.0)).expect("valid std");
    let values: Vec<f32> = background
        .iter()
        .map(|&v| (v + if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 }) as f32)
        .collect();
    HsiCube::new(h, w, c, values)?.with_mask(mask)
}

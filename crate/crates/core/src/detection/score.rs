use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `height x width` anomaly scores, row-major; higher is more anomalous.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub height: usize,
    pub width: usize,
    pub scores: Vec<f64>,
    /// Name of the detector that produced the map.
    pub detector: String,
    /// Digest of the detector configuration (checkpoint digest for the
    /// model, 0 for parameter-free detectors).
    pub config_hash: u64,
}

impl ScoreMap {
    pub fn new(height: usize, width: usize, scores: Vec<f64>, detector: impl Into<String>, config_hash: u64) -> Result<Self> {
        if height == 0 || width == 0 || scores.len() != height * width {
            return Err(Error::Shape(format!(
                "score map {height}x{width} given {} scores",
                scores.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "score at ({}, {}) is not finite",
                i / width,
                i % width
            )));
        }
        Ok(ScoreMap {
            height,
            width,
            scores,
            detector: detector.into(),
            config_hash,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.width + col]
    }

    /// `row,col,score` with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row,col,score\n");
        for (i, s) in self.scores.iter().enumerate() {
            let _ = writeln!(out, "{},{},{}", i / self.width, i % self.width, s);
        }
        out
    }

    /// Parses the layout written by [`ScoreMap::to_csv`]. Every pixel of the
    /// bounding grid must appear exactly once.
    pub fn from_csv(text: &str, detector: impl Into<String>) -> Result<Self> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || (n == 0 && line.starts_with("row")) {
                continue;
            }
            let bad = || Error::InvalidInput(format!("score csv line {}: `{line}`", n + 1));
            let mut it = line.split(',');
            let r: usize = it.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
            let c: usize = it.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
            let s: f64 = it.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?;
            if it.next().is_some() {
                return Err(bad());
            }
            rows.push((r, c, s));
        }
        let height = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        let width = rows.iter().map(|r| r.1 + 1).max().unwrap_or(0);
        if rows.len() != height * width || height == 0 {
            return Err(Error::InvalidInput(format!(
                "score csv has {} entries for a {height}x{width} grid",
                rows.len()
            )));
        }
        let mut scores = vec![f64::NAN; height * width];
        for (r, c, s) in rows {
            let slot = &mut scores[r * width + c];
            if !slot.is_nan() {
                return Err(Error::InvalidInput(format!("score csv repeats pixel ({r}, {c})")));
            }
            *slot = s;
        }
        ScoreMap::new(height, width, scores, detector, 0)
    }

    /// Binary 16-bit PGM after min-max scaling to `0..=65535`. A constant
    /// map is written as all zeros.
    pub fn to_pgm(&self) -> Vec<u8> {
        let lo = self.scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let mut out = format!("P5\n{} {}\n65535\n", self.width, self.height).into_bytes();
        for &s in &self.scores {
            let v = if span > 0.0 { ((s - lo) / span * 65535.0).round() as u16 } else { 0 };
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let m = ScoreMap::new(2, 3, vec![0.0, 1.5, -2.0, 3.25, 1e-9, 7.0], "x", 0).unwrap();
        let back = ScoreMap::from_csv(&m.to_csv(), "x").unwrap();
        assert_eq!(back, m);
        assert!(m.to_csv().starts_with("row,col,score\n0,0,0\n0,1,1.5\n"));
    }

    #[test]
    fn csv_rejects_gaps_and_repeats() {
        assert!(ScoreMap::from_csv("row,col,score\n0,0,1\n1,1,2\n", "x").is_err());
        assert!(ScoreMap::from_csv("0,0,1\n0,0,2\n", "x").is_err());
        assert!(ScoreMap::from_csv("0,0,abc\n", "x").is_err());
    }

    #[test]
    fn pgm_scaling() {
        let m = ScoreMap::new(1, 3, vec![1.0, 2.0, 3.0], "x", 0).unwrap();
        let p = m.to_pgm();
        let header = b"P5\n3 1\n65535\n";
        assert_eq!(&p[..header.len()], header);
        assert_eq!(&p[header.len()..], &[0, 0, 0x80, 0, 0xff, 0xff]);
        let flat = ScoreMap::new(1, 2, vec![4.0, 4.0], "x", 0).unwrap();
        assert!(flat.to_pgm().ends_with(&[0, 0, 0, 0]));
    }

    #[test]
    fn rejects_non_finite_and_bad_shape() {
        assert!(ScoreMap::new(1, 2, vec![0.0, f64::NAN], "x", 0).is_err());
        assert!(ScoreMap::new(2, 2, vec![0.0; 3], "x", 0).is_err());
    }
}

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Mask;
use crate::detection::ScoreMap;
use crate::error::{Error, Result};

/// `(false alarm rate, detection probability)` points from the highest
/// threshold down, starting at `(0, 0)` and ending at `(1, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
}

impl RocCurve {
    /// Trapezoidal area under the curve.
    pub fn area(&self) -> f64 {
        self.points
            .windows(2)
            .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
            .sum()
    }

    /// `far,pd` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("far,pd\n");
        for (f, p) in &self.points {
            let _ = writeln!(out, "{f},{p}");
        }
        out
    }
}

/// Five-number summary with quartiles by linear interpolation between
/// order statistics at position `q * (n - 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn box_stats(values: &[f64]) -> Result<BoxStats> {
    if values.is_empty() {
        return Err(Error::InvalidInput("box statistics of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let q = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
    };
    Ok(BoxStats {
        min: v[0],
        q1: q(0.25),
        median: q(0.5),
        q3: q(0.75),
        max: v[v.len() - 1],
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub positives: usize,
    pub negatives: usize,
    pub anomaly: BoxStats,
    pub background: BoxStats,
    pub roc: RocCurve,
}

/// ROC and AUC of `scores` against `labels` (`true` = anomaly).
///
/// Thresholds sit at every distinct score. The AUC is computed from integer
/// counts as `sum_g neg_g * (2 * tp_before_g + pos_g) / (2 * P * N)` over
/// tie groups `g`, which is both the trapezoidal area and the Mann-Whitney
/// statistic with ties counted one half.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<EvalReport> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(format!(
            "AUC needs both classes, got {pos} anomalous and {neg} background pixels"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("no NaN"));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut twice_u: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut gp, mut gn) = (0u64, 0u64);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] {
                gp += 1;
            } else {
                gn += 1;
            }
            i += 1;
        }
        twice_u += u128::from(gn) * u128::from(2 * tp + gp);
        tp += gp;
        fp += gn;
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    let auc = twice_u as f64 / (2 * pos as u128 * neg as u128) as f64;
    let (a, b): (Vec<f64>, Vec<f64>) = {
        let mut a = Vec::with_capacity(pos);
        let mut b = Vec::with_capacity(neg);
        for (&s, &l) in scores.iter().zip(labels) {
            if l {
                a.push(s)
            } else {
                b.push(s)
            }
        }
        (a, b)
    };
    Ok(EvalReport {
        auc,
        positives: pos,
        negatives: neg,
        anomaly: box_stats(&a)?,
        background: box_stats(&b)?,
        roc: RocCurve { points },
    })
}

/// [`roc_auc`] of a score map against a ground-truth mask.
pub fn evaluate(map: &ScoreMap, mask: &Mask) -> Result<EvalReport> {
    if (map.height, map.width) != (mask.height, mask.width) {
        return Err(Error::Shape(format!(
            "score map {}x{} vs mask {}x{}",
            map.height, map.width, mask.height, mask.width
        )));
    }
    roc_auc(&map.scores, &mask.values)
}

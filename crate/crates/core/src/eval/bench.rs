use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::{gemm, Tensor};
use crate::error::{Error, Result};
use crate::ssm::{selective_scan, ScanDims, ScanInputs};

/// Channel and state widths of the benchmarked scan; the attention
/// reference uses `BENCH_INNER` as its head width.
const BENCH_INNER: usize = 64;
const BENCH_STATE: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub len: usize,
    pub scan_ms: f64,
    pub attn_ms: f64,
}

/// Time ratio between a length and its double.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DoublingRatio {
    pub from: usize,
    pub to: usize,
    pub scan: f64,
    pub attn: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanBench {
    pub rows: Vec<BenchRow>,
    pub ratios: Vec<DoublingRatio>,
}

impl ScanBench {
    /// `L,scan_ms,attn_ms` rows with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("L,scan_ms,attn_ms\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.len, r.scan_ms, r.attn_ms);
        }
        out
    }
}

/// Single-head softmax attention over `[len, dim]` queries, keys and
/// values. Quadratic in `len`; used only as a scaling reference.
pub fn attention_reference(q: &[f32], k: &[f32], v: &[f32], len: usize, dim: usize) -> Vec<f32> {
    let mut scores = vec![0.0f32; len * len];
    gemm::nt(len, dim, len, q, k, &mut scores, false);
    let scale = 1.0 / (dim as f32).sqrt();
    for row in scores.chunks_exact_mut(len) {
        let m = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) * scale;
        let mut sum = 0.0;
        for s in row.iter_mut() {
            *s = (*s * scale - m).exp();
            sum += *s;
        }
        row.iter_mut().for_each(|s| *s /= sum);
    }
    let mut out = vec![0.0f32; len * dim];
    gemm::nn(len, len, dim, &scores, v, &mut out, false);
    out
}

fn median_ms(reps: usize, mut f: impl FnMut()) -> f64 {
    f();
    let mut t: Vec<f64> = (0..reps)
        .map(|_| {
            let s = Instant::now();
            f();
            s.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    t.sort_by(|a, b| a.partial_cmp(b).expect("finite timings"));
    t[t.len() / 2]
}

fn uniform(n: usize, lo: f32, hi: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Median wall time of the selective scan and of the attention reference at
/// every length, plus time ratios between lengths that double.
pub fn bench_scan(lengths: &[usize], reps: usize) -> Result<ScanBench> {
    if lengths.len() < 2 {
        return Err(Error::InvalidInput("bench needs at least two lengths".into()));
    }
    if let Some(&l) = lengths.iter().find(|&&l| l < 64) {
        return Err(Error::InvalidInput(format!("bench length {l} is below 64")));
    }
    let reps = reps.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (d, n) = (BENCH_INNER, BENCH_STATE);
    let a = uniform(d * n, -2.0, -0.1, &mut rng);
    let dskip = uniform(d, 0.5, 1.5, &mut rng);
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let u = uniform(len * d, -1.0, 1.0, &mut rng);
        let delta = uniform(len * d, 1e-3, 0.1, &mut rng);
        let b = uniform(len * n, -1.0, 1.0, &mut rng);
        let c = uniform(len * n, -1.0, 1.0, &mut rng);
        let x = ScanInputs {
            dims: ScanDims { seqs: 1, len, inner: d, state: n },
            u: &u,
            delta: &delta,
            a: &a,
            b: &b,
            c: &c,
            d: &dskip,
        };
        selective_scan(&x)?;
        let scan_ms = median_ms(reps, || {
            std::hint::black_box(selective_scan(&x).expect("validated inputs"));
        });
        let q = Tensor::<f32>::uniform(&[len, d], -1.0, 1.0, &mut rng);
        let k = Tensor::<f32>::uniform(&[len, d], -1.0, 1.0, &mut rng);
        let attn_ms = median_ms(reps, || {
            std::hint::black_box(attention_reference(q.data(), k.data(), &u, len, d));
        });
        rows.push(BenchRow { len, scan_ms, attn_ms });
    }
    let mut ratios = Vec::new();
    for (i, r) in rows.iter().enumerate() {
        if let Some(s) = rows.iter().skip(i + 1).find(|s| s.len == 2 * r.len) {
            ratios.push(DoublingRatio {
                from: r.len,
                to: s.len,
                scan: s.scan_ms / r.scan_ms,
                attn: s.attn_ms / r.attn_ms,
            });
        }
    }
    Ok(ScanBench { rows, ratios })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn attention_rows_are_convex_combinations() {
        let len = 5;
        let q = vec![0.3f32; len * 2];
        let k: Vec<f32> = (0..len * 2).map(|i| i as f32 * 0.1).collect();
        let v: Vec<f32> = (0..len * 2).map(|i| i as f32).collect();
        let out = attention_reference(&q, &k, &v, len, 2);
        for row in out.chunks(2) {
            assert!(row[0] >= 0.0 && row[0] <= 8.0);
        }
        let flat = attention_reference(&[0.0; 10], &k, &v, len, 2);
        assert!((flat[0] - 4.0).abs() < 1e-5 && (flat[1] - 5.0).abs() < 1e-5);
    }

    #[test]
    fn bench_input_checks() {
        assert!(bench_scan(&[128], 1).is_err());
        assert!(bench_scan(&[32, 64], 1).is_err());
        let b = bench_scan(&[64, 128], 1).unwrap();
        assert_eq!(b.rows.len(), 2);
        assert_eq!(b.ratios.len(), 1);
        assert!(b.to_csv().starts_with("L,scan_ms,attn_ms\n64,"));
    }
}

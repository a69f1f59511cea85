//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod grad;

use dualscan::compute::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Operands of one scan instance in the crate's layouts.
pub struct ScanCase {
    pub seqs: usize,
    pub len: usize,
    pub inner: usize,
    pub state: usize,
    pub u: Vec<f64>,
    pub delta: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
}

impl ScanCase {
    pub fn random(seqs: usize, len: usize, inner: usize, state: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut v = |n: usize, lo: f64, hi: f64| (0..n).map(|_| rng.gen_range(lo..hi)).collect::<Vec<_>>();
        ScanCase {
            seqs,
            len,
            inner,
            state,
            u: v(seqs * len * inner, -1.0, 1.0),
            delta: v(seqs * len * inner, 0.01, 1.0),
            a: v(inner * state, -2.0, -0.05),
            b: v(seqs * len * state, -1.0, 1.0),
            c: v(seqs * len * state, -1.0, 1.0),
            d: v(inner, -1.0, 1.0),
        }
    }
}

/// Step-by-step recurrence with libm `exp`, written independently of the
/// crate's kernels.
pub fn naive_scan(s: &ScanCase) -> Vec<f64> {
    let (l, di, n) = (s.len, s.inner, s.state);
    let mut y = vec![0.0; s.seqs * l * di];
    for q in 0..s.seqs {
        let mut h = vec![0.0; di * n];
        for t in 0..l {
            let row = q * l + t;
            for ch in 0..di {
                let dt = s.delta[row * di + ch];
                let x = s.u[row * di + ch];
                let mut acc = s.d[ch] * x;
                for k in 0..n {
                    let hv = &mut h[ch * n + k];
                    *hv = (dt * s.a[ch * n + k]).exp() * *hv + dt * s.b[row * n + k] * x;
                    acc += s.c[row * n + k] * *hv;
                }
                y[row * di + ch] = acc;
            }
        }
    }
    y
}

mod common;

use dualscan::compute::{Graph, NormMode, Tensor};
use dualscan::data::{hsic, normalize, HsiCube, Mask};
use dualscan::detection::{residual_map, rx_score, ScoreMap};
use dualscan::eval::roc_auc;
use dualscan::model::{DualBranchModel, Fusion};
use dualscan::patching::{extract_patches, random_mask, reassemble, window_origins, MaskSpec};
use dualscan::ssm::{selective_scan, ScanDims, ScanInputs};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cube_strategy(max_side: usize, max_bands: usize) -> impl Strategy<Value = HsiCube> {
    (1..=max_side, 1..=max_side, 1..=max_bands).prop_flat_map(|(h, w, c)| {
        prop::collection::vec(-10.0f32..10.0, h * w * c).prop_map(move |v| HsiCube::new(h, w, c, v).unwrap())
    })
}

/// Mann-Whitney statistic with ties counted one half, by brute force.
fn pair_statistic(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] && !labels[j] {
                pairs += 1;
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn windows_cover_extent_and_stay_inside(extent in 1usize..200, size in 1usize..40, stride in 1usize..40) {
        prop_assume!(size <= extent);
        let o = window_origins(extent, size, stride).unwrap();
        prop_assert_eq!(o[0], 0);
        prop_assert_eq!(*o.last().unwrap() + size, extent);
        for w in o.windows(2) {
            prop_assert!(w[1] > w[0] && w[1] - w[0] <= stride);
        }
    }

    #[test]
    fn patches_reassemble_to_the_cube(cube in cube_strategy(20, 4), ph in 1usize..8, pw in 1usize..8, stride in 1usize..8) {
        prop_assume!(ph <= cube.height && pw <= cube.width && stride <= ph.min(pw));
        let set = extract_patches(&cube, ph, pw, stride).unwrap();
        let back = reassemble(&set.patches, &set.origins, cube.height, cube.width).unwrap();
        prop_assert!(back.max_abs_diff(&cube.to_tensor()) <= 1e-6);
    }

    #[test]
    fn auc_equals_pair_statistic(
        raw in prop::collection::vec((0u8..6, any::<bool>()), 2..50)
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s as f64 * 0.5).collect();
        let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let r = roc_auc(&scores, &labels).unwrap();
        let want = pair_statistic(&scores, &labels);
        prop_assert_eq!(r.auc, want);
        prop_assert!((r.roc.area() - want).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_rescaling(
        raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s).collect();
        let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let moved: Vec<f64> = scores.iter().map(|s| 3.0 * s.exp() + 1.0).collect();
        prop_assert_eq!(roc_auc(&scores, &labels).unwrap().auc, roc_auc(&moved, &labels).unwrap().auc);
    }

    #[test]
    fn auc_is_bounded_and_complements_on_flip(
        raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..40)
    ) {
        let scores: Vec<f64> = raw.iter().map(|&(s, _)| s).collect();
        let labels: Vec<bool> = raw.iter().map(|&(_, l)| l).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = roc_auc(&scores, &labels).unwrap().auc;
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let b = roc_auc(&neg, &labels).unwrap().auc;
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((a + b - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_lands_in_unit_range_and_is_idempotent(cube in cube_strategy(6, 5)) {
        let n = normalize(&cube).unwrap();
        prop_assert!(n.values.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert_eq!(normalize(&n).unwrap(), n);
    }

    #[test]
    fn residual_is_zero_on_perfect_reconstruction(cube in cube_strategy(6, 5)) {
        let map = residual_map(&cube, &cube.to_tensor()).unwrap();
        prop_assert!(map.scores.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn residual_matches_brute_force(cube in cube_strategy(6, 5), seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let recon = Tensor::uniform(&[cube.height, cube.width, cube.bands], -10.0, 10.0, &mut r);
        let map = residual_map(&cube, &recon).unwrap();
        for row in 0..cube.height {
            for col in 0..cube.width {
                let want: f64 = (0..cube.bands)
                    .map(|b| {
                        let d = cube.pixel(row, col)[b] as f64 - recon.at(&[row, col, b]) as f64;
                        d * d
                    })
                    .sum::<f64>()
                    .sqrt();
                prop_assert!((map.get(row, col) - want).abs() <= 1e-6 * want.max(1.0));
            }
        }
    }

    #[test]
    fn rx_scores_are_nonnegative_and_shift_invariant(seed in any::<u64>(), shift in -3.0f32..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let v = Tensor::<f32>::uniform(&[8, 8, 3], 0.0, 1.0, &mut r).into_vec();
        let cube = HsiCube::new(8, 8, 3, v.clone()).unwrap();
        let moved = HsiCube::new(8, 8, 3, v.iter().map(|x| x + shift).collect()).unwrap();
        let a = rx_score(&cube).unwrap();
        let b = rx_score(&moved).unwrap();
        prop_assert!(a.scores.iter().all(|&s| s >= 0.0));
        for (x, y) in a.scores.iter().zip(&b.scores) {
            prop_assert!((x - y).abs() < 1e-3 * x.max(1.0));
        }
    }

    #[test]
    fn hsic_round_trip_is_bit_identical(cube in cube_strategy(8, 6), bits in prop::collection::vec(any::<bool>(), 64)) {
        let bytes = hsic::cube_to_bytes(&cube).unwrap();
        let back = hsic::cube_from_bytes(&bytes).unwrap();
        prop_assert_eq!(hsic::cube_to_bytes(&back).unwrap(), bytes);
        prop_assert_eq!(back.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), cube.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let n = cube.height * cube.width;
        let mask = Mask::new(cube.height, cube.width, (0..n).map(|i| bits[i % 64]).collect()).unwrap();
        prop_assert_eq!(hsic::mask_from_bytes(&hsic::mask_to_bytes(&mask).unwrap()).unwrap(), mask);
    }

    #[test]
    fn score_csv_round_trips(h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::<f64>::uniform(&[h * w], -1e3, 1e3, &mut r).into_vec();
        let map = ScoreMap::new(h, w, s, "x", 0).unwrap();
        prop_assert_eq!(ScoreMap::from_csv(&map.to_csv(), "x").unwrap(), map);
    }

    #[test]
    fn masked_region_lies_inside_and_only_it_changes(seed in any::<u64>(), size in 8usize..17) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let patch = Tensor::<f32>::uniform(&[size, size, 3], 0.5, 1.0, &mut r);
        let spec = MaskSpec { probability: 1.0, ..MaskSpec::default() };
        let (out, region) = random_mask(&patch, &spec, &mut r).unwrap();
        let region = region.unwrap();
        prop_assert!(region.row + region.height <= size && region.col + region.width <= size);
        prop_assert!((spec.min_side..=spec.max_side).contains(&region.height));
        for row in 0..size {
            for col in 0..size {
                for b in 0..3 {
                    let want = if region.contains(row, col) { spec.fill } else { patch.at(&[row, col, b]) };
                    prop_assert_eq!(out.at(&[row, col, b]), want);
                }
            }
        }
    }

    #[test]
    fn scan_is_linear_in_the_input(seed in any::<u64>(), alpha in -3.0f64..3.0) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = common::ScanCase::random(2, 9, 3, 4, &mut r);
        let dims = ScanDims { seqs: 2, len: 9, inner: 3, state: 4 };
        let scaled: Vec<f64> = s.u.iter().map(|u| alpha * u).collect();
        let mk = |u: &'_ [f64]| selective_scan(&ScanInputs { dims, u, delta: &s.delta, a: &s.a, b: &s.b, c: &s.c, d: &s.d }).unwrap();
        let y = mk(&s.u);
        let ys = mk(&scaled);
        for (a, b) in y.iter().zip(&ys) {
            prop_assert!((alpha * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_output_is_causal(seed in any::<u64>(), cut in 1usize..9) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let s = common::ScanCase::random(1, 10, 2, 3, &mut r);
        let dims = ScanDims { seqs: 1, len: 10, inner: 2, state: 3 };
        let mut u2 = s.u.clone();
        for v in &mut u2[cut * 2..] {
            *v += 1.0;
        }
        let mk = |u: &'_ [f64]| selective_scan(&ScanInputs { dims, u, delta: &s.delta, a: &s.a, b: &s.b, c: &s.c, d: &s.d }).unwrap();
        prop_assert_eq!(&mk(&s.u)[..cut * 2], &mk(&u2)[..cut * 2]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn gated_fusion_is_convex_between_branches(seed in any::<u64>()) {
        let mut cfg = common::grad::toy_config(Fusion::Gated);
        cfg.seed = seed;
        let (model, store) = DualBranchModel::init::<f64>(cfg).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::inference();
        let x = g.input(Tensor::uniform(&[2, 8, 8, 12], 0.0, 1.0, &mut r));
        let out = model.forward(&mut g, &store, x, NormMode::Eval).unwrap();
        let spa = g.value(out.taps.spatial.unwrap()).data();
        let spe = g.value(out.taps.spectral.unwrap()).data();
        let pre = g.value(out.taps.fused_pre).data();
        for i in 0..pre.len() {
            let (lo, hi) = (spa[i].min(spe[i]), spa[i].max(spe[i]));
            prop_assert!(pre[i] >= lo - 1e-12 && pre[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn reconstruction_keeps_shape_and_is_finite(seed in any::<u64>(), fusion in prop::sample::select(Fusion::ALL.to_vec())) {
        let (model, store) = DualBranchModel::init::<f32>(common::grad::toy_config(fusion)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let batch = Tensor::uniform(&[3, 8, 8, 12], 0.0, 1.0, &mut r);
        let y = model.reconstruct(&store, batch).unwrap();
        prop_assert_eq!(y.shape(), &[3, 8, 8, 12]);
        prop_assert!(y.all_finite());
    }
}

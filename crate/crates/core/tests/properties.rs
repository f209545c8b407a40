//! Randomized invariants: algebraic identities the implementation must hold
//! over whole input families, not just hand-picked cases.

use proptest::prelude::*;

use hrpvt_core::metrics::{oks, OksParams};
use hrpvt_core::pose::PoseInstance;
use hrpvt_core::simcc::{decode_axis, gaussian_target};
use hrpvt_core::Tensor;

fn finite_vec(len: usize, range: std::ops::Range<f64>) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(range, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_shift_invariant(vals in finite_vec(8, -5.0..5.0), shift in -10.0..10.0f64) {
        let x = Tensor::from_vec(vals.clone(), &[2, 4]).unwrap();
        let shifted = x.add_scalar(shift);
        let a = x.softmax_last();
        let b = shifted.softmax_last();
        for (va, vb) in a.data().iter().zip(b.data()) {
            prop_assert!((va - vb).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in finite_vec(12, -8.0..8.0)) {
        let x = Tensor::from_vec(vals, &[3, 4]).unwrap();
        let s = x.softmax_last();
        for row in s.data().chunks(4) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn token_round_trip_restores_the_map(
        vals in finite_vec(2 * 3 * 4 * 2, -3.0..3.0),
    ) {
        let x = Tensor::from_vec(vals, &[2, 3, 4, 2]).unwrap();
        let back = x.img2seq().unwrap().seq2img(4, 2).unwrap();
        prop_assert_eq!(x.data(), back.data());
        prop_assert_eq!(x.shape(), back.shape());
    }

    #[test]
    fn unit_block_merge_is_identity(vals in finite_vec(1 * 6 * 3, -3.0..3.0)) {
        let s = Tensor::from_vec(vals, &[1, 6, 3]).unwrap();
        let merged = s.merge_token_blocks(2, 3, 1).unwrap();
        prop_assert_eq!(s.data(), merged.data());
        prop_assert_eq!(s.shape(), merged.shape());
    }

    #[test]
    fn targets_are_distributions_peaked_at_the_quantized_bin(
        coord in 0.0..15.99f64,
        sigma in 0.5..8.0f64,
    ) {
        let k = 4.0;
        let bins = 64;
        let row = gaussian_target(coord, k, sigma, bins);
        let sum: f64 = row.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        let expect = ((coord * k).round() as usize).min(bins - 1);
        prop_assert_eq!(argmax, expect);
    }

    #[test]
    fn round_trip_error_is_within_half_a_bin(
        coord in 0.0..15.0f64,
        kidx in 0usize..3,
    ) {
        let k = [2.0, 4.0, 6.0][kidx];
        let bins = (16.0 * k) as usize;
        let row = gaussian_target(coord, k, 6.0, bins);
        let (back, _) = decode_axis(&row, k);
        prop_assert!((back - coord).abs() <= 0.5 / k + 1e-9);
    }

    #[test]
    fn decode_ignores_monotone_logit_rescaling(vals in finite_vec(32, -4.0..4.0)) {
        let (c1, _) = decode_axis(&vals, 2.0);
        let scaled: Vec<f64> = vals.iter().map(|v| 3.0 * v + 0.25).collect();
        let (c2, _) = decode_axis(&scaled, 2.0);
        prop_assert_eq!(c1, c2);
    }

    #[test]
    fn oks_is_invariant_under_joint_translation(
        base in finite_vec(6, 0.0..50.0),
        offs in finite_vec(6, -2.0..2.0),
        t in finite_vec(2, -30.0..30.0),
    ) {
        let coords: Vec<[f64; 2]> = base.chunks(2).map(|c| [c[0], c[1]]).collect();
        let moved: Vec<[f64; 2]> =
            coords.iter().zip(offs.chunks(2)).map(|(c, o)| [c[0] + o[0], c[1] + o[1]]).collect();
        let params = OksParams { sigmas: vec![0.08; 3], in_vis_thresh: 1 };
        let gt = PoseInstance::gt(coords.clone(), vec![2, 1, 2], 90.0);
        let pred = PoseInstance::prediction(moved.clone(), 1.0);
        let a = oks(&pred, &gt, &params).unwrap();

        let shift = |cs: &[[f64; 2]]| -> Vec<[f64; 2]> {
            cs.iter().map(|c| [c[0] + t[0], c[1] + t[1]]).collect()
        };
        let gt2 = PoseInstance::gt(shift(&coords), vec![2, 1, 2], 90.0);
        let pred2 = PoseInstance::prediction(shift(&moved), 1.0);
        let b = oks(&pred2, &gt2, &params).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn oks_decays_as_any_keypoint_drifts(
        extra in 0.1..20.0f64,
    ) {
        let params = OksParams { sigmas: vec![0.08; 2], in_vis_thresh: 1 };
        let gt = PoseInstance::gt(vec![[10.0, 10.0], [20.0, 20.0]], vec![2, 2], 100.0);
        let near = PoseInstance::prediction(vec![[11.0, 10.0], [20.0, 20.0]], 1.0);
        let far = PoseInstance::prediction(vec![[11.0 + extra, 10.0], [20.0, 20.0]], 1.0);
        let a = oks(&near, &gt, &params).unwrap();
        let b = oks(&far, &gt, &params).unwrap();
        prop_assert!(b < a);
    }
}

use afm_core::flatten::LineDirection;
use afm_core::metrics::*;
use afm_core::{BitMask, HeightMap, MaskStage};
use proptest::prelude::*;

fn mask_pair(max: usize) -> impl Strategy<Value = (BitMask, BitMask)> {
    (1..max, 1..max).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(any::<bool>(), r * c),
            prop::collection::vec(any::<bool>(), r * c),
        )
            .prop_map(move |(a, b)| {
                (
                    BitMask::from_bits(r, c, a, MaskStage::Final).unwrap(),
                    BitMask::from_bits(r, c, b, MaskStage::Final).unwrap(),
                )
            })
    })
}

fn map_and_region(max: usize) -> impl Strategy<Value = (HeightMap, BitMask)> {
    (3..max, 3..max).prop_flat_map(|(r, c)| {
        (
            prop::collection::vec(-5.0..5.0f64, r * c),
            prop::collection::vec(prop::bool::weighted(0.8), r * c),
        )
            .prop_map(move |(d, mut bits)| {
                bits[0] = true;
                (
                    HeightMap::new(r, c, d).unwrap(),
                    BitMask::from_bits(r, c, bits, MaskStage::Final).unwrap(),
                )
            })
    })
}

fn shifted(map: &HeightMap, by: f64) -> HeightMap {
    map.with_data(map.data().iter().map(|v| v + by).collect()).unwrap()
}

#[test]
fn overlap_hand_values() {
    let a = BitMask::from_bits(1, 4, vec![true, true, true, false], MaskStage::Final).unwrap();
    let b = BitMask::from_bits(1, 4, vec![false, true, true, true], MaskStage::Final).unwrap();
    assert_eq!(iou(&a, &b).unwrap(), 0.5);
    assert!((dice(&a, &b).unwrap() - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn shape_mismatch_is_an_error() {
    let a = BitMask::empty(2, 3, MaskStage::Final);
    let b = BitMask::empty(3, 2, MaskStage::Final);
    assert!(iou(&a, &b).is_err());
    let m = HeightMap::constant(2, 3, 0.0).unwrap();
    assert!(sigma_bg(&m, &b).is_err());
    assert!(ssim(&m, &HeightMap::constant(3, 2, 0.0).unwrap()).is_err());
}

#[test]
fn exact_lines_have_zero_line_residual() {
    let map = HeightMap::from_fn(6, 9, |r, c| r as f64 * 2.0 - c as f64 * 0.3 * r as f64).unwrap();
    assert!(rmse_line(&map, LineDirection::Row, 1) < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn dice_follows_from_iou((a, b) in mask_pair(16)) {
        let j = iou(&a, &b).unwrap();
        let d = dice(&a, &b).unwrap();
        prop_assert!((d - 2.0 * j / (1.0 + j)).abs() <= 1e-12);
        prop_assert!(d >= j);
        prop_assert!((0.0..=1.0).contains(&j));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ssim_of_self_is_one((map, _) in map_and_region(20)) {
        prop_assert!((ssim(&map, &map).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn sigma_and_line_residual_ignore_offsets((map, region) in map_and_region(20), by in -50.0..50.0f64) {
        let moved = shifted(&map, by);
        let s0 = sigma_bg(&map, &region).unwrap();
        let s1 = sigma_bg(&moved, &region).unwrap();
        prop_assert!((s0 - s1).abs() <= 1e-12, "{s0} vs {s1}");
        for dir in [LineDirection::Row, LineDirection::Column] {
            let r0 = rmse_line(&map, dir, 1);
            let r1 = rmse_line(&moved, dir, 1);
            prop_assert!((r0 - r1).abs() <= 1e-12, "{r0} vs {r1}");
        }
        let b0 = rmse_line_both(&map, 1, &region).unwrap();
        let b1 = rmse_line_both(&moved, 1, &region).unwrap();
        prop_assert!((b0 - b1).abs() <= 1e-12);
    }

    #[test]
    fn metrics_are_deterministic((map, region) in map_and_region(12)) {
        let other = shifted(&map, 0.25);
        prop_assert_eq!(ssim(&map, &other).unwrap().to_bits(), ssim(&map, &other).unwrap().to_bits());
        prop_assert_eq!(sigma_bg(&map, &region).unwrap().to_bits(), sigma_bg(&map, &region).unwrap().to_bits());
    }
}

#[test]
fn stage_report_fills_what_the_stages_allow() {
    let original = HeightMap::from_fn(16, 16, |r, c| 0.5 * c as f64 + 0.25 * r as f64 + (r * c % 3) as f64).unwrap();
    let flat = HeightMap::from_fn(16, 16, |r, c| (r * c % 3) as f64).unwrap();
    let mask = BitMask::from_rects(16, 16, &[[4, 0, 4, 15]], MaskStage::Final);

    let only = stage_report(
        &StageMaps { original: &original, flattened: None, restored: None, mask: None, truth: None },
        LineDirection::Row,
    )
    .unwrap();
    assert!(only.sigma_bg.is_some() && only.rho_tilt.is_none() && only.ssim.is_none() && only.iou.is_none());

    let full = stage_report(
        &StageMaps {
            original: &original,
            flattened: Some(&flat),
            restored: Some(&flat),
            mask: Some(&mask),
            truth: Some(&mask),
        },
        LineDirection::Row,
    )
    .unwrap();
    assert!(full.rho_tilt.unwrap() > 0.95);
    assert_eq!(full.ssim, Some(1.0));
    assert_eq!(full.ssim_unmasked, Some(1.0));
    assert_eq!((full.iou, full.dice), (Some(1.0), Some(1.0)));
    assert_eq!(full.sigma_bg, Some(sigma_bg(&flat, &mask.complement()).unwrap()));
}

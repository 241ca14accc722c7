use afm_core::{
    connected_components, gradient_magnitude, neighborhood_stats, BitMask, Connectivity, HeightMap, MaskStage,
};
use proptest::prelude::*;

fn adjacent(a: (usize, usize), b: (usize, usize), conn: Connectivity) -> bool {
    let dr = a.0.abs_diff(b.0);
    let dc = a.1.abs_diff(b.1);
    match conn {
        Connectivity::Four => dr + dc == 1,
        Connectivity::Eight => dr.max(dc) == 1,
    }
}

/// Heights on a 1/256 grid so that adding a constant is exact.
fn dyadic_map(max: usize) -> impl Strategy<Value = HeightMap> {
    (2..max, 2..max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-65536i32..65536, r * c)
            .prop_map(move |d| HeightMap::new(r, c, d.into_iter().map(|v| v as f64 / 256.0).collect()).unwrap())
    })
}

fn random_mask(max: usize) -> impl Strategy<Value = BitMask> {
    (1..max, 1..max).prop_flat_map(|(r, c)| {
        prop::collection::vec(any::<bool>(), r * c)
            .prop_map(move |bits| BitMask::from_bits(r, c, bits, MaskStage::Raw).unwrap())
    })
}

fn brute_window(map: &HeightMap, row: usize, col: usize, size: usize) -> (f64, f64, f64) {
    let h = size / 2;
    let mut w = Vec::new();
    for r in row.saturating_sub(h)..=(row + h).min(map.rows() - 1) {
        for c in col.saturating_sub(h)..=(col + h).min(map.cols() - 1) {
            w.push(map.get(r, c));
        }
    }
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    w.sort_by(f64::total_cmp);
    let k = w.len();
    let median = if k % 2 == 1 { w[k / 2] } else { (w[k / 2 - 1] + w[k / 2]) / 2.0 };
    (median, mean, std)
}

#[test]
fn gradient_of_diagonal_plane() {
    let map = HeightMap::from_fn(5, 6, |r, c| 3.0 * c as f64 + 4.0 * r as f64).unwrap();
    let g = gradient_magnitude(&map);
    assert!(g.values.iter().all(|&v| (v - 5.0).abs() < 1e-12));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn gradient_ignores_height_offset(map in dyadic_map(12), k in -4096i32..4096) {
        let shift = k as f64 / 8.0;
        let moved = map.with_data(map.data().iter().map(|v| v + shift).collect()).unwrap();
        prop_assert_eq!(gradient_magnitude(&map).values, gradient_magnitude(&moved).values);
    }

    #[test]
    fn components_partition_the_mask(mask in random_mask(14), eight in any::<bool>()) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let comps = connected_components(&mask, conn);
        let (rows, cols) = mask.shape();
        let mut owner = vec![usize::MAX; rows * cols];
        for (i, comp) in comps.iter().enumerate() {
            prop_assert_eq!(comp.area, comp.pixel_indices.len());
            for &(r, c) in &comp.pixel_indices {
                prop_assert!(mask.get(r, c));
                prop_assert_eq!(owner[r * cols + c], usize::MAX, "pixel in two components");
                owner[r * cols + c] = i;
            }
        }
        for (r, c) in mask.iter_set() {
            prop_assert!(owner[r * cols + c] != usize::MAX, "set bit not covered");
        }
        // Maximal: no two components touch.
        let set: Vec<(usize, usize)> = mask.iter_set().collect();
        for &a in &set {
            for &b in &set {
                if adjacent(a, b, conn) {
                    prop_assert_eq!(owner[a.0 * cols + a.1], owner[b.0 * cols + b.1]);
                }
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn window_stats_match_brute_force(
        map in dyadic_map(16),
        pr in 0usize..16,
        pc in 0usize..16,
        half in 1usize..4,
    ) {
        let (rows, cols) = map.shape();
        let (row, col) = (pr % rows, pc % cols);
        let size = 2 * half + 1;
        let got = neighborhood_stats(&map, (row, col), size).unwrap();
        let (median, mean, std) = brute_window(&map, row, col, size);
        prop_assert_eq!(got.median, median);
        prop_assert!((got.mean - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!((got.std - std).abs() <= 1e-9 * (1.0 + std));
    }
}

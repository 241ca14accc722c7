use afm_core::spm_io::*;
use afm_core::{HeightMap, MaskStage};
use proptest::prelude::*;

fn any_map(max: usize) -> impl Strategy<Value = HeightMap> {
    (2..max, 2..max, "[a-z0-9_ -]{0,12}", 0.001..100.0f64).prop_flat_map(|(r, c, id, size)| {
        prop::collection::vec(
            prop_oneof![
                -1e6..1e6f64,
                any::<f64>().prop_filter("finite", |v| v.is_finite()),
                Just(0.0),
                Just(-0.0),
                Just(f64::MIN_POSITIVE),
            ],
            r * c,
        )
        .prop_map(move |d| {
            HeightMap::new(r, c, d)
                .unwrap()
                .with_scan_size(size, size * 0.5)
                .unwrap()
                .with_source_id(id.clone())
        })
    })
}

fn valid_file() -> Vec<u8> {
    let map = HeightMap::from_fn(6, 5, |r, c| (r * 5 + c) as f64 * 0.25 - 3.0)
        .unwrap()
        .with_scan_size(2.0, 2.0)
        .unwrap();
    encode_nanoscope(&map, 0.25, 2).unwrap()
}

#[test]
fn nanoscope_round_trip_quantized() {
    let map = HeightMap::from_fn(8, 12, |r, c| r as f64 * 1.5 - c as f64 * 0.5)
        .unwrap()
        .with_scan_size(5.0, 2.5)
        .unwrap();
    for bpp in [2, 4] {
        let (back, meta) = parse_nanoscope(&encode_nanoscope(&map, 0.5, bpp).unwrap()).unwrap();
        assert_eq!(back.data(), map.data());
        assert_eq!((meta.samples_per_line, meta.lines), (12, 8));
        assert_eq!((back.scan_size_x(), back.scan_size_y()), (5.0, 2.5));
    }
}

#[test]
fn huge_z_scale_never_yields_non_finite() {
    let text = String::from_utf8_lossy(&valid_file()).replace("(0.25 nm/LSB)", "(1e308 nm/LSB)");
    let bytes = text.into_bytes();
    // either the header is refused or every height is finite
    if let Ok((map, _)) = parse_nanoscope(&bytes) {
        assert!(map.data().iter().all(|v| v.is_finite()));
    }
}

#[test]
fn malformed_inputs_are_typed_errors() {
    assert_eq!(parse_nanoscope(b"").unwrap_err(), SpmError::MissingHeaderEnd);
    assert!(matches!(
        parse_nanoscope(b"\\*File list\r\n\\Data offset: 10\r\n").unwrap_err(),
        SpmError::MissingHeaderEnd | SpmError::MissingKey(_)
    ));
    let text = String::from_utf8_lossy(&valid_file()).replace("Bytes/pixel: 2", "Bytes/pixel: 3");
    assert_eq!(
        parse_nanoscope(text.as_bytes()).unwrap_err(),
        SpmError::UnsupportedBytesPerPixel(3)
    );
    assert!(matches!(read_txt_matrix("1 2\n3\n").unwrap_err(), SpmError::RaggedRow(_)));
    assert!(matches!(
        read_txt_matrix("1 x\n3 4\n").unwrap_err(),
        SpmError::NonNumericToken { .. }
    ));
    assert!(matches!(
        read_txt_matrix("1 NaN\n3 4\n").unwrap_err(),
        SpmError::NonFiniteValue { .. }
    ));
    assert_eq!(read_txt_matrix("# only comments\n").unwrap_err(), SpmError::EmptyInput);
}

#[test]
fn read_any_dispatches_on_content() {
    let map = HeightMap::from_fn(3, 4, |r, c| (r + c) as f64).unwrap();
    assert_eq!(read_any(write_txt_matrix(&map).as_bytes()).unwrap().data(), map.data());
    assert_eq!(read_any(&encode_nanoscope(&map, 1.0, 4).unwrap()).unwrap().data(), map.data());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn txt_round_trip_is_identity(map in any_map(10)) {
        let back = read_txt_matrix(&write_txt_matrix(&map)).unwrap();
        prop_assert_eq!(back.shape(), map.shape());
        let same = back.data().iter().zip(map.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        prop_assert!(same);
        prop_assert_eq!(back.scan_size_x(), map.scan_size_x());
        prop_assert_eq!(back.scan_size_y(), map.scan_size_y());
        prop_assert_eq!(back.source_id(), map.source_id().trim());
    }

    #[test]
    fn mask_txt_round_trip(bits in prop::collection::vec(any::<bool>(), 12)) {
        let mask = afm_core::BitMask::from_bits(3, 4, bits, MaskStage::Final).unwrap();
        prop_assert_eq!(read_mask_txt(&write_mask_txt(&mask), MaskStage::Final).unwrap(), mask);
    }

    #[test]
    fn corrupted_files_never_yield_non_finite(
        edits in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 0..8),
        cut in prop::option::of(any::<prop::sample::Index>()),
    ) {
        let mut bytes = valid_file();
        for (at, value) in edits {
            let i = at.index(bytes.len());
            bytes[i] = value;
        }
        if let Some(c) = cut {
            bytes.truncate(c.index(bytes.len()));
        }
        if let Ok((map, meta)) = parse_nanoscope(&bytes) {
            prop_assert!(map.data().iter().all(|v| v.is_finite()));
            prop_assert_eq!(map.len(), meta.samples_per_line * meta.lines);
        }
    }

    #[test]
    fn random_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..600)) {
        if let Ok((map, _)) = parse_nanoscope(&bytes) {
            prop_assert!(map.data().iter().all(|v| v.is_finite()));
        }
    }
}

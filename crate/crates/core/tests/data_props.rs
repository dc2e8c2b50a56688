use proptest::prelude::*;
use psm::data::{gen_clusters, load_csv, save_csv, two_views, AugmentPolicy, Split};
use psm::numerics::RngState;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn augmentation_keeps_shape_and_finiteness(
        x in prop::collection::vec(-50.0f64..50.0, 1..40),
        sigma in 0.0f64..2.0, dropout in 0.0f64..0.99, lo in 0.1f64..2.0, span in 0.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let policy = AugmentPolicy { noise_std: sigma, dropout, scale_lo: lo, scale_hi: lo + span };
        let (a, b) = two_views(&x, &policy, &mut RngState::new(seed)).unwrap();
        prop_assert_eq!(a.len(), x.len());
        prop_assert_eq!(b.len(), x.len());
        prop_assert!(a.iter().chain(&b).all(|v| v.is_finite()));
    }

    #[test]
    fn generation_is_pure(c in 2usize..5, n in 1usize..6, d in 2usize..6, sep in 0.5f64..8.0, seed in any::<u64>()) {
        let a = gen_clusters(c, n, d, sep, seed).unwrap();
        let b = gen_clusters(c, n, d, sep, seed).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.labels.iter().all(|&l| (0..c as i64).contains(&l)));
    }

    #[test]
    fn csv_roundtrip_is_tight(c in 2usize..4, n in 1usize..5, d in 2usize..5, seed in any::<u64>()) {
        let data = gen_clusters(c, n, d, 3.0, seed).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        save_csv(&data, &path).unwrap();
        let back = load_csv(&path, Split::Train).unwrap();
        prop_assert_eq!(&back.labels, &data.labels);
        for (a, b) in back.features.as_slice().iter().zip(data.features.as_slice()) {
            prop_assert!((a - b).abs() <= 1e-15 * b.abs());
        }
    }
}

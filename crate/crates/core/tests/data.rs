use ndarray::Array2;
use proptest::prelude::*;
use shike::data::{
    make_longtail_counts, read_archive, split_divisions, subsample_longtail, synth_gaussian_lt, write_archive,
    LabeledDataset, LongTailSpec, RecordLayout, Shape3, SplitTag, SynthOptions,
};

#[test]
fn cifar_style_profiles() {
    // Reference values computed independently from n_max * IF^(-c/(C-1)) rounded half-up.
    let c = make_longtail_counts(10, 5000, 100.0).unwrap();
    assert_eq!(c, vec![5000, 2997, 1797, 1077, 646, 387, 232, 139, 83, 50]);
    let c = make_longtail_counts(10, 5000, 10.0).unwrap();
    assert_eq!(c, vec![5000, 3871, 2997, 2321, 1797, 1391, 1077, 834, 646, 500]);
    let c = make_longtail_counts(100, 500, 100.0).unwrap();
    assert_eq!((c[0], c[99], c.iter().sum::<usize>()), (500, 5, 10899));
}

#[test]
fn rejects_bad_profiles() {
    assert!(make_longtail_counts(10, 50, 100.0).is_err());
    assert!(make_longtail_counts(10, 500, 0.5).is_err());
    assert!(make_longtail_counts(10, 500, f64::NAN).is_err());
    assert!(make_longtail_counts(0, 500, 1.0).is_err());
    assert!(LongTailSpec::from_counts(vec![3, 5]).is_err());
    assert!(LongTailSpec::from_counts(vec![3, 0]).is_err());
}

#[test]
fn division_boundaries() {
    let spec = LongTailSpec::from_counts(vec![101, 100, 20, 19, 1]).unwrap();
    let d = split_divisions(&spec);
    assert_eq!(d.many, vec![0]);
    assert_eq!(d.medium, vec![1, 2]);
    assert_eq!(d.few, vec![3, 4]);
}

#[test]
fn synthetic_splits_are_reproducible() {
    let counts = make_longtail_counts(5, 40, 10.0).unwrap();
    let opts = SynthOptions {
        modes_per_class: 2,
        mode_spread: 1.0,
        test_per_class: 7,
        ..SynthOptions::default()
    };
    let a = synth_gaussian_lt(&counts, 6, 3.0, 11, &opts).unwrap();
    let b = synth_gaussian_lt(&counts, 6, 3.0, 11, &opts).unwrap();
    assert_eq!(a, b);
    let c = synth_gaussian_lt(&counts, 6, 3.0, 12, &opts).unwrap();
    assert_ne!(a.0.inputs(), c.0.inputs());
    assert_eq!(a.0.class_counts(), counts);
    assert_eq!(a.1.class_counts(), vec![7; 5]);
    assert_eq!(a.0.split(), SplitTag::Train);
    assert_eq!(a.1.split(), SplitTag::Test);
}

#[test]
fn cifar_layout_decodes_fine_label() {
    let layout = RecordLayout::cifar100_fine();
    let mut bytes = vec![0u8; 2 * layout.record_size()];
    bytes[0] = 3;
    bytes[1] = 42;
    bytes[2] = 255;
    bytes[layout.record_size() + 1] = 7;
    let (x, y) = read_archive(&bytes, &layout).unwrap();
    assert_eq!(y, vec![42, 7]);
    assert_eq!(x[[0, 0]], 1.0);
    assert_eq!(x.ncols(), 3072);
    assert!(read_archive(&bytes[1..], &layout).is_err());
}

proptest! {
    #[test]
    fn counts_are_monotone_and_hit_endpoints(c in 2usize..120, n_max in 100usize..6000, if_ in 1.0f64..100.0) {
        let counts = make_longtail_counts(c, n_max, if_).unwrap();
        prop_assert_eq!(counts.len(), c);
        prop_assert_eq!(counts[0], n_max);
        prop_assert!(counts.windows(2).all(|w| w[0] >= w[1]));
        let tail = n_max as f64 / if_;
        prop_assert!((counts[c - 1] as f64 - tail).abs() <= 0.5 + 1e-9);
    }

    #[test]
    fn divisions_partition_classes(counts in prop::collection::vec(1usize..300, 1..40)) {
        let mut counts = counts;
        counts.sort_unstable_by(|a, b| b.cmp(a));
        let spec = LongTailSpec::from_counts(counts.clone()).unwrap();
        let d = split_divisions(&spec);
        let mut all: Vec<usize> = d.many.iter().chain(&d.medium).chain(&d.few).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..counts.len()).collect::<Vec<_>>());
        for &c in &d.many { prop_assert!(counts[c] > 100); }
        for &c in &d.medium { prop_assert!((20..=100).contains(&counts[c])); }
        for &c in &d.few { prop_assert!(counts[c] < 20); }
    }

    #[test]
    fn subsample_hits_requested_counts(per in 5usize..30, c in 2usize..8, seed in any::<u64>()) {
        let n = per * c;
        let x = Array2::from_shape_fn((n, 3), |(i, j)| (i * 3 + j) as f64);
        let labels: Vec<usize> = (0..n).map(|i| i % c).collect();
        let src = LabeledDataset::new(x, labels, Shape3::vector(3),
            LongTailSpec::from_counts(vec![per; c]).unwrap(), SplitTag::Test).unwrap();
        let counts: Vec<usize> = (0..c).map(|k| (per >> k).max(1)).collect();
        let sub = subsample_longtail(&src, &counts, seed).unwrap();
        prop_assert_eq!(sub.class_counts(), counts.clone());
        // Every drawn row is a distinct source row with its own label.
        let mut rows: Vec<usize> = sub.inputs().column(0).iter().map(|&v| v as usize / 3).collect();
        for (&r, &y) in rows.iter().zip(sub.labels()) { prop_assert_eq!(r % c, y); }
        rows.sort_unstable();
        rows.dedup();
        prop_assert_eq!(rows.len(), sub.len());
        prop_assert_eq!(subsample_longtail(&src, &counts, seed).unwrap(), sub);
    }

    #[test]
    fn f64_archive_roundtrips(rows in prop::collection::vec((prop::collection::vec(-1e6f64..1e6, 4), 0usize..256), 1..20)) {
        let n = rows.len();
        let x = Array2::from_shape_fn((n, 4), |(i, j)| rows[i].0[j]);
        let y: Vec<usize> = rows.iter().map(|r| r.1).collect();
        let layout = RecordLayout::f64_vectors(4);
        let bytes = write_archive(&x, &y, &layout).unwrap();
        prop_assert_eq!(bytes.len(), n * layout.record_size());
        let (x2, y2) = read_archive(&bytes, &layout).unwrap();
        prop_assert_eq!(x2, x);
        prop_assert_eq!(y2, y);
    }
}

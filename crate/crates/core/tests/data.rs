use fishnet::data::{class_templates, generate_synthetic, Dataset, SyntheticSpec, HEADER_LEN};
use fishnet::Error;
use proptest::prelude::*;

fn nearest(image: &[f32], centers: &[Vec<f32>]) -> usize {
    let dist = |c: &Vec<f32>| -> f64 { c.iter().zip(image).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum() };
    (0..centers.len())
        .min_by(|&a, &b| dist(&centers[a]).total_cmp(&dist(&centers[b])))
        .unwrap()
}

#[test]
fn file_size_follows_header_arithmetic() {
    let d = generate_synthetic(&SyntheticSpec::default());
    assert_eq!(d.len(), 1000);
    let bytes = d.to_bytes().unwrap();
    assert_eq!(bytes.len(), 4 + 2 + 4 + 6 + 2 + 1000 * 3 * 32 * 32 * 4 + 1000 * 4);
    assert_eq!(HEADER_LEN, 18);
    assert_eq!(&bytes[..4], b"FTDS");
    assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
    assert_eq!(u32::from_le_bytes(bytes[6..10].try_into().unwrap()), 1000);
    let dims: Vec<u16> = bytes[10..18].chunks(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();
    assert_eq!(dims, [3, 32, 32, 10]);
    // first pixel and last label, read straight from the byte layout
    assert_eq!(f32::from_le_bytes(bytes[18..22].try_into().unwrap()), d.pixels[0]);
    let n = bytes.len();
    assert_eq!(u32::from_le_bytes(bytes[n - 4..].try_into().unwrap()), 9);
}

#[test]
fn same_seed_gives_identical_bytes() {
    let spec = SyntheticSpec::default();
    let a = generate_synthetic(&spec).to_bytes().unwrap();
    let b = generate_synthetic(&spec).to_bytes().unwrap();
    assert!(a == b);
    let other = generate_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).to_bytes().unwrap();
    assert!(a != other);
    let test_split = generate_synthetic(&SyntheticSpec { split: 1, ..spec }).to_bytes().unwrap();
    assert!(a != test_split);
}

#[test]
fn nearest_template_classifier_exceeds_99_percent() {
    let spec = SyntheticSpec::default();
    let d = generate_synthetic(&spec);
    let templates = class_templates(spec.num_classes, spec.shape, spec.seed);
    let hits = (0..d.len()).filter(|&i| nearest(d.image(i), &templates) == d.labels[i] as usize).count();
    assert!(hits as f64 / d.len() as f64 > 0.99, "{hits}/1000");
}

#[test]
fn class_means_from_train_split_classify_test_split() {
    // no access to the generator's templates: estimate them from data
    let train = generate_synthetic(&SyntheticSpec::default());
    let test = generate_synthetic(&SyntheticSpec { split: 1, per_class: 50, ..Default::default() });
    let per = train.example_len();
    let mut means = vec![vec![0.0f32; per]; 10];
    let mut counts = [0usize; 10];
    for i in 0..train.len() {
        let l = train.labels[i] as usize;
        counts[l] += 1;
        for (m, &p) in means[l].iter_mut().zip(train.image(i)) {
            *m += p;
        }
    }
    for (m, &c) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= c as f32);
    }
    let hits = (0..test.len()).filter(|&i| nearest(test.image(i), &means) == test.labels[i] as usize).count();
    assert!(hits as f64 / test.len() as f64 > 0.99, "{hits}/{}", test.len());
}

#[test]
fn balanced_labels_and_unit_range() {
    let d = generate_synthetic(&SyntheticSpec::default());
    let mut counts = [0; 10];
    d.labels.iter().for_each(|&l| counts[l as usize] += 1);
    assert_eq!(counts, [100; 10]);
    assert!(d.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
}

#[test]
fn channel_stats_standardize_to_zero_mean_unit_std() {
    let d = generate_synthetic(&SyntheticSpec { per_class: 10, ..Default::default() });
    let norm = d.channel_stats();
    let per = d.example_len();
    let hw = per / 3;
    let mut out = vec![0.0f32; per];
    let mut sums = [(0.0f64, 0.0f64); 3];
    for i in 0..d.len() {
        norm.apply(d.image(i), &mut out);
        for c in 0..3 {
            for &v in &out[c * hw..(c + 1) * hw] {
                sums[c].0 += v as f64;
                sums[c].1 += (v as f64).powi(2);
            }
        }
    }
    let n = (d.len() * hw) as f64;
    for (s, s2) in sums {
        let mean = s / n;
        assert!(mean.abs() < 1e-3, "{mean}");
        assert!((s2 / n - mean * mean - 1.0).abs() < 1e-3);
    }
}

#[test]
fn wrong_length_is_rejected() {
    let d = generate_synthetic(&SyntheticSpec { per_class: 2, shape: [1, 4, 4], ..Default::default() });
    let bytes = d.to_bytes().unwrap();
    let mut longer = bytes.clone();
    longer.push(0);
    for b in [&bytes[..bytes.len() - 1], &longer[..], &bytes[..10]] {
        assert!(matches!(Dataset::from_bytes(b), Err(Error::Format(_))));
    }
    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(Dataset::from_bytes(&magic).is_err());
}

#[test]
fn out_of_range_label_is_rejected() {
    let d = generate_synthetic(&SyntheticSpec { per_class: 2, shape: [1, 4, 4], ..Default::default() });
    let mut bytes = d.to_bytes().unwrap();
    let n = bytes.len();
    bytes[n - 4..].copy_from_slice(&10u32.to_le_bytes());
    let err = Dataset::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().contains("label"), "{err}");
}

#[test]
fn out_of_range_pixel_is_rejected() {
    let d = generate_synthetic(&SyntheticSpec { per_class: 2, shape: [1, 4, 4], ..Default::default() });
    let mut bytes = d.to_bytes().unwrap();
    bytes[HEADER_LEN..HEADER_LEN + 4].copy_from_slice(&1.5f32.to_le_bytes());
    assert!(Dataset::from_bytes(&bytes).is_err());
}

#[test]
fn save_and_load_through_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.ftds");
    let d = generate_synthetic(&SyntheticSpec { per_class: 3, shape: [2, 8, 4], ..Default::default() });
    d.save(&path).unwrap();
    assert_eq!(Dataset::load(&path).unwrap(), d);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn bytes_round_trip(
        classes in 2usize..6,
        per_class in 1usize..4,
        c in 1usize..4,
        h in 1usize..9,
        w in 1usize..9,
        seed in 0u64..1000,
    ) {
        let spec = SyntheticSpec { num_classes: classes, per_class, shape: [c, h, w], seed, ..Default::default() };
        let d = generate_synthetic(&spec);
        let bytes = d.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), HEADER_LEN + d.len() * (c * h * w * 4 + 4));
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn truncation_is_always_detected(cut in 0usize..200) {
        let d = generate_synthetic(&SyntheticSpec { per_class: 1, shape: [1, 3, 3], ..Default::default() });
        let bytes = d.to_bytes().unwrap();
        let keep = cut.min(bytes.len() - 1);
        prop_assert!(Dataset::from_bytes(&bytes[..keep]).is_err());
    }
}

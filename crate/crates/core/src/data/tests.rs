use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::metrics::miou;

fn small() -> SyntheticConfig {
    SyntheticConfig {
        num_classes: 10,
        height: 8,
        width: 8,
        channels: 3,
        max_classes_per_image: 3,
        class_count_distribution: vec![0.2, 0.3, 0.5],
        ..SyntheticConfig::default()
    }
}

#[test]
fn default_config_is_valid() {
    SyntheticConfig::default().validate_for_patch(4).unwrap();
    assert!(SyntheticConfig::default().validate_for_patch(5).is_err());
}

#[test]
fn invalid_configs_are_rejected() {
    let cases: Vec<Box<dyn Fn(&mut SyntheticConfig)>> = vec![
        Box::new(|c| c.class_count_distribution = vec![0.5, 0.2, 0.2]),
        Box::new(|c| c.class_count_distribution = vec![0.5, 0.5]),
        Box::new(|c| c.max_classes_per_image = 11),
        Box::new(|c| c.blobs_per_class = [2, 1]),
        Box::new(|c| c.noise_sigma = -1.0),
        Box::new(|c| c.class_frequency_skew = f64::NAN),
        Box::new(|c| c.num_classes = 1),
    ];
    for mutate in cases {
        let mut cfg = small();
        mutate(&mut cfg);
        assert!(matches!(cfg.validate(), Err(Error::Config(_))), "{cfg:?}");
    }
}

#[test]
fn single_class_cap_gives_one_class() {
    let cfg = SyntheticConfig {
        max_classes_per_image: 1,
        class_count_distribution: vec![1.0],
        ..small()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        assert_eq!(sample_class_subset(&cfg, &mut rng).len(), 1);
    }
}

#[test]
fn subsets_are_deterministic_and_distinct() {
    let cfg = SyntheticConfig::default();
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..100).map(|_| sample_class_subset(&cfg, &mut rng)).collect::<Vec<_>>()
    };
    let a = draw(4);
    assert_eq!(a, draw(4));
    for s in &a {
        let mut sorted = s.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), s.len());
        assert!(s.iter().all(|&c| c < cfg.num_classes));
    }
}

#[test]
fn zero_skew_is_uniform_over_classes() {
    let cfg = SyntheticConfig {
        class_frequency_skew: 0.0,
        ..SyntheticConfig::default()
    };
    let k = cfg.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let draws = 100_000;
    let mut counts = vec![0usize; k];
    let mut total = 0usize;
    for _ in 0..draws {
        for c in sample_class_subset(&cfg, &mut rng) {
            counts[c] += 1;
            total += 1;
        }
    }
    // Each class's inclusion per draw is Bernoulli(total / (draws * k)).
    let p = total as f64 / (draws * k) as f64;
    let expect = draws as f64 * p;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (c, &n) in counts.iter().enumerate() {
        assert!((n as f64 - expect).abs() < 3.0 * sigma, "class {c}: {n} vs {expect} +- {sigma}");
    }
}

#[test]
fn positive_skew_favours_low_ids() {
    let cfg = SyntheticConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut counts = vec![0usize; cfg.num_classes];
    for _ in 0..5000 {
        for c in sample_class_subset(&cfg, &mut rng) {
            counts[c] += 1;
        }
    }
    assert!(counts[0] > counts[10] && counts[10] > counts[60]);
}

#[test]
fn noiseless_single_class_is_constant() {
    let cfg = SyntheticConfig {
        noise_sigma: 0.0,
        ..small()
    };
    let sig = cfg.class_signatures();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = render_sample(&[7], &cfg, &sig, &mut rng).unwrap();
    assert!(s.seg_map.iter().all(|&c| c == 7));
    for ch in 0..cfg.channels {
        let plane = &s.image[ch * 64..(ch + 1) * 64];
        assert!(plane.iter().all(|&v| v == sig[7 * cfg.channels + ch]));
    }
}

#[test]
fn render_errors() {
    let cfg = small();
    let sig = cfg.class_signatures();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(render_sample(&[], &cfg, &sig, &mut rng).is_err());
    assert!(render_sample(&[10], &cfg, &sig, &mut rng).is_err());
    assert!(render_sample(&[1], &cfg, &sig[1..], &mut rng).is_err());
    // A 1x1 image cannot show two classes.
    let tiny = SyntheticConfig {
        height: 1,
        width: 1,
        max_render_attempts: 5,
        ..small()
    };
    let sig = tiny.class_signatures();
    assert!(matches!(render_sample(&[1, 2], &tiny, &sig, &mut rng), Err(Error::Config(_))));
}

#[test]
fn samples_satisfy_their_invariants() {
    let cfg = SyntheticConfig::default();
    let sig = cfg.class_signatures();
    for i in 0..1000 {
        let mut rng = cfg.sample_rng(i);
        let classes = sample_class_subset(&cfg, &mut rng);
        let s = render_sample(&classes, &cfg, &sig, &mut rng).unwrap();
        let expect: Vec<bool> = (0..cfg.num_classes).map(|c| classes.contains(&c)).collect();
        assert_eq!(s.multilabel, expect);
        assert_eq!(
            s.multilabel,
            build_multilabel_target(&s.seg_map, cfg.num_classes, cfg.ignore_index()).unwrap()
        );
        assert!(s.present_classes() <= cfg.max_classes_per_image);
        assert_eq!(s.image.len(), cfg.channels * cfg.height * cfg.width);
    }
}

#[test]
fn golden_sample() {
    let cfg = SyntheticConfig::default();
    let ds = generate_dataset(&cfg, 1).unwrap();
    let s = &ds.samples[0];
    let present: Vec<usize> = (0..cfg.num_classes).filter(|&c| s.multilabel[c]).collect();
    let seg_sum: u64 = s.seg_map.iter().map(|&c| c as u64).sum();
    let img_sum: f64 = s.image.iter().map(|&v| v as f64).sum();
    assert_eq!(present, GOLDEN_PRESENT, "{seg_sum} {img_sum:e}");
    assert_eq!(seg_sum, GOLDEN_SEG_SUM);
    assert!((img_sum - GOLDEN_IMAGE_SUM).abs() < 1e-9, "{img_sum:e}");
}

const GOLDEN_PRESENT: &[usize] = &[0, 4, 11, 15, 41];
const GOLDEN_SEG_SUM: u64 = 8475;
const GOLDEN_IMAGE_SUM: f64 = 3.09428903452307e3;

#[test]
fn noiseless_nearest_signature_is_perfect() {
    let cfg = SyntheticConfig {
        noise_sigma: 0.0,
        ..SyntheticConfig::default()
    };
    let sig = cfg.class_signatures();
    let ds = generate_dataset(&cfg, 50).unwrap();
    let (ch, hw) = (cfg.channels, cfg.height * cfg.width);
    for s in &ds.samples {
        let pred: Vec<u16> = (0..hw)
            .map(|p| {
                let dist = |c: usize| -> f32 {
                    (0..ch).map(|k| (s.image[k * hw + p] - sig[c * ch + k]).powi(2)).sum()
                };
                (0..cfg.num_classes).min_by(|&a, &b| dist(a).total_cmp(&dist(b))).unwrap() as u16
            })
            .collect();
        assert_eq!(miou(&pred, &s.seg_map, cfg.num_classes, cfg.ignore_index()).unwrap().miou, 1.0);
    }
}

#[test]
fn file_round_trip_is_bit_exact() {
    let cfg = small();
    let ds = generate_dataset(&cfg, 20).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    assert_eq!(bytes.len(), file_len(20, 3, 8, 8));
    let back = read_dataset(bytes.as_slice()).unwrap();
    assert_eq!(back, ds);
    let mut again = Vec::new();
    write_dataset(&back, &mut again).unwrap();
    assert_eq!(again, bytes);
}

#[test]
fn empty_dataset_has_a_header() {
    let cfg = small();
    let ds = generate_dataset(&cfg, 0).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    assert_eq!(bytes.len(), file_len(0, 3, 8, 8));
    assert_eq!(&bytes[..5], MAGIC);
    assert_eq!(u16::from_le_bytes([bytes[5], bytes[6]]), FORMAT_VERSION);
    assert_eq!(u32::from_le_bytes(bytes[7..11].try_into().unwrap()), 10);
    let back = read_dataset(bytes.as_slice()).unwrap();
    assert!(back.is_empty());
    assert_eq!((back.channels, back.height, back.width), (3, 8, 8));
}

#[test]
fn corrupt_files_are_rejected() {
    let ds = generate_dataset(&small(), 2).unwrap();
    let mut bytes = Vec::new();
    write_dataset(&ds, &mut bytes).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(read_dataset(bad.as_slice()), Err(Error::Format(_))));
    assert!(read_dataset(&bytes[..bytes.len() - 1]).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(read_dataset(long.as_slice()).is_err());
    let mut wrong_version = bytes.clone();
    wrong_version[5] = 9;
    assert!(read_dataset(wrong_version.as_slice()).is_err());
    assert!(read_dataset(&bytes[..10]).is_err());
}

#[test]
fn generation_is_deterministic() {
    let cfg = small();
    let write = |ds: &Dataset| {
        let mut b = Vec::new();
        write_dataset(ds, &mut b).unwrap();
        b
    };
    let a = write(&generate_dataset(&cfg, 30).unwrap());
    assert_eq!(a, write(&generate_dataset(&cfg, 30).unwrap()));
    let other = SyntheticConfig { seed: 1, ..cfg.clone() };
    assert_ne!(a, write(&generate_dataset(&other, 30).unwrap()));
    // Samples depend only on their own index.
    let tail = generate_range(&cfg, 10, 20).unwrap();
    assert_eq!(tail.samples[..], generate_dataset(&cfg, 30).unwrap().samples[10..]);
}

fn with_counts(counts: &[usize]) -> Dataset {
    let k = 5;
    let samples = counts
        .iter()
        .map(|&c| {
            let seg_map: Vec<u16> = (0..4).map(|p| (p % c) as u16).collect();
            SyntheticSample {
                image: vec![0.0; 4],
                multilabel: build_multilabel_target(&seg_map, k, k as u16).unwrap(),
                seg_map,
            }
        })
        .collect();
    Dataset {
        num_classes: k,
        channels: 1,
        height: 2,
        width: 2,
        samples,
    }
}

#[test]
fn hand_counted_distribution() {
    let rows = distribution_report(&with_counts(&[1, 2, 2]));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].classes, 1);
    assert!((rows[0].cum_percent - 100.0 / 3.0).abs() < 1e-12);
    assert_eq!(rows[1].cum_percent, 100.0);
    let rows = distribution_report(&with_counts(&[1, 1, 1]));
    assert_eq!(rows, vec![DistributionRow { classes: 1, cum_percent: 100.0 }]);
}

#[test]
fn distribution_csv_round_trip() {
    let rows = distribution_report(&with_counts(&[1, 3, 2, 4, 4]));
    let mut out = Vec::new();
    distribution_report_csv(&rows, &mut out).unwrap();
    let text = String::from_utf8(out.clone()).unwrap();
    assert!(text.starts_with("classes,cum_percent\n"));
    assert_eq!(read_distribution_csv(out.as_slice()).unwrap(), rows);
    assert!(rows.windows(2).all(|w| w[0].cum_percent <= w[1].cum_percent));
    assert_eq!(rows.last().unwrap().cum_percent, 100.0);
}

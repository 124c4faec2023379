//! Generative checks of invariants that span modules.

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rankseg::data::{file_len, generate_range, read_dataset, write_dataset, SyntheticConfig};
use rankseg::head::{
    build_multilabel_target, predict_classes, rank_adaptive_pixel_classify, rank_adaptive_softmax, CategoryTable,
    RankTemperatures, SelectionMode, SelectionResult,
};
use rankseg::metrics::ConfusionMatrix;
use rankseg::nn::{normal_tensor, DecoderLayer, EncoderLayer};
use rankseg::tensor::{ParamGroup, ParamStore, Tape};

fn synthetic(k: usize, c_max: usize, side: usize, seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        num_classes: k,
        height: side,
        width: side,
        channels: 3,
        max_classes_per_image: c_max,
        class_count_distribution: vec![1.0 / c_max as f64; c_max],
        seed,
        ..SyntheticConfig::default()
    }
}

fn permute_rows(data: &[f64], d: usize, perm: &[usize]) -> Vec<f64> {
    perm.iter().flat_map(|&r| data[r * d..(r + 1) * d].iter().copied()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rank_adaptive_rows_are_distributions(
        rows in 1usize..6,
        logits in proptest::collection::vec(-1.0f64..1.0, 48),
        log_inv in proptest::collection::vec(-3.0f64..4.0, 8),
        kappa in 1usize..8,
    ) {
        let mut tape = Tape::<f64>::new();
        let s = tape.constant(&[rows, kappa], logits[..rows * kappa].to_vec()).unwrap();
        let inv: Vec<f64> = log_inv[..kappa].iter().map(|v| v.exp()).collect();
        let t = tape.constant(&[kappa], inv).unwrap();
        let (_, z) = rank_adaptive_softmax(&mut tape, s, t, None).unwrap();
        for row in tape.value(z).chunks(kappa) {
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_match_their_labels(k in 2usize..12, c_max in 1usize..4, seed in 0u64..1000, first in 0u64..1000) {
        let c_max = c_max.min(k);
        let cfg = synthetic(k, c_max, 8, seed);
        let d = generate_range(&cfg, first, 3).unwrap();
        for s in &d.samples {
            let target = build_multilabel_target(&s.seg_map, k, d.ignore_index()).unwrap();
            prop_assert_eq!(&target, &s.multilabel);
            prop_assert!(s.present_classes() >= 1 && s.present_classes() <= c_max);
            prop_assert_eq!(s.image.len(), 3 * 8 * 8);
        }
    }

    #[test]
    fn dataset_bytes_round_trip(k in 2usize..10, side in 1usize..4, n in 0usize..4, seed in 0u64..100) {
        let cfg = synthetic(k, 1, 4 * side, seed);
        let d = generate_range(&cfg, 0, n).unwrap();
        let mut bytes = Vec::new();
        write_dataset(&d, &mut bytes).unwrap();
        prop_assert_eq!(bytes.len(), file_len(n, 3, 4 * side, 4 * side));
        let back = read_dataset(bytes.as_slice()).unwrap();
        prop_assert_eq!(back, d);
    }

    #[test]
    fn confusion_counts_every_labelled_pixel(
        pairs in proptest::collection::vec((0u16..6, proptest::option::weighted(0.8, 0u16..6)), 0..40),
    ) {
        let pred: Vec<u16> = pairs.iter().map(|p| p.0).collect();
        let gt: Vec<u16> = pairs.iter().map(|p| p.1.unwrap_or(255)).collect();
        let mut cm = ConfusionMatrix::new(6);
        cm.accumulate(&pred, &gt, 255).unwrap();
        prop_assert_eq!(cm.total(), gt.iter().filter(|&&g| g != 255).count() as u64);
    }

    #[test]
    fn encoder_is_equivariant_and_decoder_ignores_context_order(seed in 0u64..1000, n in 2usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let enc = EncoderLayer::new(&mut store, "enc", 8, 2, 16, ParamGroup::SegHead, &mut rng).unwrap();
        let dec = DecoderLayer::new(&mut store, "dec", 8, 2, 16, ParamGroup::MlHead, &mut rng).unwrap();
        let x = normal_tensor::<f64, _>(&[n, 8], 1.0, &mut rng);
        let q = normal_tensor::<f64, _>(&[3, 8], 1.0, &mut rng);
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let xp = permute_rows(x.data(), 8, &perm);

        let mut tape = Tape::new();
        let a = tape.leaf(&x);
        let b = tape.constant(&[n, 8], xp.clone()).unwrap();
        let ya = enc.forward(&mut tape, &store, a).unwrap();
        let yb = enc.forward(&mut tape, &store, b).unwrap();
        let expect = permute_rows(tape.value(ya), 8, &perm);
        for (u, v) in tape.value(yb).iter().zip(&expect) {
            prop_assert!((u - v).abs() < 1e-12);
        }

        let qv = tape.leaf(&q);
        let da = dec.forward(&mut tape, &store, qv, a).unwrap();
        let db = dec.forward(&mut tape, &store, qv, b).unwrap();
        for (u, v) in tape.value(da).iter().zip(tape.value(db)) {
            prop_assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_temperature_predictions_ignore_selection_order(seed in 0u64..1000, kappa in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::<f64>::new();
        let table = CategoryTable::new(&mut store, "table", 6, 8, false, &mut rng).unwrap();
        let temps = RankTemperatures::new(&mut store, "tau", 6, true).unwrap();
        let psi = vec![EncoderLayer::new(&mut store, "psi", 8, 2, 16, ParamGroup::SegHead, &mut rng).unwrap()];
        store.get_mut(table.w).tensor = normal_tensor(&[6, 8], 1.0, &mut rng).with_requires_grad(true);
        let tokens = normal_tensor::<f64, _>(&[5, 8], 1.0, &mut rng);
        let mut ids: Vec<usize> = (0..6).collect();
        ids.shuffle(&mut rng);
        ids.truncate(kappa);
        let sel = SelectionResult { scores: vec![0.0; kappa], indices: ids, mode: SelectionMode::FixedK };
        let mut order: Vec<usize> = (0..kappa).collect();
        order.shuffle(&mut rng);
        let predict = |s: &SelectionResult| {
            let mut tape = Tape::new();
            let t = tape.leaf(&tokens);
            let cats = table.embeddings(&mut tape, &store);
            let out = rank_adaptive_pixel_classify(&mut tape, &store, t, cats, s, &temps, &psi, None).unwrap();
            predict_classes(&tape, out.z, s)
        };
        prop_assert_eq!(predict(&sel), predict(&sel.reordered(&order)));
    }
}

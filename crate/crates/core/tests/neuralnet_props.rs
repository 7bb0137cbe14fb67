mod common;

use common::*;
use ftl_core::neuralnet::*;
use proptest::prelude::*;

fn arb_config() -> impl Strategy<Value = ComboNetConfig> {
    (
        1usize..10,
        1usize..5,
        0usize..3,
        prop::sample::select(vec![1usize, 3, 5]),
        prop::collection::vec(1usize..12, 0..3),
        2usize..6,
        any::<bool>(),
        any::<u64>(),
    )
        .prop_map(|(d, s, r, k, hidden, c, gap, seed)| ComboNetConfig {
            input_dim: d,
            stem_channels: s,
            residual_blocks: r,
            kernel_size: k,
            dense_hidden: hidden,
            n_classes: c,
            pooling: if gap {
                Pooling::GlobalAverage
            } else {
                Pooling::Flatten
            },
            init_seed: seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn weight_file_round_trip_is_bit_exact(cfg in arb_config(), seed in any::<u64>()) {
        let w = random_model(&cfg, seed);
        let bytes = serialize_weights(&w);
        let back = deserialize_weights(&bytes, &cfg).unwrap();
        prop_assert_eq!(back.fingerprint, w.fingerprint);
        for (a, b) in back.values().zip(w.values()) {
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
        prop_assert_eq!(serialize_weights(&back), bytes);
    }

    #[test]
    fn softmax_rows_are_distributions_and_loss_non_negative(
        logits in prop::collection::vec(-30.0f64..30.0, 12),
        labels in prop::collection::vec(0usize..4, 3),
    ) {
        let p = softmax(&logits, 4);
        for row in p.chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        }
        let (loss, _) = cross_entropy_loss(&logits, &labels, 4).unwrap();
        prop_assert!(loss >= 0.0);
    }

    #[test]
    fn argmax_ignores_constant_shift(row in prop::collection::vec(-5.0f64..5.0, 1..8), shift in -100.0f64..100.0) {
        let shifted: Vec<f64> = row.iter().map(|v| v + shift).collect();
        let (a, b) = (argmax(&row), argmax(&shifted));
        // Rounding in the shift can only merge near-ties.
        prop_assert!(a == b || (row[a] - row[b]).abs() < 1e-12);
    }

    #[test]
    fn init_and_training_are_reproducible(cfg in arb_config()) {
        prop_assert_eq!(init_model(&cfg).unwrap(), init_model(&cfg).unwrap());
        let (x, y) = random_batch(cfg.input_dim, cfg.n_classes, 10, cfg.init_seed);
        let data = ftl_core::dataset_io::Dataset::new(
            x,
            cfg.input_dim,
            y,
            (0..cfg.input_dim).map(|j| ftl_core::dataset_io::FeatureMeta::numeric(format!("f{j}"))).collect(),
            (0..cfg.n_classes).map(|c| format!("c{c}")).collect(),
        ).unwrap();
        let params = TrainParams { epochs: 2, batch_size: 4, learning_rate: 0.05, shuffle_seed: 1 };
        let w = init_model(&cfg).unwrap();
        let a = train_epochs(&cfg, &w, &data, &params).unwrap();
        let b = train_epochs(&cfg, &w, &data, &params).unwrap();
        prop_assert_eq!(serialize_weights(&a.weights), serialize_weights(&b.weights));
    }
}

#[test]
fn corrupted_files_are_rejected() {
    let cfg = gradcheck_config();
    let w = random_model(&cfg, 1);
    let bytes = serialize_weights(&w);

    let mut magic = bytes.clone();
    magic[0] ^= 0xff;
    assert_eq!(deserialize_weights(&magic, &cfg), Err(NetError::BadMagic));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(
        deserialize_weights(&version, &cfg),
        Err(NetError::UnsupportedVersion(_))
    ));

    let mut fp = bytes.clone();
    fp[6] ^= 0x01;
    assert!(matches!(
        deserialize_weights(&fp, &cfg),
        Err(NetError::FingerprintMismatch { .. })
    ));

    for len in 0..bytes.len() {
        assert!(
            deserialize_weights(&bytes[..len], &cfg).is_err(),
            "truncated at {len}"
        );
    }
    let mut long = bytes.clone();
    long.push(0);
    assert!(deserialize_weights(&long, &cfg).is_err());
}

#[test]
fn weights_from_another_architecture_are_rejected() {
    let cfg = gradcheck_config();
    let bytes = serialize_weights(&random_model(&cfg, 2));
    let other = ComboNetConfig {
        dense_hidden: vec![17],
        ..cfg.clone()
    };
    assert!(matches!(
        deserialize_weights(&bytes, &other),
        Err(NetError::FingerprintMismatch { .. })
    ));
    let reseeded = ComboNetConfig {
        init_seed: 99,
        ..cfg.clone()
    };
    assert!(deserialize_weights(&bytes, &reseeded).is_ok());
}

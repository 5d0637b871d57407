use proptest::prelude::*;

use dcnet::config::{config_hash, parse_config, set_key, to_config_string};
use dcnet::inference::{a_last_a_inc, AccMatrix};
use dcnet::model::{accumulate, gate_gradients, weight_gate, Activation, MaskedNetwork, NetworkSpec};
use dcnet::numerics::{Mat, RngStream};
use dcnet::trainer::ExperimentConfig;

fn lower_triangle() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..7).prop_flat_map(|n| {
        (1..=n)
            .map(|k| prop::collection::vec(0.0f64..=1.0, k))
            .collect::<Vec<_>>()
    })
}

fn binary_masks(widths: Vec<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
    widths
        .into_iter()
        .map(|w| prop::collection::vec(prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }), w))
        .collect::<Vec<_>>()
}

fn small_net(seed: u64) -> (MaskedNetwork, Mat) {
    let spec = NetworkSpec {
        input_dim: 4,
        hidden_widths: vec![5],
        feature_dim: 6,
        embed_dim: 3,
        activation: Activation::Relu,
        use_bias: true,
    };
    let mut rng = RngStream::new(seed, 1);
    let net = MaskedNetwork::new(spec, &mut rng).unwrap();
    let x = Mat::from_vec(7, 4, rng.normal_vec(28)).unwrap();
    (net, x)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn a_last_and_a_inc_are_row_means(rows in lower_triangle()) {
        let m = AccMatrix::from_rows(rows.clone()).unwrap();
        let (last, inc) = a_last_a_inc(&m).unwrap();
        let means: Vec<f64> = rows.iter().map(|r| r.iter().sum::<f64>() / r.len() as f64).collect();
        prop_assert!((last - means[means.len() - 1]).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&last) && (0.0..=1.0).contains(&inc));
        let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(inc >= lo - 1e-12 && inc <= hi + 1e-12);
    }

    #[test]
    fn ragged_rows_are_rejected(rows in lower_triangle(), extra in 0.0f64..1.0) {
        let mut bad = rows;
        let last = bad.len() - 1;
        bad[last].push(extra);
        prop_assert!(AccMatrix::from_rows(bad).is_err());
    }

    #[test]
    fn config_text_round_trips(
        seed in 0u64..1_000_000,
        lr in 1e-4f64..1.0,
        tau0 in 0.05f64..1.0,
        hidden in 2usize..200,
        tasks in 1usize..9,
        bias in prop::bool::ANY,
    ) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        set_key(&mut cfg, "train.lr", &lr.to_string()).unwrap();
        set_key(&mut cfg, "temperature.tau0", &tau0.to_string()).unwrap();
        set_key(&mut cfg, "network.hidden", &hidden.to_string()).unwrap();
        set_key(&mut cfg, "data.tasks", &tasks.to_string()).unwrap();
        set_key(&mut cfg, "network.bias", &bias.to_string()).unwrap();
        let text = to_config_string(&cfg);
        let back = parse_config(&text, "round trip").unwrap();
        prop_assert_eq!(to_config_string(&back), text);
        prop_assert_eq!(config_hash(&back), config_hash(&cfg));
    }

    #[test]
    fn accumulated_masks_only_grow(a in binary_masks(vec![5, 6]), b in binary_masks(vec![5, 6])) {
        let acc = accumulate(&a, &b);
        for l in 0..acc.len() {
            for i in 0..acc[l].len() {
                prop_assert!(acc[l][i] >= a[l][i] && acc[l][i] >= b[l][i]);
            }
        }
        prop_assert_eq!(accumulate(&acc, &b), acc.clone());
        prop_assert_eq!(accumulate(&a, &b), accumulate(&b, &a));
    }

    #[test]
    fn gated_gradients_vanish_on_frozen_weights(seed in 0u64..500, acc in binary_masks(vec![5, 6])) {
        let (net, x) = small_net(seed);
        let gates = net.open_gates();
        let fwd = net.forward(&x, &gates).unwrap();
        let mut rng = RngStream::new(seed, 2);
        let dz = Mat::from_vec(7, 3, rng.normal_vec(21)).unwrap();
        let raw = net.backward(&fwd, &gates, &dz, None);
        let gated = gate_gradients(&raw, &acc);
        for (l, (g, r)) in gated.weights.iter().zip(&raw.weights).enumerate() {
            for i in 0..g.rows() {
                for j in 0..g.cols() {
                    let gate = weight_gate(&acc, l, i, j);
                    prop_assert!(gate == 0.0 || gate == 1.0);
                    prop_assert_eq!(g[(i, j)], gate * r[(i, j)]);
                }
            }
        }
        prop_assert_eq!(gate_gradients(&gated, &acc), gated);
    }
}

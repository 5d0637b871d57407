#![allow(dead_code)]

use dcnet::config::{parse_config, set_key};
use dcnet::trainer::ExperimentConfig;

/// Three 2-class tasks, small enough to train in well under a second.
pub const SMALL: &str = "
data.tasks = 3
data.train_per_class = 60
data.test_per_class = 40
data.input_dim = 8
network.hidden = 16
network.feature_dim = 16
network.embed_dim = 8
network.bias = false
train.epochs_ioe = 10
train.epochs_dac = 6
train.lambda_hat_first = 0.375
train.lambda_hat = 0.25
head.epochs = 20
";

pub fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = parse_config(SMALL, "small").expect("small config");
    cfg.seed = seed;
    cfg
}

/// [`small`] with `key = value` overrides, one per line.
pub fn small_with(seed: u64, overrides: &str) -> ExperimentConfig {
    let mut cfg = small(seed);
    for line in overrides.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').expect("key = value");
        set_key(&mut cfg, k.trim(), v.trim()).expect("valid override");
    }
    cfg
}

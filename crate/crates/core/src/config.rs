//! Flat `section.key = value` configuration files.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and
//! starts from [`ExperimentConfig::default`]; unknown or repeated keys are
//! errors that name the line. Optional values accept `none`.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::trainer::ExperimentConfig;

/// Desk-scale configuration used by the end-to-end checks.
pub const DESK_CONFIG: &str = include_str!("../configs/desk.cfg");

fn parse<T: FromStr>(value: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| format!("cannot parse `{value}`: {e}"))
}

fn parse_bool(value: &str) -> std::result::Result<bool, String> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        other => Err(format!("expected a boolean, got `{other}`")),
    }
}

fn parse_opt<T: FromStr>(value: &str) -> std::result::Result<Option<T>, String>
where
    T::Err: std::fmt::Display,
{
    if value == "none" {
        Ok(None)
    } else {
        parse(value).map(Some)
    }
}

fn parse_list(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.is_empty() || value == "none" {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(v.trim())).collect()
}

fn opt_string<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

/// Sets one key. Returns a message on a bad key or value.
pub fn set_key(cfg: &mut ExperimentConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    let d = &mut cfg.data;
    let n = &mut cfg.network;
    let t = &mut cfg.train;
    let tc = &mut cfg.temperature;
    let h = &mut cfg.head;
    match key {
        "seed" => cfg.seed = parse(value)?,
        "data.seed" => cfg.data_seed = parse_opt(value)?,
        "data.generator" => d.generator = parse(value)?,
        "data.tasks" => d.tasks = parse(value)?,
        "data.classes_per_task" => d.classes_per_task = parse(value)?,
        "data.train_per_class" => d.samples_per_class = parse(value)?,
        "data.test_per_class" => d.test_per_class = parse(value)?,
        "data.input_dim" => d.input_dim = parse(value)?,
        "data.noise" => d.noise = parse(value)?,
        "data.separation" => d.separation = parse(value)?,
        "network.hidden" => n.hidden_widths = parse_list(value)?,
        "network.feature_dim" => n.feature_dim = parse(value)?,
        "network.embed_dim" => n.embed_dim = parse(value)?,
        "network.activation" => n.activation = parse(value)?,
        "network.bias" => n.use_bias = parse_bool(value)?,
        "basis.max_cosine" => cfg.basis.max_cosine = parse(value)?,
        "basis.step_size" => cfg.basis.step_size = parse(value)?,
        "basis.max_iterations" => cfg.basis.max_iterations = parse(value)?,
        "train.epochs_ioe" => t.epochs_ioe = parse(value)?,
        "train.epochs_dac" => t.epochs_dac = parse(value)?,
        "train.dac_start" => t.dac_start = parse_opt(value)?,
        "train.batch_size" => t.batch_size = parse(value)?,
        "train.lr" => t.lr = parse(value)?,
        "train.lr_min" => t.lr_min = parse(value)?,
        "train.momentum" => t.momentum = parse(value)?,
        "train.weight_decay" => t.weight_decay = parse(value)?,
        "train.lambda" => t.lambda = parse(value)?,
        "train.lambda_hat_first" => t.lambda_hat_first = parse(value)?,
        "train.lambda_hat" => t.lambda_hat = parse(value)?,
        "train.s_max" => t.s_max = parse(value)?,
        "temperature.tau_ioe" => tc.tau_ioe = parse(value)?,
        "temperature.tau0" => tc.tau0 = parse(value)?,
        "temperature.tau_min" => tc.tau_min = parse(value)?,
        "temperature.tau_max" => tc.tau_max = parse(value)?,
        "temperature.include_current_in_avg" => tc.include_current_in_avg = parse_bool(value)?,
        "temperature.fixed" => tc.fixed = parse_bool(value)?,
        "ablation.use_ioe" => cfg.ablation.use_ioe = parse_bool(value)?,
        "ablation.use_dac" => cfg.ablation.use_dac = parse_bool(value)?,
        "ablation.ioe_all_bases" => cfg.ablation.ioe_all_bases = parse_bool(value)?,
        "head.epochs" => h.epochs = parse(value)?,
        "head.lr" => h.lr = parse(value)?,
        "head.momentum" => h.momentum = parse(value)?,
        "head.batch_size" => h.batch_size = parse(value)?,
        "head.weight_decay" => h.weight_decay = parse(value)?,
        "eval.rule" => cfg.rule = parse(value)?,
        "output.dir" => cfg.output_dir = parse_opt::<PathBuf>(value)?,
        "output.checkpoints" => cfg.checkpoints = parse_bool(value)?,
        _ => return Err("unknown key".into()),
    }
    Ok(())
}

/// Every key with its current value, in file order.
pub fn config_pairs(cfg: &ExperimentConfig) -> Vec<(&'static str, String)> {
    let d = &cfg.data;
    let n = &cfg.network;
    let t = &cfg.train;
    let tc = &cfg.temperature;
    let h = &cfg.head;
    let hidden: Vec<String> = n.hidden_widths.iter().map(usize::to_string).collect();
    vec![
        ("seed", cfg.seed.to_string()),
        ("data.seed", opt_string(&cfg.data_seed)),
        ("data.generator", d.generator.name().to_string()),
        ("data.tasks", d.tasks.to_string()),
        ("data.classes_per_task", d.classes_per_task.to_string()),
        ("data.train_per_class", d.samples_per_class.to_string()),
        ("data.test_per_class", d.test_per_class.to_string()),
        ("data.input_dim", d.input_dim.to_string()),
        ("data.noise", d.noise.to_string()),
        ("data.separation", d.separation.to_string()),
        (
            "network.hidden",
            if hidden.is_empty() {
                "none".into()
            } else {
                hidden.join(",")
            },
        ),
        ("network.feature_dim", n.feature_dim.to_string()),
        ("network.embed_dim", n.embed_dim.to_string()),
        ("network.activation", n.activation.name().to_string()),
        ("network.bias", n.use_bias.to_string()),
        ("basis.max_cosine", cfg.basis.max_cosine.to_string()),
        ("basis.step_size", cfg.basis.step_size.to_string()),
        ("basis.max_iterations", cfg.basis.max_iterations.to_string()),
        ("train.epochs_ioe", t.epochs_ioe.to_string()),
        ("train.epochs_dac", t.epochs_dac.to_string()),
        ("train.dac_start", opt_string(&t.dac_start)),
        ("train.batch_size", t.batch_size.to_string()),
        ("train.lr", t.lr.to_string()),
        ("train.lr_min", t.lr_min.to_string()),
        ("train.momentum", t.momentum.to_string()),
        ("train.weight_decay", t.weight_decay.to_string()),
        ("train.lambda", t.lambda.to_string()),
        ("train.lambda_hat_first", t.lambda_hat_first.to_string()),
        ("train.lambda_hat", t.lambda_hat.to_string()),
        ("train.s_max", t.s_max.to_string()),
        ("temperature.tau_ioe", tc.tau_ioe.to_string()),
        ("temperature.tau0", tc.tau0.to_string()),
        ("temperature.tau_min", tc.tau_min.to_string()),
        ("temperature.tau_max", tc.tau_max.to_string()),
        (
            "temperature.include_current_in_avg",
            tc.include_current_in_avg.to_string(),
        ),
        ("temperature.fixed", tc.fixed.to_string()),
        ("ablation.use_ioe", cfg.ablation.use_ioe.to_string()),
        ("ablation.use_dac", cfg.ablation.use_dac.to_string()),
        ("ablation.ioe_all_bases", cfg.ablation.ioe_all_bases.to_string()),
        ("head.epochs", h.epochs.to_string()),
        ("head.lr", h.lr.to_string()),
        ("head.momentum", h.momentum.to_string()),
        ("head.batch_size", h.batch_size.to_string()),
        ("head.weight_decay", h.weight_decay.to_string()),
        ("eval.rule", cfg.rule.name().to_string()),
        (
            "output.dir",
            cfg.output_dir
                .as_ref()
                .map_or("none".into(), |p| p.display().to_string()),
        ),
        ("output.checkpoints", cfg.checkpoints.to_string()),
    ]
}

/// Parses config text; `origin` names the source in error messages.
pub fn parse_config(text: &str, origin: &str) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |key: &str, msg: String| Error::ConfigParse {
            path: origin.to_string(),
            line: i + 1,
            key: key.to_string(),
            msg,
        };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| err(line, "expected `key = value`".into()))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(err(key, "key is set twice".into()));
        }
        set_key(&mut cfg, key, value).map_err(|m| err(key, m))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&text, &path.display().to_string())
}

/// Canonical text form; parses back to an equal config.
pub fn to_config_string(cfg: &ExperimentConfig) -> String {
    let mut out = String::new();
    let mut section = "";
    for (key, value) in config_pairs(cfg) {
        let s = key.split_once('.').map_or("", |(s, _)| s);
        if s != section {
            out.push('\n');
            section = s;
        }
        let _ = writeln!(out, "{key} = {value}");
    }
    out.trim_start().to_string()
}

/// SHA-256 of the canonical text form, hex encoded.
pub fn config_hash(cfg: &ExperimentConfig) -> String {
    hex::encode(Sha256::digest(to_config_string(cfg).as_bytes()))
}

/// Keys whose values differ, as `(key, a, b)`.
pub fn config_diff(a: &ExperimentConfig, b: &ExperimentConfig) -> Vec<(&'static str, String, String)> {
    config_pairs(a)
        .into_iter()
        .zip(config_pairs(b))
        .filter(|((_, va), (_, vb))| va != vb)
        .map(|((k, va), (_, vb))| (k, va, vb))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut cfg = ExperimentConfig::default();
        cfg.train.dac_start = Some(7);
        cfg.data_seed = Some(11);
        cfg.network.hidden_widths = vec![8, 4];
        cfg.train.lr = 0.1 + 0.2;
        let text = to_config_string(&cfg);
        assert_eq!(parse_config(&text, "x").unwrap(), cfg);
        assert_eq!(parse_config("", "x").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn desk_config_parses() {
        parse_config(DESK_CONFIG, "desk.cfg").unwrap();
    }

    #[test]
    fn errors_name_line_and_key() {
        let err = parse_config("seed = 1\n# note\ntrain.bogus = 3\n", "c.cfg").unwrap_err();
        match err {
            Error::ConfigParse { path, line, key, .. } => {
                assert_eq!((path.as_str(), line, key.as_str()), ("c.cfg", 3, "train.bogus"));
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_config("train.lr = fast", "c.cfg").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 1, .. }));
        let err = parse_config("seed = 1\nseed = 2", "c.cfg").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 2, .. }));
        let err = parse_config("just words", "c.cfg").unwrap_err();
        assert!(matches!(err, Error::ConfigParse { line: 1, .. }));
    }

    #[test]
    fn diff_lists_changed_keys() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.train.lambda = 2.0;
        b.temperature.fixed = true;
        let keys: Vec<&str> = config_diff(&a, &b).into_iter().map(|(k, _, _)| k).collect();
        assert_eq!(keys, vec!["train.lambda", "temperature.fixed"]);
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}

//! Flat `key = value` configuration files.
//!
//! One pair per line; `#` starts a comment; keys are case-insensitive.
//! Unknown keys are rejected.
//!
//! ```text
//! variant = DeepICF
//! k = 16
//! layers = 3          # tower sizes derived from k
//! alpha = 0.4
//! lr = 0.01
//! ns = 4
//! epochs = 50
//! pretrain = true
//! pretrain_epochs = 30
//! ```

use std::fs;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{tower_layer_sizes, ModelConfig, Variant};

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: invalid value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("line {line}: invalid boolean {value:?} for {key}"))),
    }
}

pub fn parse_config(text: &str) -> Result<ModelConfig> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
        pairs.push((n + 1, key.trim().to_ascii_lowercase(), value.trim().to_string()));
    }

    let lookup = |name: &str| pairs.iter().rev().find(|(_, k, _)| k == name);
    let variant = match lookup("variant") {
        Some((line, key, value)) => parse_value::<Variant>(key, value, *line)
            .map_err(|_| Error::Config(format!("line {line}: unknown variant {value:?}")))?,
        None => Variant::Fism,
    };
    let k = match lookup("k") {
        Some((line, key, value)) => parse_value(key, value, *line)?,
        None => 16,
    };
    let mut config = ModelConfig::new(variant, k);
    let mut depth: Option<usize> = None;
    let mut sizes: Option<Vec<usize>> = None;

    for (line, key, value) in &pairs {
        let line = *line;
        match key.as_str() {
            "variant" | "k" => {}
            "k_prime" | "attention_size" => config.k_prime = parse_value(key, value, line)?,
            "layers" | "l" | "depth" => depth = Some(parse_value(key, value, line)?),
            "layer_sizes" => {
                let parsed = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s, line))
                    .collect::<Result<Vec<usize>>>()?;
                sizes = Some(parsed);
            }
            "alpha" => config.alpha = parse_value(key, value, line)?,
            "beta" => config.beta = parse_value(key, value, line)?,
            "lambda" => config.lambda = parse_value(key, value, line)?,
            "reg_embeddings" => config.reg_embeddings = parse_bool(key, value, line)?,
            "use_bias" => config.use_bias = parse_bool(key, value, line)?,
            "ns" | "num_negatives" => config.num_negatives = parse_value(key, value, line)?,
            "lr" | "learning_rate" => config.lr = parse_value(key, value, line)?,
            "epsilon" => config.epsilon = parse_value(key, value, line)?,
            "batch_size" => config.batch_size = parse_value(key, value, line)?,
            "epochs" => config.epochs = parse_value(key, value, line)?,
            "seed" => config.seed = parse_value(key, value, line)?,
            "init_std" => config.init_std = parse_value(key, value, line)?,
            "pretrain" => config.pretrain = parse_bool(key, value, line)?,
            "pretrain_epochs" => config.pretrain_epochs = parse_value(key, value, line)?,
            "pretrain_lr" => config.pretrain_lr = parse_value(key, value, line)?,
            "eval_every" => config.eval_every = parse_value(key, value, line)?,
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
    }

    match (variant, depth, sizes) {
        (Variant::Fism, Some(d), _) if d > 0 => {
            return Err(Error::Config("FISM has no hidden layers".into()));
        }
        (Variant::Fism, _, Some(s)) if !s.is_empty() => {
            return Err(Error::Config("FISM has no hidden layers".into()));
        }
        (Variant::Fism, _, _) => {}
        (_, Some(d), Some(s)) => {
            if s.len() != d {
                return Err(Error::Config(format!(
                    "layers = {d} but layer_sizes lists {} sizes",
                    s.len()
                )));
            }
            config.layer_sizes = s;
        }
        (_, None, Some(s)) => config.layer_sizes = s,
        (_, Some(d), None) => config.layer_sizes = tower_layer_sizes(config.k, d),
        (_, None, None) => {}
    }
    config.validate()?;
    Ok(config)
}

pub fn read_config(path: &Path) -> Result<ModelConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Renders `config` in the format [`parse_config`] reads back.
pub fn config_to_text(config: &ModelConfig) -> String {
    let sizes: Vec<String> = config.layer_sizes.iter().map(|d| d.to_string()).collect();
    let mut lines = vec![
        format!("variant = {}", config.variant),
        format!("k = {}", config.k),
        format!("k_prime = {}", config.k_prime),
        format!("layers = {}", config.layer_sizes.len()),
    ];
    if !sizes.is_empty() {
        lines.push(format!("layer_sizes = {}", sizes.join(",")));
    }
    lines.extend([
        format!("alpha = {:?}", config.alpha),
        format!("beta = {:?}", config.beta),
        format!("lambda = {:?}", config.lambda),
        format!("reg_embeddings = {}", config.reg_embeddings),
        format!("use_bias = {}", config.use_bias),
        format!("ns = {}", config.num_negatives),
        format!("lr = {:?}", config.lr),
        format!("epsilon = {:?}", config.epsilon),
        format!("batch_size = {}", config.batch_size),
        format!("epochs = {}", config.epochs),
        format!("seed = {}", config.seed),
        format!("init_std = {:?}", config.init_std),
        format!("pretrain = {}", config.pretrain),
        format!("pretrain_epochs = {}", config.pretrain_epochs),
        format!("pretrain_lr = {:?}", config.pretrain_lr),
        format!("eval_every = {}", config.eval_every),
    ]);
    lines.join("\n") + "\n"
}

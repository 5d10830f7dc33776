//! Command implementations behind the `deepicf` binary.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::read_config;
use crate::data::{leave_one_out_split, read_interactions, read_split, write_split, LineFormat, LooSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate_item_knn, evaluate_item_pop, evaluate_model, EvalReport};
use crate::math::sigmoid;
use crate::model::{predict_logit, ModelConfig, ModelParams, Variant};
use crate::train::{fit, initial_params, MetricsCsv, TrainReport};

/// Reads an interaction log, splits it and writes the split files under
/// `prefix`.
pub fn cmd_split(input: &Path, format: LineFormat, seed: u64, prefix: &Path) -> Result<LooSplit> {
    let dataset = read_interactions(input, format)?;
    let split = leave_one_out_split(&dataset, seed)?;
    info!(
        "split: {} users ({} dropped), {} items, {} training interactions",
        split.num_users(),
        split.dropped_users,
        split.num_items(),
        split.train.num_interactions()
    );
    write_split(&split, prefix)?;
    Ok(split)
}

/// Trains the model `config` describes on the split at `split_prefix` and
/// writes the checkpoint. If training diverges the last finite parameters
/// are saved before the error is returned.
pub fn cmd_train(
    config: &ModelConfig,
    split_prefix: &Path,
    checkpoint: &Path,
    metrics: Option<&Path>,
) -> Result<(ModelParams, TrainReport)> {
    config.validate()?;
    let split = read_split(split_prefix, config.seed)?;
    if config.pretrain && config.variant != Variant::Fism {
        info!("phase 1/2: FISM pre-training ({} epochs)", config.pretrain_epochs);
    }
    let mut params = initial_params(config, &split)?;
    if config.pretrain && config.variant != Variant::Fism {
        info!("phase 2/2: {} training ({} epochs)", config.variant, config.epochs);
    }
    let mut csv = metrics.map(MetricsCsv::open).transpose()?;
    let mut last_good = params.clone();
    let result = fit(&mut params, config, &split, |stats, p| {
        last_good.clone_from(p);
        if let Some(csv) = csv.as_mut() {
            csv.append(stats)?;
        }
        Ok(())
    });
    match result {
        Ok(report) => {
            save_checkpoint(checkpoint, config, &params)?;
            Ok((params, report))
        }
        Err(e) => {
            warn!("training failed; saving last finite parameters to {}", checkpoint.display());
            save_checkpoint(checkpoint, config, &last_good)?;
            Err(e)
        }
    }
}

pub fn cmd_train_from_file(
    config_path: &Path,
    split_prefix: &Path,
    checkpoint: &Path,
    metrics: Option<&Path>,
    force_pretrain: bool,
    seed: Option<u64>,
) -> Result<(ModelParams, TrainReport)> {
    let mut config = read_config(config_path)?;
    if force_pretrain {
        if config.variant == Variant::Fism {
            return Err(Error::Config("pretrain requires variant DeepICF or DeepICF_A".into()));
        }
        config.pretrain = true;
    }
    if let Some(seed) = seed {
        config.seed = seed;
    }
    cmd_train(&config, split_prefix, checkpoint, metrics)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scorer {
    Model,
    ItemPop,
    ItemKnn,
}

impl FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "model" | "checkpoint" => Ok(Scorer::Model),
            "itempop" | "pop" => Ok(Scorer::ItemPop),
            "itemknn" | "knn" => Ok(Scorer::ItemKnn),
            other => Err(Error::Invalid(format!(
                "unknown scorer {other:?} (expected model, itempop or itemknn)"
            ))),
        }
    }
}

/// Evaluates a checkpoint (or a baseline, which ignores the checkpoint) on
/// the split's held-out items.
pub fn cmd_eval(
    checkpoint: Option<&Path>,
    split_prefix: &Path,
    k: usize,
    scorer: Scorer,
    report_csv: Option<&Path>,
) -> Result<EvalReport> {
    let split = read_split(split_prefix, 0)?;
    let report = match scorer {
        Scorer::ItemPop => evaluate_item_pop(&split, k)?,
        Scorer::ItemKnn => evaluate_item_knn(&split, k, None)?,
        Scorer::Model => {
            let path = checkpoint.ok_or_else(|| Error::Invalid("--checkpoint is required for the model scorer".into()))?;
            let (config, params) = load_checkpoint(path)?;
            evaluate_model(&params, &config, &split, k)?
        }
    };
    if let Some(path) = report_csv {
        report.write_csv(path)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendation {
    pub item: String,
    /// σ(logit)
    pub score: f64,
    /// `(history item, weight)` for attention models.
    pub attention: Option<Vec<(String, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Recommendations {
    pub user: String,
    pub items: Vec<Recommendation>,
}

impl fmt::Display for Recommendations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# top {} for user {}", self.items.len(), self.user)?;
        for r in &self.items {
            writeln!(f, "{}\t{:.6}", r.item, r.score)?;
        }
        for r in &self.items {
            if let Some(weights) = &r.attention {
                writeln!(f, "# attention for item {}", r.item)?;
                for (h, w) in weights {
                    writeln!(f, "{h}\t{w:.6}")?;
                }
            }
        }
        Ok(())
    }
}

/// Top-`n` unseen items for `user` (raw id) with their predicted scores and,
/// for DeepICF+a, the attention weight of each history item.
pub fn recommend(
    params: &ModelParams,
    config: &ModelConfig,
    split: &LooSplit,
    user: &str,
    n: usize,
) -> Result<Recommendations> {
    let train = &split.train;
    let u = train.user_index(user).ok_or_else(|| Error::UnknownUser {
        id: user.to_string(),
        valid: describe_ids(train.user_ids()),
    })?;
    let history = train.items(u);
    let mut scored = Vec::new();
    for i in (0..train.num_items()).filter(|i| !train.contains(u, *i)) {
        let (logit, _) = predict_logit(params, config, u, history, i)?;
        scored.push((i, logit));
    }
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(n);

    let items = scored
        .into_iter()
        .map(|(i, logit)| {
            let attention = if config.variant.uses_attention() {
                let (_, cache) = predict_logit(params, config, u, history, i)?;
                let weights = cache.attention.map(|a| a.weights).unwrap_or_default();
                Some(
                    cache
                        .history
                        .iter()
                        .zip(weights)
                        .map(|(&j, w)| (train.item_id(j).to_string(), w))
                        .collect(),
                )
            } else {
                None
            };
            Ok(Recommendation {
                item: train.item_id(i).to_string(),
                score: sigmoid(logit),
                attention,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Recommendations {
        user: user.to_string(),
        items,
    })
}

fn describe_ids(ids: &[String]) -> String {
    match ids {
        [] => "the split has no users".into(),
        [only] => format!("the only valid user id is {only:?}"),
        _ => {
            let shown: Vec<&str> = ids.iter().take(5).map(String::as_str).collect();
            format!(
                "{} valid user ids: {}{}",
                ids.len(),
                shown.join(", "),
                if ids.len() > shown.len() {
                    format!(", … {}", ids[ids.len() - 1])
                } else {
                    String::new()
                }
            )
        }
    }
}

pub fn cmd_recommend(checkpoint: &Path, split_prefix: &Path, user: &str, n: usize) -> Result<Recommendations> {
    let split = read_split(split_prefix, 0)?;
    let (config, params) = load_checkpoint(checkpoint)?;
    if params.num_users() != split.num_users() || params.num_items() != split.num_items() {
        return Err(Error::Shape("checkpoint and split disagree on user/item counts".into()));
    }
    recommend(&params, &config, &split, user, n)
}

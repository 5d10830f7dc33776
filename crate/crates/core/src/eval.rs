//! Leave-one-out ranking evaluation and the heuristic baselines.
//!
//! Each user's held-out item is ranked against that user's fixed evaluation
//! negatives. Candidates are ordered by descending score, ties broken by
//! ascending item index.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::data::{InteractionDataset, LooSplit};
use crate::error::{Error, Result};
use crate::model::{predict_logit, ModelConfig, ModelParams};

/// 1-based position of `test_item` among `negatives ∪ {test_item}`.
pub fn rank_test_item<S>(mut scorer: S, test_item: usize, negatives: &[usize]) -> Result<usize>
where
    S: FnMut(usize) -> Result<f64>,
{
    let mut sorted = negatives.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) || sorted.binary_search(&test_item).is_ok() {
        return Err(Error::Invalid("evaluation candidates are not distinct".into()));
    }
    let mut score = |item: usize| -> Result<f64> {
        let s = scorer(item)?;
        if s.is_finite() {
            Ok(s)
        } else {
            Err(Error::NonFinite(format!("score {s} for item {item}")))
        }
    };
    let target = score(test_item)?;
    let mut rank = 1;
    for &n in negatives {
        let s = score(n)?;
        if s > target || (s == target && n < test_item) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// `(hit, ndcg)` for a single relevant item at `rank`.
pub fn metrics_at_k(rank: usize, k: usize) -> (f64, f64) {
    if rank >= 1 && rank <= k {
        (1.0, 1.0 / ((rank + 1) as f64).log2())
    } else {
        (0.0, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    /// `(user, rank)` in user order.
    pub per_user: Vec<(usize, usize)>,
    pub hr_at_k: f64,
    pub ndcg_at_k: f64,
}

impl EvalReport {
    pub fn from_ranks(per_user: Vec<(usize, usize)>, k: usize) -> Self {
        let n = per_user.len().max(1) as f64;
        let (hr, ndcg) = per_user.iter().fold((0.0, 0.0), |(h, g), &(_, rank)| {
            let (hit, gain) = metrics_at_k(rank, k);
            (h + hit, g + gain)
        });
        EvalReport {
            k,
            per_user,
            hr_at_k: hr / n,
            ndcg_at_k: ndcg / n,
        }
    }

    /// The same ranking summarised at another cutoff.
    pub fn at_k(&self, k: usize) -> EvalReport {
        EvalReport::from_ranks(self.per_user.clone(), k)
    }

    pub fn summary(&self) -> String {
        format!(
            "HR@{k}={:.4} NDCG@{k}={:.4}",
            self.hr_at_k,
            self.ndcg_at_k,
            k = self.k
        )
    }

    /// `user,rank` rows followed by a `#`-prefixed summary line.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "user,rank")?;
        for (u, r) in &self.per_user {
            writeln!(w, "{u},{r}")?;
        }
        writeln!(w, "# {}", self.summary())?;
        w.flush()?;
        Ok(())
    }
}

/// Ranks every user's held-out item with the scorer `make_scorer(user)`
/// returns. Users are processed in parallel; the result does not depend on
/// scheduling.
pub fn evaluate<F, S>(split: &LooSplit, k: usize, make_scorer: F) -> Result<EvalReport>
where
    F: Fn(usize) -> Result<S> + Sync,
    S: FnMut(usize) -> Result<f64>,
{
    if k == 0 {
        return Err(Error::Invalid("cutoff k must be at least 1".into()));
    }
    let ranks = (0..split.num_users())
        .into_par_iter()
        .map(|u| {
            let scorer = make_scorer(u)?;
            let rank = rank_test_item(scorer, split.test_items[u], &split.eval_negatives[u])?;
            Ok((u, rank))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_ranks(ranks, k))
}

/// Scores candidates with a trained model, using each user's training
/// history.
pub fn evaluate_model(params: &ModelParams, config: &ModelConfig, split: &LooSplit, k: usize) -> Result<EvalReport> {
    if params.num_users() != split.num_users() || params.num_items() != split.num_items() {
        return Err(Error::Shape(format!(
            "model has {} users and {} items, split has {} and {}",
            params.num_users(),
            params.num_items(),
            split.num_users(),
            split.num_items()
        )));
    }
    evaluate(split, k, |u| {
        let history = split.train.items(u);
        Ok(move |i: usize| predict_logit(params, config, u, history, i).map(|(logit, _)| logit))
    })
}

/// Training interaction count per item.
pub fn item_pop_scores(train: &InteractionDataset) -> Vec<f64> {
    train.item_counts().into_iter().map(|c| c as f64).collect()
}

pub fn evaluate_item_pop(split: &LooSplit, k: usize) -> Result<EvalReport> {
    let scores = item_pop_scores(&split.train);
    evaluate(split, k, |_| {
        let scores = &scores;
        Ok(move |i: usize| Ok(scores[i]))
    })
}

/// Cosine similarity between binary item columns of the training matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemKnnModel {
    num_items: usize,
    /// Row-major `I × I`. Rows restricted to the top neighbours are zeroed
    /// outside them.
    sim: Vec<f64>,
}

impl ItemKnnModel {
    /// Uses every neighbour when `neighbors` is `None`.
    pub fn fit(train: &InteractionDataset, neighbors: Option<usize>) -> Self {
        let n = train.num_items();
        let mut co = vec![0u32; n * n];
        for u in 0..train.num_users() {
            let items = train.items(u);
            for (a, &i) in items.iter().enumerate() {
                for &j in &items[a + 1..] {
                    co[i * n + j] += 1;
                }
            }
        }
        let counts = train.item_counts();
        let mut sim = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let overlap = co[i * n + j];
                if overlap == 0 || counts[i] == 0 || counts[j] == 0 {
                    continue;
                }
                let s = (overlap as f64 / ((counts[i] * counts[j]) as f64).sqrt()).min(1.0);
                sim[i * n + j] = s;
                sim[j * n + i] = s;
            }
        }
        if let Some(keep) = neighbors {
            for i in 0..n {
                let row = &mut sim[i * n..(i + 1) * n];
                if keep < n {
                    let mut order: Vec<usize> = (0..n).filter(|&j| j != i).collect();
                    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                    for &j in &order[keep.min(order.len())..] {
                        row[j] = 0.0;
                    }
                }
            }
        }
        ItemKnnModel { num_items: n, sim }
    }

    pub fn num_items(&self) -> usize {
        self.num_items
    }

    pub fn similarity(&self, i: usize, j: usize) -> f64 {
        self.sim[i * self.num_items + j]
    }

    /// `Σ_{j ∈ history, j ≠ item} sim(item, j)`
    pub fn score(&self, history: &[usize], item: usize) -> f64 {
        let row = &self.sim[item * self.num_items..(item + 1) * self.num_items];
        history.iter().filter(|&&j| j != item).map(|&j| row[j]).sum()
    }
}

pub fn evaluate_item_knn(split: &LooSplit, k: usize, neighbors: Option<usize>) -> Result<EvalReport> {
    let model = ItemKnnModel::fit(&split.train, neighbors);
    evaluate(split, k, |u| {
        let history = split.train.items(u);
        let model = &model;
        Ok(move |i: usize| Ok(model.score(history, i)))
    })
}

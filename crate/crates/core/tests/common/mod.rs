#![allow(dead_code)]

use deepicf::math::{finite_diff_grad, DenseMatrix, SeededRng};
use deepicf::model::{backward, predict_logit, ModelConfig, ModelParams, Variant};
use deepicf::train::{add_reg_gradients, embedding_penalty, loss_with_reg};
use rand::seq::SliceRandom;
use rand::Rng;

pub const USERS: usize = 8;
pub const ITEMS: usize = 12;
pub const K: usize = 6;
pub const K_PRIME: usize = 4;

/// Gradient-check configuration for `variant` with `depth` tower layers.
pub fn check_config(variant: Variant, depth: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, K);
    cfg.k_prime = K_PRIME;
    cfg.layer_sizes = match variant {
        Variant::Fism => Vec::new(),
        _ => [5, 4, 3][..depth].to_vec(),
    };
    cfg
}

pub fn random_params(cfg: &ModelConfig, rng: &mut SeededRng, scale: f64) -> ModelParams {
    let mut params = ModelParams::zeros(cfg, USERS, ITEMS);
    let fism = cfg.variant == Variant::Fism;
    for (n, t) in params.tensors_mut().into_iter().enumerate() {
        // FISM keeps z = 1
        if fism && n == 4 {
            continue;
        }
        for v in t.iter_mut() {
            *v = rng.random_range(-scale..scale);
        }
    }
    params
}

pub struct Instance {
    pub user: usize,
    pub item: usize,
    pub history: Vec<usize>,
    pub label: f64,
}

/// History of 1–6 distinct items; the target sometimes sits in the stored
/// history to exercise target exclusion.
pub fn random_instance(rng: &mut SeededRng) -> Instance {
    let mut items: Vec<usize> = (0..ITEMS).collect();
    items.shuffle(rng);
    let len = rng.random_range(1..=6);
    let mut history = items[..len].to_vec();
    let item = items[len];
    if rng.random_bool(0.2) {
        history.push(item);
        history.shuffle(rng);
    }
    Instance {
        user: rng.random_range(0..USERS),
        item,
        history,
        label: if rng.random_bool(0.5) { 1.0 } else { 0.0 },
    }
}

pub fn objective(params: &ModelParams, cfg: &ModelConfig, x: &Instance) -> f64 {
    let (logit, _) = predict_logit(params, cfg, x.user, &x.history, x.item).unwrap();
    loss_with_reg(logit, x.label, params, cfg).0 + embedding_penalty(params, cfg, x.item, &x.history)
}

pub fn analytic_gradient(params: &ModelParams, cfg: &ModelConfig, x: &Instance) -> Vec<f64> {
    let (logit, cache) = predict_logit(params, cfg, x.user, &x.history, x.item).unwrap();
    let (_, dlogit) = loss_with_reg(logit, x.label, params, cfg);
    let mut grads = backward(&cache, params, cfg, dlogit);
    add_reg_gradients(&mut grads, params, cfg);
    grads.to_flat(params)
}

/// Smallest |pre-activation| of any ReLU on the instance. Finite
/// differences are unreliable within a step of a kink.
pub fn min_relu_margin(params: &ModelParams, cfg: &ModelConfig, x: &Instance) -> f64 {
    let (_, cache) = predict_logit(params, cfg, x.user, &x.history, x.item).unwrap();
    let mut margin = f64::INFINITY;
    for pre in cache.hidden_pre.iter().flatten() {
        margin = margin.min(pre.abs());
    }
    if let Some(att) = &cache.attention {
        for pre in att.hidden_pre.iter().flatten() {
            margin = margin.min(pre.abs());
        }
    }
    margin
}

/// Largest per-tensor relative error `‖a − n‖ / (‖a‖ + ‖n‖)` between the
/// analytic and central-difference gradients, with the tensor name.
pub fn max_relative_error(params: &ModelParams, cfg: &ModelConfig, x: &Instance, h: f64) -> (f64, String) {
    let analytic = analytic_gradient(params, cfg, x);
    let theta = params.to_flat();
    let mut probe = params.clone();
    let numeric = finite_diff_grad(
        |t| {
            probe.set_flat(t).unwrap();
            objective(&probe, cfg, x)
        },
        &theta,
        h,
    )
    .unwrap();

    let mut worst = (0.0, String::new());
    let mut offset = 0;
    for (name, t) in params.tensor_names().into_iter().zip(params.tensors()) {
        let a = &analytic[offset..offset + t.len()];
        let n = &numeric[offset..offset + t.len()];
        offset += t.len();
        let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt() + n.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if scale == 0.0 { 0.0 } else { diff / scale };
        if rel > worst.0 {
            worst = (rel, name);
        }
    }
    worst
}

/// Runs `instances` accepted gradient checks and returns the worst relative
/// error seen.
pub fn gradient_check(variant: Variant, depth: usize, instances: usize, seed: u64) -> (f64, String, usize) {
    let mut cfg = check_config(variant, depth);
    let mut rng = SeededRng::new(seed);
    let mut worst = (0.0, String::new());
    let mut skipped = 0;
    let mut done = 0;
    while done < instances {
        cfg.alpha = rng.random_range(0.0..=1.0);
        cfg.beta = rng.random_range(0.0..=1.0);
        cfg.lambda = if rng.random_bool(0.5) { rng.random_range(0.0..0.1) } else { 0.0 };
        cfg.reg_embeddings = rng.random_bool(0.3);
        let params = random_params(&cfg, &mut rng, 1.0);
        let x = random_instance(&mut rng);
        if min_relu_margin(&params, &cfg, &x) < 1e-3 {
            skipped += 1;
            continue;
        }
        let (err, name) = max_relative_error(&params, &cfg, &x, 1e-5);
        if err > worst.0 {
            worst = (err, name);
        }
        done += 1;
    }
    (worst.0, worst.1, skipped)
}

/// Straight-line FISM prediction: `n^{-α} Σ_j p_i · q_j` over history items
/// other than the target.
pub fn fism_oracle(params: &ModelParams, alpha: f64, history: &[usize], item: usize) -> f64 {
    let others: Vec<usize> = history.iter().copied().filter(|&j| j != item).collect();
    if others.is_empty() {
        return 0.0;
    }
    let mut sum = 0.0;
    for &j in &others {
        let mut s = 0.0;
        for c in 0..params.p.cols() {
            s += params.p.get(item, c) * params.q.get(j, c);
        }
        sum += s;
    }
    sum / (others.len() as f64).powf(alpha)
}

/// Straight-line NAIS prediction `Σ_j a_ij p_i · q_j` with
/// `a_ij = exp(f_ij) / (Σ exp f)^β`, `f_ij = h · ReLU(W (p_i ⊙ q_j) + b)`.
pub fn nais_oracle(params: &ModelParams, beta: f64, history: &[usize], item: usize) -> f64 {
    let att = params.attention.as_ref().unwrap();
    let w: &DenseMatrix = &att.w;
    let k = params.p.cols();
    let others: Vec<usize> = history.iter().copied().filter(|&j| j != item).collect();
    if others.is_empty() {
        return 0.0;
    }
    let mut exps = Vec::new();
    let mut sims = Vec::new();
    for &j in &others {
        let v: Vec<f64> = (0..k).map(|c| params.p.get(item, c) * params.q.get(j, c)).collect();
        let mut f = 0.0;
        for r in 0..w.rows() {
            let mut a = att.b[r];
            for c in 0..k {
                a += w.get(r, c) * v[c];
            }
            f += att.h[r] * a.max(0.0);
        }
        exps.push(f.exp());
        sims.push(v.iter().sum::<f64>());
    }
    let denom = exps.iter().sum::<f64>().powf(beta);
    exps.iter().zip(&sims).map(|(e, s)| e / denom * s).sum()
}

/// 32 users over 16 items in four clusters of four. Every user holds their
/// whole cluster; the order rotates so each cluster item is the latest (and
/// therefore held out) for two users. The held-out item co-occurs with all of
/// the user's training items and with nothing outside the cluster.
pub fn planted_clusters() -> deepicf::InteractionDataset {
    use deepicf::data::HistoryEntry;
    let histories = (0..32)
        .map(|u| {
            let cluster = u % 4;
            let rotation = u / 4;
            (0..4)
                .map(|t| HistoryEntry {
                    item: 4 * cluster + (t + rotation) % 4,
                    timestamp: t as i64,
                    rating: 1.0,
                })
                .collect()
        })
        .collect();
    deepicf::InteractionDataset::from_histories(
        (0..32).map(|u| format!("u{u}")).collect(),
        (0..16).map(|i| format!("i{i}")).collect(),
        histories,
    )
    .unwrap()
}

/// Tab-separated interaction log with `users` users over `items` items,
/// 5–20 interactions each.
pub fn synthetic_log(users: usize, items: usize, seed: u64) -> String {
    let mut rng = SeededRng::new(seed);
    let mut text = String::new();
    for u in 0..users {
        let n = rng.random_range(5..=20);
        let mut pool: Vec<usize> = (0..items).collect();
        pool.shuffle(&mut rng);
        for (t, &i) in pool[..n].iter().enumerate() {
            text.push_str(&format!("user{u}\titem{i}\t1\t{}\n", 1000 + 7 * t as i64 + rng.random_range(0..5)));
        }
    }
    text
}

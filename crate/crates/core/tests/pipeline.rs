mod common;

use common::*;
use deepicf::checkpoint::{load_checkpoint, save_checkpoint};
use deepicf::cli::recommend;
use deepicf::data::{leave_one_out_split, leave_one_out_split_with, parse_interactions, LineFormat};
use deepicf::eval::evaluate_model;
use deepicf::model::{init_params, tower_layer_sizes, ModelConfig, Variant};
use deepicf::train::{fit, initial_params};
use deepicf::{Error, SeededRng};

fn synthetic_split() -> deepicf::LooSplit {
    let ds = parse_interactions(synthetic_log(120, 160, 6).as_bytes(), LineFormat::Tab).unwrap();
    leave_one_out_split(&ds, 3).unwrap()
}

#[test]
fn loss_falls_over_first_epochs_on_planted_clusters() {
    for seed in 0..5 {
        let split = leave_one_out_split_with(&planted_clusters(), seed, None).unwrap();
        let mut cfg = ModelConfig::new(Variant::DeepIcf, 8);
        cfg.layer_sizes = tower_layer_sizes(8, 2);
        cfg.num_negatives = 4;
        cfg.lr = 0.05;
        cfg.epochs = 5;
        cfg.seed = seed;
        let mut params = initial_params(&cfg, &split).unwrap();
        let losses = fit(&mut params, &cfg, &split, |_, _| Ok(())).unwrap().losses();
        assert!(losses[4] < losses[0], "seed {seed}: {losses:?}");
    }
}

#[test]
fn fism_checkpoint_ranks_match_brute_force_scorer() {
    let split = synthetic_split();
    let mut cfg = ModelConfig::new(Variant::Fism, 8);
    cfg.alpha = 0.5;
    cfg.epochs = 2;
    let mut params = initial_params(&cfg, &split).unwrap();
    fit(&mut params, &cfg, &split, |_, _| Ok(())).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fism.ckpt");
    save_checkpoint(&path, &cfg, &params).unwrap();
    let (cfg, params) = load_checkpoint(&path).unwrap();
    let report = evaluate_model(&params, &cfg, &split, 10).unwrap();

    for &(u, rank) in &report.per_user {
        let history = split.train.items(u);
        let score = |i: usize| fism_oracle(&params, cfg.alpha, history, i) + params.b_user[u] + params.b_item[i];
        let mut candidates = split.eval_negatives[u].clone();
        candidates.push(split.test_items[u]);
        let scores: Vec<(usize, f64)> = candidates.iter().map(|&i| (i, score(i))).collect();
        let target = score(split.test_items[u]);
        let oracle = 1 + scores
            .iter()
            .filter(|(i, s)| *s > target + 1e-12 || ((*s - target).abs() <= 1e-12 && *i < split.test_items[u]))
            .count();
        assert_eq!(rank, oracle, "user {u}");
    }
}

#[test]
fn hit_ratio_is_monotone_in_k() {
    let split = synthetic_split();
    let cfg = ModelConfig::new(Variant::DeepIcfAttention, 8);
    let params = initial_params(&cfg, &split).unwrap();
    let report = evaluate_model(&params, &cfg, &split, 10).unwrap();
    let mut last = 0.0;
    for k in 1..=100 {
        let r = report.at_k(k);
        assert!(r.hr_at_k >= last);
        assert!(r.ndcg_at_k <= r.hr_at_k);
        last = r.hr_at_k;
    }
    assert_eq!(report.at_k(100).hr_at_k, 1.0);
}

#[test]
fn zero_epochs_leaves_initialisation_untouched() {
    let split = synthetic_split();
    let mut cfg = ModelConfig::new(Variant::DeepIcf, 8);
    cfg.epochs = 0;
    cfg.seed = 5;
    let mut params = initial_params(&cfg, &split).unwrap();
    let report = fit(&mut params, &cfg, &split, |_, _| Ok(())).unwrap();
    assert!(report.epochs.is_empty());
    let fresh = init_params(&cfg, split.num_users(), split.num_items(), &SeededRng::new(5)).unwrap();
    assert_eq!(params, fresh);
}

#[test]
fn pretraining_without_epochs_copies_the_initial_fism_embeddings() {
    let split = synthetic_split();
    let mut cfg = ModelConfig::new(Variant::DeepIcf, 8);
    cfg.pretrain = true;
    cfg.pretrain_epochs = 0;
    cfg.seed = 9;
    let params = initial_params(&cfg, &split).unwrap();
    let root = SeededRng::new(9);
    let fism_cfg = deepicf::train::pretrain_config(&cfg);
    let fism = init_params(&fism_cfg, split.num_users(), split.num_items(), &root.substream("pretrain")).unwrap();
    let fresh = init_params(&cfg, split.num_users(), split.num_items(), &root).unwrap();
    assert_eq!(params.p, fism.p);
    assert_eq!(params.q, fism.q);
    assert_eq!(params.layers, fresh.layers);
    assert_eq!(params.z, fresh.z);
}

#[test]
fn bias_only_model_recommends_the_largest_item_bias() {
    let split = synthetic_split();
    let cfg = ModelConfig::new(Variant::DeepIcf, 8);
    let mut params = deepicf::ModelParams::zeros(&cfg, split.num_users(), split.num_items());
    for (i, b) in params.b_item.iter_mut().enumerate() {
        *b = ((i * 37) % 101) as f64 / 10.0;
    }
    let user = split.train.user_id(0).to_string();
    let recs = recommend(&params, &cfg, &split, &user, 5).unwrap();
    let mut unseen: Vec<usize> = (0..split.num_items()).filter(|&i| !split.train.contains(0, i)).collect();
    unseen.sort_by(|a, b| params.b_item[*b].total_cmp(&params.b_item[*a]).then(a.cmp(b)));
    let expected: Vec<&str> = unseen[..5].iter().map(|&i| split.train.item_id(i)).collect();
    let got: Vec<&str> = recs.items.iter().map(|r| r.item.as_str()).collect();
    assert_eq!(got, expected);
}

#[test]
fn attention_dump_sums_to_one_at_beta_one() {
    let split = synthetic_split();
    let mut cfg = ModelConfig::new(Variant::DeepIcfAttention, 8);
    cfg.beta = 1.0;
    cfg.init_std = 0.5;
    let params = initial_params(&cfg, &split).unwrap();
    let user = split.train.user_id(4).to_string();
    let recs = recommend(&params, &cfg, &split, &user, 3).unwrap();
    for r in &recs.items {
        let weights = r.attention.as_ref().unwrap();
        assert_eq!(weights.len(), split.train.items(4).len());
        assert!((weights.iter().map(|(_, w)| w).sum::<f64>() - 1.0).abs() < 1e-12);
    }
    assert!(recs.to_string().contains("# attention for item"));
}

#[test]
fn unknown_user_lists_valid_ids() {
    let split = synthetic_split();
    let cfg = ModelConfig::new(Variant::Fism, 4);
    let params = deepicf::ModelParams::zeros(&cfg, split.num_users(), split.num_items());
    match recommend(&params, &cfg, &split, "nobody", 3) {
        Err(Error::UnknownUser { id, valid }) => {
            assert_eq!(id, "nobody");
            assert!(valid.contains("user0"), "{valid}");
        }
        other => panic!("expected UnknownUser, got {other:?}"),
    }
}

//! Pointwise log-loss training with per-parameter Adagrad, and the FISM
//! pre-training pipeline for the deep variants.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use log::info;

use crate::data::{sample_train_instances, LooSplit, TrainInstance};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::math::{axpy, bce_from_logit, SeededRng};
use crate::model::{backward, init_params, predict_logit, Gradients, ModelConfig, ModelParams, Variant};

/// Running sums of squared gradients, shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdagradState {
    pub accumulators: ModelParams,
    pub lr: f64,
    pub epsilon: f64,
}

impl AdagradState {
    pub fn new(params: &ModelParams, lr: f64, epsilon: f64) -> Self {
        let mut accumulators = params.clone();
        for t in accumulators.tensors_mut() {
            t.fill(0.0);
        }
        AdagradState {
            accumulators,
            lr,
            epsilon,
        }
    }
}

fn adagrad_update(theta: &mut [f64], acc: &mut [f64], grad: &[f64], lr: f64, eps: f64) {
    for ((t, a), &g) in theta.iter_mut().zip(acc.iter_mut()).zip(grad) {
        if g != 0.0 {
            *a += g * g;
            *t -= lr * g / (a.sqrt() + eps);
        }
    }
}

/// `acc += g²; θ −= lr·g / (√acc + ε)` over the entries `grads` touches.
/// Zero gradient entries leave both θ and the accumulator alone.
pub fn adagrad_step(state: &mut AdagradState, params: &mut ModelParams, grads: &Gradients) {
    let (lr, eps) = (state.lr, state.epsilon);
    let acc = &mut state.accumulators;
    for (&i, g) in &grads.p_rows {
        adagrad_update(params.p.row_mut(i), acc.p.row_mut(i), g, lr, eps);
    }
    for (&j, g) in &grads.q_rows {
        adagrad_update(params.q.row_mut(j), acc.q.row_mut(j), g, lr, eps);
    }
    for (&u, &g) in &grads.b_user {
        adagrad_update(
            std::slice::from_mut(&mut params.b_user[u]),
            std::slice::from_mut(&mut acc.b_user[u]),
            &[g],
            lr,
            eps,
        );
    }
    for (&i, &g) in &grads.b_item {
        adagrad_update(
            std::slice::from_mut(&mut params.b_item[i]),
            std::slice::from_mut(&mut acc.b_item[i]),
            &[g],
            lr,
            eps,
        );
    }
    adagrad_update(&mut params.z, &mut acc.z, &grads.z, lr, eps);
    for ((layer, acc_layer), g) in params.layers.iter_mut().zip(acc.layers.iter_mut()).zip(&grads.layers) {
        adagrad_update(layer.w.as_mut_slice(), acc_layer.w.as_mut_slice(), g.w.as_slice(), lr, eps);
        adagrad_update(&mut layer.b, &mut acc_layer.b, &g.b, lr, eps);
    }
    if let (Some(att), Some(acc_att), Some(g)) = (&mut params.attention, &mut acc.attention, &grads.attention) {
        adagrad_update(att.w.as_mut_slice(), acc_att.w.as_mut_slice(), g.w.as_slice(), lr, eps);
        adagrad_update(&mut att.b, &mut acc_att.b, &g.b, lr, eps);
        adagrad_update(&mut att.h, &mut acc_att.h, &g.h, lr, eps);
    }
}

/// Log loss of one instance plus `λ Σ_l ‖W_l‖²`. Returns
/// `(loss, d loss / d logit)`.
pub fn loss_with_reg(logit: f64, label: f64, params: &ModelParams, config: &ModelConfig) -> (f64, f64) {
    let (data, dlogit) = bce_from_logit(logit, label);
    if config.lambda == 0.0 {
        return (data, dlogit);
    }
    let penalty: f64 = params.layers.iter().map(|l| l.w.squared_norm()).sum();
    (data + config.lambda * penalty, dlogit)
}

/// `λ (‖p_i‖² + Σ_j ‖q_j‖²)` over the rows an instance touches; zero unless
/// `config.reg_embeddings`.
pub fn embedding_penalty(params: &ModelParams, config: &ModelConfig, item: usize, history: &[usize]) -> f64 {
    if !config.reg_embeddings || config.lambda == 0.0 {
        return 0.0;
    }
    let sq = |row: &[f64]| row.iter().map(|v| v * v).sum::<f64>();
    let q: f64 = history.iter().filter(|&&j| j != item).map(|&j| sq(params.q.row(j))).sum();
    config.lambda * (sq(params.p.row(item)) + q)
}

/// Adds the L2 gradients: `2λ W_l` on every layer, and `2λ` times the
/// touched embedding rows when `config.reg_embeddings`.
pub fn add_reg_gradients(grads: &mut Gradients, params: &ModelParams, config: &ModelConfig) {
    let lambda = config.lambda;
    if lambda == 0.0 {
        return;
    }
    for (g, layer) in grads.layers.iter_mut().zip(&params.layers) {
        axpy(2.0 * lambda, layer.w.as_slice(), g.w.as_mut_slice());
    }
    if config.reg_embeddings {
        for (&i, g) in grads.p_rows.iter_mut() {
            axpy(2.0 * lambda, params.p.row(i), g);
        }
        for (&j, g) in grads.q_rows.iter_mut() {
            axpy(2.0 * lambda, params.q.row(j), g);
        }
    }
}

/// Forward, loss and backward for one instance. Returns the regularised loss,
/// the logit and the full gradient.
pub fn instance_gradient(
    params: &ModelParams,
    config: &ModelConfig,
    split: &LooSplit,
    instance: &TrainInstance,
) -> Result<(f64, f64, Gradients)> {
    let history = split.train.items(instance.user);
    let (logit, cache) = predict_logit(params, config, instance.user, history, instance.item)?;
    let (mut loss, dlogit) = loss_with_reg(logit, instance.label as f64, params, config);
    loss += embedding_penalty(params, config, instance.item, history);
    let mut grads = backward(&cache, params, config, dlogit);
    add_reg_gradients(&mut grads, params, config);
    Ok((loss, logit, grads))
}

/// One pass over freshly sampled, shuffled instances. The sample and order
/// depend only on `(config.seed, epoch)`. Returns the mean instance loss.
pub fn train_epoch(
    params: &mut ModelParams,
    config: &ModelConfig,
    split: &LooSplit,
    state: &mut AdagradState,
    epoch: usize,
) -> Result<f64> {
    let mut rng = SeededRng::new(config.seed).substream_indexed("epoch", epoch as u64);
    let instances = sample_train_instances(split, config.num_negatives, &mut rng)?;
    if instances.is_empty() {
        return Err(Error::Invalid("no training instances".into()));
    }
    let batch = config.batch_size.max(1);
    let mut total = 0.0;
    let mut pending: Option<Gradients> = None;
    let mut in_batch = 0;
    for (n, inst) in instances.iter().enumerate() {
        let (loss, logit, grads) = instance_gradient(params, config, split, inst)?;
        if !loss.is_finite() || !logit.is_finite() {
            return Err(Error::Diverged {
                epoch,
                instance: n,
                logit,
            });
        }
        total += loss;
        if batch == 1 {
            adagrad_step(state, params, &grads);
            continue;
        }
        pending
            .get_or_insert_with(|| Gradients::zeros_like(params))
            .accumulate(&grads, 1.0);
        in_batch += 1;
        if in_batch == batch || n + 1 == instances.len() {
            let summed = pending.take().expect("batch has at least one instance");
            let mut mean = Gradients::zeros_like(params);
            mean.accumulate(&summed, 1.0 / in_batch as f64);
            adagrad_step(state, params, &mean);
            in_batch = 0;
        }
    }
    Ok(total / instances.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub hr: Option<f64>,
    pub ndcg: Option<f64>,
    pub seconds: f64,
}

impl EpochStats {
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{:.8},{},{},{:.3}",
            self.epoch,
            self.loss,
            opt(self.hr),
            opt(self.ndcg),
            self.seconds
        )
    }
}

pub const METRICS_HEADER: &str = "epoch,loss,hr10,ndcg10,seconds";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{METRICS_HEADER}")?;
        for e in &self.epochs {
            writeln!(w, "{}", e.csv_row())?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Appends one metrics row per epoch to a CSV file, writing the header when
/// the file is new.
pub struct MetricsCsv {
    out: BufWriter<File>,
}

impl MetricsCsv {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(MetricsCsv { out })
    }

    pub fn append(&mut self, stats: &EpochStats) -> Result<()> {
        writeln!(self.out, "{}", stats.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Runs `config.epochs` epochs on `params`, evaluating HR@10/NDCG@10 every
/// `config.eval_every` epochs. `on_epoch` sees each epoch's stats and the
/// parameters after it.
pub fn fit<F>(
    params: &mut ModelParams,
    config: &ModelConfig,
    split: &LooSplit,
    mut on_epoch: F,
) -> Result<TrainReport>
where
    F: FnMut(&EpochStats, &ModelParams) -> Result<()>,
{
    config.validate()?;
    params.check_shapes(config)?;
    let mut state = AdagradState::new(params, config.lr, config.epsilon);
    let mut report = TrainReport::default();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        let loss = train_epoch(params, config, split, &mut state, epoch)?;
        let (hr, ndcg) = if config.eval_every > 0 && epoch % config.eval_every == 0 {
            let r = evaluate_model(params, config, split, 10)?;
            (Some(r.hr_at_k), Some(r.ndcg_at_k))
        } else {
            (None, None)
        };
        let stats = EpochStats {
            epoch,
            loss,
            hr,
            ndcg,
            seconds: start.elapsed().as_secs_f64(),
        };
        info!(
            "{} epoch {epoch}: loss {loss:.6}{}",
            config.variant,
            hr.map(|h| format!(" HR@10 {h:.4} NDCG@10 {:.4}", ndcg.unwrap_or(0.0)))
                .unwrap_or_default()
        );
        on_epoch(&stats, params)?;
        report.epochs.push(stats);
    }
    Ok(report)
}

/// The FISM configuration used to pre-train embeddings for `config`.
pub fn pretrain_config(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        variant: Variant::Fism,
        layer_sizes: Vec::new(),
        lr: config.pretrain_lr,
        epochs: config.pretrain_epochs,
        pretrain: false,
        eval_every: 0,
        ..config.clone()
    }
}

/// Trains FISM for `config.pretrain_epochs`, then returns freshly
/// initialised parameters for `config` whose P and Q are the FISM ones.
pub fn pretrain_and_init(config: &ModelConfig, split: &LooSplit, rng: &SeededRng) -> Result<ModelParams> {
    if config.variant == Variant::Fism {
        return Err(Error::Config("pre-training applies to DeepICF and DeepICF_A only".into()));
    }
    let fism_config = pretrain_config(config);
    let mut fism = init_params(&fism_config, split.num_users(), split.num_items(), &rng.substream("pretrain"))?;
    info!("pre-training FISM for {} epochs", fism_config.epochs);
    fit(&mut fism, &fism_config, split, |_, _| Ok(()))?;
    if !fism.is_finite() {
        return Err(Error::NonFinite("FISM pre-training produced non-finite embeddings".into()));
    }
    let mut params = init_params(config, split.num_users(), split.num_items(), rng)?;
    params.p = fism.p;
    params.q = fism.q;
    Ok(params)
}

/// Initial parameters for `config`: FISM pre-training when
/// `config.pretrain` is set, Gaussian otherwise.
pub fn initial_params(config: &ModelConfig, split: &LooSplit) -> Result<ModelParams> {
    let rng = SeededRng::new(config.seed);
    if config.pretrain && config.variant != Variant::Fism {
        pretrain_and_init(config, split, &rng)
    } else {
        init_params(config, split.num_users(), split.num_items(), &rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{leave_one_out_split_with, parse_interactions, LineFormat};
    use crate::model::DenseLayer;
    use crate::math::DenseMatrix;

    fn small_split(seed: u64) -> LooSplit {
        let mut text = String::new();
        for u in 0..12 {
            for t in 0..5 {
                text.push_str(&format!("u{u}\ti{}\t1\t{t}\n", (u * 3 + t * 2) % 20));
            }
        }
        let d = parse_interactions(text.as_bytes(), LineFormat::Tab).unwrap();
        leave_one_out_split_with(&d, seed, Some(5)).unwrap()
    }

    #[test]
    fn adagrad_first_step_and_damping() {
        let cfg = ModelConfig::new(Variant::DeepIcf, 2);
        let mut params = ModelParams::zeros(&cfg, 1, 1);
        let mut state = AdagradState::new(&params, 0.01, 1e-8);
        let mut g = Gradients::zeros_like(&params);
        g.z[0] = 2.0;
        adagrad_step(&mut state, &mut params, &g);
        let first = params.z[0];
        assert!((first + 0.01 * 2.0 / (2.0 + 1e-8)).abs() < 1e-18);
        assert_eq!(params.z[1], 0.0);
        assert_eq!(state.accumulators.z, vec![4.0, 0.0, 0.0, 0.0]);
        adagrad_step(&mut state, &mut params, &g);
        let second = params.z[0] - first;
        assert!(second.abs() < first.abs());

        let before = (params.clone(), state.clone());
        let none = Gradients::zeros_like(&params);
        adagrad_step(&mut state, &mut params, &none);
        assert_eq!((params, state), before);
    }

    #[test]
    fn reg_policy() {
        let mut cfg = ModelConfig::new(Variant::DeepIcf, 1);
        cfg.layer_sizes = vec![1];
        let mut params = ModelParams::zeros(&cfg, 1, 1);
        params.layers[0] = DenseLayer {
            w: DenseMatrix::from_vec(1, 1, vec![2.0]).unwrap(),
            b: vec![0.0],
        };
        assert_eq!(loss_with_reg(0.3, 1.0, &params, &cfg), bce_from_logit(0.3, 1.0));
        cfg.lambda = 0.1;
        let (loss, _) = loss_with_reg(50.0, 1.0, &params, &cfg);
        assert!((loss - 0.4).abs() < 1e-12);

        let mut g = Gradients::zeros_like(&params);
        g.p_rows.insert(0, vec![0.5]);
        params.p.set(0, 0, 3.0);
        add_reg_gradients(&mut g, &params, &cfg);
        assert!((g.layers[0].w.get(0, 0) - 0.4).abs() < 1e-15);
        assert_eq!(g.p_rows[&0], vec![0.5]);
        cfg.reg_embeddings = true;
        add_reg_gradients(&mut g, &params, &cfg);
        assert!((g.p_rows[&0][0] - (0.5 + 0.6)).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let split = small_split(1);
        let mut cfg = ModelConfig::new(Variant::DeepIcfAttention, 4);
        cfg.lr = 0.0;
        cfg.epochs = 2;
        let init = initial_params(&cfg, &split).unwrap();
        let mut params = init.clone();
        let report = fit(&mut params, &cfg, &split, |_, _| Ok(())).unwrap();
        assert_eq!(params, init);
        let mut rng = SeededRng::new(cfg.seed).substream_indexed("epoch", 1);
        let instances = sample_train_instances(&split, cfg.num_negatives, &mut rng).unwrap();
        let initial: f64 = instances
            .iter()
            .map(|x| instance_gradient(&init, &cfg, &split, x).unwrap().0)
            .sum::<f64>()
            / instances.len() as f64;
        assert_eq!(report.epochs[0].loss, initial);
    }

    #[test]
    fn epochs_are_deterministic() {
        let split = small_split(2);
        let cfg = ModelConfig::new(Variant::DeepIcf, 4);
        let run = || {
            let mut p = initial_params(&cfg, &split).unwrap();
            let mut s = AdagradState::new(&p, cfg.lr, cfg.epsilon);
            let loss = train_epoch(&mut p, &cfg, &split, &mut s, 1).unwrap();
            (p, s, loss)
        };
        let a = run();
        let b = run();
        assert_eq!(a.0.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.0.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.2.to_bits(), b.2.to_bits());
        assert!(a.1.accumulators.tensors().iter().all(|t| t.iter().all(|&v| v >= 0.0)));
    }

    #[test]
    fn accumulators_never_decrease() {
        let split = small_split(3);
        let cfg = ModelConfig::new(Variant::DeepIcfAttention, 4);
        let mut p = initial_params(&cfg, &split).unwrap();
        let mut s = AdagradState::new(&p, cfg.lr, cfg.epsilon);
        let mut prev = s.accumulators.to_flat();
        for epoch in 1..=3 {
            train_epoch(&mut p, &cfg, &split, &mut s, epoch).unwrap();
            let now = s.accumulators.to_flat();
            assert!(now.iter().zip(&prev).all(|(a, b)| a >= b));
            prev = now;
        }
    }

    #[test]
    fn mini_batches_train() {
        let split = small_split(4);
        let mut cfg = ModelConfig::new(Variant::Fism, 4);
        cfg.batch_size = 8;
        cfg.epochs = 3;
        cfg.lr = 0.05;
        let mut p = initial_params(&cfg, &split).unwrap();
        let report = fit(&mut p, &cfg, &split, |_, _| Ok(())).unwrap();
        assert!(report.losses().iter().all(|l| l.is_finite() && *l >= 0.0));
    }

    #[test]
    fn divergence_is_reported() {
        let split = small_split(5);
        let cfg = ModelConfig::new(Variant::Fism, 2);
        let mut p = initial_params(&cfg, &split).unwrap();
        p.b_item.iter_mut().for_each(|b| *b = f64::INFINITY);
        let mut s = AdagradState::new(&p, cfg.lr, cfg.epsilon);
        assert!(matches!(
            train_epoch(&mut p, &cfg, &split, &mut s, 1),
            Err(Error::Diverged { epoch: 1, .. })
        ));
    }

    #[test]
    fn pretraining_copies_embeddings() {
        let split = small_split(6);
        let mut cfg = ModelConfig::new(Variant::DeepIcf, 4);
        cfg.pretrain = true;
        cfg.pretrain_epochs = 2;
        cfg.seed = 11;
        let rng = SeededRng::new(cfg.seed);
        let params = pretrain_and_init(&cfg, &split, &rng).unwrap();

        let fism_cfg = pretrain_config(&cfg);
        let mut fism = init_params(&fism_cfg, split.num_users(), split.num_items(), &rng.substream("pretrain")).unwrap();
        fit(&mut fism, &fism_cfg, &split, |_, _| Ok(())).unwrap();
        assert_eq!(params.p, fism.p);
        assert_eq!(params.q, fism.q);

        let fresh = init_params(&cfg, split.num_users(), split.num_items(), &rng).unwrap();
        assert_eq!(params.layers, fresh.layers);
        assert_eq!(params.z, fresh.z);

        // zero pre-training epochs copies the random FISM initialisation
        cfg.pretrain_epochs = 0;
        let degenerate = pretrain_and_init(&cfg, &split, &rng).unwrap();
        let fism0 = init_params(&pretrain_config(&cfg), split.num_users(), split.num_items(), &rng.substream("pretrain")).unwrap();
        assert_eq!(degenerate.p, fism0.p);

        assert!(pretrain_and_init(&ModelConfig::new(Variant::Fism, 4), &split, &rng).is_err());
    }

    #[test]
    fn metrics_csv_rows() {
        let stats = EpochStats {
            epoch: 3,
            loss: 0.5,
            hr: None,
            ndcg: None,
            seconds: 1.25,
        };
        assert_eq!(stats.csv_row(), "3,0.50000000,,,1.250");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        {
            let mut csv = MetricsCsv::open(&path).unwrap();
            csv.append(&stats).unwrap();
        }
        {
            let mut csv = MetricsCsv::open(&path).unwrap();
            csv.append(&EpochStats { hr: Some(0.5), ndcg: Some(0.25), ..stats }).unwrap();
        }
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "epoch,loss,hr10,ndcg10,seconds\n3,0.50000000,,,1.250\n3,0.50000000,0.500000,0.250000,1.250\n");
    }
}

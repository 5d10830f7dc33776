//! FISM, DeepICF and DeepICF+a: parameters, forward prediction and the
//! analytic backward pass.
//!
//! A prediction for user `u` and target item `i` runs through
//!
//! 1. pairwise interactions `v_j = q_j ⊙ p_i` for every history item `j ≠ i`,
//! 2. pooling into `e_ui` (α-normalised sum, or attention weights from a
//!    one-hidden-layer network followed by a β-smoothed softmax),
//! 3. `L` ReLU layers `e_l = ReLU(W_l e_{l-1} + b_l)`,
//! 4. `ŷ = zᵀ e_L + b_u + b_i`.
//!
//! FISM is the `L = 0`, `z = 1` case with average pooling and is evaluated
//! without touching `z`.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::math::{
    axpy, dot, hadamard, relu, relu_grad, softmax_beta, softmax_beta_backward, DenseMatrix, SeededRng,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    Fism,
    DeepIcf,
    DeepIcfAttention,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Fism => "FISM",
            Variant::DeepIcf => "DeepICF",
            Variant::DeepIcfAttention => "DeepICF_A",
        }
    }

    pub fn uses_attention(self) -> bool {
        self == Variant::DeepIcfAttention
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fism" => Ok(Variant::Fism),
            "deepicf" => Ok(Variant::DeepIcf),
            "deepicf_a" | "deepicf+a" | "deepicf-a" => Ok(Variant::DeepIcfAttention),
            _ => Err(Error::Config(format!(
                "unknown variant {s:?} (expected FISM, DeepICF or DeepICF_A)"
            ))),
        }
    }
}

/// Tower sizes `[k, k/2, k/4, …]` floored at 4.
pub fn tower_layer_sizes(k: usize, depth: usize) -> Vec<usize> {
    (0..depth).map(|l| (k >> l).max(4)).collect()
}

/// Architecture and training hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Embedding size.
    pub k: usize,
    /// Attention hidden size; only read by DeepICF+a.
    pub k_prime: usize,
    /// `d_1..d_L`. Empty for FISM.
    pub layer_sizes: Vec<usize>,
    /// History-length normalisation exponent of average pooling. DeepICF+a
    /// always pools with α = 0.
    pub alpha: f64,
    /// Softmax denominator exponent; only read by DeepICF+a.
    pub beta: f64,
    pub lambda: f64,
    /// Regularise the embedding rows touched by each instance as well.
    pub reg_embeddings: bool,
    pub use_bias: bool,
    /// Negatives per positive.
    pub num_negatives: usize,
    pub lr: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub init_std: f64,
    /// Initialise P and Q from a FISM model trained first.
    pub pretrain: bool,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f64,
    /// Evaluate every this many epochs during training; 0 disables.
    pub eval_every: usize,
}

impl ModelConfig {
    /// Defaults for `variant` with embedding size `k`: three tower layers for
    /// the deep variants, NS = 4, lr = 0.01, β = 0.5.
    pub fn new(variant: Variant, k: usize) -> Self {
        let layer_sizes = match variant {
            Variant::Fism => Vec::new(),
            _ => tower_layer_sizes(k, 3),
        };
        ModelConfig {
            variant,
            k,
            k_prime: k,
            layer_sizes,
            alpha: 0.0,
            beta: 0.5,
            lambda: 0.0,
            reg_embeddings: false,
            use_bias: true,
            num_negatives: 4,
            lr: 0.01,
            epsilon: 1e-8,
            batch_size: 1,
            epochs: 50,
            seed: 0,
            init_std: 0.01,
            pretrain: false,
            pretrain_epochs: 0,
            pretrain_lr: 0.01,
            eval_every: 0,
        }
    }

    pub fn depth(&self) -> usize {
        self.layer_sizes.len()
    }

    /// Width of the vector the prediction layer reads.
    pub fn output_width(&self) -> usize {
        self.layer_sizes.last().copied().unwrap_or(self.k)
    }

    /// The α applied by the pooling layer of this variant.
    pub fn pooling_alpha(&self) -> f64 {
        if self.variant.uses_attention() {
            0.0
        } else {
            self.alpha
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.k == 0 {
            return bad("k must be positive".into());
        }
        if self.variant.uses_attention() && self.k_prime == 0 {
            return bad("k_prime must be positive for DeepICF_A".into());
        }
        if self.variant == Variant::Fism && !self.layer_sizes.is_empty() {
            return bad("FISM has no hidden layers".into());
        }
        if self.layer_sizes.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return bad(format!("beta must lie in [0, 1], got {}", self.beta));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if !(self.lr >= 0.0) || !(self.pretrain_lr >= 0.0) {
            return bad("learning rates must be non-negative".into());
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.init_std >= 0.0) {
            return bad("init_std must be non-negative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
}

/// Attention network `h · ReLU(W v + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w: DenseMatrix,
    pub b: Vec<f64>,
    pub h: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// Target-item embeddings, one row per item.
    pub p: DenseMatrix,
    /// History-item embeddings, one row per item.
    pub q: DenseMatrix,
    pub b_user: Vec<f64>,
    pub b_item: Vec<f64>,
    pub z: Vec<f64>,
    pub layers: Vec<DenseLayer>,
    pub attention: Option<AttentionParams>,
}

impl ModelParams {
    /// All-zero parameters with the shapes `config` implies (`z` is all ones
    /// for FISM).
    pub fn zeros(config: &ModelConfig, num_users: usize, num_items: usize) -> Self {
        let k = config.k;
        let mut layers = Vec::with_capacity(config.depth());
        let mut fan_in = k;
        for &d in &config.layer_sizes {
            layers.push(DenseLayer {
                w: DenseMatrix::zeros(d, fan_in),
                b: vec![0.0; d],
            });
            fan_in = d;
        }
        let z_fill = if config.variant == Variant::Fism { 1.0 } else { 0.0 };
        ModelParams {
            p: DenseMatrix::zeros(num_items, k),
            q: DenseMatrix::zeros(num_items, k),
            b_user: vec![0.0; num_users],
            b_item: vec![0.0; num_items],
            z: vec![z_fill; config.output_width()],
            layers,
            attention: config.variant.uses_attention().then(|| AttentionParams {
                w: DenseMatrix::zeros(config.k_prime, k),
                b: vec![0.0; config.k_prime],
                h: vec![0.0; config.k_prime],
            }),
        }
    }

    pub fn num_users(&self) -> usize {
        self.b_user.len()
    }

    pub fn num_items(&self) -> usize {
        self.b_item.len()
    }

    /// Every tensor in storage order: P, Q, b_user, b_item, z, then each
    /// layer's (W, b), then the attention (W, b, h).
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![self.p.as_slice(), self.q.as_slice(), &self.b_user, &self.b_item, &self.z];
        for layer in &self.layers {
            out.push(layer.w.as_slice());
            out.push(&layer.b);
        }
        if let Some(att) = &self.attention {
            out.push(att.w.as_slice());
            out.push(&att.b);
            out.push(&att.h);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.p.as_mut_slice(),
            self.q.as_mut_slice(),
            &mut self.b_user,
            &mut self.b_item,
            &mut self.z,
        ];
        for layer in &mut self.layers {
            out.push(layer.w.as_mut_slice());
            out.push(&mut layer.b);
        }
        if let Some(att) = &mut self.attention {
            out.push(att.w.as_mut_slice());
            out.push(&mut att.b);
            out.push(&mut att.h);
        }
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut names: Vec<String> = ["P", "Q", "b_user", "b_item", "z"].iter().map(|s| s.to_string()).collect();
        for l in 1..=self.layers.len() {
            names.push(format!("W_{l}"));
            names.push(format!("b_{l}"));
        }
        if self.attention.is_some() {
            names.extend(["att_W", "att_b", "att_h"].iter().map(|s| s.to_string()));
        }
        names
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::Shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Checks that the stored shapes are the ones `config` implies.
    pub fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let expected = ModelParams::zeros(config, self.num_users(), self.num_items());
        let got: Vec<usize> = self.tensors().iter().map(|t| t.len()).collect();
        let want: Vec<usize> = expected.tensors().iter().map(|t| t.len()).collect();
        if got != want || self.p.cols() != config.k || self.q.cols() != config.k {
            return Err(Error::Shape(format!(
                "parameter tensor sizes {got:?} do not match configuration {want:?}"
            )));
        }
        Ok(())
    }
}

/// Gaussian(0, `config.init_std`) weights and zero biases. FISM keeps
/// `z = 1`.
pub fn init_params(config: &ModelConfig, num_users: usize, num_items: usize, rng: &SeededRng) -> Result<ModelParams> {
    if num_users == 0 || num_items == 0 {
        return Err(Error::Invalid("cannot initialise a model with no users or items".into()));
    }
    config.validate()?;
    let mut params = ModelParams::zeros(config, num_users, num_items);
    let normal = Normal::new(0.0, config.init_std)
        .map_err(|e| Error::Config(format!("init_std: {e}")))?;
    let mut rng = rng.substream("init");
    let mut fill = |xs: &mut [f64]| xs.iter_mut().for_each(|x| *x = normal.sample(&mut rng));

    fill(params.p.as_mut_slice());
    fill(params.q.as_mut_slice());
    if config.variant != Variant::Fism {
        fill(&mut params.z);
    }
    for layer in &mut params.layers {
        fill(layer.w.as_mut_slice());
    }
    if let Some(att) = &mut params.attention {
        fill(att.w.as_mut_slice());
        fill(&mut att.h);
    }
    Ok(params)
}

/// `{ q_j ⊙ p_i }` for the given history rows. The caller removes the target
/// item from `history_rows` first.
pub fn pairwise_interactions(history_rows: &[&[f64]], target: &[f64]) -> Vec<Vec<f64>> {
    history_rows.iter().map(|q| hadamard(q, target)).collect()
}

/// `|V|^{-α} Σ v`; the normaliser is 1 when `V` is empty.
pub fn pool_average(interactions: &[Vec<f64>], alpha: f64, k: usize) -> Vec<f64> {
    let mut pooled = vec![0.0; k];
    if interactions.is_empty() {
        return pooled;
    }
    let scale = average_normaliser(interactions.len(), alpha);
    for v in interactions {
        axpy(scale, v, &mut pooled);
    }
    pooled
}

fn average_normaliser(n: usize, alpha: f64) -> f64 {
    if n == 0 {
        1.0
    } else {
        (n as f64).powf(-alpha)
    }
}

/// Intermediate values of attention pooling kept for the backward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionCache {
    /// `W v + b` per interaction vector.
    pub hidden_pre: Vec<Vec<f64>>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `Σ a(v)·v` with `a = softmax_β(h · ReLU(W v + b))`.
pub fn pool_attention(
    interactions: &[Vec<f64>],
    att: &AttentionParams,
    beta: f64,
    k: usize,
) -> Result<(Vec<f64>, AttentionCache)> {
    let mut pooled = vec![0.0; k];
    if interactions.is_empty() {
        return Ok((pooled, AttentionCache::default()));
    }
    let mut hidden_pre = Vec::with_capacity(interactions.len());
    let mut scores = Vec::with_capacity(interactions.len());
    for v in interactions {
        let mut pre = att.w.matvec(v)?;
        axpy(1.0, &att.b, &mut pre);
        scores.push(pre.iter().zip(&att.h).map(|(a, h)| h * relu(*a)).sum());
        hidden_pre.push(pre);
    }
    let weights = softmax_beta(&scores, beta)?;
    for (v, w) in interactions.iter().zip(&weights) {
        axpy(*w, v, &mut pooled);
    }
    Ok((
        pooled,
        AttentionCache {
            hidden_pre,
            scores,
            weights,
        },
    ))
}

/// Runs the ReLU tower. Returns `(e_L, pre-activations, activations)`; with
/// no layers `e_L` is the input.
pub fn mlp_forward(input: &[f64], layers: &[DenseLayer]) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut pres = Vec::with_capacity(layers.len());
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
    for layer in layers {
        let x = acts.last().map(Vec::as_slice).unwrap_or(input);
        let mut pre = layer.w.matvec(x)?;
        if pre.len() != layer.b.len() {
            return Err(Error::Shape(format!(
                "layer bias has {} entries for {} outputs",
                layer.b.len(),
                pre.len()
            )));
        }
        axpy(1.0, &layer.b, &mut pre);
        acts.push(pre.iter().map(|&a| relu(a)).collect());
        pres.push(pre);
    }
    let out = acts.last().cloned().unwrap_or_else(|| input.to_vec());
    Ok((out, pres, acts))
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache {
    pub user: usize,
    pub item: usize,
    /// History items that took part, target removed.
    pub history: Vec<usize>,
    pub interactions: Vec<Vec<f64>>,
    pub attention: Option<AttentionCache>,
    pub pooled: Vec<f64>,
    pub hidden_pre: Vec<Vec<f64>>,
    pub hidden: Vec<Vec<f64>>,
    pub logit: f64,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.hidden.last().unwrap_or(&self.pooled)
    }
}

fn check_index(kind: &'static str, index: usize, bound: usize) -> Result<()> {
    if index >= bound {
        Err(Error::UnknownIndex { kind, index, bound })
    } else {
        Ok(())
    }
}

/// Scores item `item` for `user` given the user's history items. The target
/// is dropped from `history` if present.
pub fn predict_logit(
    params: &ModelParams,
    config: &ModelConfig,
    user: usize,
    history: &[usize],
    item: usize,
) -> Result<(f64, ForwardCache)> {
    check_index("user", user, params.num_users())?;
    check_index("item", item, params.num_items())?;
    for &j in history {
        check_index("item", j, params.num_items())?;
    }
    let k = config.k;
    let history: Vec<usize> = history.iter().copied().filter(|&j| j != item).collect();
    let rows: Vec<&[f64]> = history.iter().map(|&j| params.q.row(j)).collect();
    let interactions = pairwise_interactions(&rows, params.p.row(item));

    let (pooled, attention) = match config.variant {
        Variant::Fism | Variant::DeepIcf => (pool_average(&interactions, config.pooling_alpha(), k), None),
        Variant::DeepIcfAttention => {
            let att = params
                .attention
                .as_ref()
                .ok_or_else(|| Error::Shape("DeepICF_A parameters lack an attention network".into()))?;
            let (pooled, cache) = pool_attention(&interactions, att, config.beta, k)?;
            (pooled, Some(cache))
        }
    };

    let (output, hidden_pre, hidden) = mlp_forward(&pooled, &params.layers)?;
    let mut logit = match config.variant {
        Variant::Fism => output.iter().sum(),
        _ => {
            if params.z.len() != output.len() {
                return Err(Error::Shape(format!(
                    "z has {} entries for a {}-wide output",
                    params.z.len(),
                    output.len()
                )));
            }
            dot(&params.z, &output)
        }
    };
    if config.use_bias {
        logit += params.b_user[user] + params.b_item[item];
    }

    Ok((
        logit,
        ForwardCache {
            user,
            item,
            history,
            interactions,
            attention,
            pooled,
            hidden_pre,
            hidden,
            logit,
        },
    ))
}

/// Gradient of a scalar objective with respect to [`ModelParams`].
///
/// Embedding rows and biases are sparse (only touched rows are stored); the
/// network weights are dense.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub p_rows: BTreeMap<usize, Vec<f64>>,
    pub q_rows: BTreeMap<usize, Vec<f64>>,
    pub b_user: BTreeMap<usize, f64>,
    pub b_item: BTreeMap<usize, f64>,
    pub z: Vec<f64>,
    pub layers: Vec<DenseLayer>,
    pub attention: Option<AttentionParams>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Gradients {
            p_rows: BTreeMap::new(),
            q_rows: BTreeMap::new(),
            b_user: BTreeMap::new(),
            b_item: BTreeMap::new(),
            z: vec![0.0; params.z.len()],
            layers: params
                .layers
                .iter()
                .map(|l| DenseLayer {
                    w: DenseMatrix::zeros(l.w.rows(), l.w.cols()),
                    b: vec![0.0; l.b.len()],
                })
                .collect(),
            attention: params.attention.as_ref().map(|a| AttentionParams {
                w: DenseMatrix::zeros(a.w.rows(), a.w.cols()),
                b: vec![0.0; a.b.len()],
                h: vec![0.0; a.h.len()],
            }),
        }
    }

    fn add_row(rows: &mut BTreeMap<usize, Vec<f64>>, index: usize, scale: f64, values: &[f64]) {
        let row = rows.entry(index).or_insert_with(|| vec![0.0; values.len()]);
        axpy(scale, values, row);
    }

    /// `self += scale · other`
    pub fn accumulate(&mut self, other: &Gradients, scale: f64) {
        for (&i, row) in &other.p_rows {
            Self::add_row(&mut self.p_rows, i, scale, row);
        }
        for (&j, row) in &other.q_rows {
            Self::add_row(&mut self.q_rows, j, scale, row);
        }
        for (&u, g) in &other.b_user {
            *self.b_user.entry(u).or_insert(0.0) += scale * g;
        }
        for (&i, g) in &other.b_item {
            *self.b_item.entry(i).or_insert(0.0) += scale * g;
        }
        axpy(scale, &other.z, &mut self.z);
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            axpy(scale, theirs.w.as_slice(), mine.w.as_mut_slice());
            axpy(scale, &theirs.b, &mut mine.b);
        }
        if let (Some(mine), Some(theirs)) = (&mut self.attention, &other.attention) {
            axpy(scale, theirs.w.as_slice(), mine.w.as_mut_slice());
            axpy(scale, &theirs.b, &mut mine.b);
            axpy(scale, &theirs.h, &mut mine.h);
        }
    }

    /// Densified gradient in [`ModelParams::to_flat`] order.
    pub fn to_flat(&self, params: &ModelParams) -> Vec<f64> {
        let k = params.p.cols();
        let mut p = vec![0.0; params.p.as_slice().len()];
        for (&i, row) in &self.p_rows {
            p[i * k..(i + 1) * k].copy_from_slice(row);
        }
        let mut q = vec![0.0; params.q.as_slice().len()];
        for (&j, row) in &self.q_rows {
            q[j * k..(j + 1) * k].copy_from_slice(row);
        }
        let mut bu = vec![0.0; params.b_user.len()];
        for (&u, g) in &self.b_user {
            bu[u] = *g;
        }
        let mut bi = vec![0.0; params.b_item.len()];
        for (&i, g) in &self.b_item {
            bi[i] = *g;
        }
        let mut out = [p, q, bu, bi, self.z.clone()].concat();
        for layer in &self.layers {
            out.extend_from_slice(layer.w.as_slice());
            out.extend_from_slice(&layer.b);
        }
        if let Some(att) = &self.attention {
            out.extend_from_slice(att.w.as_slice());
            out.extend_from_slice(&att.b);
            out.extend_from_slice(&att.h);
        }
        out
    }

    pub fn is_zero(&self) -> bool {
        let sparse_zero = self.p_rows.values().chain(self.q_rows.values()).flatten().all(|&g| g == 0.0)
            && self.b_user.values().chain(self.b_item.values()).all(|&g| g == 0.0);
        let dense_zero = self.z.iter().all(|&g| g == 0.0)
            && self
                .layers
                .iter()
                .all(|l| l.w.as_slice().iter().chain(&l.b).all(|&g| g == 0.0))
            && self
                .attention
                .iter()
                .all(|a| a.w.as_slice().iter().chain(&a.b).chain(&a.h).all(|&g| g == 0.0));
        sparse_zero && dense_zero
    }
}

/// Back-propagates `d loss / d logit` through the cached forward pass.
/// Parameters the variant does not use receive no gradient.
pub fn backward(cache: &ForwardCache, params: &ModelParams, config: &ModelConfig, dlogit: f64) -> Gradients {
    let mut grads = Gradients::zeros_like(params);
    let k = config.k;

    if config.use_bias {
        grads.b_user.insert(cache.user, dlogit);
        grads.b_item.insert(cache.item, dlogit);
    }

    // d loss / d e_L
    let mut upstream: Vec<f64> = match config.variant {
        Variant::Fism => vec![dlogit; cache.output().len()],
        _ => {
            for (gz, e) in grads.z.iter_mut().zip(cache.output()) {
                *gz = dlogit * e;
            }
            params.z.iter().map(|z| dlogit * z).collect()
        }
    };

    for l in (0..params.layers.len()).rev() {
        let delta: Vec<f64> = upstream
            .iter()
            .zip(&cache.hidden_pre[l])
            .map(|(g, a)| g * relu_grad(*a))
            .collect();
        let input = if l == 0 { &cache.pooled } else { &cache.hidden[l - 1] };
        grads.layers[l].w.add_outer(1.0, &delta, input);
        axpy(1.0, &delta, &mut grads.layers[l].b);
        upstream = params.layers[l]
            .w
            .matvec_transposed(&delta)
            .expect("layer shapes were checked in the forward pass");
    }
    let d_pooled = upstream;

    let n = cache.interactions.len();
    if n == 0 {
        return grads;
    }

    let d_interactions: Vec<Vec<f64>> = match (&cache.attention, &params.attention) {
        (Some(ac), Some(att)) => {
            let d_weights: Vec<f64> = cache.interactions.iter().map(|v| dot(&d_pooled, v)).collect();
            let d_scores = softmax_beta_backward(&ac.scores, &ac.weights, config.beta, &d_weights);
            let ga = grads.attention.as_mut().expect("attention gradients allocated with params");
            cache
                .interactions
                .iter()
                .enumerate()
                .map(|(t, v)| {
                    let mut dv: Vec<f64> = d_pooled.iter().map(|g| ac.weights[t] * g).collect();
                    let ds = d_scores[t];
                    if ds != 0.0 {
                        let pre = &ac.hidden_pre[t];
                        let d_pre: Vec<f64> = pre
                            .iter()
                            .zip(&att.h)
                            .map(|(a, h)| ds * h * relu_grad(*a))
                            .collect();
                        for (gh, a) in ga.h.iter_mut().zip(pre) {
                            *gh += ds * relu(*a);
                        }
                        ga.w.add_outer(1.0, &d_pre, v);
                        axpy(1.0, &d_pre, &mut ga.b);
                        let back = att.w.matvec_transposed(&d_pre).expect("attention shapes checked");
                        axpy(1.0, &back, &mut dv);
                    }
                    dv
                })
                .collect()
        }
        _ => {
            let scale = average_normaliser(n, config.pooling_alpha());
            let dv: Vec<f64> = d_pooled.iter().map(|g| scale * g).collect();
            vec![dv; n]
        }
    };

    let target = params.p.row(cache.item);
    let mut dp = vec![0.0; k];
    for (&j, dv) in cache.history.iter().zip(&d_interactions) {
        let qj = params.q.row(j);
        for t in 0..k {
            dp[t] += dv[t] * qj[t];
        }
        grads.q_rows.insert(j, hadamard(dv, target));
    }
    grads.p_rows.insert(cache.item, dp);
    grads
}

//! Dense numeric kernels shared by the models: matrices, activations, the
//! logistic loss, the β-smoothed softmax and a central-difference gradient
//! helper used by the gradient checks.
//!
//! Everything here works in `f64`.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{}x{} matrix needs {} values, got {}",
                rows,
                cols,
                rows * cols,
                values.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, values })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} matrix by vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::Shape(format!(
                "cannot multiply transposed {}x{} matrix by vector of length {}",
                self.rows,
                self.cols,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), &mut out);
            }
        }
        Ok(out)
    }

    /// `self += scale · u vᵀ`
    pub fn add_outer(&mut self, scale: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, &ur) in u.iter().enumerate() {
            if ur != 0.0 {
                axpy(scale * ur, v, self.row_mut(r));
            }
        }
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a · x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Subgradient of ReLU; 0 at the kink.
#[inline]
pub fn relu_grad(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

const SMALLEST_POSITIVE: f64 = f64::from_bits(1);
const LARGEST_BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Logistic function. The result always lies strictly inside (0, 1): values
/// that would round to 0 or 1 are clamped to the nearest representable
/// neighbour.
pub fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(SMALLEST_POSITIVE, LARGEST_BELOW_ONE)
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Binary cross-entropy of a logit against a 0/1 label.
///
/// Returns `(loss, d loss / d logit)`. The loss uses
/// `softplus(logit) - label·logit`, which equals
/// `-[y ln σ(x) + (1-y) ln(1-σ(x))]` but never takes the log of a rounded
/// probability.
pub fn bce_from_logit(logit: f64, label: f64) -> (f64, f64) {
    let loss = (softplus(logit) - label * logit).max(0.0);
    (loss, sigmoid(logit) - label)
}

/// Natural log of `Σ exp(s)`, shifted by the maximum.
pub fn log_sum_exp(scores: &[f64]) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + scores.iter().map(|s| (s - max).exp()).sum::<f64>().ln()
}

/// Softmax with the denominator raised to `beta`:
/// `w_t = exp(s_t) / (Σ exp(s))^β`.
///
/// Computed as `exp(s_t − β·lse(s))` where `lse` is the max-shifted
/// log-sum-exp. The shift is undone exactly inside `lse`, so the result is
/// the unshifted quantity for every β; β = 1 gives the standard softmax and
/// β = 0 gives `exp(s_t)` with a denominator of exactly 1.
pub fn softmax_beta(scores: &[f64], beta: f64) -> Result<Vec<f64>> {
    if scores.is_empty() {
        return Err(Error::Invalid("softmax over an empty score vector".into()));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::NonFinite(format!("softmax score {bad}")));
    }
    if beta == 0.0 {
        return Ok(scores.iter().map(|s| s.exp()).collect());
    }
    let scaled = beta * log_sum_exp(scores);
    Ok(scores.iter().map(|s| (s - scaled).exp()).collect())
}

/// Vector-Jacobian product of [`softmax_beta`].
///
/// With `p` the ordinary softmax of `scores`,
/// `∂w_t/∂s_r = δ_tr·w_t − β·w_t·p_r`, so
/// `∂L/∂s_r = g_r·w_r − β·p_r·Σ_t g_t·w_t`.
pub fn softmax_beta_backward(scores: &[f64], weights: &[f64], beta: f64, upstream: &[f64]) -> Vec<f64> {
    debug_assert_eq!(scores.len(), weights.len());
    debug_assert_eq!(scores.len(), upstream.len());
    let coupled = dot(upstream, weights);
    if beta == 0.0 || coupled == 0.0 {
        return upstream.iter().zip(weights).map(|(g, w)| g * w).collect();
    }
    let lse = log_sum_exp(scores);
    scores
        .iter()
        .zip(weights)
        .zip(upstream)
        .map(|((s, w), g)| g * w - beta * (s - lse).exp() * coupled)
        .collect()
}

/// Central finite differences of `f` at `theta`, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, theta: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {h}")));
    }
    let mut point = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for t in 0..theta.len() {
        let orig = point[t];
        point[t] = orig + h;
        let plus = f(&point);
        point[t] = orig - h;
        let minus = f(&point);
        point[t] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {t}: f(+h)={plus}, f(-h)={minus}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Deterministic random stream keyed by a 64-bit seed.
///
/// Independent substreams are derived from a label (and optionally an
/// index), so e.g. the shuffle of epoch 3 does not depend on how many draws
/// epoch 2 consumed.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn substream(&self, label: &str) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ fnv1a(label.as_bytes())))
    }

    pub fn substream_indexed(&self, label: &str, index: u64) -> SeededRng {
        let base = splitmix64(self.seed ^ fnv1a(label.as_bytes()));
        SeededRng::new(splitmix64(base ^ splitmix64(index)))
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

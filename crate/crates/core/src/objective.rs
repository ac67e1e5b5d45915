//! Fine-tuning losses on cosine similarity in fused-feature space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Graph;
use crate::tensor::{ops, Rng, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    /// Margin.
    #[serde(default = "default_margin")]
    pub margin: f64,
    /// Scaling factor on similarities.
    #[serde(default = "default_scale")]
    pub scale: f64,
}

fn default_margin() -> f64 {
    0.1
}

fn default_scale() -> f64 {
    32.0
}

impl Default for LossParams {
    fn default() -> Self {
        Self { margin: default_margin(), scale: default_scale() }
    }
}

impl LossParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!("loss scale must be > 0, got {}", self.scale)));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!("loss margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorInit {
    /// Seeded standard normal entries.
    #[default]
    Random,
    /// Class means of the unadapted support embeddings.
    Custom,
}

/// One learnable anchor per class, row `n` belongs to class `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet<T: Scalar> {
    pub anchors: Tensor<T>,
}

impl<T: Scalar> AnchorSet<T> {
    pub fn random(n_way: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        let data: Vec<f64> = (0..n_way * dim).map(|_| rng.normal()).collect();
        Ok(Self { anchors: Tensor::from_f64(vec![n_way, dim], &data)? })
    }

    pub fn class_means(embeddings: &Tensor<T>, labels: &[usize], n_way: usize) -> Result<Self> {
        Ok(Self { anchors: class_means(embeddings, labels, n_way)? })
    }

    pub fn n_way(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.anchors.shape()[1]
    }
}

fn check_labels(m: usize, labels: &[usize], n_way: usize) -> Result<Vec<usize>> {
    if labels.len() != m {
        return Err(Error::shape("labels", format!("{} labels for {m} samples", labels.len())));
    }
    let mut counts = vec![0usize; n_way];
    for &y in labels {
        if y >= n_way {
            return Err(Error::Data(format!("label {y} out of range for {n_way} classes")));
        }
        counts[y] += 1;
    }
    Ok(counts)
}

/// Per-class arithmetic mean of the rows of `x: [M x D]`.
pub fn class_means<T: Scalar>(x: &Tensor<T>, labels: &[usize], n_way: usize) -> Result<Tensor<T>> {
    if x.rank() != 2 {
        return Err(Error::shape("class_means", format!("expected [M x D], got {:?}", x.shape())));
    }
    let counts = check_labels(x.shape()[0], labels, n_way)?;
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} has no samples")));
    }
    let d = x.shape()[1];
    let mut sums = vec![T::ZERO; n_way * d];
    for (row, &y) in x.data().chunks_exact(d).zip(labels) {
        for (s, &v) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (n, &c) in counts.iter().enumerate() {
        let c = T::from_f64(c as f64);
        for s in &mut sums[n * d..(n + 1) * d] {
            *s = *s / c;
        }
    }
    Tensor::new(vec![n_way, d], sums)
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine_sim<T: Scalar>(x: &[T], a: &[T]) -> Result<T> {
    ops::cosine(x, a, ops::EPS_NORM)
}

/// Proxy-anchor loss on `x: [M x D]` against `anchors: [N x D]`.
pub fn proxy_anchor_loss<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    x: &G::Value,
    labels: &[usize],
    anchors: &G::Value,
    params: &LossParams,
) -> Result<G::Value> {
    let sims = g.cosine_sim(x, anchors, ops::EPS_NORM)?;
    proxy_anchor_from_similarities(g, &sims, labels, params)
}

/// Proxy-anchor loss on a precomputed similarity matrix `s: [M x N]`: the
/// mean over anchors of [`proxy_anchor_terms`].
pub fn proxy_anchor_from_similarities<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    sims: &G::Value,
    labels: &[usize],
    params: &LossParams,
) -> Result<G::Value> {
    let per_anchor = proxy_anchor_terms(g, sims, labels, params)?;
    g.mean(&per_anchor).map_err(|e| e.with_context("proxy_anchor_loss"))
}

/// Per-anchor terms `[N]`:
///
/// `log(1 + sum_{x in P_a} exp(scale (margin - s))) + log(1 + sum_{x in N_a} exp(scale (s + margin)))`
///
/// An anchor without positives (or negatives) gets `log 1 = 0` for that half.
pub fn proxy_anchor_terms<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    sims: &G::Value,
    labels: &[usize],
    params: &LossParams,
) -> Result<G::Value> {
    params.validate()?;
    let shape = g.value(sims).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("proxy_anchor_loss", format!("similarities {shape:?}")));
    }
    let (m, n) = (shape[0], shape[1]);
    check_labels(m, labels, n)?;
    let pos: Vec<bool> = (0..m * n).map(|k| labels[k / n] == k % n).collect();
    let neg: Vec<bool> = pos.iter().map(|p| !p).collect();
    let (a, d) = (params.scale, params.margin);
    let zp = g.affine(sims, -a, a * d)?;
    let zn = g.affine(sims, a, a * d)?;
    let lp = g.log1p_sum_exp(&zp, pos)?;
    let ln = g.log1p_sum_exp(&zn, neg)?;
    g.add(&lp, &ln)
}

/// Cross-entropy over `temperature * cos(x_i, c_n)` with mean centroids
/// `c_n` recomputed from `x` itself.
pub fn ncc_loss<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    x: &G::Value,
    labels: &[usize],
    n_way: usize,
    temperature: f64,
) -> Result<G::Value> {
    let shape = g.value(x).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("ncc_loss", format!("embeddings {shape:?}")));
    }
    let m = shape[0];
    let counts = check_labels(m, labels, n_way)?;
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {empty} absent from support")));
    }
    let mut avg = vec![0.0; n_way * m];
    let mut onehot = vec![0.0; m * n_way];
    for (i, &y) in labels.iter().enumerate() {
        avg[y * m + i] = 1.0 / counts[y] as f64;
        onehot[i * n_way + y] = 1.0;
    }
    let avg = g.constant(Tensor::from_f64(vec![n_way, m], &avg)?);
    let onehot = g.constant(Tensor::from_f64(vec![m, n_way], &onehot)?);
    let centroids = g.matmul(&avg, x, false, false)?;
    let sims = g.cosine_sim(x, &centroids, ops::EPS_NORM)?;
    let logits = g.affine(&sims, temperature, 0.0)?;
    let logp = g.log_softmax(&logits)?;
    let picked = g.mul(&logp, &onehot)?;
    let total = g.sum(&picked)?;
    g.affine(&total, -1.0 / m as f64, 0.0)
}

//! Nearest-centroid inference under cosine similarity, plus cluster quality.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::class_means;
use crate::tensor::{ops, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidSource {
    /// Per-class mean of support embeddings.
    #[default]
    Mean,
    /// Learned anchors used directly as centroids.
    Anchor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidSet<T: Scalar> {
    pub centroids: Tensor<T>,
    pub source: CentroidSource,
}

impl<T: Scalar> CentroidSet<T> {
    pub fn from_anchors(anchors: Tensor<T>) -> Self {
        Self { centroids: anchors, source: CentroidSource::Anchor }
    }

    pub fn n_way(&self) -> usize {
        self.centroids.shape()[0]
    }
}

/// Exact per-class means of the support embeddings; classes are `0..n_way`.
pub fn compute_centroids<T: Scalar>(support: &Tensor<T>, labels: &[usize], n_way: usize) -> Result<CentroidSet<T>> {
    Ok(CentroidSet { centroids: class_means(support, labels, n_way)?, source: CentroidSource::Mean })
}

/// `argmax_n cos(q, c_n)` per query; ties go to the lowest class index.
pub fn classify<T: Scalar>(queries: &Tensor<T>, centroids: &CentroidSet<T>) -> Result<Vec<usize>> {
    let s = ops::cosine_matrix(queries, &centroids.centroids, ops::EPS_NORM)?;
    let n = centroids.n_way();
    Ok(s.data()
        .chunks_exact(n)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Fraction of `predicted` equal to `truth`.
pub fn accuracy(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::shape("accuracy", format!("{} predictions for {} labels", predicted.len(), truth.len())));
    }
    let correct = predicted.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(correct as f64 / truth.len() as f64)
}

/// Cluster quality under cosine distance `1 - s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    /// Mean pairwise distance between class centroids.
    pub inter: f64,
    /// Mean over samples of the mean distance to the other members of their class.
    pub intra: f64,
    /// Mean silhouette; samples in singleton classes contribute 0.
    pub silhouette: f64,
}

pub fn cluster_metrics<T: Scalar>(embeddings: &Tensor<T>, labels: &[usize]) -> Result<ClusterReport> {
    if embeddings.rank() != 2 || embeddings.shape()[0] != labels.len() {
        return Err(Error::shape(
            "cluster_metrics",
            format!("embeddings {:?} with {} labels", embeddings.shape(), labels.len()),
        ));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Data("cluster metrics need at least two classes".into()));
    }
    let dense: Vec<usize> = labels.iter().map(|y| classes.binary_search(y).expect("label present")).collect();
    let k = classes.len();
    let m = labels.len();
    let x = embeddings.cast::<f64>();
    let sim = ops::cosine_matrix(&x, &x, ops::EPS_NORM)?;
    let dist = |i: usize, j: usize| 1.0 - sim.data()[i * m + j];
    let mut sizes = vec![0usize; k];
    for &c in &dense {
        sizes[c] += 1;
    }

    let mut intra_sum = 0.0;
    let mut sil_sum = 0.0;
    let mut per_class = vec![0.0; k];
    for i in 0..m {
        per_class.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..m {
            if j != i {
                per_class[dense[j]] += dist(i, j);
            }
        }
        let own = dense[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = per_class[own] / (sizes[own] - 1) as f64;
        let b = (0..k).filter(|&c| c != own).map(|c| per_class[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
        intra_sum += a;
        let denom = a.max(b);
        if denom > 0.0 {
            sil_sum += (b - a) / denom;
        }
    }

    let centroids = class_means(&x, &dense, k)?;
    let csim = ops::cosine_matrix(&centroids, &centroids, ops::EPS_NORM)?;
    let mut inter_sum = 0.0;
    for p in 0..k {
        for q in p + 1..k {
            inter_sum += 1.0 - csim.data()[p * k + q];
        }
    }
    Ok(ClusterReport {
        inter: inter_sum / (k * (k - 1) / 2) as f64,
        intra: intra_sum / m as f64,
        silhouette: sil_sum / m as f64,
    })
}

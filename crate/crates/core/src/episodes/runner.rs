use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::Episode;
use crate::backbone::BackboneWeights;
use crate::classifier::{accuracy, classify, cluster_metrics, compute_centroids, CentroidSet};
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar};
use crate::trainer::{embed_images, finetune, FinetuneConfig};

/// One line of `results.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub episode_id: usize,
    pub seed: u64,
    pub n_way: usize,
    pub shots: Vec<usize>,
    /// Query accuracy with mean centroids.
    pub accuracy: f64,
    /// Query accuracy with the learned anchors as centroids.
    pub accuracy_anchor: f64,
    pub loss_first: f64,
    pub loss_last: f64,
    /// Cluster quality of the adapted query embeddings.
    pub silhouette: f64,
    pub intra: f64,
    pub inter: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_ms: Option<f64>,
}

/// Evaluation settings shared by every episode of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub finetune: FinetuneConfig,
    /// Keep `wall_ms` in the result.
    pub record_timing: bool,
}

/// Fine-tunes on the support set, then classifies the queries with mean and
/// anchor centroids.
pub fn evaluate_episode<T: Scalar>(
    weights: &BackboneWeights<T>,
    eval: &Evaluation,
    episode: &Episode<T>,
    episode_id: usize,
) -> Result<EpisodeResult> {
    let start = Instant::now();
    let mut cfg = eval.finetune.clone();
    cfg.seed = Rng::derive_seed(cfg.seed, episode.seed);
    let out = finetune(weights, &cfg, &episode.support, &episode.support_labels, episode.n_way)?;
    let adapters = Some(&out.adapters);
    let support = embed_images(weights, adapters, &episode.support, cfg.d_f)?;
    let query = embed_images(weights, adapters, &episode.query, cfg.d_f)?;
    let centroids = compute_centroids(&support, &episode.support_labels, episode.n_way)?;
    let acc = accuracy(&classify(&query, &centroids)?, &episode.query_labels)?;
    let anchors = CentroidSet::from_anchors(out.anchors.anchors.clone());
    let acc_anchor = accuracy(&classify(&query, &anchors)?, &episode.query_labels)?;
    let cluster = cluster_metrics(&query, &episode.query_labels)?;
    let wall_ms = start.elapsed().as_secs_f64() * 1e3;
    Ok(EpisodeResult {
        episode_id,
        seed: episode.seed,
        n_way: episode.n_way,
        shots: episode.shots.clone(),
        accuracy: acc,
        accuracy_anchor: acc_anchor,
        loss_first: out.trace.first().unwrap_or(f64::NAN),
        loss_last: out.trace.last().unwrap_or(f64::NAN),
        silhouette: cluster.silhouette,
        intra: cluster.intra,
        inter: cluster.inter,
        wall_ms: eval.record_timing.then_some(wall_ms),
    })
}

/// Worker count: `requested` (or all cores) capped by `DIPA_THREADS`.
pub fn worker_count(requested: Option<usize>) -> usize {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut n = requested.unwrap_or(cores).max(1);
    if let Some(cap) = std::env::var("DIPA_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        n = n.min(cap.max(1));
    }
    n
}

/// Runs `job(0..n)` on `workers` threads; the output is in index order
/// whatever the completion order.
pub fn run_parallel<R, F>(n: usize, workers: usize, job: F) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(|| (0..n).into_par_iter().map(&job).collect()))
}

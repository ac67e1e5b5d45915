//! Few-shot episodes: sampling from labelled pools, synthetic shifted-domain
//! tasks, evaluation and cross-episode statistics.

mod pool;
mod runner;
mod stats;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};

pub use pool::{load_pool, write_pool, Pool, PoolEntry};
pub use runner::{evaluate_episode, run_parallel, worker_count, EpisodeResult, Evaluation};
pub use stats::{aggregate, summarize, SummaryStats};
pub use synthetic::{make_synthetic_task, DomainShift, GaussianTaskSpec, SyntheticTask};

/// One support/query split. Labels are dense in `0..n_way` and both sets
/// contain every class.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode<T: Scalar> {
    /// `[M, C, H, W]`.
    pub support: Tensor<T>,
    pub support_labels: Vec<usize>,
    /// `[Q, C, H, W]`.
    pub query: Tensor<T>,
    pub query_labels: Vec<usize>,
    pub n_way: usize,
    /// Support samples per class.
    pub shots: Vec<usize>,
    pub seed: u64,
    /// Pool indices of the support and query samples.
    pub support_ids: Vec<usize>,
    pub query_ids: Vec<usize>,
}

impl<T: Scalar> Episode<T> {
    /// Checks the label and disjointness invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Data(m));
        if self.support.shape().first() != Some(&self.support_labels.len())
            || self.query.shape().first() != Some(&self.query_labels.len())
        {
            return bad("episode tensors and label counts disagree".into());
        }
        for labels in [&self.support_labels, &self.query_labels] {
            let mut seen = vec![false; self.n_way];
            for &y in labels {
                match seen.get_mut(y) {
                    Some(s) => *s = true,
                    None => return bad(format!("label {y} outside 0..{}", self.n_way)),
                }
            }
            if let Some(c) = seen.iter().position(|s| !s) {
                return bad(format!("class {c} missing from a split"));
            }
        }
        let mut ids = self.support_ids.clone();
        ids.extend(&self.query_ids);
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return bad("support and query share a sample".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SamplerMode {
    /// Way and per-class shots drawn uniformly from the configured ranges.
    VaryingWayVaryingShot,
    FixedWay {
        n_way: usize,
        shots: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub mode: SamplerMode,
    pub way_min: usize,
    pub way_max: usize,
    pub shot_min: usize,
    pub shot_max: usize,
    pub queries_per_class: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mode: SamplerMode::VaryingWayVaryingShot,
            way_min: 5,
            way_max: 50,
            shot_min: 2,
            shot_max: 10,
            queries_per_class: 10,
        }
    }
}

impl SamplerConfig {
    pub fn fixed(n_way: usize, shots: usize, queries_per_class: usize) -> Self {
        Self { mode: SamplerMode::FixedWay { n_way, shots }, queries_per_class, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.queries_per_class == 0 {
            return bad("queries_per_class must be >= 1".into());
        }
        match self.mode {
            SamplerMode::FixedWay { n_way, shots } => {
                if n_way < 2 || shots == 0 {
                    return bad(format!("fixed sampler needs n_way >= 2 and shots >= 1, got {n_way}, {shots}"));
                }
            }
            SamplerMode::VaryingWayVaryingShot => {
                if self.way_min < 2 || self.way_min > self.way_max {
                    return bad(format!("way range {}..={} is empty or below 2", self.way_min, self.way_max));
                }
                if self.shot_min == 0 || self.shot_min > self.shot_max {
                    return bad(format!("shot range {}..={} is empty", self.shot_min, self.shot_max));
                }
            }
        }
        Ok(())
    }

    /// Smallest per-class shot count the sampler can produce.
    pub fn min_shots(&self) -> usize {
        match self.mode {
            SamplerMode::FixedWay { shots, .. } => shots,
            SamplerMode::VaryingWayVaryingShot => self.shot_min,
        }
    }
}

/// Draws one episode. Classes are chosen uniformly, then per class the
/// support and query samples without replacement.
pub fn sample_episode<T: Scalar>(pool: &Pool<T>, config: &SamplerConfig, seed: u64) -> Result<Episode<T>> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let q = config.queries_per_class;
    let (n_way, fixed_shots) = match config.mode {
        SamplerMode::FixedWay { n_way, shots } => (n_way, Some(shots)),
        SamplerMode::VaryingWayVaryingShot => {
            let hi = config.way_max.min(pool.num_classes());
            if hi < config.way_min {
                return Err(Error::Data(format!(
                    "pool has {} classes, sampler needs at least {}",
                    pool.num_classes(),
                    config.way_min
                )));
            }
            (rng.range_inclusive(config.way_min, hi), None)
        }
    };
    let need = fixed_shots.unwrap_or(config.shot_min) + q;
    let eligible: Vec<usize> = (0..pool.num_classes()).filter(|&c| pool.class_members(c).len() >= need).collect();
    if eligible.len() < n_way {
        return Err(Error::Data(format!("{} classes have >= {need} samples, episode needs {n_way}", eligible.len())));
    }
    let classes: Vec<usize> = rng.choose(eligible.len(), n_way).into_iter().map(|i| eligible[i]).collect();

    let mut support_ids = Vec::new();
    let mut support_labels = Vec::new();
    let mut query_ids = Vec::new();
    let mut query_labels = Vec::new();
    let mut shots = Vec::with_capacity(n_way);
    for (label, &class) in classes.iter().enumerate() {
        let members = pool.class_members(class);
        let k = match fixed_shots {
            Some(k) => k,
            None => rng.range_inclusive(config.shot_min, config.shot_max.min(members.len() - q)),
        };
        let picked = rng.choose(members.len(), k + q);
        support_ids.extend(picked[..k].iter().map(|&i| members[i]));
        query_ids.extend(picked[k..].iter().map(|&i| members[i]));
        support_labels.extend(std::iter::repeat_n(label, k));
        query_labels.extend(std::iter::repeat_n(label, q));
        shots.push(k);
    }
    let episode = Episode {
        support: pool.gather(&support_ids)?,
        support_labels,
        query: pool.gather(&query_ids)?,
        query_labels,
        n_way,
        shots,
        seed,
        support_ids,
        query_ids,
    };
    episode.validate()?;
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(classes: usize, per_class: usize) -> Pool<f64> {
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..per_class {
                samples.push(Tensor::full(vec![1, 2, 2], (c * 1000 + i) as f64));
                labels.push(c * 7 + 3);
            }
        }
        Pool::new(samples, labels).unwrap()
    }

    #[test]
    fn fixed_way_sizes() {
        let p = pool(8, 20);
        let e = sample_episode(&p, &SamplerConfig::fixed(5, 5, 10), 3).unwrap();
        assert_eq!(e.support.shape(), &[25, 1, 2, 2]);
        assert_eq!(e.query.shape(), &[50, 1, 2, 2]);
        assert_eq!(e.shots, vec![5; 5]);
    }

    #[test]
    fn same_seed_same_episode() {
        let p = pool(12, 30);
        let cfg = SamplerConfig::default();
        assert_eq!(sample_episode(&p, &cfg, 9).unwrap(), sample_episode(&p, &cfg, 9).unwrap());
        assert_ne!(sample_episode(&p, &cfg, 9).unwrap(), sample_episode(&p, &cfg, 10).unwrap());
    }

    #[test]
    fn varying_way_stays_in_range() {
        let p = pool(7, 25);
        let cfg = SamplerConfig::default();
        for s in 0..1000 {
            let e = sample_episode(&p, &cfg, s).unwrap();
            assert!((5..=7).contains(&e.n_way), "{}", e.n_way);
            assert!(e.shots.iter().all(|&k| (2..=10).contains(&k)));
        }
    }

    #[test]
    fn samples_follow_their_ids() {
        let p = pool(6, 15);
        let e = sample_episode(&p, &SamplerConfig::fixed(5, 3, 4), 1).unwrap();
        for (row, &id) in e.support_ids.iter().enumerate() {
            assert_eq!(e.support.get(&[row, 0, 0, 0]), p.sample(id).data()[0]);
        }
    }

    #[test]
    fn insufficient_pool() {
        let p = pool(4, 20);
        assert!(sample_episode(&p, &SamplerConfig::default(), 0).is_err());
        assert!(sample_episode(&p, &SamplerConfig::fixed(4, 15, 10), 0).is_err());
    }
}

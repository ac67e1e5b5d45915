//! Episode runs and parameter sweeps, with their on-disk artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dipa_core::backbone::{init_random_weights, load_weights, BackboneWeights};
use dipa_core::episodes::{
    evaluate_episode, load_pool, make_synthetic_task, run_parallel, sample_episode, summarize, EpisodeResult,
    Evaluation, SummaryStats,
};
use dipa_core::tensor::{Rng, Scalar};
use dipa_core::trainer::LossKind;
use dipa_core::{DType, Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedEpisode {
    pub episode_id: usize,
    pub error: String,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub episodes: usize,
    pub completed: usize,
    pub d_t: usize,
    pub d_f: usize,
    pub fused_dim: usize,
    pub loss: LossKind,
    /// Mean-centroid query accuracy.
    pub accuracy: Option<SummaryStats>,
    /// Anchor-centroid query accuracy.
    pub accuracy_anchor: Option<SummaryStats>,
    pub silhouette: Option<SummaryStats>,
    pub failed: Vec<FailedEpisode>,
}

#[derive(Serialize)]
struct Timing {
    episode_id: usize,
    wall_ms: f64,
}

pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io_at(path, e))
}

fn write_lines<S: Serialize>(path: &Path, rows: impl IntoIterator<Item = S>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        serde_json::to_writer(&mut w, &row)?;
        w.write_all(b"\n").map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))
}

fn stats(results: &[EpisodeResult], f: fn(&EpisodeResult) -> f64) -> Result<Option<SummaryStats>> {
    if results.is_empty() {
        return Ok(None);
    }
    summarize(&results.iter().map(f).collect::<Vec<_>>()).map(Some)
}

fn evaluate_all<T: Scalar>(cfg: &RunConfig) -> Result<Vec<std::result::Result<EpisodeResult, Error>>> {
    let container = match &cfg.weights {
        Some(path) => load_weights(path)?,
        None => init_random_weights(&cfg.backbone, &mut Rng::new(cfg.weight_seed), cfg.init, DType::F64)?,
    };
    let weights = BackboneWeights::<T>::from_container(&cfg.backbone, &container, false)?;
    let pool = match &cfg.pool {
        Some(dir) => {
            let pool = load_pool::<T>(dir)?;
            let b = &cfg.backbone;
            let want = [b.in_chans, b.image_size, b.image_size];
            if pool.sample_shape() != want {
                return Err(Error::Data(format!(
                    "pool samples are {:?}, the backbone takes {want:?}",
                    pool.sample_shape()
                )));
            }
            Some(pool)
        }
        None => None,
    };
    let eval = Evaluation { finetune: cfg.finetune.clone(), record_timing: cfg.record_timing };
    run_parallel(cfg.episodes, cfg.workers, |i| {
        let seed = Rng::derive_seed(cfg.seed, i as u64);
        let episode = match &pool {
            Some(p) => sample_episode(p, &cfg.sampler, seed)?,
            None => make_synthetic_task::<T>(&cfg.synthetic, seed)?.episode,
        };
        evaluate_episode(&weights, &eval, &episode, i)
    })
}

/// Runs every episode and writes `resolved_config.json`, `results.jsonl`,
/// `summary.json` and, with timing on, `timings.jsonl` into `out`. Completed
/// episodes are written even when others fail.
pub fn run(cfg: &RunConfig, out: &Path) -> std::result::Result<RunSummary, CliError> {
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io_at(out, e))?;
    write_json(&out.join("resolved_config.json"), cfg)?;

    let outcomes = match cfg.precision {
        DType::F32 => evaluate_all::<f32>(cfg)?,
        DType::F64 => evaluate_all::<f64>(cfg)?,
    };
    let mut done = Vec::new();
    let mut failed = Vec::new();
    let mut first_error = None;
    for (i, r) in outcomes.into_iter().enumerate() {
        match r {
            Ok(r) => done.push(r),
            Err(e) => {
                failed.push(FailedEpisode { episode_id: i, error: e.to_string() });
                first_error.get_or_insert((i, e));
            }
        }
    }

    if cfg.record_timing {
        let rows = done.iter().map(|r| Timing { episode_id: r.episode_id, wall_ms: r.wall_ms.unwrap_or(f64::NAN) });
        write_lines(&out.join("timings.jsonl"), rows)?;
    }
    for r in &mut done {
        r.wall_ms = None;
    }
    write_lines(&out.join("results.jsonl"), &done)?;

    let summary = RunSummary {
        episodes: cfg.episodes,
        completed: done.len(),
        d_t: cfg.finetune.d_t,
        d_f: cfg.finetune.d_f,
        fused_dim: cfg.backbone.fused_dim(cfg.finetune.d_f)?,
        loss: cfg.finetune.loss,
        accuracy: stats(&done, |r| r.accuracy)?,
        accuracy_anchor: stats(&done, |r| r.accuracy_anchor)?,
        silhouette: stats(&done, |r| r.silhouette)?,
        failed,
    };
    write_json(&out.join("summary.json"), &summary)?;
    match first_error {
        Some((episode, source)) => Err(CliError::Episode { episode, source }),
        None => Ok(summary),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepParam {
    #[value(name = "d_t", alias = "d-t")]
    DT,
    #[value(name = "d_f", alias = "d-f")]
    DF,
    #[value(name = "iterations")]
    Iterations,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::DT => "d_t",
            SweepParam::DF => "d_f",
            SweepParam::Iterations => "iterations",
        }
    }

    fn apply(self, cfg: &mut RunConfig, value: usize) {
        match self {
            SweepParam::DT => cfg.finetune.d_t = value,
            SweepParam::DF => cfg.finetune.d_f = value,
            SweepParam::Iterations => cfg.finetune.iterations = value,
        }
    }
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: usize,
    pub fused_dim: usize,
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

/// Runs `cfg` once per value into `out/<param>=<value>` and tabulates the
/// accuracy summaries in `out/sweep.csv`.
pub fn sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[usize],
    out: &Path,
) -> std::result::Result<Vec<SweepRow>, CliError> {
    let mut configs = Vec::with_capacity(values.len());
    for &v in values {
        let mut c = cfg.clone();
        param.apply(&mut c, v);
        c.validate()?;
        configs.push(c);
    }
    fs::create_dir_all(out).map_err(|e| Error::io_at(out, e))?;
    let mut rows = Vec::new();
    for (c, &v) in configs.iter().zip(values) {
        let dir: PathBuf = out.join(format!("{}={v}", param.name()));
        let s = run(c, &dir)?;
        let acc = s.accuracy.expect("a successful run has results");
        rows.push(SweepRow {
            param: param.name().into(),
            value: v,
            fused_dim: s.fused_dim,
            mean: acc.mean,
            ci95: acc.ci95,
            n: acc.n,
        });
    }
    let path = out.join("sweep.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io_at(&path, e))?;
    Ok(rows)
}

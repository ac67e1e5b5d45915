//! Meta-test fine-tuning: scale/shift adapters and class anchors trained on
//! the support set with full-batch NAdam steps.

mod cache;
mod nadam;
mod probe;

use serde::{Deserialize, Serialize};

use crate::adapter::{attach, AdapterInit, AdapterSet, Hooks};
use crate::backbone::{AnyTensor, BackboneWeights, WeightContainer};
use crate::error::{Error, Result};
use crate::grad::{Eager, Graph, Tape, Var};
use crate::objective::{ncc_loss, proxy_anchor_loss, AnchorInit, AnchorSet, LossParams};
use crate::tensor::{Rng, Scalar, Tensor};

pub use cache::{build_prefix_cache, cached_features, uncached_features, PrefixCache};
pub use nadam::{nadam_step, NAdamConfig, NAdamState};
pub use probe::EndToEndProbe;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    #[default]
    ProxyAnchor,
    NccMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub lr_adapters: f64,
    pub lr_anchors: f64,
    pub loss: LossKind,
    /// Tuning depth.
    pub d_t: usize,
    /// Fusion depth.
    pub d_f: usize,
    pub adapter_init: AdapterInit,
    pub anchor_init: AnchorInit,
    pub loss_params: LossParams,
    /// Logit scale of the NCC loss.
    pub ncc_temperature: f64,
    pub nadam: NAdamConfig,
    pub use_cache: bool,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            iterations: 80,
            lr_adapters: 0.005,
            lr_anchors: 5.0,
            loss: LossKind::ProxyAnchor,
            d_t: 7,
            d_f: 4,
            adapter_init: AdapterInit::Constant,
            anchor_init: AnchorInit::Random,
            loss_params: LossParams::default(),
            ncc_temperature: 10.0,
            nadam: NAdamConfig::default(),
            use_cache: true,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, depth: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        for (name, lr) in [("lr_adapters", self.lr_adapters), ("lr_anchors", self.lr_anchors)] {
            if !(lr >= 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be finite and >= 0, got {lr}"));
            }
        }
        if self.d_t > depth {
            return bad(format!("d_t {} exceeds backbone depth {depth}", self.d_t));
        }
        if self.d_f == 0 || self.d_f > depth {
            return bad(format!("d_f {} outside 1..={depth}", self.d_f));
        }
        if !(self.ncc_temperature > 0.0) {
            return bad(format!("ncc_temperature must be > 0, got {}", self.ncc_temperature));
        }
        self.loss_params.validate()
    }
}

/// Loss value at the start of every iteration, before its update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub values: Vec<f64>,
}

impl LossTrace {
    pub fn first(&self) -> Option<f64> {
        self.values.first().copied()
    }

    pub fn last(&self) -> Option<f64> {
        self.values.last().copied()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.values.len() != other.values.len() {
            return f64::INFINITY;
        }
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome<T: Scalar> {
    pub adapters: AdapterSet<T>,
    pub anchors: AnchorSet<T>,
    pub trace: LossTrace,
    /// Bytes held by the prefix cache, 0 when uncached.
    pub cache_bytes: usize,
}

impl<T: Scalar> FinetuneOutcome<T> {
    /// Adapters, `anchors` and `loss_trace` as container entries.
    pub fn write_into(&self, c: &mut WeightContainer) -> Result<()> {
        self.adapters.write_into(c);
        c.insert("anchors", AnyTensor::from_typed(&self.anchors.anchors));
        let trace = Tensor::<f64>::new(vec![self.trace.values.len()], self.trace.values.clone())?;
        c.insert("loss_trace", AnyTensor::from_typed(&trace));
        Ok(())
    }
}

enum Source<'a, T: Scalar> {
    Cached(&'a PrefixCache<T>),
    Images(&'a Tensor<T>),
}

fn features<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    weights: &'w BackboneWeights<T>,
    source: &Source<'w, T>,
    hooks: &Hooks<G::Value>,
    d_f: usize,
) -> Result<G::Value> {
    match source {
        Source::Cached(c) => cached_features(g, weights, c, hooks, d_f),
        Source::Images(x) => uncached_features(g, weights, x, hooks, d_f),
    }
}

/// Fused embeddings of `images` under `adapters` (or the frozen backbone).
pub fn embed_images<T: Scalar>(
    weights: &BackboneWeights<T>,
    adapters: Option<&AdapterSet<T>>,
    images: &Tensor<T>,
    d_f: usize,
) -> Result<Tensor<T>> {
    let mut g = Eager;
    let hooks = match adapters {
        Some(a) => a.bind(&mut g),
        None => Hooks::none(weights.config.depth),
    };
    let z = uncached_features(&mut g, weights, images, &hooks, d_f)?;
    Ok(z.into_owned())
}

/// Fine-tunes adapters for the top `d_t` blocks and one anchor per class on
/// the support set. `labels` are dense in `0..n_way`. The backbone is never
/// modified.
pub fn finetune<T: Scalar>(
    weights: &BackboneWeights<T>,
    config: &FinetuneConfig,
    support: &Tensor<T>,
    labels: &[usize],
    n_way: usize,
) -> Result<FinetuneOutcome<T>> {
    let depth = weights.config.depth;
    config.validate(depth)?;
    if labels.is_empty() || support.shape().first() != Some(&labels.len()) {
        return Err(Error::Data(format!("support {:?} with {} labels", support.shape(), labels.len())));
    }
    let mut init_rng = Rng::new(Rng::derive_seed(config.seed, 1));
    let mut adapters = attach::<T>(&weights.config, config.d_t, config.adapter_init, &mut init_rng)?;

    let cache;
    let source = if config.use_cache {
        cache = build_prefix_cache(weights, support, config.d_t, config.d_f)?;
        Source::Cached(&cache)
    } else {
        Source::Images(support)
    };
    let cache_bytes = match &source {
        Source::Cached(c) => c.memory_bytes(),
        Source::Images(_) => 0,
    };

    let fused_dim = weights.config.fused_dim(config.d_f)?;
    let mut anchors = match config.anchor_init {
        AnchorInit::Random => {
            let mut rng = Rng::new(Rng::derive_seed(config.seed, 2));
            AnchorSet::random(n_way, fused_dim, &mut rng)?
        }
        AnchorInit::Custom => {
            let mut g = Eager;
            let hooks = adapters.bind(&mut g);
            let z = features(&mut g, weights, &source, &hooks, config.d_f)?;
            AnchorSet::class_means(&z, labels, n_way)?
        }
    };

    let adapter_refs: Vec<&Tensor<T>> = adapters.named_tensors().into_iter().map(|(_, t)| t).collect();
    let mut adapter_opt = NAdamState::for_params(config.nadam, &adapter_refs);
    let mut anchor_opt = NAdamState::for_params(config.nadam, &[&anchors.anchors]);
    let train_anchors = config.loss == LossKind::ProxyAnchor;

    let mut trace = LossTrace::default();
    for it in 0..config.iterations {
        let ctx = |e: Error| e.with_context(format!("iteration {it}"));
        let mut tape = Tape::new();
        let (hooks, adapter_vars) = adapters.bind_leaves(&mut tape);
        let z = features(&mut tape, weights, &source, &hooks, config.d_f).map_err(ctx)?;
        let (loss, anchor_var): (Var, Option<Var>) = match config.loss {
            LossKind::ProxyAnchor => {
                let a = tape.leaf(anchors.anchors.clone());
                let l = proxy_anchor_loss(&mut tape, &z, labels, &a, &config.loss_params).map_err(ctx)?;
                (l, Some(a))
            }
            LossKind::NccMean => {
                let l = ncc_loss(&mut tape, &z, labels, n_way, config.ncc_temperature).map_err(ctx)?;
                (l, None)
            }
        };
        let value = tape.value(&loss).item().to_f64();
        if !value.is_finite() {
            return Err(Error::non_finite("finetune", format!("loss {value} at iteration {it}")));
        }
        trace.values.push(value);

        let grads = tape.backward(loss).map_err(ctx)?;
        let adapter_grads: Vec<&Tensor<T>> = adapter_vars.iter().map(|&v| grads.of(v)).collect();
        nadam_step(&mut adapters.tensors_mut(), &adapter_grads, &mut adapter_opt, config.lr_adapters).map_err(ctx)?;
        if let (true, Some(a)) = (train_anchors, anchor_var) {
            nadam_step(&mut [&mut anchors.anchors], &[grads.of(a)], &mut anchor_opt, config.lr_anchors).map_err(ctx)?;
        }
    }
    Ok(FinetuneOutcome { adapters, anchors, trace, cache_bytes })
}

use crate::adapter::Hooks;
use crate::backbone::{embed, forward_range, fuse_features, BackboneWeights};
use crate::error::{Error, Result};
use crate::grad::{Eager, Graph};
use crate::tensor::{Scalar, Tensor};

/// Support-set activations at the frozen/trainable block boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixCache<T: Scalar> {
    /// First block that is replayed (`L - d_t`).
    pub start_block: usize,
    /// Token sequence entering `start_block`: `[B, T, e]`.
    pub tokens: Tensor<T>,
    /// Frozen [cls] outputs of blocks `L - d_f .. start_block` needed by
    /// fusion, block order.
    pub frozen_cls: Vec<Tensor<T>>,
}

impl<T: Scalar> PrefixCache<T> {
    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// Bytes held by the cached tensors.
    pub fn memory_bytes(&self) -> usize {
        let scalars = self.tokens.numel() + self.frozen_cls.iter().map(Tensor::numel).sum::<usize>();
        scalars * std::mem::size_of::<T>()
    }
}

fn check_depths(depth: usize, d_t: usize, d_f: usize) -> Result<()> {
    if d_t > depth {
        return Err(Error::Config(format!("tuning depth {d_t} exceeds backbone depth {depth}")));
    }
    if d_f == 0 || d_f > depth {
        return Err(Error::Config(format!("fusion depth {d_f} outside 1..={depth}")));
    }
    Ok(())
}

/// Runs the frozen blocks `0 .. L - d_t` once over `images`.
pub fn build_prefix_cache<T: Scalar>(
    weights: &BackboneWeights<T>,
    images: &Tensor<T>,
    d_t: usize,
    d_f: usize,
) -> Result<PrefixCache<T>> {
    let depth = weights.config.depth;
    check_depths(depth, d_t, d_f)?;
    let start = depth - d_t;
    let mut g = Eager;
    let x = embed(&mut g, weights, images)?;
    let out = forward_range(&mut g, weights, x, 0..start, &Hooks::none(depth))?;
    let keep_from = (depth - d_f).min(start);
    let frozen_cls = out.cls.into_iter().skip(keep_from).map(|c| c.into_owned()).collect();
    Ok(PrefixCache { start_block: start, tokens: out.tokens.into_owned(), frozen_cls })
}

/// Fused features replayed from `cache` through blocks `start_block .. L`.
pub fn cached_features<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    weights: &'w BackboneWeights<T>,
    cache: &'w PrefixCache<T>,
    hooks: &Hooks<G::Value>,
    d_f: usize,
) -> Result<G::Value> {
    let depth = weights.config.depth;
    check_depths(depth, depth - cache.start_block, d_f)?;
    if cache.frozen_cls.len() < (cache.start_block + d_f).saturating_sub(depth) {
        return Err(Error::Config(format!(
            "cache holds {} frozen [cls] outputs, fusion depth {d_f} needs more",
            cache.frozen_cls.len()
        )));
    }
    let tokens = g.weight(&cache.tokens);
    let out = forward_range(g, weights, tokens, cache.start_block..depth, hooks)?;
    let frozen: Vec<G::Value> = cache.frozen_cls.iter().map(|c| g.weight(c)).collect();
    let cls: Vec<&G::Value> = frozen.iter().chain(out.cls.iter()).collect();
    fuse_features(g, weights, &cls, d_f)
}

/// Fused features from raw images with a full forward pass.
pub fn uncached_features<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    weights: &'w BackboneWeights<T>,
    images: &Tensor<T>,
    hooks: &Hooks<G::Value>,
    d_f: usize,
) -> Result<G::Value> {
    let depth = weights.config.depth;
    check_depths(depth, 0, d_f)?;
    let x = embed(g, weights, images)?;
    let out = forward_range(g, weights, x, 0..depth, hooks)?;
    let cls: Vec<&G::Value> = out.cls.iter().collect();
    fuse_features(g, weights, &cls, d_f)
}

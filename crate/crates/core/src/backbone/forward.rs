use std::ops::Range;

use super::{BackboneWeights, FusionSource};
use crate::adapter::Hooks;
use crate::error::{Error, Result};
use crate::grad::Graph;
use crate::tensor::{Scalar, Tensor};

/// Per-block [cls] outputs (`[B, e]` each, block order) and the token
/// sequence after the last block that was run.
#[derive(Debug)]
pub struct LayerOutputs<V> {
    pub cls: Vec<V>,
    pub tokens: V,
}

/// `[B, C, H, W]` images to `[B, patches, C*p*p]`, patches in raster order and
/// features ordered `(channel, row, col)` to match `patch_embed.weight`.
pub fn unfold_patches<T: Scalar>(config: &super::BackboneConfig, images: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, s, p) = (config.in_chans, config.image_size, config.patch_size);
    if images.rank() != 4 || images.shape()[1..] != [c, s, s] {
        return Err(Error::shape(
            "patch_embed",
            format!("images {:?}, config expects [B, {c}, {s}, {s}]", images.shape()),
        ));
    }
    let b = images.shape()[0];
    let n = s / p;
    let feats = c * p * p;
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for bi in 0..b {
        for py in 0..n {
            for px in 0..n {
                for ci in 0..c {
                    for ky in 0..p {
                        let row = ((bi * c + ci) * s + py * p + ky) * s + px * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, n * n, feats], out)
}

/// Patch embedding plus [cls] token and positional embedding: `[B, T, e]`.
pub fn embed<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    w: &'w BackboneWeights<T>,
    images: &Tensor<T>,
) -> Result<G::Value> {
    let patches = unfold_patches(&w.config, images)?;
    let b = patches.shape()[0];
    let e = w.config.embed_dim;
    let x = g.constant(patches);
    let pw = g.weight(&w.patch_weight);
    let pb = g.weight(&w.patch_bias);
    let x = g.matmul(&x, &pw, false, true)?;
    let x = g.add(&x, &pb)?;
    let mut cls = Vec::with_capacity(b * e);
    for _ in 0..b {
        cls.extend_from_slice(w.cls_token.data());
    }
    let cls = g.constant(Tensor::new(vec![b, 1, e], cls)?);
    let x = g.concat(&[&cls, &x], 1)?;
    let pos = g.weight(&w.pos_embed);
    g.add(&x, &pos)
}

fn linear<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    x: &G::Value,
    weight: &'w Tensor<T>,
    bias: &'w Tensor<T>,
) -> Result<G::Value> {
    let wv = g.weight(weight);
    let bv = g.weight(bias);
    let y = g.matmul(x, &wv, false, true)?;
    g.add(&y, &bv)
}

fn hook<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    x: G::Value,
    pairs: Option<&[(G::Value, G::Value); 6]>,
    site: usize,
) -> Result<G::Value> {
    match pairs {
        Some(p) => g.scale_shift(&x, &p[site].0, &p[site].1),
        None => Ok(x),
    }
}

/// One pre-norm block on `x: [B, T, e]`.
pub fn block_forward<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    w: &'w BackboneWeights<T>,
    index: usize,
    x: &G::Value,
    adapters: Option<&[(G::Value, G::Value); 6]>,
) -> Result<G::Value> {
    let cfg = &w.config;
    let bw = &w.blocks[index];
    let shape = g.value(x).shape().to_vec();
    let (b, t, e) = (shape[0], shape[1], shape[2]);
    let (heads, dh) = (cfg.heads, cfg.head_dim());

    let ln1_g = g.weight(&bw.ln1_gain);
    let ln1_b = g.weight(&bw.ln1_bias);
    let h = g.layernorm(x, &ln1_g, &ln1_b, cfg.ln_eps)?;
    let h = hook(g, h, adapters, 0)?;
    let qkv = linear(g, &h, &bw.qkv_weight, &bw.qkv_bias)?;
    let qkv = g.reshape(&qkv, vec![b, t, 3, heads, dh])?;
    let qkv = g.permute(&qkv, &[2, 0, 3, 1, 4])?;
    let part = |g: &mut G, i: usize| -> Result<G::Value> {
        let s = g.slice(&qkv, 0, i, 1)?;
        g.reshape(&s, vec![b, heads, t, dh])
    };
    let q = part(g, 0)?;
    let k = part(g, 1)?;
    let v = part(g, 2)?;
    let scores = g.matmul(&q, &k, false, true)?;
    let scores = g.affine(&scores, 1.0 / (dh as f64).sqrt(), 0.0)?;
    let attn = g.softmax(&scores)?;
    let o = g.matmul(&attn, &v, false, false)?;
    let o = g.permute(&o, &[0, 2, 1, 3])?;
    let o = g.reshape(&o, vec![b, t, e])?;
    let o = linear(g, &o, &bw.proj_weight, &bw.proj_bias)?;
    let o = hook(g, o, adapters, 1)?;
    let x = g.add(x, &o)?;

    let ln2_g = g.weight(&bw.ln2_gain);
    let ln2_b = g.weight(&bw.ln2_bias);
    let h = g.layernorm(&x, &ln2_g, &ln2_b, cfg.ln_eps)?;
    let h = hook(g, h, adapters, 2)?;
    let h = linear(g, &h, &bw.fc1_weight, &bw.fc1_bias)?;
    let h = hook(g, h, adapters, 3)?;
    let h = g.gelu(&h)?;
    let h = hook(g, h, adapters, 4)?;
    let h = linear(g, &h, &bw.fc2_weight, &bw.fc2_bias)?;
    let h = hook(g, h, adapters, 5)?;
    g.add(&x, &h)
}

fn cls_of<'w, T: Scalar, G: Graph<'w, T>>(g: &mut G, x: &G::Value) -> Result<G::Value> {
    let shape = g.value(x).shape().to_vec();
    let c = g.slice(x, 1, 0, 1)?;
    g.reshape(&c, vec![shape[0], shape[2]])
}

/// Runs blocks `start..L` on `tokens`, collecting each block's [cls] output.
pub fn forward_blocks<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    w: &'w BackboneWeights<T>,
    tokens: G::Value,
    start: usize,
    hooks: &Hooks<G::Value>,
) -> Result<LayerOutputs<G::Value>> {
    forward_range(g, w, tokens, start..w.config.depth, hooks)
}

/// Runs the given blocks in order on `tokens`.
pub fn forward_range<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    w: &'w BackboneWeights<T>,
    tokens: G::Value,
    blocks: Range<usize>,
    hooks: &Hooks<G::Value>,
) -> Result<LayerOutputs<G::Value>> {
    let depth = w.config.depth;
    if blocks.start > blocks.end || blocks.end > depth {
        return Err(Error::Config(format!("block range {blocks:?} outside 0..{depth}")));
    }
    let mut x = tokens;
    let mut cls = Vec::with_capacity(blocks.len());
    for i in blocks {
        x = block_forward(g, w, i, &x, hooks.for_block(i)).map_err(|e| e.with_context(format!("block {i}")))?;
        cls.push(cls_of(g, &x)?);
    }
    Ok(LayerOutputs { cls, tokens: x })
}

/// Full forward from images.
pub fn forward<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    w: &'w BackboneWeights<T>,
    images: &Tensor<T>,
    hooks: &Hooks<G::Value>,
) -> Result<LayerOutputs<G::Value>> {
    let x = embed(g, w, images)?;
    forward_blocks(g, w, x, 0, hooks)
}

/// `concat(z_L, z_{L-1}, ..., z_{L-d_f+1})` along the feature axis, where
/// `cls` holds the per-block outputs in block order (`cls[L-1]` is z_L).
pub fn fuse_features<'w, T: Scalar, G: Graph<'w, T>>(
    g: &mut G,
    w: &'w BackboneWeights<T>,
    cls: &[&G::Value],
    d_f: usize,
) -> Result<G::Value> {
    if d_f == 0 || d_f > cls.len() {
        return Err(Error::Config(format!("fusion depth {d_f} outside 1..={}", cls.len())));
    }
    let picked: Vec<&G::Value> = cls.iter().rev().take(d_f).copied().collect();
    match w.config.fusion_source {
        FusionSource::Block => g.concat(&picked, 1),
        FusionSource::FinalNorm => {
            let gain = g.weight(&w.final_gain);
            let bias = g.weight(&w.final_bias);
            let normed =
                picked.iter().map(|z| g.layernorm(z, &gain, &bias, w.config.ln_eps)).collect::<Result<Vec<_>>>()?;
            let refs: Vec<&G::Value> = normed.iter().collect();
            g.concat(&refs, 1)
        }
    }
}

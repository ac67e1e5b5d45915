//! ViT encoder: patch embedding, pre-norm transformer blocks, final norm.

mod format;
mod forward;
mod weights;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{load_weights, read_container, save_weights, write_container, MAGIC};
pub use forward::{
    block_forward, embed, forward, forward_blocks, forward_range, fuse_features, unfold_patches, LayerOutputs,
};
pub use weights::{init_random_weights, AnyTensor, BackboneWeights, BlockWeights, InitScheme, WeightContainer};

/// Which tensor represents a layer in the fused feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSource {
    /// Raw [cls] output of each block.
    #[default]
    Block,
    /// Each block's [cls] output passed through the final layernorm.
    FinalNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_in_chans")]
    pub in_chans: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    #[serde(default)]
    pub fusion_source: FusionSource,
}

fn default_in_chans() -> usize {
    3
}

fn default_ln_eps() -> f64 {
    crate::tensor::ops::LN_EPS
}

impl BackboneConfig {
    /// ViT-small/16 at 224 px.
    pub fn vit_small() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            in_chans: 3,
            embed_dim: 384,
            depth: 12,
            heads: 6,
            mlp_ratio: 4.0,
            ln_eps: default_ln_eps(),
            fusion_source: FusionSource::Block,
        }
    }

    /// Two blocks of width 8 on 8x8 inputs; used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 8,
            patch_size: 4,
            in_chans: 3,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            mlp_ratio: 4.0,
            ln_eps: default_ln_eps(),
            fusion_source: FusionSource::Block,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.embed_dim == 0 || self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!("embed_dim {} must be a positive multiple of heads {}", self.embed_dim, self.heads));
        }
        if self.depth == 0 {
            return bad("depth must be >= 1".into());
        }
        if self.in_chans == 0 {
            return bad("in_chans must be >= 1".into());
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad(format!("mlp_ratio must be > 0, got {}", self.mlp_ratio));
        }
        if !(self.ln_eps > 0.0) {
            return bad(format!("ln_eps must be > 0, got {}", self.ln_eps));
        }
        Ok(())
    }

    pub fn hidden_dim(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn num_patches(&self) -> usize {
        let n = self.image_size / self.patch_size;
        n * n
    }

    /// Sequence length including the [cls] token.
    pub fn tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_features(&self) -> usize {
        self.in_chans * self.patch_size * self.patch_size
    }

    /// Width of the fused feature for fusion depth `d_f`.
    pub fn fused_dim(&self, d_f: usize) -> Result<usize> {
        if d_f == 0 || d_f > self.depth {
            return Err(Error::Config(format!("fusion depth {d_f} outside 1..={}", self.depth)));
        }
        Ok(d_f * self.embed_dim)
    }

    /// Every backbone tensor name with its shape, in canonical order.
    pub fn weight_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (e, h, p, c) = (self.embed_dim, self.hidden_dim(), self.patch_size, self.in_chans);
        let mut v = vec![
            ("patch_embed.weight".to_string(), vec![e, c, p, p]),
            ("patch_embed.bias".to_string(), vec![e]),
            ("cls_token".to_string(), vec![1, 1, e]),
            ("pos_embed".to_string(), vec![1, self.tokens(), e]),
        ];
        for i in 0..self.depth {
            let b = |s: &str| format!("blocks.{i}.{s}");
            v.extend([
                (b("ln1.gain"), vec![e]),
                (b("ln1.bias"), vec![e]),
                (b("attn.qkv.weight"), vec![3 * e, e]),
                (b("attn.qkv.bias"), vec![3 * e]),
                (b("attn.proj.weight"), vec![e, e]),
                (b("attn.proj.bias"), vec![e]),
                (b("ln2.gain"), vec![e]),
                (b("ln2.bias"), vec![e]),
                (b("mlp.fc1.weight"), vec![h, e]),
                (b("mlp.fc1.bias"), vec![h]),
                (b("mlp.fc2.weight"), vec![e, h]),
                (b("mlp.fc2.bias"), vec![e]),
            ]);
        }
        v.push(("final_norm.gain".to_string(), vec![e]));
        v.push(("final_norm.bias".to_string(), vec![e]));
        v
    }

    /// Total number of backbone scalars.
    pub fn param_count(&self) -> usize {
        self.weight_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

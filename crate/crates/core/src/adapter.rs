//! Per-channel scale/shift adapters on the top `d_t` blocks.

use serde::{Deserialize, Serialize};

use crate::backbone::{AnyTensor, BackboneConfig, WeightContainer};
use crate::error::{Error, Result};
use crate::grad::{Graph, Tape, Var};
use crate::tensor::{ops, Rng, Scalar, Tensor};

/// Adapter sites inside a block, in forward order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    Ln1,
    AttnProj,
    Ln2,
    Fc1,
    Gelu,
    Fc2,
}

impl Site {
    pub const ALL: [Site; 6] = [Site::Ln1, Site::AttnProj, Site::Ln2, Site::Fc1, Site::Gelu, Site::Fc2];

    pub fn name(self) -> &'static str {
        match self {
            Site::Ln1 => "ln1",
            Site::AttnProj => "attn_proj",
            Site::Ln2 => "ln2",
            Site::Fc1 => "fc1",
            Site::Gelu => "gelu",
            Site::Fc2 => "fc2",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn dim(self, config: &BackboneConfig) -> usize {
        match self {
            Site::Fc1 | Site::Gelu => config.hidden_dim(),
            _ => config.embed_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AdapterInit {
    /// gamma = 1, beta = 0.
    #[default]
    Constant,
    /// gamma ~ N(1, std^2), beta ~ N(0, std^2).
    Normal { std: f64 },
}

/// One `(gamma, beta)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleShift<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

/// Values bound to the adapter sites of a forward pass, indexed by block.
#[derive(Debug)]
pub struct Hooks<V> {
    first_block: usize,
    layers: Vec<[(V, V); 6]>,
}

impl<V> Hooks<V> {
    /// No adapters at all.
    pub fn none(depth: usize) -> Self {
        Self { first_block: depth, layers: Vec::new() }
    }

    pub fn for_block(&self, block: usize) -> Option<&[(V, V); 6]> {
        block.checked_sub(self.first_block).and_then(|j| self.layers.get(j))
    }

    pub fn first_block(&self) -> usize {
        self.first_block
    }

    /// Hooks from values in [`AdapterSet::named_tensors`] order: per block,
    /// per site, gamma then beta.
    pub fn from_flat(first_block: usize, values: Vec<V>) -> Result<Self> {
        if !values.len().is_multiple_of(12) {
            return Err(Error::Config(format!("{} adapter values do not fill whole blocks of 12", values.len())));
        }
        let mut it = values.into_iter();
        let mut layers = Vec::new();
        while it.len() > 0 {
            layers.push(std::array::from_fn(|_| {
                let g = it.next().expect("length checked");
                let b = it.next().expect("length checked");
                (g, b)
            }));
        }
        Ok(Self { first_block, layers })
    }
}

/// Adapter parameters for blocks `L - d_t .. L` (0-based block indices).
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet<T: Scalar> {
    config: BackboneConfig,
    tuning_depth: usize,
    layers: Vec<[ScaleShift<T>; 6]>,
}

/// Trainable scalars for tuning depth `d_t`: `2 d_t (4e + 2h)`.
pub fn adapter_param_count(config: &BackboneConfig, d_t: usize) -> usize {
    2 * d_t * (4 * config.embed_dim + 2 * config.hidden_dim())
}

/// Builds adapters for the top `d_t` blocks. `rng` is only drawn from for
/// [`AdapterInit::Normal`].
pub fn attach<T: Scalar>(
    config: &BackboneConfig,
    d_t: usize,
    init: AdapterInit,
    rng: &mut Rng,
) -> Result<AdapterSet<T>> {
    config.validate()?;
    if d_t > config.depth {
        return Err(Error::Config(format!("tuning depth {d_t} exceeds backbone depth {}", config.depth)));
    }
    let mut make = |site: Site| {
        let d = site.dim(config);
        match init {
            AdapterInit::Constant => ScaleShift { gamma: Tensor::ones(vec![d]), beta: Tensor::zeros(vec![d]) },
            AdapterInit::Normal { std } => {
                let g: Vec<f64> = (0..d).map(|_| 1.0 + std * rng.normal()).collect();
                let b: Vec<f64> = (0..d).map(|_| std * rng.normal()).collect();
                ScaleShift {
                    gamma: Tensor::from_f64(vec![d], &g).expect("length d"),
                    beta: Tensor::from_f64(vec![d], &b).expect("length d"),
                }
            }
        }
    };
    let layers = (0..d_t).map(|_| Site::ALL.map(&mut make)).collect();
    Ok(AdapterSet { config: config.clone(), tuning_depth: d_t, layers })
}

impl<T: Scalar> AdapterSet<T> {
    pub fn tuning_depth(&self) -> usize {
        self.tuning_depth
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Index of the lowest adapted block.
    pub fn first_block(&self) -> usize {
        self.config.depth - self.tuning_depth
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn site(&self, block: usize, site: Site) -> Option<&ScaleShift<T>> {
        block.checked_sub(self.first_block()).and_then(|j| self.layers.get(j)).map(|l| &l[site.index()])
    }

    pub fn site_mut(&mut self, block: usize, site: Site) -> Option<&mut ScaleShift<T>> {
        let first = self.first_block();
        block.checked_sub(first).and_then(|j| self.layers.get_mut(j)).map(|l| &mut l[site.index()])
    }

    /// Every tensor with its container name, in canonical order
    /// (block, site, gamma before beta).
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let first = self.first_block();
        let mut out = Vec::with_capacity(12 * self.layers.len());
        for (j, layer) in self.layers.iter().enumerate() {
            for (site, pair) in Site::ALL.iter().zip(layer) {
                let stem = format!("ssf.{}.{}", first + j, site.name());
                out.push((format!("{stem}.gamma"), &pair.gamma));
                out.push((format!("{stem}.beta"), &pair.beta));
            }
        }
        out
    }

    /// Mutable tensors in the same order as [`named_tensors`](Self::named_tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers.iter_mut().flat_map(|l| l.iter_mut()).flat_map(|p| [&mut p.gamma, &mut p.beta]).collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Adapter tensors as graph constants (inference).
    pub fn bind<'w, G: Graph<'w, T>>(&'w self, g: &mut G) -> Hooks<G::Value> {
        Hooks {
            first_block: self.first_block(),
            layers: self.layers.iter().map(|l| l.each_ref().map(|p| (g.weight(&p.gamma), g.weight(&p.beta)))).collect(),
        }
    }

    /// Adapter tensors as trainable tape leaves; the returned vars follow
    /// [`named_tensors`](Self::named_tensors) order.
    pub fn bind_leaves(&self, tape: &mut Tape<'_, T>) -> (Hooks<Var>, Vec<Var>) {
        let mut vars = Vec::new();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                l.each_ref().map(|p| {
                    let g = tape.leaf(p.gamma.clone());
                    let b = tape.leaf(p.beta.clone());
                    vars.push(g);
                    vars.push(b);
                    (g, b)
                })
            })
            .collect();
        (Hooks { first_block: self.first_block(), layers }, vars)
    }

    pub fn write_into(&self, c: &mut WeightContainer) {
        for (name, t) in self.named_tensors() {
            c.insert(name, AnyTensor::from_typed(t));
        }
    }

    /// Reads `ssf.*` tensors for tuning depth `d_t` back from a container.
    pub fn read_from(config: &BackboneConfig, d_t: usize, c: &WeightContainer) -> Result<Self> {
        let mut set = attach::<T>(config, d_t, AdapterInit::Constant, &mut Rng::new(0))?;
        let names: Vec<String> = set.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, slot) in names.iter().zip(set.tensors_mut()) {
            let t = c.typed::<T>(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::Data(format!(
                    "adapter `{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(set)
    }
}

/// `gamma * x + beta` over the last axis.
pub fn scale_shift<T: Scalar>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    ops::scale_shift(x, gamma, beta)
}

/// Trainable-parameter accounting for one episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ParamReport {
    pub tuning_depth: usize,
    pub fused_dim: usize,
    pub adapter_params: usize,
    pub anchor_params: usize,
    pub total_trainable: usize,
    pub backbone_params: usize,
    /// Trainable adapter scalars as a percentage of the backbone.
    pub adapter_ratio_percent: f64,
    /// All trainable scalars as a percentage of the backbone.
    pub total_ratio_percent: f64,
}

/// Counts for `n_way` anchors of width `fused_dim` on top of the adapters.
pub fn count_params<T: Scalar>(adapters: &AdapterSet<T>, n_way: usize, fused_dim: usize) -> ParamReport {
    report(adapters.config(), adapters.tuning_depth(), adapters.param_count(), n_way, fused_dim)
}

/// Same as [`count_params`] from the closed-form adapter count.
pub fn count_params_for(config: &BackboneConfig, d_t: usize, n_way: usize, fused_dim: usize) -> ParamReport {
    report(config, d_t, adapter_param_count(config, d_t), n_way, fused_dim)
}

fn report(config: &BackboneConfig, d_t: usize, adapter: usize, n_way: usize, fused_dim: usize) -> ParamReport {
    let backbone = config.param_count();
    let anchor = n_way * fused_dim;
    ParamReport {
        tuning_depth: d_t,
        fused_dim,
        adapter_params: adapter,
        anchor_params: anchor,
        total_trainable: adapter + anchor,
        backbone_params: backbone,
        adapter_ratio_percent: 100.0 * adapter as f64 / backbone as f64,
        total_ratio_percent: 100.0 * (adapter + anchor) as f64 / backbone as f64,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert_eq, proptest};

    #[test]
    fn vit_small_counts() {
        let c = BackboneConfig::vit_small();
        assert_eq!(adapter_param_count(&c, 7), 64_512);
        assert_eq!(adapter_param_count(&c, 9), 82_944);
        assert_eq!(adapter_param_count(&c, 12), 110_592);
        let r = count_params_for(&c, 7, 5, 1536);
        assert_eq!(r.anchor_params, 7_680);
        assert!((r.adapter_ratio_percent - 0.30).abs() < 0.005, "{}", r.adapter_ratio_percent);
    }

    #[test]
    fn zero_depth_is_empty() {
        let a = attach::<f64>(&BackboneConfig::tiny(), 0, AdapterInit::Constant, &mut Rng::new(0)).unwrap();
        assert!(a.is_empty());
        assert_eq!(a.param_count(), 0);
    }

    #[test]
    fn too_deep_is_rejected() {
        let c = BackboneConfig::tiny();
        assert!(attach::<f64>(&c, 3, AdapterInit::Constant, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn constant_init_draws_nothing() {
        let c = BackboneConfig::tiny();
        let mut rng = Rng::new(8);
        attach::<f32>(&c, 2, AdapterInit::Constant, &mut rng).unwrap();
        assert_eq!(rng.next_u64(), Rng::new(8).next_u64());
    }

    #[test]
    fn names_follow_scheme() {
        let c = BackboneConfig::tiny();
        let a = attach::<f64>(&c, 1, AdapterInit::Constant, &mut Rng::new(0)).unwrap();
        let names: Vec<String> = a.named_tensors().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "ssf.1.ln1.gamma");
        assert_eq!(names[11], "ssf.1.fc2.beta");
        assert_eq!(names.len(), 12);
    }

    #[test]
    fn scale_shift_examples() {
        let x = Tensor::<f64>::from_f64(vec![2], &[1.0, 2.0]).unwrap();
        let g = Tensor::from_f64(vec![2], &[2.0, 3.0]).unwrap();
        let b = Tensor::from_f64(vec![2], &[0.5, -1.0]).unwrap();
        assert_eq!(scale_shift(&x, &g, &b).unwrap().data(), &[2.5, 5.0]);
        let x = Tensor::<f64>::from_f64(vec![3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = scale_shift(&x, &Tensor::zeros(vec![2]), &b).unwrap();
        assert!(y.data().chunks(2).all(|r| r == b.data()));
        let y = scale_shift(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2])).unwrap();
        assert_eq!(y, x);
        assert!(scale_shift(&x, &Tensor::ones(vec![3]), &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn container_roundtrip() {
        let c = BackboneConfig::tiny();
        let a = attach::<f64>(&c, 2, AdapterInit::Normal { std: 0.02 }, &mut Rng::new(4)).unwrap();
        let mut wc = WeightContainer::new();
        a.write_into(&mut wc);
        let b = AdapterSet::<f64>::read_from(&c, 2, &wc).unwrap();
        assert_eq!(a, b);
    }

    proptest! {
        #[test]
        fn count_matches_enumeration(e_mul in 1usize..6, heads in 1usize..4, depth in 1usize..6,
                                     ratio in 1usize..5, d_frac in 0.0f64..=1.0) {
            let config = BackboneConfig {
                image_size: 8,
                patch_size: 4,
                in_chans: 3,
                embed_dim: e_mul * heads * 2,
                depth,
                heads,
                mlp_ratio: ratio as f64,
                ln_eps: 1e-6,
                fusion_source: Default::default(),
            };
            let d_t = (d_frac * depth as f64).round() as usize;
            let a = attach::<f32>(&config, d_t, AdapterInit::Constant, &mut Rng::new(0)).unwrap();
            let enumerated: usize = a.named_tensors().iter().map(|(_, t)| t.numel()).sum();
            prop_assert_eq!(enumerated, adapter_param_count(&config, d_t));
            prop_assert_eq!(a.named_tensors().len(), 12 * d_t);
        }
    }
}

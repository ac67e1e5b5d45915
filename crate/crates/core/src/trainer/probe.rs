//! The fine-tuning objective as a function of adapters and anchors, for
//! finite-difference checks through the whole backbone.

use crate::adapter::{attach, AdapterInit, Hooks};
use crate::backbone::{init_random_weights, BackboneConfig, BackboneWeights, InitScheme};
use crate::error::Result;
use crate::grad::check::LossProbe;
use crate::grad::Graph;
use crate::objective::{proxy_anchor_loss, LossParams};
use crate::tensor::{DType, Rng, Scalar, Tensor};

use super::uncached_features;

/// Proxy-anchor loss of fused features over a small labelled batch, with
/// every block adapted and every block fused. Leaves are the adapter tensors
/// in container order followed by `anchors`.
#[derive(Debug, Clone)]
pub struct EndToEndProbe<T: Scalar> {
    weights: BackboneWeights<T>,
    images: Tensor<T>,
    labels: Vec<usize>,
    adapters: Vec<(String, Tensor<T>)>,
    anchors: Tensor<T>,
    params: LossParams,
}

impl<T: Scalar> EndToEndProbe<T> {
    /// Random point drawn in f64 and stored in `T`, so probes of different
    /// precisions built from the same seed describe the same function.
    pub fn new(config: &BackboneConfig, seed: u64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        let c = init_random_weights(config, &mut rng, InitScheme::TruncNormal { std: 0.2 }, DType::F64)?;
        let weights = BackboneWeights::from_container(config, &c, false)?;
        let depth = config.depth;
        let set = attach::<f64>(config, depth, AdapterInit::Normal { std: 0.1 }, &mut rng)?;
        let adapters = set.named_tensors().into_iter().map(|(name, t)| (name, t.cast())).collect();
        let (n_way, per_class) = (3, 2);
        let labels: Vec<usize> = (0..n_way * per_class).map(|i| i % n_way).collect();
        let shape = vec![labels.len(), config.in_chans, config.image_size, config.image_size];
        let images = random(&mut rng, shape)?;
        let anchors = random(&mut rng, vec![n_way, config.fused_dim(depth)?])?;
        Ok(Self { weights, images, labels, adapters, anchors, params: LossParams::default() })
    }
}

fn random<T: Scalar>(rng: &mut Rng, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
    Tensor::from_f64(shape, &data)
}

impl<T: Scalar> LossProbe<T> for EndToEndProbe<T> {
    fn leaves(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = self.adapters.clone();
        out.push(("anchors".into(), self.anchors.clone()));
        out
    }

    fn loss<'w, G: Graph<'w, T>>(&'w self, g: &mut G, leaves: &[G::Value]) -> Result<G::Value> {
        let depth = self.weights.config.depth;
        let (adapters, anchors) = leaves.split_at(self.adapters.len());
        let hooks = Hooks::from_flat(0, adapters.to_vec())?;
        let z = uncached_features(g, &self.weights, &self.images, &hooks, depth)?;
        proxy_anchor_loss(g, &z, &self.labels, &anchors[0], &self.params)
    }
}

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::BackboneConfig;
use crate::error::{Error, Result};
use crate::tensor::{DType, Rng, Scalar, Tensor};

/// A tensor of either element type, as stored in a container.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn from_typed<T: Scalar>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    pub fn to<T: Scalar>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub(crate) fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            AnyTensor::F32(t) => t.data().iter().for_each(|v| v.write_le(out)),
            AnyTensor::F64(t) => t.data().iter().for_each(|v| v.write_le(out)),
        }
    }
}

/// Named tensor store; iteration order is the sorted name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightContainer {
    tensors: BTreeMap<String, AnyTensor>,
}

impl WeightContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: AnyTensor) -> Option<AnyTensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn insert_typed<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.insert(name, AnyTensor::from_typed(t));
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.tensors.get(name)
    }

    pub fn require(&self, name: &str) -> Result<&AnyTensor> {
        self.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn typed<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        self.require(name).map(AnyTensor::to)
    }

    pub fn remove(&mut self, name: &str) -> Option<AnyTensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &AnyTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn total_scalars(&self) -> usize {
        self.tensors.values().map(AnyTensor::numel).sum()
    }

    /// Checks every tensor `config` requires is present with the implied
    /// shape. Names outside the backbone scheme are rejected unless
    /// `tolerant` is set.
    pub fn validate_backbone(&self, config: &BackboneConfig, tolerant: bool) -> Result<()> {
        config.validate()?;
        let expected = config.weight_shapes();
        for (name, shape) in &expected {
            let t = self.require(name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Data(format!(
                    "weight `{name}` has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        if !tolerant {
            let known: std::collections::BTreeSet<&str> = expected.iter().map(|(n, _)| n.as_str()).collect();
            if let Some(extra) = self.names().find(|n| !known.contains(n)) {
                return Err(Error::Data(format!("unexpected tensor `{extra}` in weight container")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitScheme {
    /// Weights and tokens from N(0, std) truncated at two standard
    /// deviations; zero biases; unit layernorm gains.
    TruncNormal { std: f64 },
}

impl Default for InitScheme {
    fn default() -> Self {
        InitScheme::TruncNormal { std: 0.02 }
    }
}

/// Seeded random backbone in the requested storage precision.
pub fn init_random_weights(
    config: &BackboneConfig,
    rng: &mut Rng,
    scheme: InitScheme,
    dtype: DType,
) -> Result<WeightContainer> {
    config.validate()?;
    let InitScheme::TruncNormal { std } = scheme;
    let mut out = WeightContainer::new();
    for (name, shape) in config.weight_shapes() {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".bias") {
            vec![0.0; n]
        } else if name.ends_with(".gain") {
            vec![1.0; n]
        } else {
            (0..n).map(|_| rng.trunc_normal(0.0, std)).collect()
        };
        let t = match dtype {
            DType::F32 => AnyTensor::F32(Tensor::from_f64(shape, &data)?),
            DType::F64 => AnyTensor::F64(Tensor::from_f64(shape, &data)?),
        };
        out.insert(name, t);
    }
    Ok(out)
}

/// Weights of one transformer block, linear layers stored `[out, in]`.
#[derive(Debug, Clone)]
pub struct BlockWeights<T: Scalar> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub qkv_weight: Tensor<T>,
    pub qkv_bias: Tensor<T>,
    pub proj_weight: Tensor<T>,
    pub proj_bias: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub fc1_weight: Tensor<T>,
    pub fc1_bias: Tensor<T>,
    pub fc2_weight: Tensor<T>,
    pub fc2_bias: Tensor<T>,
}

/// Typed, validated view of a backbone for one element type.
#[derive(Debug, Clone)]
pub struct BackboneWeights<T: Scalar> {
    pub config: BackboneConfig,
    /// `[e, C*p*p]`
    pub patch_weight: Tensor<T>,
    pub patch_bias: Tensor<T>,
    /// `[e]`
    pub cls_token: Tensor<T>,
    /// `[tokens, e]`
    pub pos_embed: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_gain: Tensor<T>,
    pub final_bias: Tensor<T>,
}

impl<T: Scalar> BackboneWeights<T> {
    pub fn from_container(config: &BackboneConfig, c: &WeightContainer, tolerant: bool) -> Result<Self> {
        c.validate_backbone(config, tolerant)?;
        let e = config.embed_dim;
        let blocks = (0..config.depth)
            .map(|i| {
                let get = |s: &str| c.typed::<T>(&format!("blocks.{i}.{s}"));
                Ok(BlockWeights {
                    ln1_gain: get("ln1.gain")?,
                    ln1_bias: get("ln1.bias")?,
                    qkv_weight: get("attn.qkv.weight")?,
                    qkv_bias: get("attn.qkv.bias")?,
                    proj_weight: get("attn.proj.weight")?,
                    proj_bias: get("attn.proj.bias")?,
                    ln2_gain: get("ln2.gain")?,
                    ln2_bias: get("ln2.bias")?,
                    fc1_weight: get("mlp.fc1.weight")?,
                    fc1_bias: get("mlp.fc1.bias")?,
                    fc2_weight: get("mlp.fc2.weight")?,
                    fc2_bias: get("mlp.fc2.bias")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            patch_weight: c.typed::<T>("patch_embed.weight")?.reshape(vec![e, config.patch_features()])?,
            patch_bias: c.typed("patch_embed.bias")?,
            cls_token: c.typed::<T>("cls_token")?.reshape(vec![e])?,
            pos_embed: c.typed::<T>("pos_embed")?.reshape(vec![config.tokens(), e])?,
            blocks,
            final_gain: c.typed("final_norm.gain")?,
            final_bias: c.typed("final_norm.bias")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BackboneConfig {
        BackboneConfig::tiny()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_random_weights(&tiny(), &mut Rng::new(3), InitScheme::default(), DType::F64).unwrap();
        let b = init_random_weights(&tiny(), &mut Rng::new(3), InitScheme::default(), DType::F64).unwrap();
        assert_eq!(a, b);
        let c = init_random_weights(&tiny(), &mut Rng::new(4), InitScheme::default(), DType::F64).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn init_scheme_gains_and_biases() {
        let w = init_random_weights(&tiny(), &mut Rng::new(1), InitScheme::default(), DType::F32).unwrap();
        for (name, t) in w.iter() {
            let v = t.to::<f64>();
            if name.ends_with(".gain") {
                assert!(v.data().iter().all(|&x| x == 1.0), "{name}");
            } else if name.ends_with(".bias") {
                assert!(v.data().iter().all(|&x| x == 0.0), "{name}");
            } else {
                assert!(v.data().iter().all(|&x| x.abs() <= 0.04 + 1e-7), "{name}");
            }
        }
        w.validate_backbone(&tiny(), false).unwrap();
        assert_eq!(w.total_scalars(), tiny().param_count());
    }

    #[test]
    fn validation_catches_missing_wrong_and_extra() {
        let base = init_random_weights(&tiny(), &mut Rng::new(1), InitScheme::default(), DType::F64).unwrap();
        let mut w = base.clone();
        w.remove("blocks.1.mlp.fc2.bias");
        assert!(matches!(w.validate_backbone(&tiny(), false), Err(Error::MissingWeight(_))));
        let mut w = base.clone();
        w.insert("cls_token", AnyTensor::F64(Tensor::zeros(vec![8])));
        assert!(matches!(w.validate_backbone(&tiny(), false), Err(Error::Data(_))));
        let mut w = base.clone();
        w.insert("head.weight", AnyTensor::F64(Tensor::zeros(vec![2])));
        assert!(w.validate_backbone(&tiny(), false).is_err());
        assert!(w.validate_backbone(&tiny(), true).is_ok());
    }
}

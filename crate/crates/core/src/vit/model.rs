use std::sync::Arc;

use indexmap::IndexMap;
use peft_forge_tensor::{Scalar, Tensor};
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::{names, ViTConfig};
use crate::{rng, Error, Result};

/// Weight initialization for a freshly built backbone.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// All weights zero; LayerNorm γ = 1, β = 0.
    Zeros,
    /// Matrices ~ N(0, 1/fan_in), CLS/positional ~ N(0, 0.02²), biases 0,
    /// LayerNorm γ = 1, β = 0.
    Random { seed: u64 },
}

/// Named backbone weights plus their architecture.
///
/// Parameters are shared behind `Arc`, so cloning a model or binding its
/// weights into a graph does not copy payloads.
#[derive(Clone)]
pub struct ViTModel<F: Scalar = f32> {
    config: ViTConfig,
    params: IndexMap<String, Arc<Tensor<F>>>,
}

impl<F: Scalar> std::fmt::Debug for ViTModel<F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ViTModel")
            .field("config", &self.config)
            .field("params", &self.params.len())
            .finish()
    }
}

impl<F: Scalar> ViTModel<F> {
    pub fn new(config: ViTConfig, init: Init) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::rng(match init {
            Init::Random { seed } => seed,
            Init::Zeros => 0,
        });
        let mut params = IndexMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = if name.ends_with(".gamma") {
                Tensor::ones(shape)
            } else {
                match init {
                    Init::Zeros => Tensor::zeros(shape),
                    Init::Random { .. } => {
                        let std = if name == names::CLS || name == names::POS {
                            0.02
                        } else if shape.len() == 2 {
                            (1.0 / shape[0] as f64).sqrt()
                        } else {
                            0.0
                        };
                        if std == 0.0 {
                            Tensor::zeros(shape)
                        } else {
                            let normal = Normal::new(0.0, std).expect("finite std");
                            Tensor::from_fn(shape, |_| F::from_f64(normal.sample(&mut rng)))
                        }
                    }
                }
            };
            params.insert(name, Arc::new(t));
        }
        Ok(ViTModel { config, params })
    }

    pub fn zeros(config: ViTConfig) -> Result<Self> {
        Self::new(config, Init::Zeros)
    }

    pub fn random(config: ViTConfig, seed: u64) -> Result<Self> {
        Self::new(config, Init::Random { seed })
    }

    /// Builds a model from a complete canonical parameter set.
    pub fn from_params(config: ViTConfig, mut source: IndexMap<String, Tensor<F>>) -> Result<Self> {
        config.validate()?;
        let mut params = IndexMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = source.swap_remove(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::TensorShape { name, expected: shape, found: t.shape().to_vec() });
            }
            params.insert(name, Arc::new(t));
        }
        for extra in source.keys() {
            log::warn!("ignoring non-canonical tensor `{extra}`");
        }
        Ok(ViTModel { config, params })
    }

    pub fn config(&self) -> &ViTConfig {
        &self.config
    }

    pub fn param(&self, name: &str) -> Result<&Arc<Tensor<F>>> {
        self.params.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    pub fn params(&self) -> impl Iterator<Item = (&str, &Arc<Tensor<F>>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Replaces a parameter, keeping its shape.
    pub fn set_param(&mut self, name: &str, value: Tensor<F>) -> Result<()> {
        let slot = self.params.get_mut(name).ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::TensorShape {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: value.shape().to_vec(),
            });
        }
        *slot = Arc::new(value);
        Ok(())
    }

    /// Scalar parameter count over names accepted by `filter`.
    pub fn count_parameters(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params.iter().filter(|(k, _)| filter(k)).map(|(_, v)| v.numel()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ViTModel<G> {
        ViTModel {
            config: self.config.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), Arc::new(v.cast::<G>()))).collect(),
        }
    }

    /// SHA-256 over names, shapes and exact value bits.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.params {
            h.update(name.as_bytes());
            for &s in t.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.to_f64().to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

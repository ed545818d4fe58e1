//! Small-scale backbone pre-fitting on synthetic base classes, so that
//! fine-tuning experiments start from a feature extractor rather than noise.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, Dataset, SamplerConfig};
use crate::finetune::{prototype_loss, Adam, AdamConfig, Distance};
use crate::vit::{ParamStore, Session, ViTConfig, ViTModel};
use crate::{rng, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrefitConfig {
    /// Prototypical training episodes.
    pub steps: usize,
    pub lr: f64,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub seed: u64,
}

impl Default for PrefitConfig {
    fn default() -> Self {
        PrefitConfig { steps: 300, lr: 2e-3, way: 5, shot: 5, query: 5, seed: 0 }
    }
}

/// Trains every backbone parameter of a randomly initialized model with
/// episodic prototypical cross-entropy on `base`.
pub fn prefit(config: &ViTConfig, base: &Dataset, cfg: &PrefitConfig) -> Result<ViTModel<f32>> {
    let init = ViTModel::<f32>::random(config.clone(), rng::split(cfg.seed, 0))?;
    let mut store: ParamStore<f32> = init.params().map(|(k, v)| (k.to_string(), Arc::clone(v))).collect();
    let names: Vec<String> = store.keys().cloned().collect();
    let mut adam = Adam::new(AdamConfig::default());
    let sampler = SamplerConfig { seed: rng::split(cfg.seed, 1), ..SamplerConfig::fixed(cfg.way, cfg.shot, cfg.query) };
    for step in 0..cfg.steps {
        let ep = sample_episode(base, &sampler, sampler.task_seed(step))?;
        let grads = {
            let mut s = Session::new(&init, &store, names.iter().map(String::as_str));
            let loss = prototype_loss(
                &mut s,
                &ep.support_images,
                &ep.support_labels,
                ep.num_classes,
                &ep.query_images,
                &ep.query_labels,
                Distance::SqEuclidean,
            )?;
            let mut g = s.graph.backward(loss)?;
            names
                .iter()
                .filter_map(|n| s.var(n).and_then(|v| g.take(v)).map(|t| (n.clone(), t)))
                .collect::<Vec<_>>()
        };
        let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos());
        adam.step(&mut store, &grads, lr)?;
    }
    let params = store.into_iter().map(|(k, v)| (k, Arc::unwrap_or_clone(v))).collect();
    ViTModel::from_params(config.clone(), params)
}

use peft_forge_tensor::Scalar;
use serde::{Deserialize, Serialize};

use super::stats::mean_ci95;
use crate::data::Episode;
use crate::finetune::{finetune_episode, FinetuneConfig};
use crate::peft::PeftSpec;
use crate::vit::ViTModel;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// The varied layer `k`; the final layer is always included.
    pub position: usize,
    pub layers: Vec<usize>,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

/// Fine-tunes `spec` restricted to layers `{k, L−1}` for every `k < L−1`.
pub fn layer_sweep<F: Scalar>(
    spec: &PeftSpec,
    model: &ViTModel<F>,
    episodes: &[Episode],
    cfg: &FinetuneConfig,
    lr: f64,
) -> Result<Vec<SweepRow>> {
    let depth = model.config().depth;
    if depth < 2 {
        return Err(Error::Config(format!("layer sweep needs depth >= 2, got {depth}")));
    }
    (0..depth - 1)
        .map(|k| {
            let layers = vec![k, depth - 1];
            let masked = spec.clone().with_mask(layers.clone());
            let accuracies = episodes
                .iter()
                .map(|e| finetune_episode(model, &masked, e, cfg, lr).map(|r| r.accuracy))
                .collect::<Result<Vec<_>>>()?;
            let m = mean_ci95(&accuracies);
            Ok(SweepRow { position: k, layers, mean_accuracy: m.mean, ci95: m.ci95, accuracies })
        })
        .collect()
}

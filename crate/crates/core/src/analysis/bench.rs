use peft_forge_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::finetune::{finetune_episode, FinetuneConfig};
use crate::peft::{Method, PeftSpec};
use crate::vit::ViTModel;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    /// Leading episodes per method whose timings are discarded.
    pub warmup_episodes: usize,
    pub lr: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig { warmup_episodes: 1, lr: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub spec: String,
    pub median_step_secs: f64,
    /// Full fine-tuning median step time over this method's.
    pub ratio: f64,
    pub steps_timed: usize,
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median per-step wall time of each spec. Full fine-tuning is always timed
/// as the reference; methods are interleaved per episode.
pub fn bench_speedup<F: Scalar>(
    specs: &[PeftSpec],
    model: &ViTModel<F>,
    episodes: &[Episode],
    finetune: &FinetuneConfig,
    cfg: &BenchConfig,
) -> Result<Vec<BenchRow>> {
    let mut all: Vec<PeftSpec> = specs.to_vec();
    let full = all.iter().position(|s| s.method == Method::Full && s.combine.is_none()).unwrap_or_else(|| {
        all.push(PeftSpec::new(Method::Full));
        all.len() - 1
    });
    let mut times: Vec<Vec<f64>> = vec![Vec::new(); all.len()];
    for (i, ep) in episodes.iter().enumerate() {
        for (spec, t) in all.iter().zip(times.iter_mut()) {
            let r = finetune_episode(model, spec, ep, finetune, cfg.lr)?;
            if i >= cfg.warmup_episodes {
                t.extend(r.step_secs);
            }
        }
    }
    let medians: Vec<f64> = times.iter().map(|t| median(t.clone())).collect();
    Ok(all
        .iter()
        .zip(&times)
        .zip(&medians)
        .map(|((spec, t), &m)| BenchRow { spec: spec.to_string(), median_step_secs: m, ratio: medians[full] / m, steps_timed: t.len() })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::median;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(Vec::new()).is_nan());
    }
}

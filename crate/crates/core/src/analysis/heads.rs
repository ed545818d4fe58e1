use peft_forge_tensor::Scalar;
use serde::{Deserialize, Serialize};

use crate::data::Episode;
use crate::vit::{embed, AttentionTrace, ForwardOptions, ParamStore, ViTModel};
use crate::{Error, Result};

/// Mean pairwise Pearson correlation between the post-softmax attention maps
/// of the heads of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    pub layer: usize,
    pub heads: usize,
    pub examples: usize,
    /// Row-major `heads × heads`.
    pub values: Vec<f64>,
}

impl CorrelationMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.heads + j]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks(self.heads)
    }

    /// Largest deviation from symmetry, unit diagonal and the `[−1, 1]` range.
    pub fn invariant_error(&self) -> f64 {
        let mut err = 0.0f64;
        for i in 0..self.heads {
            err = err.max((self.get(i, i) - 1.0).abs());
            for j in 0..self.heads {
                let v = self.get(i, j);
                err = err.max((v - self.get(j, i)).abs()).max(v.abs() - 1.0);
            }
        }
        err
    }
}

/// Correlations for `layer` from the support images of `episodes`.
pub fn head_correlation<F: Scalar>(model: &ViTModel<F>, episodes: &[Episode], layer: usize) -> Result<CorrelationMatrix> {
    let depth = model.config().depth;
    if layer >= depth {
        return Err(Error::Config(format!("layer {layer} out of range for depth {depth}")));
    }
    let heads = model.config().heads;
    let mut sum = vec![0.0; heads * heads];
    let mut examples = 0;
    for ep in episodes {
        let images = ep.support_images.cast::<F>();
        let opts = ForwardOptions { trace: true, ..Default::default() };
        let (_, trace) = embed(model, &ParamStore::new(), &images, opts)?;
        let m = head_correlation_from_trace(&trace.expect("trace requested"), layer)?;
        for (s, v) in sum.iter_mut().zip(&m.values) {
            *s += v * m.examples as f64;
        }
        examples += m.examples;
    }
    if examples == 0 {
        return Err(Error::UndefinedCorrelation("no examples".into()));
    }
    Ok(CorrelationMatrix { layer, heads, examples, values: sum.into_iter().map(|s| s / examples as f64).collect() })
}

/// Correlations averaged over every example of a recorded trace.
pub fn head_correlation_from_trace<F: Scalar>(trace: &AttentionTrace<F>, layer: usize) -> Result<CorrelationMatrix> {
    let t = trace
        .layers
        .get(layer)
        .ok_or_else(|| Error::Config(format!("trace has no layer {layer}")))?;
    let s = t.shape();
    let (b, heads, size) = (s[0], s[1], s[2] * s[3]);
    let mut sum = vec![0.0; heads * heads];
    let mut z = vec![0.0; heads * size];
    for e in 0..b {
        for h in 0..heads {
            let map = trace.map(layer, e, h);
            let mean = map.iter().map(|v| v.to_f64()).sum::<f64>() / size as f64;
            let row = &mut z[h * size..(h + 1) * size];
            for (o, v) in row.iter_mut().zip(map) {
                *o = v.to_f64() - mean;
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = map.iter().map(|v| v.to_f64().abs()).sum::<f64>().max(f64::MIN_POSITIVE);
            if norm <= 1e-12 * scale {
                return Err(Error::UndefinedCorrelation(format!(
                    "head {h} of layer {layer} has a constant attention map on example {e}"
                )));
            }
            row.iter_mut().for_each(|v| *v /= norm);
        }
        for i in 0..heads {
            for j in i..heads {
                let r = z[i * size..(i + 1) * size].iter().zip(&z[j * size..(j + 1) * size]).map(|(a, b)| a * b).sum::<f64>();
                sum[i * heads + j] += r.clamp(-1.0, 1.0);
            }
        }
    }
    let mut values = vec![0.0; heads * heads];
    for i in 0..heads {
        for j in i..heads {
            let v = if b == 0 { f64::NAN } else { sum[i * heads + j] / b as f64 };
            values[i * heads + j] = v;
            values[j * heads + i] = v;
        }
    }
    Ok(CorrelationMatrix { layer, heads, examples: b, values })
}

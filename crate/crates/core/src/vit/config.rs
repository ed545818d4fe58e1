use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Architecture hyperparameters of a pre-norm ViT with a CLS token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    /// Token embedding width `d`.
    pub dim: usize,
    /// Layer count `L`.
    pub depth: usize,
    /// Attention heads per layer `n_h`.
    pub heads: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    /// Epsilon inside the LayerNorm square root.
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_channels() -> usize {
    3
}
fn default_mlp_ratio() -> usize {
    4
}
fn default_ln_eps() -> f64 {
    1e-6
}

impl ViTConfig {
    /// ViT-S/16: d = 384, 12 layers, 6 heads.
    pub fn vit_s16(image_size: usize) -> Self {
        Self::preset(image_size, 16, 384, 12, 6)
    }

    /// ViT-B/16: d = 768, 12 layers, 12 heads.
    pub fn vit_b16(image_size: usize) -> Self {
        Self::preset(image_size, 16, 768, 12, 12)
    }

    /// d = 8, 2 layers, 2 heads on 4×4 images with 2×2 patches (n = 5).
    pub fn tiny() -> Self {
        Self::preset(4, 2, 8, 2, 2)
    }

    pub fn preset(image_size: usize, patch_size: usize, dim: usize, depth: usize, heads: usize) -> Self {
        ViTConfig {
            image_size,
            patch_size,
            channels: 3,
            dim,
            depth,
            heads,
            mlp_ratio: 4,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            problems.push(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            problems.push(format!("dim {} must be divisible by heads {}", self.dim, self.heads));
        }
        if self.depth == 0 {
            problems.push("depth must be positive".into());
        }
        if self.channels == 0 || self.mlp_ratio == 0 {
            problems.push("channels and mlp_ratio must be positive".into());
        }
        if !(self.ln_eps > 0.0) {
            problems.push(format!("ln_eps must be positive, got {}", self.ln_eps));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Token count `n` = patches + CLS.
    pub fn tokens(&self) -> usize {
        self.grid() * self.grid() + 1
    }

    /// Per-head width `d_e`.
    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.dim * self.mlp_ratio
    }

    /// Flattened patch length `C·p·p`.
    pub fn patch_len(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    /// Canonical parameter names and shapes, in archive order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.dim, self.mlp_dim());
        let mut out = vec![
            (names::PATCH_WEIGHT.to_string(), vec![self.patch_len(), d]),
            (names::PATCH_BIAS.to_string(), vec![d]),
            (names::CLS.to_string(), vec![d]),
            (names::POS.to_string(), vec![self.tokens(), d]),
        ];
        for i in 0..self.depth {
            let mut p = |group: &str, param: &str, shape: Vec<usize>| out.push((names::block(i, group, param), shape));
            p("norm1", "gamma", vec![d]);
            p("norm1", "beta", vec![d]);
            for proj in ["q", "k", "v", "proj"] {
                p("attn", &format!("{proj}_weight"), vec![d, d]);
                p("attn", &format!("{proj}_bias"), vec![d]);
            }
            p("norm2", "gamma", vec![d]);
            p("norm2", "beta", vec![d]);
            p("mlp", "fc1_weight", vec![d, h]);
            p("mlp", "fc1_bias", vec![h]);
            p("mlp", "fc2_weight", vec![h, d]);
            p("mlp", "fc2_bias", vec![d]);
        }
        out.push((names::NORM_GAMMA.to_string(), vec![d]));
        out.push((names::NORM_BETA.to_string(), vec![d]));
        out
    }

    /// Scalar parameter count of the backbone.
    pub fn parameter_count(&self) -> usize {
        self.parameter_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// Canonical parameter naming: `blocks.{i}.{attn|mlp|norm1|norm2}.{param}`.
pub mod names {
    pub const PATCH_WEIGHT: &str = "patch_embed.weight";
    pub const PATCH_BIAS: &str = "patch_embed.bias";
    pub const CLS: &str = "cls_token";
    pub const POS: &str = "pos_embed";
    pub const NORM_GAMMA: &str = "norm.gamma";
    pub const NORM_BETA: &str = "norm.beta";

    pub fn block(layer: usize, group: &str, param: &str) -> String {
        format!("blocks.{layer}.{group}.{param}")
    }

    /// Layer index of a `blocks.{i}.…` name.
    pub fn layer_of(name: &str) -> Option<usize> {
        let rest = name.strip_prefix("blocks.").or_else(|| name.strip_prefix("ladder."))?;
        rest.split('.').next()?.parse().ok()
    }

    pub fn is_layer_norm(name: &str) -> bool {
        name.contains(".norm1.") || name.contains(".norm2.") || name.starts_with("norm.")
    }

    pub fn is_block_bias(name: &str) -> bool {
        name.starts_with("blocks.") && name.ends_with("_bias")
    }

    /// Shallow prompt tokens `[P, d]`, inserted once after the CLS token.
    pub const PROMPT: &str = "prompt.tokens";
    pub const HEAD_WEIGHT: &str = "head.weight";
    pub const HEAD_BIAS: &str = "head.bias";

    /// Pre-softmax score scale: `[n_h, n, n]`, or `[n, n]` shared across heads.
    pub fn scale(layer: usize) -> String {
        format!("blocks.{layer}.attn.scale")
    }

    /// Additive residual-branch vector; `branch` is `attn` or `mlp`.
    pub fn dra(layer: usize, branch: &str) -> String {
        format!("blocks.{layer}.dra.{branch}")
    }

    /// Low-rank factor `a` `[d, r]` or `b` `[r, d]` of projection `q|k|v|proj`.
    pub fn lora(layer: usize, proj: &str, factor: &str) -> String {
        format!("blocks.{layer}.lora.{proj}.{factor}")
    }

    pub fn adapter(layer: usize, param: &str) -> String {
        format!("blocks.{layer}.adapter.{param}")
    }

    pub fn ladder(layer: usize, param: &str) -> String {
        format!("ladder.{layer}.{param}")
    }

    /// Deep prompt tokens `[P, d]` replacing the previous layer's prompts.
    pub fn prompt(layer: usize) -> String {
        format!("blocks.{layer}.prompt")
    }

    /// Key or value prefix tokens `[N, d]`; `kind` is `key` or `value`.
    pub fn prefix(layer: usize, kind: &str) -> String {
        format!("blocks.{layer}.prefix.{kind}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vit_s16_at_128_has_65_tokens() {
        assert_eq!(ViTConfig::vit_s16(128).tokens(), 65);
        assert_eq!(ViTConfig::tiny().tokens(), 5);
    }

    #[test]
    fn invalid_configs_list_every_problem() {
        let mut c = ViTConfig::tiny();
        c.dim = 9;
        c.image_size = 5;
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("divisible by heads") && msg.contains("multiple of patch_size"), "{msg}");
    }

    #[test]
    fn names_round_trip_layer_index() {
        assert_eq!(names::layer_of(&names::block(11, "attn", "q_weight")), Some(11));
        assert_eq!(names::layer_of("cls_token"), None);
        assert!(names::is_layer_norm("blocks.0.norm1.gamma"));
        assert!(names::is_layer_norm("norm.beta"));
        assert!(!names::is_layer_norm("blocks.0.attn.q_bias"));
    }
}

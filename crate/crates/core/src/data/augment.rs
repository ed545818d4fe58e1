use peft_forge_tensor::Tensor;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Per-channel multiplicative jitter strength `s ∈ [0, 1)`.
    pub jitter: f64,
    /// Maximum integer translation `t` in pixels.
    pub translate: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { jitter: 0.4, translate: 4 }
    }
}

impl AugmentConfig {
    pub const IDENTITY: AugmentConfig = AugmentConfig { jitter: 0.0, translate: 0 };

    pub fn validate(&self, image_size: usize) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.jitter) {
            problems.push(format!("augment jitter {} must be in [0, 1)", self.jitter));
        }
        if 2 * self.translate >= image_size {
            problems.push(format!("augment translate {} must be below image_size/2 = {}", self.translate, image_size / 2));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub fn is_identity(&self) -> bool {
        self.jitter == 0.0 && self.translate == 0
    }
}

/// Jitters each channel by a factor in `[1 − s, 1 + s]` (clamped to `[0, 1]`)
/// and shifts each image by an offset in `[−t, t]²` with zero fill.
pub fn augment(images: &Tensor<f32>, cfg: &AugmentConfig, rng: &mut Rng) -> Result<Tensor<f32>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(Error::Dataset(format!("augment expects [b, C, S, S] images, got {s:?}")));
    }
    cfg.validate(s[2])?;
    if cfg.is_identity() {
        return Ok(images.clone());
    }
    let (b, c, size) = (s[0], s[1], s[2]);
    let t = cfg.translate as i64;
    let src = images.data();
    let mut out = vec![0.0f32; src.len()];
    for n in 0..b {
        let dy = rng.gen_range(-t..=t);
        let dx = rng.gen_range(-t..=t);
        let factors: Vec<f64> = (0..c)
            .map(|_| if cfg.jitter > 0.0 { 1.0 + rng.gen_range(-cfg.jitter..=cfg.jitter) } else { 1.0 })
            .collect();
        for (ch, &factor) in factors.iter().enumerate() {
            let plane = (n * c + ch) * size * size;
            for y in 0..size as i64 {
                let sy = y - dy;
                if !(0..size as i64).contains(&sy) {
                    continue;
                }
                for x in 0..size as i64 {
                    let sx = x - dx;
                    if !(0..size as i64).contains(&sx) {
                        continue;
                    }
                    let v = src[plane + (sy as usize) * size + sx as usize] as f64 * factor;
                    out[plane + (y as usize) * size + x as usize] = v.clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
    Ok(Tensor::new(s.to_vec(), out)?)
}

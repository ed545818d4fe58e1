use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::rng::Rng;

/// Gaussian-blob classes: each class has a blob centre and a signed
/// per-channel colour; samples add position jitter, amplitude variation and
/// pixel noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Blob amplitude in units of the pixel-noise standard deviation.
    pub separation: f64,
    /// Pixel-noise standard deviation.
    pub noise: f64,
    /// Maximum blob-centre jitter in pixels.
    pub jitter: f64,
    /// Blob radius as a fraction of the image size.
    pub blob_radius: f64,
    /// Background pixel value.
    pub background: f64,
    /// Per-image additive brightness offset drawn from `[−b, b]`.
    pub brightness: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 10,
            per_class: 20,
            image_size: 16,
            channels: 3,
            separation: 5.0,
            noise: 0.1,
            jitter: 1.0,
            blob_radius: 0.15,
            background: 0.5,
            brightness: 0.0,
        }
    }
}

struct ClassPattern {
    cy: f64,
    cx: f64,
    colour: Vec<f64>,
}

pub fn synth_dataset(cfg: &SynthConfig, domain: &str, rng: &mut Rng) -> Dataset {
    let size = cfg.image_size as f64;
    let classes: Vec<ClassPattern> = (0..cfg.n_classes)
        .map(|_| ClassPattern {
            cy: rng.gen_range(0.2..0.8) * size,
            cx: rng.gen_range(0.2..0.8) * size,
            colour: (0..cfg.channels).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        })
        .collect();
    let names = (0..cfg.n_classes).map(|c| format!("class_{c:03}")).collect();
    let mut ds = Dataset::new(domain, cfg.channels, cfg.image_size, names);
    let noise = Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise");
    let amp = cfg.separation * cfg.noise;
    let radius = (cfg.blob_radius * size).max(0.5);
    let mut img = vec![0.0f32; ds.image_len()];
    for (label, pat) in classes.iter().enumerate() {
        for _ in 0..cfg.per_class {
            let cy = pat.cy + if cfg.jitter > 0.0 { rng.gen_range(-cfg.jitter..=cfg.jitter) } else { 0.0 };
            let cx = pat.cx + if cfg.jitter > 0.0 { rng.gen_range(-cfg.jitter..=cfg.jitter) } else { 0.0 };
            let a = amp * rng.gen_range(0.8..1.2);
            let offset = if cfg.brightness > 0.0 { rng.gen_range(-cfg.brightness..=cfg.brightness) } else { 0.0 };
            for c in 0..cfg.channels {
                for y in 0..cfg.image_size {
                    for x in 0..cfg.image_size {
                        let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                        let g = (-(dy * dy + dx * dx) / (2.0 * radius * radius)).exp();
                        let v = cfg.background + offset + a * g * pat.colour[c] + noise.sample(rng);
                        img[(c * cfg.image_size + y) * cfg.image_size + x] = v.clamp(0.0, 1.0) as f32;
                    }
                }
            }
            ds.push(&img, label).expect("synthetic image size");
        }
    }
    ds
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    /// Leave-one-out-free nearest-centroid accuracy: centroids from the first
    /// `shots` samples per class, evaluated on the rest.
    fn centroid_accuracy(ds: &Dataset, shots: usize, feature: impl Fn(&[f32]) -> Vec<f64>) -> f64 {
        let groups = ds.by_class();
        let centroids: Vec<Vec<f64>> = groups
            .iter()
            .map(|g| {
                let f: Vec<Vec<f64>> = g[..shots].iter().map(|&i| feature(ds.image(i))).collect();
                (0..f[0].len()).map(|j| f.iter().map(|v| v[j]).sum::<f64>() / shots as f64).collect()
            })
            .collect();
        let (mut hit, mut total) = (0, 0);
        for (c, g) in groups.iter().enumerate() {
            for &i in &g[shots..] {
                let f = feature(ds.image(i));
                let best = (0..centroids.len())
                    .min_by(|&a, &b| {
                        let d = |k: usize| f.iter().zip(&centroids[k]).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
                        d(a).total_cmp(&d(b))
                    })
                    .unwrap();
                hit += (best == c) as usize;
                total += 1;
            }
        }
        hit as f64 / total as f64
    }

    fn raw(x: &[f32]) -> Vec<f64> {
        x.iter().map(|&v| v as f64).collect()
    }

    fn patch_means(x: &[f32]) -> Vec<f64> {
        // 4×4 grid of per-channel means on a 16×16 image
        let mut out = vec![0.0; 3 * 16];
        for c in 0..3 {
            for y in 0..16 {
                for xx in 0..16 {
                    out[c * 16 + (y / 4) * 4 + xx / 4] += x[(c * 16 + y) * 16 + xx] as f64 / 16.0;
                }
            }
        }
        out
    }

    #[test]
    fn zero_separation_is_chance() {
        let cfg = SynthConfig { separation: 0.0, n_classes: 5, per_class: 60, ..Default::default() };
        let ds = synth_dataset(&cfg, "s", &mut rng::rng(1));
        let acc = centroid_accuracy(&ds, 5, raw);
        assert!((acc - 0.2).abs() < 0.08, "{acc}");
    }

    #[test]
    fn large_separation_is_separable() {
        let cfg = SynthConfig { separation: 5.0, n_classes: 5, per_class: 40, ..Default::default() };
        let ds = synth_dataset(&cfg, "s", &mut rng::rng(2));
        assert!(centroid_accuracy(&ds, 5, raw) >= 0.95);
        assert!(centroid_accuracy(&ds, 5, patch_means) >= 0.95);
    }

    #[test]
    fn reproducible_from_seed() {
        let cfg = SynthConfig::default();
        let a = synth_dataset(&cfg, "s", &mut rng::rng(3));
        let b = synth_dataset(&cfg, "s", &mut rng::rng(3));
        assert_eq!(a, b);
        assert!(a.labels().len() == 200 && a.image(0).iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn brightness_spreads_image_means() {
        let mean = |v: &[f32]| v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let spread = |brightness: f64| {
            let cfg = SynthConfig { brightness, noise: 0.01, separation: 1.0, ..Default::default() };
            let ds = synth_dataset(&cfg, "s", &mut rng::rng(4));
            let m: Vec<f64> = (0..ds.len()).map(|i| mean(ds.image(i))).collect();
            m.iter().cloned().fold(f64::MIN, f64::max) - m.iter().cloned().fold(f64::MAX, f64::min)
        };
        assert!(spread(0.0) < 0.01);
        assert!(spread(0.2) > 0.2);
    }
}

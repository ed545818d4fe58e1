//! Datasets, episodic sampling and support-set augmentation.

mod augment;
mod folder;
mod sampler;
mod synth;

pub use augment::{augment, AugmentConfig};
pub use folder::{load_image_folder, FolderOptions, Manifest, ManifestEntry, Normalization, OnError};
pub use sampler::{sample_episode, Episode, SamplerConfig};
pub use synth::{synth_dataset, SynthConfig};

use peft_forge_tensor::Tensor;

use crate::{Error, Result};

/// Labeled `C × S × S` images with values in `[0, 1]` (before optional normalization).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub domain: String,
    pub channels: usize,
    pub image_size: usize,
    pixels: Vec<f32>,
    labels: Vec<usize>,
    class_names: Vec<String>,
}

impl Dataset {
    pub fn new(
        domain: impl Into<String>,
        channels: usize,
        image_size: usize,
        class_names: Vec<String>,
    ) -> Self {
        Dataset { domain: domain.into(), channels, image_size, pixels: Vec::new(), labels: Vec::new(), class_names }
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn push(&mut self, image: &[f32], label: usize) -> Result<()> {
        if image.len() != self.image_len() {
            return Err(Error::Dataset(format!("image has {} values, expected {}", image.len(), self.image_len())));
        }
        if label >= self.class_names.len() {
            return Err(Error::Dataset(format!("label {label} outside {} classes", self.class_names.len())));
        }
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    /// Sample indices per class, in dataset order.
    pub fn by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.num_classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    /// `[b, C, S, S]` batch of the given samples. Panics on an empty selection.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new([indices.len(), self.channels, self.image_size, self.image_size], data)
            .expect("non-empty batch")
    }

    /// Classes whose index is in `classes`, relabeled to `0..classes.len()`.
    pub fn select_classes(&self, classes: &[usize], domain: impl Into<String>) -> Dataset {
        let mut out = Dataset::new(
            domain,
            self.channels,
            self.image_size,
            classes.iter().map(|&c| self.class_names[c].clone()).collect(),
        );
        for (i, &l) in self.labels.iter().enumerate() {
            if let Some(new) = classes.iter().position(|&c| c == l) {
                out.push(self.image(i), new).expect("consistent image size");
            }
        }
        out
    }
}

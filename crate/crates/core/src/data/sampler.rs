use peft_forge_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::rng::{self, Rng};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    /// Inclusive `[N_min, N_max]`.
    pub way: [usize; 2],
    /// Inclusive per-class support shots `[k_min, k_max]`.
    pub shot: [usize; 2],
    /// Inclusive per-class query count range.
    pub query: [usize; 2],
    pub tasks: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { way: [5, 5], shot: [5, 5], query: [10, 10], tasks: 50, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn fixed(way: usize, shot: usize, query: usize) -> Self {
        SamplerConfig { way: [way, way], shot: [shot, shot], query: [query, query], ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, [lo, hi]) in [("way", self.way), ("shot", self.shot), ("query", self.query)] {
            if lo == 0 || lo > hi {
                problems.push(format!("sampler {name} range [{lo}, {hi}] must be positive and non-empty"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Seed of task `index` in this sampler's stream.
    pub fn task_seed(&self, index: usize) -> u64 {
        rng::split(self.seed, index as u64)
    }
}

/// One few-shot task; labels are episode-local in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub num_classes: usize,
    /// Dataset class of each episode label.
    pub classes: Vec<usize>,
    pub support: Vec<usize>,
    pub support_labels: Vec<usize>,
    pub support_images: Tensor<f32>,
    pub query: Vec<usize>,
    pub query_labels: Vec<usize>,
    pub query_images: Tensor<f32>,
    pub domain: String,
    pub seed: u64,
}

/// Variable-way, variable-shot episode; per-class shots are drawn independently.
pub fn sample_episode(dataset: &Dataset, cfg: &SamplerConfig, seed: u64) -> Result<Episode> {
    cfg.validate()?;
    let mut r: Rng = rng::rng(seed);
    let [k_min, k_max] = cfg.shot;
    let groups = dataset.by_class();
    let eligible: Vec<usize> = (0..groups.len()).filter(|&c| groups[c].len() > k_min).collect();
    if eligible.len() < cfg.way[1] {
        return Err(Error::Dataset(format!(
            "need {} classes with at least {} examples, `{}` has {}",
            cfg.way[1],
            k_min + 1,
            dataset.domain,
            eligible.len()
        )));
    }
    let way = r.gen_range(cfg.way[0]..=cfg.way[1]);
    let q = r.gen_range(cfg.query[0]..=cfg.query[1]);
    let classes: Vec<usize> = eligible.choose_multiple(&mut r, way).copied().collect();
    let (mut support, mut support_labels, mut query, mut query_labels) = (vec![], vec![], vec![], vec![]);
    for (label, &c) in classes.iter().enumerate() {
        let mut pool = groups[c].clone();
        pool.shuffle(&mut r);
        let shots = r.gen_range(k_min..=k_max).min(pool.len() - 1);
        let queries = q.min(pool.len() - shots);
        support.extend_from_slice(&pool[..shots]);
        support_labels.extend(std::iter::repeat_n(label, shots));
        query.extend_from_slice(&pool[shots..shots + queries]);
        query_labels.extend(std::iter::repeat_n(label, queries));
    }
    Ok(Episode {
        num_classes: way,
        support_images: dataset.batch(&support),
        query_images: dataset.batch(&query),
        classes,
        support,
        support_labels,
        query,
        query_labels,
        domain: dataset.domain.clone(),
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthConfig};
    use std::collections::HashSet;

    fn dataset() -> Dataset {
        let cfg = SynthConfig { n_classes: 12, per_class: 12, image_size: 4, ..Default::default() };
        synth_dataset(&cfg, "toy", &mut rng::rng(0))
    }

    #[test]
    fn degenerate_ranges_are_exact() {
        let ds = dataset();
        let cfg = SamplerConfig::fixed(5, 1, 3);
        for s in 0..20 {
            let e = sample_episode(&ds, &cfg, s).unwrap();
            assert_eq!(e.num_classes, 5);
            assert_eq!(e.support.len(), 5);
            assert_eq!(e.query.len(), 15);
        }
    }

    #[test]
    fn same_seed_same_episode() {
        let ds = dataset();
        let cfg = SamplerConfig { way: [2, 6], shot: [1, 4], query: [1, 5], ..Default::default() };
        assert_eq!(sample_episode(&ds, &cfg, 42).unwrap(), sample_episode(&ds, &cfg, 42).unwrap());
    }

    #[test]
    fn way_distribution_covers_range_and_invariants_hold() {
        let ds = dataset();
        let cfg = SamplerConfig { way: [2, 10], shot: [1, 5], query: [1, 4], seed: 7, ..Default::default() };
        let mut seen = HashSet::new();
        for i in 0..1000 {
            let e = sample_episode(&ds, &cfg, cfg.task_seed(i)).unwrap();
            seen.insert(e.num_classes);
            assert!((2..=10).contains(&e.num_classes));
            let s: HashSet<_> = e.support.iter().collect();
            assert!(e.query.iter().all(|q| !s.contains(q)));
            for c in 0..e.num_classes {
                let k = e.support_labels.iter().filter(|&&l| l == c).count();
                assert!((1..=5).contains(&k));
            }
            assert!(e.query_labels.iter().all(|&l| l < e.num_classes));
        }
        assert_eq!(seen.len(), 9);
    }

    #[test]
    fn insufficient_classes_is_a_dataset_error() {
        let ds = dataset();
        let err = sample_episode(&ds, &SamplerConfig::fixed(20, 1, 1), 0).unwrap_err();
        assert_eq!(err.category(), "dataset");
    }
}

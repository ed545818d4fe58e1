//! Experiment configuration: TOML schema, overrides and validation.

use std::path::{Path, PathBuf};

use peft_forge::analysis::BenchConfig;
use peft_forge::data::{FolderOptions, Normalization, OnError, SamplerConfig, SynthConfig};
use peft_forge::finetune::FinetuneConfig;
use peft_forge::peft::{Hyperparams, PeftSpec};
use peft_forge::prefit::PrefitConfig;
use peft_forge::vit::ViTConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SEED_ENV: &str = "PEFT_FORGE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Tiny,
    VitS16,
    VitB16,
    Custom,
}

/// `[backbone]`: a preset, optional architecture overrides and the weight source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub preset: Preset,
    pub image_size: Option<usize>,
    pub patch_size: Option<usize>,
    pub dim: Option<usize>,
    pub depth: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_ratio: Option<usize>,
    pub channels: Option<usize>,
    pub ln_eps: Option<f64>,
    /// `random:<seed>`, `prefit`, or a path to a weight archive.
    pub weights: String,
}

/// `[prefit]`: episodic pre-fitting on synthetic base classes, used when
/// `backbone.weights = "prefit"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct PrefitSection {
    #[serde(flatten)]
    pub train: PrefitConfig,
    pub base: SynthConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DatasetSection {
    Synthetic {
        domain: String,
        #[serde(flatten)]
        synth: SynthConfig,
    },
    Folder {
        domain: String,
        path: PathBuf,
        #[serde(default)]
        on_error: OnError,
        #[serde(default)]
        normalization: Option<Normalization>,
    },
}

impl DatasetSection {
    pub fn domain(&self) -> &str {
        match self {
            DatasetSection::Synthetic { domain, .. } | DatasetSection::Folder { domain, .. } => domain,
        }
    }

    pub fn folder_options(&self, image_size: usize) -> Option<(PathBuf, FolderOptions)> {
        match self {
            DatasetSection::Folder { path, on_error, normalization, .. } => Some((
                path.clone(),
                FolderOptions { resize_to: image_size, on_error: *on_error, normalization: normalization.clone() },
            )),
            DatasetSection::Synthetic { .. } => None,
        }
    }
}

/// `[sampler]` without seed and task count, which come from `seed` and `episodes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub way: [usize; 2],
    pub shot: [usize; 2],
    pub query: [usize; 2],
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = SamplerConfig::default();
        SamplerSection { way: d.way, shot: d.shot, query: d.query }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    /// Episodes whose support images feed the head-correlation analysis.
    pub head_episodes: usize,
    /// Episodes per method in `bench-speed`, warmup included.
    pub bench_episodes: usize,
    pub bench: BenchConfig,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        AnalysisSection { head_episodes: 5, bench_episodes: 4, bench: BenchConfig::default() }
    }
}

/// The file as written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub methods: Vec<String>,
    #[serde(default = "default_episodes")]
    pub episodes: usize,
    pub insertion_mask: Option<Vec<usize>>,
    pub backbone: BackboneSection,
    #[serde(default)]
    pub prefit: Option<PrefitSection>,
    #[serde(default)]
    pub datasets: Vec<DatasetSection>,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub hyper: Hyperparams,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub analysis: AnalysisSection,
}

fn default_episodes() -> usize {
    50
}

/// Command-line overrides, applied after the environment seed.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub methods: Vec<String>,
    pub episodes: Option<usize>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Weights {
    Random(u64),
    Prefit(PrefitSection),
    Archive(PathBuf),
}

/// A validated, fully resolved experiment.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub episodes: usize,
    pub vit: ViTConfig,
    pub weights: Weights,
    pub datasets: Vec<DatasetSection>,
    pub sampler: SamplerConfig,
    pub specs: Vec<PeftSpec>,
    pub finetune: FinetuneConfig,
    pub analysis: AnalysisSection,
    #[serde(skip)]
    pub output_dir: PathBuf,
}

/// Seed channel offsets of the global seed.
pub mod streams {
    pub const SAMPLER: u64 = 1;
    pub const PREFIT: u64 = 2;
    pub const DATASET: u64 = 100;
    /// Task indices of lr-selection episodes start here.
    pub const VALIDATION_OFFSET: usize = 1 << 20;
}

impl ExperimentConfig {
    /// Reads, overrides and validates a config file. Every problem found is reported.
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let file: ConfigFile = toml::from_str(&text).map_err(|e| CliError::Config(vec![format!("{}: {}", path.display(), e.message())]))?;
        let env_seed = std::env::var(SEED_ENV).ok();
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "experiment".into());
        let base_dir = path.parent().unwrap_or(Path::new("."));
        Self::resolve(file, overrides, env_seed.as_deref(), &stem, base_dir)
    }

    pub fn resolve(
        file: ConfigFile,
        overrides: &Overrides,
        env_seed: Option<&str>,
        stem: &str,
        base_dir: &Path,
    ) -> Result<Self, CliError> {
        let mut problems = Vec::new();
        let env_seed = match env_seed {
            Some(s) => match s.trim().parse::<u64>() {
                Ok(v) => Some(v),
                Err(_) => {
                    problems.push(format!("{SEED_ENV}=`{s}` is not an unsigned integer"));
                    None
                }
            },
            None => None,
        };
        let seed = overrides.seed.or(env_seed).or(file.seed);
        if seed.is_none() {
            problems.push(format!("`seed` is required (config, {SEED_ENV} or --seed)"));
        }
        let vit = resolve_vit(&file.backbone, &mut problems);
        let rel = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base_dir.join(p) };
        let weights = resolve_weights(&file, vit.as_ref(), &rel, &mut problems);

        let method_names = if overrides.methods.is_empty() { file.methods.clone() } else { overrides.methods.clone() };
        let mut specs = Vec::new();
        for name in &method_names {
            match name.parse::<PeftSpec>() {
                Ok(mut spec) => {
                    spec.hyper = file.hyper.clone();
                    spec.insertion_mask = file.insertion_mask.clone();
                    if let Some(v) = &vit {
                        if let Err(e) = spec.validate(v) {
                            problems.push(format!("method `{name}`: {e}"));
                        }
                    }
                    specs.push(spec);
                }
                Err(e) => problems.push(format!("method `{name}`: {e}")),
            }
        }

        let mut datasets = Vec::new();
        let mut domains = std::collections::HashSet::new();
        for ds in &file.datasets {
            if !domains.insert(ds.domain().to_string()) {
                problems.push(format!("duplicate dataset domain `{}`", ds.domain()));
            }
            match ds {
                DatasetSection::Folder { domain, path, on_error, normalization } => {
                    let p = rel(path);
                    if !p.is_dir() {
                        problems.push(format!("dataset `{domain}`: folder {} does not exist", p.display()));
                    }
                    datasets.push(DatasetSection::Folder {
                        domain: domain.clone(),
                        path: p,
                        on_error: *on_error,
                        normalization: normalization.clone(),
                    });
                }
                DatasetSection::Synthetic { domain, synth } => {
                    if let Some(v) = &vit {
                        if synth.image_size != v.image_size || synth.channels != v.channels {
                            problems.push(format!(
                                "dataset `{domain}`: synthetic images are {}×{}×{}, backbone expects {}×{}×{}",
                                synth.channels, synth.image_size, synth.image_size, v.channels, v.image_size, v.image_size
                            ));
                        }
                    }
                    if synth.n_classes == 0 || synth.per_class == 0 {
                        problems.push(format!("dataset `{domain}`: n_classes and per_class must be positive"));
                    }
                    datasets.push(ds.clone());
                }
            }
        }

        let s = &file.sampler;
        let sampler = SamplerConfig {
            way: s.way,
            shot: s.shot,
            query: s.query,
            tasks: overrides.episodes.unwrap_or(file.episodes),
            seed: peft_forge::rng::split(seed.unwrap_or(0), streams::SAMPLER),
        };
        if let Err(e) = sampler.validate() {
            problems.push(e.to_string());
        }
        if let Err(e) = file.finetune.validate() {
            problems.push(e.to_string());
        }
        if let Some(v) = &vit {
            if file.finetune.algorithm == peft_forge::finetune::Algorithm::ProtoAug {
                if let Err(e) = file.finetune.augment.validate(v.image_size) {
                    problems.push(e.to_string());
                }
            }
        }
        if !problems.is_empty() {
            return Err(CliError::Config(problems));
        }
        let name = file.name.clone().unwrap_or_else(|| stem.to_string());
        let output_dir = overrides
            .out
            .clone()
            .or_else(|| file.output_dir.as_deref().map(rel))
            .unwrap_or_else(|| base_dir.join("runs").join(&name));
        Ok(ExperimentConfig {
            name,
            seed: seed.expect("checked"),
            episodes: sampler.tasks,
            vit: vit.expect("checked"),
            weights: weights.expect("checked"),
            datasets,
            sampler,
            specs,
            finetune: file.finetune,
            analysis: file.analysis,
            output_dir,
        })
    }

    /// SHA-256 of the canonical JSON of everything that determines results,
    /// excluding the method list, the episode count and the output directory.
    pub fn hash(&self) -> String {
        #[derive(Serialize)]
        struct Canonical<'a> {
            name: &'a str,
            seed: u64,
            vit: &'a ViTConfig,
            weights: &'a Weights,
            datasets: &'a [DatasetSection],
            sampler: (&'a [usize; 2], &'a [usize; 2], &'a [usize; 2], u64),
            hyper: Option<&'a Hyperparams>,
            finetune: &'a FinetuneConfig,
        }
        let s = &self.sampler;
        let c = Canonical {
            name: &self.name,
            seed: self.seed,
            vit: &self.vit,
            weights: &self.weights,
            datasets: &self.datasets,
            sampler: (&s.way, &s.shot, &s.query, s.seed),
            hyper: self.specs.first().map(|s| &s.hyper),
            finetune: &self.finetune,
        };
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn store_path(&self) -> PathBuf {
        self.output_dir.join("results.jsonl")
    }

    /// Upper end of the way range, the class count used for parameter accounting.
    pub fn max_way(&self) -> usize {
        self.sampler.way[1]
    }
}

fn resolve_vit(b: &BackboneSection, problems: &mut Vec<String>) -> Option<ViTConfig> {
    let image = b.image_size;
    let mut v = match b.preset {
        Preset::Tiny => ViTConfig::tiny(),
        Preset::VitS16 => ViTConfig::vit_s16(image.unwrap_or(224)),
        Preset::VitB16 => ViTConfig::vit_b16(image.unwrap_or(224)),
        Preset::Custom => {
            let mut missing = Vec::new();
            for (k, v) in [("image_size", b.image_size), ("patch_size", b.patch_size), ("dim", b.dim), ("depth", b.depth), ("heads", b.heads)] {
                if v.is_none() {
                    missing.push(k);
                }
            }
            if !missing.is_empty() {
                problems.push(format!("backbone preset `custom` requires {}", missing.join(", ")));
                return None;
            }
            ViTConfig::preset(0, 0, 0, 0, 0)
        }
    };
    v.image_size = b.image_size.unwrap_or(v.image_size);
    v.patch_size = b.patch_size.unwrap_or(v.patch_size);
    v.dim = b.dim.unwrap_or(v.dim);
    v.depth = b.depth.unwrap_or(v.depth);
    v.heads = b.heads.unwrap_or(v.heads);
    v.mlp_ratio = b.mlp_ratio.unwrap_or(v.mlp_ratio);
    v.channels = b.channels.unwrap_or(v.channels);
    v.ln_eps = b.ln_eps.unwrap_or(v.ln_eps);
    match v.validate() {
        Ok(()) => Some(v),
        Err(e) => {
            problems.push(format!("backbone: {e}"));
            None
        }
    }
}

fn resolve_weights(
    file: &ConfigFile,
    vit: Option<&ViTConfig>,
    rel: &dyn Fn(&Path) -> PathBuf,
    problems: &mut Vec<String>,
) -> Option<Weights> {
    let w = file.backbone.weights.trim();
    if let Some(seed) = w.strip_prefix("random:") {
        return match seed.parse() {
            Ok(s) => Some(Weights::Random(s)),
            Err(_) => {
                problems.push(format!("backbone.weights `{w}`: seed after `random:` must be an unsigned integer"));
                None
            }
        };
    }
    if w == "prefit" {
        let p = file.prefit.clone().unwrap_or_default();
        if let Some(v) = vit {
            if p.base.image_size != v.image_size || p.base.channels != v.channels {
                problems.push(format!("prefit.base images must be {}×{}×{}", v.channels, v.image_size, v.image_size));
            }
        }
        return Some(Weights::Prefit(p));
    }
    let p = rel(Path::new(w));
    if !p.is_file() {
        problems.push(format!("backbone.weights: archive {} does not exist", p.display()));
        return None;
    }
    Some(Weights::Archive(p))
}

//! Self-checks of the engine: finite-difference gradient checks of the
//! episode loss, identity of freshly attached methods and frozen-backbone
//! invariance after fine-tuning.

use std::sync::Arc;

use peft_forge_tensor::gradcheck::{central_difference, spread_indices};
use peft_forge_tensor::{Scalar, Tensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{augment, sample_episode, synth_dataset, AugmentConfig, Dataset, Episode, SamplerConfig, SynthConfig};
use crate::finetune::{
    episode_loss, finetune_episode, finetune_episode_state, prepare_episode, proto_classify, prototypes, select_lr, Algorithm,
    Distance, FinetuneConfig, LossInputs,
};
use crate::peft::{attach, AttachContext, PeftSpec};
use crate::prefit::{prefit, PrefitConfig};
use crate::vit::{embed, ForwardOptions, ParamStore, Session, ViTConfig, ViTModel};
use crate::{rng, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckConfig {
    pub algorithm: Algorithm,
    pub distance: Distance,
    /// Pseudo-query augmentation, drawn once, for ProtoAug.
    pub augment: AugmentConfig,
    pub h: f64,
    /// Coordinates checked per parameter tensor.
    pub coords: usize,
    /// Standard deviation of the noise added to trainable tensors before
    /// checking, so that zero-initialized branches carry gradient.
    pub perturb: f64,
    pub seed: u64,
    pub rel_tol: f64,
    /// Coordinates whose analytic and numeric gradients are both below this
    /// magnitude count as agreeing zeros.
    pub abs_tol: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            algorithm: Algorithm::ProtoNcc,
            distance: Distance::SqEuclidean,
            augment: AugmentConfig::default(),
            h: 1e-5,
            coords: 6,
            perturb: 0.1,
            seed: 0,
            rel_tol: 1e-3,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub param: String,
    pub checked: usize,
    pub max_rel_err: f64,
    /// Largest analytic gradient magnitude among the checked coordinates.
    pub max_abs_grad: f64,
    pub failures: usize,
}

fn rel_err(a: f64, n: f64, abs_tol: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale < abs_tol {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

/// Compares autodiff gradients of the episode loss with central differences
/// for every trainable tensor of `spec`.
pub fn gradient_check(
    model: &ViTModel<f64>,
    spec: &PeftSpec,
    episode: &Episode,
    cfg: &GradCheckConfig,
) -> Result<Vec<GradCheck>> {
    let state = prepare_episode(model, spec, episode, cfg.algorithm)?;
    let mut store = state.store;
    let mut noise_rng = rng::rng(rng::split(cfg.seed, 0));
    let noise = Normal::new(0.0, cfg.perturb).expect("finite perturbation");
    for name in &state.trainable {
        let t = Arc::make_mut(store.get_mut(name).expect("trainable tensor in store"));
        for v in t.data_mut() {
            *v += noise.sample(&mut noise_rng);
        }
    }
    let support: Tensor<f64> = episode.support_images.cast();
    let pseudo: Option<Tensor<f64>> = match cfg.algorithm {
        Algorithm::ProtoAug => {
            let mut r = rng::rng(rng::split(cfg.seed, 1));
            Some(augment(&episode.support_images, &cfg.augment, &mut r)?.cast())
        }
        _ => None,
    };
    let inputs = LossInputs {
        algorithm: cfg.algorithm,
        distance: cfg.distance,
        support: &support,
        labels: &episode.support_labels,
        num_classes: episode.num_classes,
        pseudo_query: pseudo.as_ref(),
    };
    let (analytic, _) = {
        let mut s = Session::new(model, &store, state.trainable.iter().map(String::as_str));
        let loss = episode_loss(&mut s, &inputs)?;
        let value = s.graph.value(loss).item();
        let mut g = s.graph.backward(loss)?;
        let grads: Vec<Option<Tensor<f64>>> =
            state.trainable.iter().map(|n| s.var(n).and_then(|v| g.take(v))).collect();
        (grads, value)
    };
    let mut out = Vec::with_capacity(state.trainable.len());
    for (name, grad) in state.trainable.iter().zip(analytic) {
        let base = store[name].clone();
        let numel = base.numel();
        let grad = grad.unwrap_or_else(|| Tensor::zeros(base.shape().to_vec()));
        let indices = spread_indices(numel, cfg.coords);
        let mut probe = store.clone();
        let mut loss_at = |x: &[f64]| -> f64 {
            probe.insert(name.clone(), Arc::new(Tensor::new(base.shape().to_vec(), x.to_vec()).expect("same shape")));
            let mut s = Session::new(model, &probe, std::iter::empty());
            let loss = episode_loss(&mut s, &inputs).expect("loss evaluates");
            s.graph.value(loss).item()
        };
        let numeric = central_difference(&mut loss_at, base.data(), &indices, cfg.h);
        let errs: Vec<f64> = indices.iter().zip(&numeric).map(|(&i, &n)| rel_err(grad.data()[i], n, cfg.abs_tol)).collect();
        out.push(GradCheck {
            param: name.clone(),
            checked: indices.len(),
            max_rel_err: errs.iter().copied().fold(0.0, f64::max),
            max_abs_grad: indices.iter().map(|&i| grad.data()[i].abs()).fold(0.0, f64::max),
            failures: errs.iter().filter(|&&e| !(e < cfg.rel_tol)).count(),
        });
    }
    Ok(out)
}

/// Largest absolute difference between CLS embeddings with freshly attached
/// hooks of each spec and without any hooks.
pub fn identity_error<F: Scalar>(
    model: &ViTModel<F>,
    specs: &[PeftSpec],
    images: &Tensor<F>,
    num_classes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    let (plain, _) = embed(model, &ParamStore::new(), images, ForwardOptions::default())?;
    specs
        .iter()
        .map(|spec| {
            let attached = attach(spec, model, &AttachContext::new(num_classes, seed))?;
            let (hooked, _) = embed(model, &attached.hooks, images, ForwardOptions::default())?;
            Ok(plain.max_abs_diff(&hooked)?)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub spec: String,
    pub steps: usize,
    /// Frozen backbone tensors whose values differ from the model after fine-tuning.
    pub changed_frozen: Vec<String>,
    /// Trainable tensors that never moved.
    pub unchanged_trainable: Vec<String>,
    /// Whether the shared model's fingerprint survived the run.
    pub model_unchanged: bool,
    pub backbone_grad_buffers: usize,
}

impl InvarianceReport {
    pub fn frozen_intact(&self) -> bool {
        self.changed_frozen.is_empty() && self.model_unchanged
    }
}

fn bitwise_eq<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_f64().to_bits() == y.to_f64().to_bits())
}

/// Fine-tunes one episode and audits which tensors moved.
pub fn frozen_invariance<F: Scalar>(
    model: &ViTModel<F>,
    spec: &PeftSpec,
    episode: &Episode,
    cfg: &FinetuneConfig,
    lr: f64,
) -> Result<InvarianceReport> {
    let before = model.fingerprint();
    let snapshot: Vec<(String, Tensor<F>)> = model.params().map(|(k, v)| (k.to_string(), (**v).clone())).collect();
    let initial = prepare_episode(model, spec, episode, cfg.algorithm)?.store;
    let (report, state) = finetune_episode_state(model, spec, episode, cfg, lr)?;
    let trainable: std::collections::HashSet<&str> = state.trainable.iter().map(String::as_str).collect();
    let mut changed_frozen = Vec::new();
    for (name, original) in &snapshot {
        if trainable.contains(name.as_str()) {
            continue;
        }
        let now_model = model.param(name)?;
        let now_store = state.store.get(name);
        if !bitwise_eq(now_model, original) || now_store.is_some_and(|t| !bitwise_eq(t, original)) {
            changed_frozen.push(name.clone());
        }
    }
    let unchanged_trainable = state
        .trainable
        .iter()
        .filter(|n| initial.get(*n).is_some_and(|t| bitwise_eq(t, &state.store[*n])))
        .cloned()
        .collect();
    Ok(InvarianceReport {
        spec: spec.to_string(),
        steps: cfg.steps,
        changed_frozen,
        unchanged_trainable,
        model_unchanged: model.fingerprint() == before,
        backbone_grad_buffers: report.backbone_grad_buffers,
    })
}

/// Seeded few-shot setting: a backbone pre-fit on base classes, evaluated on
/// disjoint novel classes with a shifted background.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub base: SynthConfig,
    pub novel: SynthConfig,
    pub base_seed: u64,
    pub novel_seed: u64,
    pub vit: ViTConfig,
    pub prefit: PrefitConfig,
    pub sampler: SamplerConfig,
    pub episodes: usize,
    pub validation_seed_offset: usize,
    pub finetune: FinetuneConfig,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let base = SynthConfig { n_classes: 40, per_class: 30, jitter: 1.5, ..SynthConfig::default() };
        let novel = SynthConfig { n_classes: 10, per_class: 20, background: 0.75, ..base.clone() };
        ToyConfig {
            base,
            novel,
            base_seed: 100,
            novel_seed: 200,
            vit: ViTConfig::preset(16, 4, 32, 2, 4),
            prefit: PrefitConfig { steps: 1000, ..PrefitConfig::default() },
            sampler: SamplerConfig { seed: 5, ..SamplerConfig::fixed(5, 5, 10) },
            episodes: 50,
            validation_seed_offset: 1000,
            finetune: FinetuneConfig::default(),
        }
    }
}

pub struct ToySetup {
    pub model: ViTModel<f32>,
    pub validation: Vec<Episode>,
    pub episodes: Vec<Episode>,
}

impl ToyConfig {
    pub fn datasets(&self) -> (Dataset, Dataset) {
        (
            synth_dataset(&self.base, "base", &mut rng::rng(self.base_seed)),
            synth_dataset(&self.novel, "novel", &mut rng::rng(self.novel_seed)),
        )
    }

    /// Pre-fits the backbone and samples validation and test episodes.
    pub fn setup(&self) -> Result<ToySetup> {
        let (base, novel) = self.datasets();
        let model = prefit(&self.vit, &base, &self.prefit)?;
        let draw = |offset: usize, n: usize| {
            (0..n)
                .map(|i| sample_episode(&novel, &self.sampler, self.sampler.task_seed(offset + i)))
                .collect::<Result<Vec<_>>>()
        };
        let validation = draw(self.validation_seed_offset, self.finetune.n_validation_tasks)?;
        let episodes = draw(0, self.episodes)?;
        Ok(ToySetup { model, validation, episodes })
    }
}

/// Nearest-centroid query accuracy on raw pixels, averaged over episodes.
pub fn pixel_centroid_accuracy(episodes: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    for ep in episodes {
        let flat = |t: &Tensor<f32>, n: usize| t.clone().cast::<f64>().reshape([n, t.numel() / n.max(1)]);
        let s = flat(&ep.support_images, ep.support.len())?;
        let q = flat(&ep.query_images, ep.query.len())?;
        let p = prototypes(&s, &ep.support_labels, ep.num_classes)?;
        let (_, pred) = proto_classify(&q, &p, Distance::SqEuclidean)?;
        total += pred.iter().zip(&ep.query_labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64;
    }
    Ok(total / episodes.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficacyRow {
    pub spec: String,
    pub lr: f64,
    pub initial_accuracy: f64,
    pub accuracy: f64,
}

/// Selects a learning rate on the validation episodes, then fine-tunes every
/// test episode with it.
pub fn efficacy(setup: &ToySetup, spec: &PeftSpec, cfg: &FinetuneConfig) -> Result<EfficacyRow> {
    let sel = select_lr(&setup.model, spec, &setup.validation, cfg)?;
    let (mut a0, mut a1) = (0.0, 0.0);
    for ep in &setup.episodes {
        let r = finetune_episode(&setup.model, spec, ep, cfg, sel.lr)?;
        a0 += r.initial_accuracy;
        a1 += r.accuracy;
    }
    let n = setup.episodes.len().max(1) as f64;
    Ok(EfficacyRow { spec: spec.to_string(), lr: sel.lr, initial_accuracy: a0 / n, accuracy: a1 / n })
}

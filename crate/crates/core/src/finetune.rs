//! Episode-level fine-tuning: Linear, ProtoAug and ProtoNCC with Adam.

use std::sync::Arc;
use std::time::Instant;

use indexmap::IndexMap;
use peft_forge_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, Episode};
use crate::peft::{attach, AttachContext, Method, PeftSpec, PrefixInit};
use crate::vit::{embed, names, ForwardOptions, ParamStore, Session, ViTModel};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Linear,
    ProtoAug,
    ProtoNcc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    #[default]
    SqEuclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub algorithm: Algorithm,
    pub steps: usize,
    pub lr_grid: Vec<f64>,
    pub n_validation_tasks: usize,
    pub distance: Distance,
    pub adam: AdamConfig,
    /// Pseudo-query augmentation of ProtoAug.
    pub augment: AugmentConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            algorithm: Algorithm::ProtoNcc,
            steps: 40,
            lr_grid: vec![1e-4, 3e-4, 1e-3, 1e-2, 1e-1],
            n_validation_tasks: 5,
            distance: Distance::SqEuclidean,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.lr_grid.is_empty() {
            problems.push("lr_grid must not be empty".to_string());
        }
        if self.lr_grid.iter().any(|&lr| !(lr > 0.0 && lr.is_finite())) {
            problems.push("learning rates must be positive and finite".to_string());
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            problems.push("adam betas must be in [0, 1) and eps positive".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub spec: String,
    pub algorithm: Algorithm,
    pub domain: String,
    pub episode_seed: u64,
    pub num_classes: usize,
    pub support_size: usize,
    pub query_size: usize,
    /// Query accuracy after the final step.
    pub accuracy: f64,
    /// Query accuracy before any step.
    pub initial_accuracy: f64,
    /// Support loss evaluated at each step, before its update.
    pub losses: Vec<f64>,
    pub setup_secs: f64,
    pub step_secs: Vec<f64>,
    pub total_secs: f64,
    pub lr: f64,
    pub trainable_params: usize,
    /// Largest number of backbone-parameter gradient buffers written in one step.
    pub backbone_grad_buffers: usize,
}

/// Per-class means `[N, d]` of `embeddings [m, d]`.
pub fn prototypes<F: Scalar>(embeddings: &Tensor<F>, labels: &[usize], n: usize) -> Result<Tensor<F>> {
    let m = averaging_matrix::<F>(labels, n)?;
    Ok(m.matmul(embeddings)?)
}

/// `[N, m]` matrix whose rows average the samples of each class.
fn averaging_matrix<F: Scalar>(labels: &[usize], n: usize) -> Result<Tensor<F>> {
    let mut counts = vec![0usize; n];
    for &l in labels {
        if l >= n {
            return Err(Error::Dataset(format!("label {l} outside {n} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Dataset(format!("class {c} has no support examples")));
    }
    let m = labels.len();
    let mut data = vec![F::ZERO; n * m];
    for (j, &l) in labels.iter().enumerate() {
        data[l * m + j] = F::from_f64(1.0 / counts[l] as f64);
    }
    Ok(Tensor::new([n, m], data)?)
}

fn argmax_rows<F: Scalar>(logits: &Tensor<F>) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if v.to_f64() > row[best].to_f64() {
                    best = j;
                }
            }
            best
        })
        .collect()
}

fn proto_logits<F: Scalar>(g: &mut Graph<F>, query: Var, protos: Var, distance: Distance) -> Result<Var> {
    Ok(match distance {
        Distance::SqEuclidean => {
            let d = g.sq_dist(query, protos)?;
            g.scale(d, -1.0)
        }
        Distance::Cosine => {
            let q = g.l2_normalize(query);
            let p = g.l2_normalize(protos);
            let pt = g.transpose(p)?;
            let cos = g.matmul(q, pt)?;
            let shape = g.shape(cos).to_vec();
            let one = g.constant(Tensor::full(shape, F::ONE));
            g.sub(cos, one)?
        }
    })
}

/// Logits `−distance(query, prototype)` `[q, N]` and their argmax.
pub fn proto_classify<F: Scalar>(query: &Tensor<F>, protos: &Tensor<F>, distance: Distance) -> Result<(Tensor<F>, Vec<usize>)> {
    let mut g = Graph::new();
    let (q, p) = (g.constant(query.clone()), g.constant(protos.clone()));
    let l = proto_logits(&mut g, q, p, distance)?;
    let logits = g.value(l).clone();
    let preds = argmax_rows(&logits);
    Ok((logits, preds))
}

/// Adam with bias correction; moments are kept in `f64`.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u32,
    m: IndexMap<String, Vec<f64>>,
    v: IndexMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: IndexMap::new(), v: IndexMap::new() }
    }

    /// Applies one update; the step-wide bias correction uses the shared step count.
    pub fn step<F: Scalar>(&mut self, params: &mut ParamStore<F>, grads: &[(String, Tensor<F>)], lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, g) in grads {
            let p = params.get_mut(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if p.shape() != g.shape() {
                return Err(Error::TensorShape { name: name.clone(), expected: p.shape().to_vec(), found: g.shape().to_vec() });
            }
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.numel()]);
            let p = Arc::make_mut(p);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi.to_f64();
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let step = lr * (*mi / c1) / ((*vi / c2).sqrt() + self.cfg.eps);
                *x = F::from_f64(x.to_f64() - step);
            }
        }
        Ok(())
    }
}

/// Loss of one fine-tuning step on the support set.
pub struct LossInputs<'a, F: Scalar> {
    pub algorithm: Algorithm,
    pub distance: Distance,
    pub support: &'a Tensor<F>,
    pub labels: &'a [usize],
    pub num_classes: usize,
    /// Pseudo-query images; ProtoNCC uses the support itself.
    pub pseudo_query: Option<&'a Tensor<F>>,
}

/// Builds the episode loss in `s` and returns it.
pub fn episode_loss<F: Scalar>(s: &mut Session<'_, F>, inp: &LossInputs<'_, F>) -> Result<Var> {
    match inp.algorithm {
        Algorithm::Linear => {
            let (emb, _) = s.forward(inp.support, ForwardOptions::default())?;
            let (w, b) = (s.bind(names::HEAD_WEIGHT)?, s.bind(names::HEAD_BIAS)?);
            let z = s.graph.matmul(emb, w)?;
            let logits = s.graph.add(z, b)?;
            Ok(s.graph.cross_entropy(logits, inp.labels)?)
        }
        Algorithm::ProtoAug | Algorithm::ProtoNcc => {
            let query = inp.pseudo_query.unwrap_or(inp.support);
            prototype_loss(s, inp.support, inp.labels, inp.num_classes, query, inp.labels, inp.distance)
        }
    }
}

/// Prototypes from `support`, cross-entropy of `query` against them.
pub fn prototype_loss<F: Scalar>(
    s: &mut Session<'_, F>,
    support: &Tensor<F>,
    labels: &[usize],
    num_classes: usize,
    query: &Tensor<F>,
    query_labels: &[usize],
    distance: Distance,
) -> Result<Var> {
    let (emb, _) = s.forward(support, ForwardOptions::default())?;
    let avg = s.constant(averaging_matrix(labels, num_classes)?);
    let protos = s.graph.matmul(avg, emb)?;
    // an identical query shares the support embedding
    let q = if query == support { emb } else { s.forward(query, ForwardOptions::default())?.0 };
    let logits = proto_logits(&mut s.graph, q, protos, distance)?;
    Ok(s.graph.cross_entropy(logits, query_labels)?)
}

/// Query predictions under the current store.
fn evaluate<F: Scalar>(
    model: &ViTModel<F>,
    store: &ParamStore<F>,
    algorithm: Algorithm,
    distance: Distance,
    ep: &EpisodeTensors<F>,
) -> Result<f64> {
    let (q, _) = embed(model, store, &ep.query, ForwardOptions::default())?;
    let preds = match algorithm {
        Algorithm::Linear => {
            let w = store.get(names::HEAD_WEIGHT).ok_or_else(|| Error::MissingTensor(names::HEAD_WEIGHT.into()))?;
            let b = store.get(names::HEAD_BIAS).ok_or_else(|| Error::MissingTensor(names::HEAD_BIAS.into()))?;
            let mut z = q.matmul(w)?;
            let n = b.numel();
            for row in z.data_mut().chunks_exact_mut(n) {
                for (x, &bi) in row.iter_mut().zip(b.data()) {
                    *x += bi;
                }
            }
            argmax_rows(&z)
        }
        Algorithm::ProtoAug | Algorithm::ProtoNcc => {
            let (s, _) = embed(model, store, &ep.support, ForwardOptions::default())?;
            let p = prototypes(&s, &ep.support_labels, ep.num_classes)?;
            proto_classify(&q, &p, distance)?.1
        }
    };
    let hits = preds.iter().zip(&ep.query_labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / ep.query_labels.len() as f64)
}

struct EpisodeTensors<F: Scalar> {
    support: Tensor<F>,
    query: Tensor<F>,
    support_labels: Vec<usize>,
    query_labels: Vec<usize>,
    num_classes: usize,
}

/// Frozen-backbone ProtoNets accuracy on the episode's query set.
pub fn frozen_accuracy<F: Scalar>(model: &ViTModel<F>, episode: &Episode, distance: Distance) -> Result<f64> {
    let ep = tensors(episode);
    evaluate(model, &ParamStore::new(), Algorithm::ProtoNcc, distance, &ep)
}

fn tensors<F: Scalar>(e: &Episode) -> EpisodeTensors<F> {
    EpisodeTensors {
        support: e.support_images.cast(),
        query: e.query_images.cast(),
        support_labels: e.support_labels.clone(),
        query_labels: e.query_labels.clone(),
        num_classes: e.num_classes,
    }
}

/// Trainable store for one episode: added parameters, private copies of
/// trainable backbone tensors and, for `linear`, a prototype-initialized head.
pub struct EpisodeState<F: Scalar> {
    pub store: ParamStore<F>,
    pub trainable: Vec<String>,
}

pub fn prepare_episode<F: Scalar>(
    model: &ViTModel<F>,
    spec: &PeftSpec,
    episode: &Episode,
    algorithm: Algorithm,
) -> Result<EpisodeState<F>> {
    let ep = tensors::<F>(episode);
    let needs_protos = algorithm == Algorithm::Linear
        || (spec.hyper.prefix_init == PrefixInit::Prototype
            && (spec.method == Method::EttPrefix || spec.combine == Some(Method::EttPrefix)));
    let protos = if needs_protos {
        let (s, _) = embed(model, &ParamStore::new(), &ep.support, ForwardOptions::default())?;
        Some(prototypes(&s, &ep.support_labels, ep.num_classes)?)
    } else {
        None
    };
    let ctx = AttachContext { num_classes: ep.num_classes, prototypes: protos.as_ref(), seed: rng::split(episode.seed, 1) };
    let attached = attach(spec, model, &ctx)?;
    let mut store = attached.hooks;
    let mut trainable: Vec<String> = attached.trainable.names().map(String::from).collect();
    for name in &trainable {
        if !store.contains_key(name) {
            store.insert(name.clone(), Arc::clone(model.param(name)?));
        }
    }
    if algorithm == Algorithm::Linear {
        let p = protos.expect("computed for linear");
        let (n, d) = (p.shape()[0], p.shape()[1]);
        // logits 2c·x − |c|² rank classes like negative squared distance
        let w = Tensor::from_fn([d, n], |i| F::from_f64(2.0 * p.data()[(i % n) * d + i / n].to_f64()));
        let b = Tensor::from_fn([n], |k| F::from_f64(-p.row(k).iter().map(|v| v.to_f64().powi(2)).sum::<f64>()));
        store.insert(names::HEAD_WEIGHT.into(), Arc::new(w));
        store.insert(names::HEAD_BIAS.into(), Arc::new(b));
        trainable.push(names::HEAD_WEIGHT.into());
        trainable.push(names::HEAD_BIAS.into());
    }
    Ok(EpisodeState { store, trainable })
}

/// Fine-tunes on the support set with learning rate `lr` and reports query
/// accuracy. The shared `model` is never mutated.
pub fn finetune_episode<F: Scalar>(
    model: &ViTModel<F>,
    spec: &PeftSpec,
    episode: &Episode,
    cfg: &FinetuneConfig,
    lr: f64,
) -> Result<EpisodeReport> {
    finetune_episode_state(model, spec, episode, cfg, lr).map(|(r, _)| r)
}

/// [`finetune_episode`], also returning the final episode state.
pub fn finetune_episode_state<F: Scalar>(
    model: &ViTModel<F>,
    spec: &PeftSpec,
    episode: &Episode,
    cfg: &FinetuneConfig,
    lr: f64,
) -> Result<(EpisodeReport, EpisodeState<F>)> {
    let start = Instant::now();
    cfg.validate()?;
    if cfg.algorithm == Algorithm::ProtoAug {
        cfg.augment.validate(model.config().image_size)?;
    }
    let ep = tensors::<F>(episode);
    let EpisodeState { mut store, trainable } = prepare_episode(model, spec, episode, cfg.algorithm)?;
    let trainable_params = trainable.iter().map(|n| store[n].numel()).sum();
    let initial_accuracy = evaluate(model, &store, cfg.algorithm, cfg.distance, &ep)?;
    let setup_secs = start.elapsed().as_secs_f64();

    let mut aug_rng = rng::rng(rng::split(episode.seed, 2));
    let mut adam = Adam::new(cfg.adam);
    let (mut losses, mut step_secs) = (Vec::with_capacity(cfg.steps), Vec::with_capacity(cfg.steps));
    let mut backbone_grad_buffers = 0;
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let pseudo = match cfg.algorithm {
            Algorithm::ProtoAug => Some(augment(&episode.support_images, &cfg.augment, &mut aug_rng)?.cast::<F>()),
            _ => None,
        };
        let grads = {
            let mut s = Session::new(model, &store, trainable.iter().map(String::as_str));
            let inputs = LossInputs {
                algorithm: cfg.algorithm,
                distance: cfg.distance,
                support: &ep.support,
                labels: &ep.support_labels,
                num_classes: ep.num_classes,
                pseudo_query: pseudo.as_ref(),
            };
            let loss = episode_loss(&mut s, &inputs)?;
            losses.push(s.graph.value(loss).item().to_f64());
            let mut g = s.graph.backward(loss)?;
            let backbone = s.bound().filter(|(n, v)| model.param(n).is_ok() && g.get(*v).is_some()).count();
            backbone_grad_buffers = backbone_grad_buffers.max(backbone);
            let mut out = Vec::with_capacity(trainable.len());
            for name in &trainable {
                let Some(v) = s.var(name) else { continue };
                let Some(t) = g.take(v) else { continue };
                if !t.all_finite() {
                    return Err(Error::NonFiniteGradient { param: name.clone(), step });
                }
                out.push((name.clone(), t));
            }
            out
        };
        adam.step(&mut store, &grads, lr)?;
        step_secs.push(t0.elapsed().as_secs_f64());
    }
    let accuracy = evaluate(model, &store, cfg.algorithm, cfg.distance, &ep)?;
    let report = EpisodeReport {
        spec: spec.to_string(),
        algorithm: cfg.algorithm,
        domain: episode.domain.clone(),
        episode_seed: episode.seed,
        num_classes: ep.num_classes,
        support_size: ep.support_labels.len(),
        query_size: ep.query_labels.len(),
        accuracy,
        initial_accuracy,
        losses,
        setup_secs,
        step_secs,
        total_secs: start.elapsed().as_secs_f64(),
        lr,
        trainable_params,
        backbone_grad_buffers,
    };
    Ok((report, EpisodeState { store, trainable }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSelection {
    pub lr: f64,
    /// `(lr, mean validation accuracy)` per grid entry.
    pub scores: Vec<(f64, f64)>,
}

/// Index of the best score; ties go to the smaller learning rate.
pub fn pick_lr(scores: &[(f64, f64)]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(lr, acc) in scores {
        best = match best {
            Some((bl, ba)) if acc < ba || (acc == ba && lr >= bl) => Some((bl, ba)),
            _ => Some((lr, acc)),
        };
    }
    best.map(|b| b.0)
}

/// Runs every grid learning rate on every validation task and keeps the best mean accuracy.
pub fn select_lr<F: Scalar>(
    model: &ViTModel<F>,
    spec: &PeftSpec,
    validation: &[Episode],
    cfg: &FinetuneConfig,
) -> Result<LrSelection> {
    cfg.validate()?;
    let mut scores = Vec::with_capacity(cfg.lr_grid.len());
    for &lr in &cfg.lr_grid {
        let mut total = 0.0;
        for e in validation {
            total += finetune_episode(model, spec, e, cfg, lr)?.accuracy;
        }
        scores.push((lr, if validation.is_empty() { 0.0 } else { total / validation.len() as f64 }));
    }
    let lr = pick_lr(&scores).expect("non-empty grid");
    Ok(LrSelection { lr, scores })
}

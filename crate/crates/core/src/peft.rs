//! PEFT method catalog: added parameters, their initialization, and the
//! trainable-name set each method exposes.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use peft_forge_tensor::{Graph, Scalar, Tensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::vit::{names, ParamStore, ViTConfig, ViTModel};
use crate::{rng, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Full,
    LnTune,
    AttnScale,
    AttnScaleLite,
    DraOnly,
    Bias,
    Lora,
    Adapter,
    Ladder,
    PromptShallow,
    PromptDeep,
    EttPrefix,
}

impl Method {
    pub const ALL: [Method; 12] = [
        Method::Full,
        Method::LnTune,
        Method::AttnScale,
        Method::AttnScaleLite,
        Method::DraOnly,
        Method::Bias,
        Method::Lora,
        Method::Adapter,
        Method::Ladder,
        Method::PromptShallow,
        Method::PromptDeep,
        Method::EttPrefix,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Full => "full",
            Method::LnTune => "ln_tune",
            Method::AttnScale => "attn_scale",
            Method::AttnScaleLite => "attn_scale_lite",
            Method::DraOnly => "dra_only",
            Method::Bias => "bias",
            Method::Lora => "lora",
            Method::Adapter => "adapter",
            Method::Ladder => "ladder",
            Method::PromptShallow => "prompt_shallow",
            Method::PromptDeep => "prompt_deep",
            Method::EttPrefix => "ett_prefix",
        }
    }

    fn has_dra(self) -> bool {
        matches!(self, Method::AttnScale | Method::AttnScaleLite | Method::DraOnly | Method::EttPrefix)
    }

    fn is_scale(self) -> bool {
        matches!(self, Method::AttnScale | Method::AttnScaleLite)
    }

    fn changes_sequence(self) -> bool {
        matches!(self, Method::PromptShallow | Method::PromptDeep | Method::EttPrefix)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrefixInit {
    /// Keys/values of the support-class prototypes under each layer's frozen projections.
    #[default]
    Prototype,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Bottleneck width of adapter and ladder blocks.
    pub reduction_dim: usize,
    pub lora_rank: usize,
    pub prompt_len: usize,
    pub prefix_init: PrefixInit,
    /// Standard deviation of randomly initialized tokens.
    pub token_std: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams { reduction_dim: 8, lora_rank: 8, prompt_len: 8, prefix_init: PrefixInit::Prototype, token_std: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeftSpec {
    pub method: Method,
    #[serde(default)]
    pub hyper: Hyperparams,
    /// Layers receiving the method; `None` means every layer.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub insertion_mask: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub combine: Option<Method>,
}

impl fmt::Display for PeftSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.combine {
            Some(c) => write!(f, "{}+{}", self.method, c),
            None => write!(f, "{}", self.method),
        }
    }
}

impl FromStr for PeftSpec {
    type Err = Error;
    /// `method` or `method+method`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split('+');
        let mut spec = PeftSpec::new(parts.next().unwrap_or_default().parse()?);
        if let Some(c) = parts.next() {
            spec.combine = Some(c.parse()?);
        }
        if parts.next().is_some() {
            return Err(Error::Config(format!("at most two methods may be combined, got `{s}`")));
        }
        Ok(spec)
    }
}

/// Names the fine-tuner updates; every other parameter stays frozen.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainableSet {
    names: Vec<String>,
}

impl TrainableSet {
    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    fn push(&mut self, name: String) {
        if !self.contains(&name) {
            self.names.push(name);
        }
    }
}

/// Episode-specific inputs to [`attach`].
#[derive(Debug, Clone, Copy)]
pub struct AttachContext<'a, F: Scalar> {
    pub num_classes: usize,
    /// Frozen-backbone class prototypes `[N, d]`, used by prototype prefix init.
    pub prototypes: Option<&'a Tensor<F>>,
    pub seed: u64,
}

impl<F: Scalar> AttachContext<'_, F> {
    pub fn new(num_classes: usize, seed: u64) -> Self {
        AttachContext { num_classes, prototypes: None, seed }
    }
}

#[derive(Debug, Clone)]
pub struct Attached<F: Scalar> {
    /// PEFT-added parameters, read by the forward pass as hooks.
    pub hooks: ParamStore<F>,
    pub trainable: TrainableSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub added_params: usize,
    pub trainable_params: usize,
    pub total_params: usize,
    pub ratio: f64,
}

#[derive(Clone, Copy)]
enum InitKind {
    Zeros,
    Ones,
    /// N(0, 1/fan_in) on the first axis.
    FanIn,
    Tokens,
    Prefix,
}

struct Added {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

impl PeftSpec {
    pub fn new(method: Method) -> Self {
        PeftSpec { method, hyper: Hyperparams::default(), insertion_mask: None, combine: None }
    }

    pub fn with_mask(mut self, mask: Vec<usize>) -> Self {
        self.insertion_mask = Some(mask);
        self
    }

    pub fn with_combine(mut self, other: Method) -> Self {
        self.combine = Some(other);
        self
    }

    fn methods(&self) -> impl Iterator<Item = Method> {
        std::iter::once(self.method).chain(self.combine)
    }

    /// Masked layer indices in ascending order.
    pub fn layers(&self, config: &ViTConfig) -> Vec<usize> {
        match &self.insertion_mask {
            None => (0..config.depth).collect(),
            Some(m) => {
                let mut v: Vec<usize> = m.iter().copied().filter(|&l| l < config.depth).collect();
                v.sort_unstable();
                v.dedup();
                v
            }
        }
    }

    /// Lists every incompatibility between the spec and `config`.
    pub fn validate(&self, config: &ViTConfig) -> Result<()> {
        let mut problems = Vec::new();
        if let Some(mask) = &self.insertion_mask {
            if mask.is_empty() {
                problems.push("insertion_mask must not be empty".to_string());
            }
            for &l in mask {
                if l >= config.depth {
                    problems.push(format!("insertion_mask layer {l} is outside [0, {})", config.depth));
                }
            }
        }
        let h = &self.hyper;
        if h.reduction_dim == 0 || h.lora_rank == 0 || h.prompt_len == 0 || !(h.token_std > 0.0) {
            problems.push("hyperparameters must be positive".to_string());
        }
        let methods: Vec<Method> = self.methods().collect();
        if methods.iter().any(|m| matches!(m, Method::PromptShallow | Method::PromptDeep)) && h.prompt_len >= config.tokens() {
            problems.push(format!("prompt_len {} must be below the token budget n = {}", h.prompt_len, config.tokens()));
        }
        if let Some(c) = self.combine {
            let pair = [self.method, c];
            if self.method == c {
                problems.push(format!("cannot combine `{c}` with itself"));
            }
            if pair.contains(&Method::Full) || pair.contains(&Method::Ladder) {
                problems.push(format!("`{}` cannot be combined with `{}`", self.method, c));
            }
            if pair.iter().any(|m| m.is_scale()) && pair.iter().any(|m| m.changes_sequence()) {
                problems.push(format!("a fixed n×n score scale cannot be combined with `{}`", pair.iter().find(|m| m.changes_sequence()).unwrap()));
            }
            if pair.iter().filter(|m| m.is_scale()).count() == 2 {
                problems.push("attn_scale and attn_scale_lite are alternatives".to_string());
            }
            if pair.iter().filter(|m| m.changes_sequence()).count() == 2 {
                problems.push("only one sequence-changing method may be used".to_string());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Names and shapes of the parameters this spec adds, in canonical order.
    pub fn added_shapes(&self, config: &ViTConfig, num_classes: usize) -> Vec<(String, Vec<usize>)> {
        self.added(config, num_classes).into_iter().map(|a| (a.name, a.shape)).collect()
    }

    fn added(&self, config: &ViTConfig, num_classes: usize) -> Vec<Added> {
        let (d, n, nh) = (config.dim, config.tokens(), config.heads);
        let (r, lr, p) = (self.hyper.reduction_dim, self.hyper.lora_rank, self.hyper.prompt_len);
        let layers = self.layers(config);
        let mut out = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init| {
            if !out.iter().any(|a: &Added| a.name == name) {
                out.push(Added { name, shape, init });
            }
        };
        for m in self.methods() {
            for &i in &layers {
                match m {
                    Method::AttnScale => add(names::scale(i), vec![nh, n, n], InitKind::Ones),
                    Method::AttnScaleLite => add(names::scale(i), vec![n, n], InitKind::Ones),
                    Method::Lora => {
                        for proj in ["q", "k", "v", "proj"] {
                            add(names::lora(i, proj, "a"), vec![d, lr], InitKind::FanIn);
                            add(names::lora(i, proj, "b"), vec![lr, d], InitKind::Zeros);
                        }
                    }
                    Method::Adapter | Method::Ladder => {
                        let f = |p: &str| if m == Method::Adapter { names::adapter(i, p) } else { names::ladder(i, p) };
                        add(f("down_weight"), vec![d, r], InitKind::FanIn);
                        add(f("down_bias"), vec![r], InitKind::Zeros);
                        add(f("up_weight"), vec![r, d], InitKind::Zeros);
                        add(f("up_bias"), vec![d], InitKind::Zeros);
                    }
                    Method::PromptDeep => add(names::prompt(i), vec![p, d], InitKind::Tokens),
                    Method::EttPrefix => {
                        add(names::prefix(i, "key"), vec![num_classes, d], InitKind::Prefix);
                        add(names::prefix(i, "value"), vec![num_classes, d], InitKind::Prefix);
                    }
                    _ => {}
                }
                if m.has_dra() {
                    add(names::dra(i, "attn"), vec![d], InitKind::Zeros);
                    add(names::dra(i, "mlp"), vec![d], InitKind::Zeros);
                }
            }
            if m == Method::PromptShallow {
                add(names::PROMPT.to_string(), vec![p, d], InitKind::Tokens);
            }
        }
        out
    }

    /// Backbone parameter names made trainable, in canonical order.
    pub fn trainable_backbone(&self, config: &ViTConfig) -> Vec<String> {
        let layers: HashSet<usize> = self.layers(config).into_iter().collect();
        let in_mask = |name: &str| names::layer_of(name).is_some_and(|l| layers.contains(&l));
        let methods: Vec<Method> = self.methods().collect();
        config
            .parameter_shapes()
            .into_iter()
            .map(|(name, _)| name)
            .filter(|name| {
                methods.iter().any(|m| match m {
                    Method::Full => true,
                    Method::LnTune => name.starts_with("norm.") || (names::is_layer_norm(name) && in_mask(name)),
                    Method::Bias => names::is_block_bias(name) && in_mask(name),
                    _ => false,
                })
            })
            .collect()
    }

    /// Exact counts without materializing any weights.
    pub fn count_report(&self, config: &ViTConfig, num_classes: usize) -> CountReport {
        let numel = |s: &[usize]| s.iter().product::<usize>();
        let added: usize = self.added(config, num_classes).iter().map(|a| numel(&a.shape)).sum();
        let shapes = config.parameter_shapes();
        let backbone_total: usize = shapes.iter().map(|(_, s)| numel(s)).sum();
        let trainable_names: HashSet<String> = self.trainable_backbone(config).into_iter().collect();
        let backbone_trainable: usize =
            shapes.iter().filter(|(n, _)| trainable_names.contains(n)).map(|(_, s)| numel(s)).sum();
        let total = backbone_total + added;
        let trainable = backbone_trainable + added;
        CountReport { added_params: added, trainable_params: trainable, total_params: total, ratio: trainable as f64 / total as f64 }
    }
}

/// Creates the method's added parameters and trainable set for one episode.
pub fn attach<F: Scalar>(spec: &PeftSpec, model: &ViTModel<F>, ctx: &AttachContext<'_, F>) -> Result<Attached<F>> {
    let config = model.config();
    spec.validate(config)?;
    let mut rng = rng::rng(ctx.seed);
    let mut hooks = ParamStore::new();
    let mut trainable = TrainableSet::default();
    for name in spec.trainable_backbone(config) {
        trainable.push(name);
    }
    for a in spec.added(config, ctx.num_classes) {
        let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
        let t = match a.init {
            InitKind::Zeros => Tensor::zeros(a.shape.clone()),
            InitKind::Ones => Tensor::ones(a.shape.clone()),
            InitKind::FanIn => {
                let n = normal((1.0 / a.shape[0] as f64).sqrt());
                Tensor::from_fn(a.shape.clone(), |_| F::from_f64(n.sample(&mut rng)))
            }
            InitKind::Tokens => {
                let n = normal(spec.hyper.token_std);
                Tensor::from_fn(a.shape.clone(), |_| F::from_f64(n.sample(&mut rng)))
            }
            InitKind::Prefix => match (spec.hyper.prefix_init, ctx.prototypes) {
                (PrefixInit::Prototype, Some(protos)) => prototype_prefix(model, protos, &a.name)?,
                (PrefixInit::Prototype, None) => {
                    return Err(Error::Config("prototype prefix init needs support prototypes".into()))
                }
                (PrefixInit::Random, _) => {
                    let n = normal(spec.hyper.token_std);
                    Tensor::from_fn(a.shape.clone(), |_| F::from_f64(n.sample(&mut rng)))
                }
            },
        };
        if t.shape() != a.shape.as_slice() {
            return Err(Error::TensorShape { name: a.name, expected: a.shape, found: t.shape().to_vec() });
        }
        trainable.push(a.name.clone());
        hooks.insert(a.name, Arc::new(t));
    }
    Ok(Attached { hooks, trainable })
}

/// `LN₁(prototypes)·W + b` under layer `i`'s frozen key or value projection.
fn prototype_prefix<F: Scalar>(model: &ViTModel<F>, protos: &Tensor<F>, prefix_name: &str) -> Result<Tensor<F>> {
    let layer = names::layer_of(prefix_name).expect("prefix names carry a layer");
    let kind = if prefix_name.ends_with(".key") { "k" } else { "v" };
    let mut g = Graph::<F>::new();
    let x = g.constant(protos.clone());
    let gamma = g.constant(Arc::clone(model.param(&names::block(layer, "norm1", "gamma"))?));
    let beta = g.constant(Arc::clone(model.param(&names::block(layer, "norm1", "beta"))?));
    let h = g.layer_norm(x, gamma, beta, model.config().ln_eps)?;
    let w = g.constant(Arc::clone(model.param(&names::block(layer, "attn", &format!("{kind}_weight")))?));
    let b = g.constant(Arc::clone(model.param(&names::block(layer, "attn", &format!("{kind}_bias")))?));
    let y = g.matmul(h, w)?;
    let y = g.add(y, b)?;
    Ok(g.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(m: Method, cfg: &ViTConfig) -> CountReport {
        PeftSpec::new(m).count_report(cfg, 5)
    }

    #[test]
    fn tiny_counts() {
        let cfg = ViTConfig::tiny();
        let s = PeftSpec::new(Method::AttnScale).added(&cfg, 5);
        let scale: usize = s.iter().filter(|a| a.name.ends_with("attn.scale")).map(|a| a.shape.iter().product::<usize>()).sum();
        assert_eq!(scale, 100);
        assert_eq!(count(Method::LnTune, &cfg).trainable_params, 80);
    }

    #[test]
    fn vit_s16_counts() {
        let cfg = ViTConfig::vit_s16(128);
        let scale = count(Method::AttnScale, &cfg);
        assert_eq!(scale.added_params, 304_200 + 9_216);
        let lite = count(Method::AttnScaleLite, &cfg);
        assert_eq!(lite.added_params, 50_700 + 9_216);
        assert_eq!(count(Method::DraOnly, &cfg).added_params, 9_216);
        let ln = count(Method::LnTune, &cfg);
        assert_eq!(ln.trainable_params, 19_200);
        assert!(ln.ratio < 0.001);
        assert_eq!(count(Method::Full, &cfg).ratio, 1.0);
        assert!(count(Method::LnTune, &ViTConfig::vit_b16(128)).trainable_params == 38_400);
    }

    #[test]
    fn qkv_weights_frozen_except_full() {
        let cfg = ViTConfig::tiny();
        for m in Method::ALL {
            let t = PeftSpec::new(m).trainable_backbone(&cfg);
            let has_qkv = t.iter().any(|n| n.ends_with("q_weight") || n.ends_with("k_weight") || n.ends_with("v_weight"));
            assert_eq!(has_qkv, m == Method::Full, "{m}");
        }
    }

    #[test]
    fn validation_lists_all_problems() {
        let cfg = ViTConfig::tiny();
        let mut s = PeftSpec::new(Method::PromptDeep).with_mask(vec![0, 7]).with_combine(Method::AttnScale);
        s.hyper.prompt_len = 5;
        let msg = s.validate(&cfg).unwrap_err().to_string();
        assert!(msg.contains("layer 7") && msg.contains("token budget") && msg.contains("score scale"), "{msg}");
        assert!(PeftSpec::new(Method::AttnScale).with_combine(Method::LnTune).validate(&cfg).is_ok());
    }

    #[test]
    fn specs_parse_and_print() {
        let s: PeftSpec = "attn_scale+ln_tune".parse().unwrap();
        assert_eq!(s.combine, Some(Method::LnTune));
        assert_eq!(s.to_string(), "attn_scale+ln_tune");
        assert!("nope".parse::<PeftSpec>().is_err());
    }

    #[test]
    fn mask_restricts_layers() {
        let cfg = ViTConfig::tiny();
        let s = PeftSpec::new(Method::LnTune).with_mask(vec![1]);
        let t = s.trainable_backbone(&cfg);
        assert!(t.iter().all(|n| !n.starts_with("blocks.0")));
        assert_eq!(t.len(), 4 + 2);
    }
}

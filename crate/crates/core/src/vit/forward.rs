use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use indexmap::IndexMap;
use peft_forge_tensor::{Graph, Scalar, Tensor, Var};

use super::config::names;
use super::model::ViTModel;
use crate::{Error, Result};

/// Named tensors layered over the backbone: PEFT-added parameters plus
/// episode-private copies of trainable backbone parameters.
pub type ParamStore<F> = IndexMap<String, Arc<Tensor<F>>>;

/// Post-softmax attention per layer, each `[b, n_h, t, t_kv]`.
#[derive(Debug, Clone)]
pub struct AttentionTrace<F: Scalar = f32> {
    pub layers: Vec<Arc<Tensor<F>>>,
}

impl<F: Scalar> AttentionTrace<F> {
    /// Attention map of `(layer, head)` for batch element `example`, row-major `[t, t_kv]`.
    pub fn map(&self, layer: usize, example: usize, head: usize) -> &[F] {
        let t = &self.layers[layer];
        let s = t.shape();
        let size = s[2] * s[3];
        let start = (example * s[1] + head) * size;
        &t.data()[start..start + size]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions {
    pub trace: bool,
    /// `false` drops both residual connections of every block.
    pub residual: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { trace: false, residual: true }
    }
}

/// One graph plus the name → leaf bindings of a forward/backward pass.
///
/// Names are resolved in the store first, then in the backbone. Only names in
/// `trainable` become gradient-receiving leaves.
pub struct Session<'a, F: Scalar = f32> {
    pub graph: Graph<F>,
    model: &'a ViTModel<F>,
    store: &'a ParamStore<F>,
    trainable: HashSet<&'a str>,
    vars: HashMap<String, Var>,
}

impl<'a, F: Scalar> Session<'a, F> {
    pub fn new(model: &'a ViTModel<F>, store: &'a ParamStore<F>, trainable: impl IntoIterator<Item = &'a str>) -> Self {
        Session {
            graph: Graph::new(),
            model,
            store,
            trainable: trainable.into_iter().collect(),
            vars: HashMap::new(),
        }
    }

    pub fn model(&self) -> &'a ViTModel<F> {
        self.model
    }

    pub fn has(&self, name: &str) -> bool {
        self.store.contains_key(name)
    }

    pub fn lookup(&self, name: &str) -> Result<&'a Arc<Tensor<F>>> {
        match self.store.get(name) {
            Some(t) => Ok(t),
            None => self.model.param(name),
        }
    }

    pub fn bind(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.vars.get(name) {
            return Ok(v);
        }
        let value = Arc::clone(self.lookup(name)?);
        let v = self.graph.leaf(value, self.trainable.contains(name));
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    /// Leaf bound to `name`, if the pass used it.
    pub fn var(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Every name bound so far with its leaf.
    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Whether `name` resolves to a PEFT-added or episode-private tensor.
    pub fn is_stored(&self, name: &str) -> bool {
        self.store.contains_key(name)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.graph.constant(t)
    }

    fn linear(&mut self, x: Var, w: &str, b: &str) -> Result<Var> {
        let (w, b) = (self.bind(w)?, self.bind(b)?);
        let y = self.graph.matmul(x, w)?;
        Ok(self.graph.add(y, b)?)
    }

    /// `x + up(gelu(down(x)))` style bottleneck body, without the residual.
    fn bottleneck(&mut self, x: Var, prefix: impl Fn(&str) -> String) -> Result<Var> {
        let h = self.linear(x, &prefix("down_weight"), &prefix("down_bias"))?;
        let h = self.graph.gelu(h);
        self.linear(h, &prefix("up_weight"), &prefix("up_bias"))
    }

    fn projection(&mut self, layer: usize, h: Var, proj: &str) -> Result<Var> {
        let mut y = self.linear(
            h,
            &names::block(layer, "attn", &format!("{proj}_weight")),
            &names::block(layer, "attn", &format!("{proj}_bias")),
        )?;
        let a = names::lora(layer, proj, "a");
        if self.has(&a) {
            let (a, b) = (self.bind(&a)?, self.bind(&names::lora(layer, proj, "b"))?);
            let t = self.graph.matmul(h, a)?;
            let delta = self.graph.matmul(t, b)?;
            y = self.graph.add(y, delta)?;
        }
        Ok(y)
    }

    fn add_dra(&mut self, layer: usize, branch: &str, x: Var) -> Result<Var> {
        let name = names::dra(layer, branch);
        if !self.has(&name) {
            return Ok(x);
        }
        let d = self.bind(&name)?;
        Ok(self.graph.add(x, d)?)
    }

    /// `[b, t, d]` → `[b, n_h, t, d_e]`.
    fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let s = self.graph.shape(x).to_vec();
        let r = self.graph.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
        Ok(self.graph.permute(r, &[0, 2, 1, 3])?)
    }

    fn attention(&mut self, layer: usize, h: Var, trace: &mut Option<AttentionTrace<F>>) -> Result<Var> {
        let cfg = self.model.config();
        let (heads, de) = (cfg.heads, cfg.head_dim());
        let b = self.graph.shape(h)[0];
        let q = self.projection(layer, h, "q")?;
        let mut k = self.projection(layer, h, "k")?;
        let mut v = self.projection(layer, h, "v")?;
        let pk = names::prefix(layer, "key");
        if self.has(&pk) {
            let (pk, pv) = (self.bind(&pk)?, self.bind(&names::prefix(layer, "value"))?);
            let pk = self.graph.expand(pk, b)?;
            let pv = self.graph.expand(pv, b)?;
            k = self.graph.concat(&[pk, k], 1)?;
            v = self.graph.concat(&[pv, v], 1)?;
        }
        let q = self.split_heads(q, heads)?;
        let k = self.split_heads(k, heads)?;
        let v = self.split_heads(v, heads)?;
        let kt = self.graph.transpose(k)?;
        let s = self.graph.matmul(q, kt)?;
        let s = self.graph.scale(s, 1.0 / (de as f64).sqrt());
        let scale = names::scale(layer);
        let a = if self.has(&scale) { Some(self.bind(&scale)?) } else { None };
        let p = attention_probs(&mut self.graph, s, a)?;
        if let Some(t) = trace {
            t.layers.push(self.graph.value_arc(p));
        }
        let o = self.graph.matmul(p, v)?;
        let o = self.graph.permute(o, &[0, 2, 1, 3])?;
        let t = self.graph.shape(o)[1];
        let o = self.graph.reshape(o, &[b, t, cfg.dim])?;
        self.projection(layer, o, "proj")
    }

    fn mlp(&mut self, layer: usize, h: Var) -> Result<Var> {
        let m = self.linear(h, &names::block(layer, "mlp", "fc1_weight"), &names::block(layer, "mlp", "fc1_bias"))?;
        let m = self.graph.gelu(m);
        let mut m = self.linear(m, &names::block(layer, "mlp", "fc2_weight"), &names::block(layer, "mlp", "fc2_bias"))?;
        if self.has(&names::adapter(layer, "down_weight")) {
            let a = self.bottleneck(m, |p| names::adapter(layer, p))?;
            m = self.graph.add(m, a)?;
        }
        Ok(m)
    }

    fn layer_norm(&mut self, x: Var, gamma: &str, beta: &str) -> Result<Var> {
        let (g, b) = (self.bind(gamma)?, self.bind(beta)?);
        Ok(self.graph.layer_norm(x, g, b, self.model.config().ln_eps)?)
    }

    /// `x[:, 0]` ++ `tokens` ++ `x[:, 1 + skip..]`.
    fn insert_prompt(&mut self, x: Var, name: &str, skip: usize) -> Result<(Var, usize)> {
        let p = self.bind(name)?;
        let len = self.graph.shape(p)[0];
        let (b, t) = (self.graph.shape(x)[0], self.graph.shape(x)[1]);
        let p = self.graph.expand(p, b)?;
        let cls = self.graph.slice(x, 1, 0, 1)?;
        let rest = self.graph.slice(x, 1, 1 + skip, t - 1 - skip)?;
        Ok((self.graph.concat(&[cls, p, rest], 1)?, len))
    }

    fn check_hooks(&self) -> Result<()> {
        let depth = self.model.config().depth;
        for name in self.store.keys() {
            if let Some(l) = names::layer_of(name) {
                if l >= depth {
                    return Err(Error::Config(format!("hook `{name}` references layer {l}, model has {depth}")));
                }
            }
        }
        Ok(())
    }

    /// CLS embeddings `[b, d]` after the final LayerNorm.
    pub fn forward(&mut self, images: &Tensor<F>, opts: ForwardOptions) -> Result<(Var, Option<AttentionTrace<F>>)> {
        self.check_hooks()?;
        let cfg = self.model.config().clone();
        let patches = patchify(images, &cfg)?;
        let b = patches.shape()[0];
        let patches = self.graph.constant(patches);
        let x = self.linear(patches, names::PATCH_WEIGHT, names::PATCH_BIAS)?;
        let cls = self.bind(names::CLS)?;
        let cls = self.graph.reshape(cls, &[1, cfg.dim])?;
        let cls = self.graph.expand(cls, b)?;
        let x = self.graph.concat(&[cls, x], 1)?;
        let pos = self.bind(names::POS)?;
        let mut x = self.graph.add(x, pos)?;

        let mut trace = opts.trace.then(|| AttentionTrace { layers: Vec::new() });
        let mut prompts = 0;
        if self.has(names::PROMPT) {
            (x, prompts) = self.insert_prompt(x, names::PROMPT, 0)?;
        }
        let mut side: Option<Var> = None;
        for i in 0..cfg.depth {
            let deep = names::prompt(i);
            if self.has(&deep) {
                (x, prompts) = self.insert_prompt(x, &deep, prompts)?;
            }
            let h = self.layer_norm(x, &names::block(i, "norm1", "gamma"), &names::block(i, "norm1", "beta"))?;
            let a = self.attention(i, h, &mut trace)?;
            let a = self.add_dra(i, "attn", a)?;
            x = if opts.residual { self.graph.add(x, a)? } else { a };
            let h = self.layer_norm(x, &names::block(i, "norm2", "gamma"), &names::block(i, "norm2", "beta"))?;
            let m = self.mlp(i, h)?;
            let m = self.add_dra(i, "mlp", m)?;
            x = if opts.residual { self.graph.add(x, m)? } else { m };

            if self.has(&names::ladder(i, "down_weight")) {
                let c = self.graph.slice(x, 1, 0, 1)?;
                let c = self.graph.reshape(c, &[b, cfg.dim])?;
                let c = self.graph.detach(c);
                let input = match side {
                    Some(s) => self.graph.add(c, s)?,
                    None => c,
                };
                let u = self.bottleneck(input, |p| names::ladder(i, p))?;
                side = Some(match side {
                    Some(s) => self.graph.add(s, u)?,
                    None => u,
                });
            }
        }
        let c = self.graph.slice(x, 1, 0, 1)?;
        let mut c = self.graph.reshape(c, &[b, cfg.dim])?;
        if let Some(s) = side {
            c = self.graph.add(c, s)?;
        }
        let out = self.layer_norm(c, names::NORM_GAMMA, names::NORM_BETA)?;
        Ok((out, trace))
    }
}

/// `[b, C, H, W]` images → `[b, g², C·p·p]` patch rows; within a patch the
/// index is `c·p·p + dy·p + dx`, and patches run row-major over the grid.
/// Row softmax of `scores ⊙ scale`; `scale` broadcasts over leading axes.
pub fn attention_probs<F: Scalar>(g: &mut Graph<F>, scores: Var, scale: Option<Var>) -> Result<Var> {
    let s = match scale {
        Some(a) => g.mul(scores, a)?,
        None => scores,
    };
    Ok(g.softmax(s))
}

pub fn patchify<F: Scalar>(images: &Tensor<F>, cfg: &super::ViTConfig) -> Result<Tensor<F>> {
    let s = images.shape();
    let (c, size, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if s.len() != 4 || s[1] != c || s[2] != size || s[3] != size {
        return Err(Error::TensorShape {
            name: "images".into(),
            expected: vec![s.first().copied().unwrap_or(1), c, size, size],
            found: s.to_vec(),
        });
    }
    let (b, g) = (s[0], cfg.grid());
    let src = images.data();
    let mut out = Vec::with_capacity(images.numel());
    for n in 0..b {
        for gy in 0..g {
            for gx in 0..g {
                for ch in 0..c {
                    for dy in 0..p {
                        let row = ((n * c + ch) * size + gy * p + dy) * size + gx * p;
                        out.extend_from_slice(&src[row..row + p]);
                    }
                }
            }
        }
    }
    Ok(Tensor::new([b, g * g, cfg.patch_len()], out)?)
}

/// Inference-only forward: CLS embeddings `[b, d]` and an optional trace.
pub fn embed<F: Scalar>(
    model: &ViTModel<F>,
    hooks: &ParamStore<F>,
    images: &Tensor<F>,
    opts: ForwardOptions,
) -> Result<(Tensor<F>, Option<AttentionTrace<F>>)> {
    let mut s = Session::new(model, hooks, std::iter::empty());
    let (out, trace) = s.forward(images, opts)?;
    Ok((s.graph.value(out).clone(), trace))
}

//! Pre-LayerNorm transformer encoder with a mean-pooled classifier head.
//!
//! Initialization (all from one [`RngStream`], in registry order):
//! token and position embeddings `N(0, 1)`, linear weights
//! `N(0, 1/sqrt(D_in))`, biases `0`, LayerNorm gains `1` and biases `0`,
//! head weight `N(0, 1/sqrt(d_model))`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::micromodel::config::{layer_name, ModelConfig, Sublayer};
use crate::modulation::{grasp_forward, linear, stoch_forward, GraspLayer, Noise, StochLayer};
use crate::numkit::{normal_sample, RngStream, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init(d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        Self {
            weight: normal_sample(rng, &[d_in, d_out], 0.0, 1.0 / (d_in as f64).sqrt())
                .expect("valid std"),
            bias: Tensor::zeros(&[d_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Norm {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl Norm {
    fn new(d: usize) -> Self {
        Self {
            gain: Tensor::full(&[d], 1.0),
            bias: Tensor::zeros(&[d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub ln1: Norm,
    pub ln2: Norm,
    pub linears: Vec<(Sublayer, Linear)>,
}

impl Block {
    pub fn linear(&self, s: Sublayer) -> Option<&Linear> {
        self.linears.iter().find(|(k, _)| *k == s).map(|(_, l)| l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Adapter {
    Grasp(GraspLayer),
    Stoch(StochLayer),
}

impl Adapter {
    pub fn trainable_count(&self) -> usize {
        match self {
            Adapter::Grasp(g) => g.trainable_count(),
            Adapter::Stoch(s) => s.trainable_count(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub tok_embed: Tensor,
    pub pos_embed: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: Norm,
    pub head: Linear,
    /// Keyed by registry name.
    pub adapters: BTreeMap<String, Adapter>,
}

/// Noise used by stochastic adapters during a forward pass.
pub enum NoiseSource<'a> {
    Mean,
    Sample(&'a mut RngStream),
    /// Fixed per-layer draws keyed by registry name; missing layers deploy means.
    Fixed(&'a BTreeMap<String, Tensor>),
}

/// Result of one forward pass. `bindings` lists every trainable tensor that
/// entered the tape, by parameter name.
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: Var,
    pub bindings: Vec<(String, Var)>,
}

impl ForwardPass {
    pub fn binding(&self, name: &str) -> Option<Var> {
        self.bindings.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }
}

struct Ctx {
    tape: Tape,
    bindings: Vec<(String, Var)>,
}

impl Ctx {
    fn param(&mut self, name: impl FnOnce() -> String, t: &Tensor) -> Var {
        let v = self.tape.leaf(t);
        if t.requires_grad() {
            self.bindings.push((name(), v));
        }
        v
    }

    fn bind(&mut self, name: String, v: Var, t: &Tensor) {
        if t.requires_grad() {
            self.bindings.push((name, v));
        }
    }
}

/// Builds and initializes a model.
pub fn build_model(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Model> {
    cfg.validate()?;
    let d = cfg.d_model;
    let tok_embed = normal_sample(rng, &[cfg.vocab, d], 0.0, 1.0)?;
    let pos_embed = normal_sample(rng, &[cfg.max_seq, d], 0.0, 1.0)?;
    let blocks = (0..cfg.n_blocks)
        .map(|_| Block {
            ln1: Norm::new(d),
            ln2: Norm::new(d),
            linears: cfg
                .sublayers()
                .into_iter()
                .map(|s| {
                    let (i, o) = cfg.dims(s);
                    (s, Linear::init(i, o, rng))
                })
                .collect(),
        })
        .collect();
    let head = Linear {
        weight: normal_sample(rng, &[d, cfg.n_classes], 0.0, 1.0 / (d as f64).sqrt())?,
        bias: Tensor::zeros(&[cfg.n_classes]),
    };
    let mut model = Model {
        config: cfg.clone(),
        tok_embed,
        pos_embed,
        blocks,
        final_norm: Norm::new(d),
        head,
        adapters: BTreeMap::new(),
    };
    model.set_all_trainable(true);
    Ok(model)
}

impl Model {
    pub fn registry(&self) -> Vec<String> {
        self.config.registry()
    }

    pub fn linear(&self, name: &str) -> Option<&Linear> {
        let (b, s) = self.parse_layer(name)?;
        self.blocks.get(b)?.linear(s)
    }

    pub fn linear_mut(&mut self, name: &str) -> Option<&mut Linear> {
        let (b, s) = self.parse_layer(name)?;
        self.blocks
            .get_mut(b)?
            .linears
            .iter_mut()
            .find(|(k, _)| *k == s)
            .map(|(_, l)| l)
    }

    fn parse_layer(&self, name: &str) -> Option<(usize, Sublayer)> {
        let rest = name.strip_prefix("block")?;
        let (b, label) = rest.split_once('.')?;
        let b: usize = b.parse().ok()?;
        let s = self
            .config
            .sublayers()
            .into_iter()
            .find(|s| s.label() == label)?;
        Some((b, s))
    }

    /// Visits every base tensor (everything except adapters) by name.
    pub fn visit_base(&self, mut f: impl FnMut(&str, &Tensor)) {
        f("embed.tok", &self.tok_embed);
        f("embed.pos", &self.pos_embed);
        for (b, block) in self.blocks.iter().enumerate() {
            f(&format!("block{b}.ln1.gain"), &block.ln1.gain);
            f(&format!("block{b}.ln1.bias"), &block.ln1.bias);
            f(&format!("block{b}.ln2.gain"), &block.ln2.gain);
            f(&format!("block{b}.ln2.bias"), &block.ln2.bias);
            for (s, lin) in &block.linears {
                let n = layer_name(b, *s);
                f(&format!("{n}.weight"), &lin.weight);
                f(&format!("{n}.bias"), &lin.bias);
            }
        }
        f("final_norm.gain", &self.final_norm.gain);
        f("final_norm.bias", &self.final_norm.bias);
        f("head.weight", &self.head.weight);
        f("head.bias", &self.head.bias);
    }

    pub fn visit_base_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        f("embed.tok", &mut self.tok_embed);
        f("embed.pos", &mut self.pos_embed);
        for (b, block) in self.blocks.iter_mut().enumerate() {
            f(&format!("block{b}.ln1.gain"), &mut block.ln1.gain);
            f(&format!("block{b}.ln1.bias"), &mut block.ln1.bias);
            f(&format!("block{b}.ln2.gain"), &mut block.ln2.gain);
            f(&format!("block{b}.ln2.bias"), &mut block.ln2.bias);
            for (s, lin) in block.linears.iter_mut() {
                let n = layer_name(b, *s);
                f(&format!("{n}.weight"), &mut lin.weight);
                f(&format!("{n}.bias"), &mut lin.bias);
            }
        }
        f("final_norm.gain", &mut self.final_norm.gain);
        f("final_norm.bias", &mut self.final_norm.bias);
        f("head.weight", &mut self.head.weight);
        f("head.bias", &mut self.head.bias);
    }

    /// Visits every tensor, base then adapters.
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&str, &mut Tensor)) {
        self.visit_base_mut(&mut f);
        for (name, a) in self.adapters.iter_mut() {
            match a {
                Adapter::Grasp(g) => {
                    f(&format!("{name}.gamma"), &mut g.gamma);
                    f(&format!("{name}.beta"), &mut g.beta);
                }
                Adapter::Stoch(s) => {
                    f(&format!("{name}.mu"), &mut s.mu);
                    f(&format!("{name}.sigma"), &mut s.sigma);
                }
            }
        }
    }

    pub fn visit_params(&self, mut f: impl FnMut(&str, &Tensor)) {
        self.visit_base(&mut f);
        for (name, a) in &self.adapters {
            match a {
                Adapter::Grasp(g) => {
                    f(&format!("{name}.gamma"), &g.gamma);
                    f(&format!("{name}.beta"), &g.beta);
                }
                Adapter::Stoch(s) => {
                    f(&format!("{name}.mu"), &s.mu);
                    f(&format!("{name}.sigma"), &s.sigma);
                }
            }
        }
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        self.visit_base_mut(|_, t| t.set_requires_grad(flag));
    }

    /// Freezes the base, keeping only the classifier head trainable.
    pub fn freeze_base(&mut self) {
        self.visit_base_mut(|name, t| t.set_requires_grad(name.starts_with("head.")));
    }

    /// Swaps in a freshly initialized head with `n_classes` outputs.
    pub fn reset_head(&mut self, n_classes: usize, rng: &mut RngStream) -> Result<()> {
        if n_classes == 0 {
            return Err(LabError::config("n_classes", "must be >= 1"));
        }
        let d = self.config.d_model;
        self.config.n_classes = n_classes;
        self.head = Linear {
            weight: normal_sample(rng, &[d, n_classes], 0.0, 1.0 / (d as f64).sqrt())?
                .with_grad(true),
            bias: Tensor::zeros(&[n_classes]).with_grad(true),
        };
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(|_, t| t.zero_grad());
    }

    pub fn trainable_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(|_, t| {
            if t.requires_grad() {
                n += t.len()
            }
        });
        n
    }

    /// Trainable values held by adapters.
    pub fn adapter_param_count(&self) -> usize {
        self.adapters.values().map(Adapter::trainable_count).sum()
    }

    pub fn base_param_count(&self) -> usize {
        let mut n = 0;
        self.visit_base(|_, t| n += t.len());
        n
    }

    /// SHA-256 over names and bit patterns of the base tensors that are not
    /// trainable.
    pub fn frozen_checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit_base(|name, t| {
            if !t.requires_grad() {
                h.update(name.as_bytes());
                for x in t.data() {
                    h.update(x.to_bits().to_le_bytes());
                }
            }
        });
        hex::encode(h.finalize())
    }

    /// SHA-256 over every tensor, base and adapters.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        self.visit_params(|name, t| {
            h.update(name.as_bytes());
            for x in t.data() {
                h.update(x.to_bits().to_le_bytes());
            }
        });
        hex::encode(h.finalize())
    }

    pub fn stoch_layers(&self) -> impl Iterator<Item = (&String, &StochLayer)> {
        self.adapters.iter().filter_map(|(n, a)| match a {
            Adapter::Stoch(s) => Some((n, s)),
            _ => None,
        })
    }

    pub fn stoch_layers_mut(&mut self) -> impl Iterator<Item = &mut StochLayer> {
        self.adapters.values_mut().filter_map(|a| match a {
            Adapter::Stoch(s) => Some(s),
            _ => None,
        })
    }

    pub fn grasp_layers_mut(&mut self) -> impl Iterator<Item = &mut GraspLayer> {
        self.adapters.values_mut().filter_map(|a| match a {
            Adapter::Grasp(g) => Some(g),
            _ => None,
        })
    }

    fn check_tokens(&self, tokens: &[Vec<usize>]) -> Result<usize> {
        let Some(first) = tokens.first() else {
            return Err(LabError::shape("forward", &[0], &[]));
        };
        let len = first.len();
        if len == 0 || len > self.config.max_seq {
            return Err(LabError::shape("forward", &[len], &[self.config.max_seq]));
        }
        for seq in tokens {
            if seq.len() != len {
                return Err(LabError::shape("forward", &[len], &[seq.len()]));
            }
            if let Some(&t) = seq.iter().find(|&&t| t >= self.config.vocab) {
                return Err(LabError::Domain(format!(
                    "token {t} outside vocabulary of {}",
                    self.config.vocab
                )));
            }
        }
        Ok(len)
    }

    fn apply_linear(
        &self,
        ctx: &mut Ctx,
        name: &str,
        lin: &Linear,
        x: Var,
        noise: &mut NoiseSource<'_>,
    ) -> Result<Var> {
        let w = ctx.param(|| format!("{name}.weight"), &lin.weight);
        let b = ctx.param(|| format!("{name}.bias"), &lin.bias);
        match self.adapters.get(name) {
            None => linear(&mut ctx.tape, x, w, b),
            Some(Adapter::Grasp(g)) => {
                let (y, vars) = grasp_forward(&mut ctx.tape, g, x, w, b)?;
                ctx.bind(format!("{name}.gamma"), vars.gamma, &g.gamma);
                ctx.bind(format!("{name}.beta"), vars.beta, &g.beta);
                Ok(y)
            }
            Some(Adapter::Stoch(s)) => {
                let n = match noise {
                    NoiseSource::Mean => Noise::Mean,
                    NoiseSource::Sample(rng) => Noise::Sample(rng),
                    NoiseSource::Fixed(map) => match map.get(name) {
                        Some(e) => Noise::Fixed(e),
                        None => Noise::Mean,
                    },
                };
                let (y, vars) = stoch_forward(&mut ctx.tape, s, x, w, b, n)?;
                ctx.bind(format!("{name}.mu"), vars.mu, &s.mu);
                ctx.bind(format!("{name}.sigma"), vars.sigma, &s.sigma);
                Ok(y)
            }
        }
    }

    /// Forward pass on a batch of equal-length token sequences.
    pub fn forward(&self, tokens: &[Vec<usize>], mut noise: NoiseSource<'_>) -> Result<ForwardPass> {
        let seq = self.check_tokens(tokens)?;
        let batch = tokens.len();
        let d = self.config.d_model;
        let rows = batch * seq;
        let mut ctx = Ctx {
            tape: Tape::new(),
            bindings: Vec::new(),
        };

        let tok = ctx.param(|| "embed.tok".into(), &self.tok_embed);
        let pos = ctx.param(|| "embed.pos".into(), &self.pos_embed);
        let mut tok_idx = Vec::with_capacity(rows * d);
        let mut pos_idx = Vec::with_capacity(rows * d);
        for s in tokens {
            for (l, &t) in s.iter().enumerate() {
                tok_idx.extend((0..d).map(|c| t * d + c));
                pos_idx.extend((0..d).map(|c| l * d + c));
            }
        }
        let xt = ctx.tape.gather(tok, tok_idx, vec![rows, d])?;
        let xp = ctx.tape.gather(pos, pos_idx, vec![rows, d])?;
        let mut x = ctx.tape.add(xt, xp)?;

        for (b, block) in self.blocks.iter().enumerate() {
            let g1 = ctx.param(|| format!("block{b}.ln1.gain"), &block.ln1.gain);
            let b1 = ctx.param(|| format!("block{b}.ln1.bias"), &block.ln1.bias);
            let h = ctx.tape.layer_norm(x, g1, b1, LN_EPS)?;
            let (q, k, v) = if self.config.fused_qkv {
                let lin = block.linear(Sublayer::Qkv).expect("fused layout");
                let qkv =
                    self.apply_linear(&mut ctx, &layer_name(b, Sublayer::Qkv), lin, h, &mut noise)?;
                (
                    ctx.tape.slice_cols(qkv, 0, d)?,
                    ctx.tape.slice_cols(qkv, d, d)?,
                    ctx.tape.slice_cols(qkv, 2 * d, d)?,
                )
            } else {
                let mut proj = |s: Sublayer, ctx: &mut Ctx| {
                    let lin = block.linear(s).expect("separate layout");
                    self.apply_linear(ctx, &layer_name(b, s), lin, h, &mut noise)
                };
                let q = proj(Sublayer::Q, &mut ctx)?;
                let k = proj(Sublayer::K, &mut ctx)?;
                let v = proj(Sublayer::V, &mut ctx)?;
                (q, k, v)
            };
            let att = ctx.tape.attention(q, k, v, batch, seq, self.config.n_heads)?;
            let lin = block.linear(Sublayer::AttnOut).expect("layout");
            let o = self.apply_linear(&mut ctx, &layer_name(b, Sublayer::AttnOut), lin, att, &mut noise)?;
            x = ctx.tape.add(x, o)?;

            let g2 = ctx.param(|| format!("block{b}.ln2.gain"), &block.ln2.gain);
            let b2 = ctx.param(|| format!("block{b}.ln2.bias"), &block.ln2.bias);
            let h2 = ctx.tape.layer_norm(x, g2, b2, LN_EPS)?;
            let lin = block.linear(Sublayer::Ff1).expect("layout");
            let f = self.apply_linear(&mut ctx, &layer_name(b, Sublayer::Ff1), lin, h2, &mut noise)?;
            let f = ctx.tape.gelu(f);
            let lin = block.linear(Sublayer::Ff2).expect("layout");
            let y = self.apply_linear(&mut ctx, &layer_name(b, Sublayer::Ff2), lin, f, &mut noise)?;
            x = ctx.tape.add(x, y)?;
        }

        let gf = ctx.param(|| "final_norm.gain".into(), &self.final_norm.gain);
        let bf = ctx.param(|| "final_norm.bias".into(), &self.final_norm.bias);
        let xf = ctx.tape.layer_norm(x, gf, bf, LN_EPS)?;
        let pooled = ctx.tape.mean_pool_rows(xf, seq)?;
        let hw = ctx.param(|| "head.weight".into(), &self.head.weight);
        let hb = ctx.param(|| "head.bias".into(), &self.head.bias);
        let logits = linear(&mut ctx.tape, pooled, hw, hb)?;
        Ok(ForwardPass {
            tape: ctx.tape,
            logits,
            bindings: ctx.bindings,
        })
    }

    /// Logits `[B×n_classes]` with stochastic adapters at their means.
    pub fn logits(&self, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let pass = self.forward(tokens, NoiseSource::Mean)?;
        Ok(pass.tape.tensor(pass.logits))
    }

    /// Adds each binding's gradient into the matching tensor.
    pub fn accumulate_grads(&mut self, pass: &ForwardPass, loss: Var) -> Result<()> {
        let grads = pass.tape.backward(loss)?;
        let by_name: BTreeMap<&str, Var> =
            pass.bindings.iter().map(|(n, v)| (n.as_str(), *v)).collect();
        let mut err = None;
        self.visit_params_mut(|name, t| {
            if let Some(&v) = by_name.get(name) {
                if let Err(e) = grads.accumulate_into(v, t) {
                    err.get_or_insert(e);
                }
            }
        });
        err.map_or(Ok(()), Err)
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.cols();
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                .0
        })
        .collect()
}

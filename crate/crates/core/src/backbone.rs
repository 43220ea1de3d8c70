//! A small pre-LN transformer encoder used as the frozen backbone.
//!
//! States are stored row-major with one row per position (`[N, d]`). Layer
//! `i` maps `h^(i-1)` to `h^(i) = h^(i-1) + G_i(h^(i-1))`, where `G_i` is the
//! sum of the attention and feed-forward sublayer outputs. The output head is
//! tied to the token embedding table.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{clip_grad_norm, Adam, AdamConfig, Graph, Tensor, Var};

pub const PAD_TOKEN: usize = 0;
pub const MASK_TOKEN: usize = 1;
/// First id that is not a special token.
pub const FIRST_CONTENT_TOKEN: usize = 2;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Feed-forward width as a multiple of `hidden_dim`.
    pub ffn_mult: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 4,
            hidden_dim: 32,
            num_heads: 2,
            vocab_size: 64,
            max_seq_len: 32,
            ffn_mult: 8,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("ffn_mult", self.ffn_mult),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::InvalidConfig(format!("{name} must be positive")));
        }
        if self.hidden_dim % self.num_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size <= FIRST_CONTENT_TOKEN {
            return Err(Error::InvalidConfig("vocabulary has no content tokens".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.hidden_dim * self.ffn_mult
    }
}

/// Affine map `x W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn init<R: Rng>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Linear {
            weight: Tensor::randn(&[fan_in, fan_out], std, rng),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams {
    pub gain: Tensor,
    pub bias: Tensor,
}

impl LayerNormParams {
    fn identity(d: usize) -> Self {
        LayerNormParams {
            gain: Tensor::full(&[1, d], 1.0),
            bias: Tensor::zeros(&[1, d]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub ln_attn: LayerNormParams,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub attn_out: Linear,
    pub ln_ffn: LayerNormParams,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Weights of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneState {
    pub config: ModelConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub blocks: Vec<Block>,
    pub final_norm: LayerNormParams,
    pub head_bias: Tensor,
}

/// Per-layer states at the output position and per-layer context means,
/// for layers `0..=L`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HiddenTrace {
    pub h_out: Vec<Vec<f64>>,
    pub h_ctx: Vec<Vec<f64>>,
}

impl HiddenTrace {
    pub fn num_layers(&self) -> usize {
        self.h_out.len().saturating_sub(1)
    }
}

/// Which projection inside attention a hook is being asked about.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Projection {
    Query,
    Key,
    Value,
    Output,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sublayer {
    Attention,
    FeedForward,
}

/// Interception points a parameter-efficient method can use. The defaults
/// leave the forward pass untouched.
pub trait ForwardHooks {
    /// Rewrites the layer-0 states (`[N, d]`) before the first block.
    fn extend_input(&self, _g: &mut Graph, h0: Var) -> Result<Var> {
        Ok(h0)
    }

    /// Adjusts the output of an attention projection; `input` is what was projected.
    fn projection(&self, _g: &mut Graph, _layer: usize, _which: Projection, _input: Var, output: Var) -> Result<Var> {
        Ok(output)
    }

    /// Adjusts a sublayer's output before it joins the residual stream.
    fn sublayer_output(&self, _g: &mut Graph, _layer: usize, _which: Sublayer, output: Var) -> Result<Var> {
        Ok(output)
    }
}

/// The vanilla forward pass.
pub struct NoHooks;

impl ForwardHooks for NoHooks {}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gain: Var,
    pub bias: Option<Var>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln_attn: LayerNormVars,
    pub query: LinearVars,
    pub key: LinearVars,
    pub value: LinearVars,
    pub attn_out: LinearVars,
    pub ln_ffn: LayerNormVars,
    pub ffn_in: LinearVars,
    pub ffn_out: LinearVars,
}

/// Backbone weights registered on a graph.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub token_embedding: Var,
    pub position_embedding: Var,
    pub blocks: Vec<BlockVars>,
    pub final_norm: LayerNormVars,
    pub head_bias: Option<Var>,
}

impl BackboneVars {
    /// Every bias slot in a fixed order: per block the two layer norms and six
    /// linear maps, then the final norm and the output head.
    pub fn bias_slots_mut(&mut self) -> Vec<&mut Option<Var>> {
        let mut slots = Vec::new();
        for b in &mut self.blocks {
            slots.push(&mut b.ln_attn.bias);
            slots.push(&mut b.query.bias);
            slots.push(&mut b.key.bias);
            slots.push(&mut b.value.bias);
            slots.push(&mut b.attn_out.bias);
            slots.push(&mut b.ln_ffn.bias);
            slots.push(&mut b.ffn_in.bias);
            slots.push(&mut b.ffn_out.bias);
        }
        slots.push(&mut self.final_norm.bias);
        slots.push(&mut self.head_bias);
        slots
    }

    /// All weight vars in the order of [`BackboneState::tensors`].
    pub fn all_vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding, self.position_embedding];
        let ln = |v: &LayerNormVars, out: &mut Vec<Var>| {
            out.push(v.gain);
            out.extend(v.bias);
        };
        let lin = |v: &LinearVars, out: &mut Vec<Var>| {
            out.push(v.weight);
            out.extend(v.bias);
        };
        for b in &self.blocks {
            ln(&b.ln_attn, &mut out);
            for l in [&b.query, &b.key, &b.value, &b.attn_out] {
                lin(l, &mut out);
            }
            ln(&b.ln_ffn, &mut out);
            lin(&b.ffn_in, &mut out);
            lin(&b.ffn_out, &mut out);
        }
        ln(&self.final_norm, &mut out);
        out.extend(self.head_bias);
        out
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[1, |V|]` logits at the output position.
    pub logits: Var,
    /// `[1, d]` state at the output position, layers `0..=L`.
    pub h_out: Vec<Var>,
    /// `[1, d]` mean over positions, layers `0..=L`.
    pub h_ctx: Vec<Var>,
    /// `[N, d]` full states, layers `0..=L`.
    pub states: Vec<Var>,
    /// Residual increment `G_i` for layers `1..=L`.
    pub increments: Vec<Var>,
}

impl ForwardOutput {
    pub fn trace(&self, g: &Graph) -> HiddenTrace {
        let rows = |vs: &[Var]| vs.iter().map(|&v| g.value(v).data().to_vec()).collect();
        HiddenTrace {
            h_out: rows(&self.h_out),
            h_ctx: rows(&self.h_ctx),
        }
    }
}

impl BackboneState {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_dim;
        let f = config.ffn_dim();
        let std = 1.0 / (d as f64).sqrt();
        let token_embedding = Tensor::randn(&[config.vocab_size, d], 0.5, &mut rng);
        let position_embedding = Tensor::randn(&[config.max_seq_len, d], 0.1, &mut rng);
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                ln_attn: LayerNormParams::identity(d),
                query: Linear::init(d, d, std, &mut rng),
                key: Linear::init(d, d, std, &mut rng),
                value: Linear::init(d, d, std, &mut rng),
                attn_out: Linear::init(d, d, std / (2.0 * config.num_layers as f64).sqrt(), &mut rng),
                ln_ffn: LayerNormParams::identity(d),
                ffn_in: Linear::init(d, f, std, &mut rng),
                ffn_out: Linear::init(f, d, 1.0 / (f as f64).sqrt() / (2.0 * config.num_layers as f64).sqrt(), &mut rng),
            })
            .collect();
        Ok(BackboneState {
            token_embedding,
            position_embedding,
            blocks,
            final_norm: LayerNormParams::identity(d),
            head_bias: Tensor::zeros(&[1, config.vocab_size]),
            config,
        })
    }

    /// Named tensors in a fixed order (the snapshot and optimizer order).
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{i}");
            out.push((format!("{p}.ln_attn.gain"), &b.ln_attn.gain));
            out.push((format!("{p}.ln_attn.bias"), &b.ln_attn.bias));
            for (name, l) in [("query", &b.query), ("key", &b.key), ("value", &b.value), ("attn_out", &b.attn_out)] {
                out.push((format!("{p}.{name}.weight"), &l.weight));
                out.push((format!("{p}.{name}.bias"), &l.bias));
            }
            out.push((format!("{p}.ln_ffn.gain"), &b.ln_ffn.gain));
            out.push((format!("{p}.ln_ffn.bias"), &b.ln_ffn.bias));
            for (name, l) in [("ffn_in", &b.ffn_in), ("ffn_out", &b.ffn_out)] {
                out.push((format!("{p}.{name}.weight"), &l.weight));
                out.push((format!("{p}.{name}.bias"), &l.bias));
            }
        }
        out.push(("final_norm.gain".to_string(), &self.final_norm.gain));
        out.push(("final_norm.bias".to_string(), &self.final_norm.bias));
        out.push(("head_bias".to_string(), &self.head_bias));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for b in &mut self.blocks {
            out.push(&mut b.ln_attn.gain);
            out.push(&mut b.ln_attn.bias);
            for l in [&mut b.query, &mut b.key, &mut b.value, &mut b.attn_out] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
            out.push(&mut b.ln_ffn.gain);
            out.push(&mut b.ln_ffn.bias);
            for l in [&mut b.ffn_in, &mut b.ffn_out] {
                out.push(&mut l.weight);
                out.push(&mut l.bias);
            }
        }
        out.push(&mut self.final_norm.gain);
        out.push(&mut self.final_norm.bias);
        out.push(&mut self.head_bias);
        out
    }

    /// Rebuilds a backbone from snapshot tensors.
    pub fn from_tensors(config: ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        let mut state = Self::init(config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            state.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != named.len() {
            return Err(Error::Snapshot(format!("expected {} tensors, found {}", expected.len(), named.len())));
        }
        for ((slot, (want_name, want_shape)), (name, t)) in state.tensors_mut().into_iter().zip(expected).zip(named) {
            if name != want_name || t.shape() != want_shape.as_slice() {
                return Err(Error::Snapshot(format!(
                    "tensor {name} {:?} does not match {want_name} {want_shape:?}",
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(state)
    }

    /// Bias tensors in the order of [`BackboneVars::bias_slots_mut`].
    pub fn bias_tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(&b.ln_attn.bias);
            for l in [&b.query, &b.key, &b.value, &b.attn_out] {
                out.push(&l.bias);
            }
            out.push(&b.ln_ffn.bias);
            out.push(&b.ffn_in.bias);
            out.push(&b.ffn_out.bias);
        }
        out.push(&self.final_norm.bias);
        out.push(&self.head_bias);
        out
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// FNV-1a over the bit patterns of every weight.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for (_, t) in self.tensors() {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }

    /// Registers every weight on `g`. `include_biases = false` omits all bias
    /// terms from the forward pass.
    pub fn bind(&self, g: &mut Graph, trainable: bool, include_biases: bool) -> BackboneVars {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        let lin = |l: &Linear, leaf: &mut dyn FnMut(&Tensor) -> Var| LinearVars {
            weight: leaf(&l.weight),
            bias: include_biases.then(|| leaf(&l.bias)),
        };
        let ln = |p: &LayerNormParams, leaf: &mut dyn FnMut(&Tensor) -> Var| LayerNormVars {
            gain: leaf(&p.gain),
            bias: include_biases.then(|| leaf(&p.bias)),
        };
        let token_embedding = leaf(&self.token_embedding);
        let position_embedding = leaf(&self.position_embedding);
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                ln_attn: ln(&b.ln_attn, &mut leaf),
                query: lin(&b.query, &mut leaf),
                key: lin(&b.key, &mut leaf),
                value: lin(&b.value, &mut leaf),
                attn_out: lin(&b.attn_out, &mut leaf),
                ln_ffn: ln(&b.ln_ffn, &mut leaf),
                ffn_in: lin(&b.ffn_in, &mut leaf),
                ffn_out: lin(&b.ffn_out, &mut leaf),
            })
            .collect();
        let final_norm = ln(&self.final_norm, &mut leaf);
        let head_bias = include_biases.then(|| leaf(&self.head_bias));
        BackboneVars {
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            head_bias,
        }
    }

    /// Layer-0 states: token embedding plus positional embedding, `[N, d]`.
    pub fn embed(&self, g: &mut Graph, vars: &BackboneVars, tokens: &[usize]) -> Result<Var> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Data("empty token sequence".into()));
        }
        if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::OutOfVocabulary { id, vocab: cfg.vocab_size });
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: cfg.max_seq_len,
            });
        }
        let tok = g.gather_rows(vars.token_embedding, tokens)?;
        let pos = g.slice_rows(vars.position_embedding, 0, tokens.len())?;
        g.add(tok, pos)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &BackboneVars,
        tokens: &[usize],
        mask_position: usize,
        hooks: &dyn ForwardHooks,
    ) -> Result<ForwardOutput> {
        let embedded = self.embed(g, vars, tokens)?;
        let mut h = hooks.extend_input(g, embedded)?;
        let n = g.value(h).rows();
        if n > self.config.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: n,
                max: self.config.max_seq_len,
            });
        }
        if mask_position >= n {
            return Err(Error::InvalidMaskPosition {
                position: mask_position,
                len: n,
            });
        }
        let mut states = vec![h];
        let mut increments = Vec::with_capacity(vars.blocks.len());
        for (layer, block) in vars.blocks.iter().enumerate() {
            let delta = self.block_increment(g, block, layer, h, hooks)?;
            h = g.add(h, delta)?;
            states.push(h);
            increments.push(delta);
        }
        let mut h_out = Vec::with_capacity(states.len());
        let mut h_ctx = Vec::with_capacity(states.len());
        for &s in &states {
            h_out.push(g.slice_rows(s, mask_position, 1)?);
            h_ctx.push(g.mean_axis(s, 0)?);
        }
        let last = *h_out.last().expect("at least the embedding layer");
        let normed = layer_norm(g, last, &vars.final_norm)?;
        let head = g.transpose(vars.token_embedding)?;
        let mut logits = g.matmul(normed, head)?;
        if let Some(b) = vars.head_bias {
            logits = g.add(logits, b)?;
        }
        Ok(ForwardOutput {
            logits,
            h_out,
            h_ctx,
            states,
            increments,
        })
    }

    /// `G_i(h)`: attention output plus feed-forward output.
    fn block_increment(
        &self,
        g: &mut Graph,
        b: &BlockVars,
        layer: usize,
        x: Var,
        hooks: &dyn ForwardHooks,
    ) -> Result<Var> {
        let cfg = &self.config;
        let dh = cfg.head_dim();
        let a_in = layer_norm(g, x, &b.ln_attn)?;
        let proj = |g: &mut Graph, which: Projection, l: &LinearVars, input: Var| -> Result<Var> {
            let out = linear(g, input, l)?;
            hooks.projection(g, layer, which, input, out)
        };
        let q = proj(g, Projection::Query, &b.query, a_in)?;
        let k = proj(g, Projection::Key, &b.key, a_in)?;
        let v = proj(g, Projection::Value, &b.value, a_in)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.num_heads);
        for head in 0..cfg.num_heads {
            let qh = g.slice_cols(q, head * dh, dh)?;
            let kh = g.slice_cols(k, head * dh, dh)?;
            let vh = g.slice_cols(v, head * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scalar_mul(scores, scale);
            let weights = g.softmax(scores)?;
            heads.push(g.matmul(weights, vh)?);
        }
        let merged = if heads.len() == 1 { heads[0] } else { g.concat(&heads, 1)? };
        let attn = proj(g, Projection::Output, &b.attn_out, merged)?;
        let attn = hooks.sublayer_output(g, layer, Sublayer::Attention, attn)?;

        let mid = g.add(x, attn)?;
        let f_in = layer_norm(g, mid, &b.ln_ffn)?;
        let hidden = linear(g, f_in, &b.ffn_in)?;
        let hidden = g.gelu(hidden);
        let ffn = linear(g, hidden, &b.ffn_out)?;
        let ffn = hooks.sublayer_output(g, layer, Sublayer::FeedForward, ffn)?;
        g.add(attn, ffn)
    }

    /// Forward pass outside of training: logits and the hidden trace.
    pub fn predict(&self, tokens: &[usize], mask_position: usize, hooks: &dyn ForwardHooks) -> Result<(Vec<f64>, HiddenTrace)> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false, true);
        let out = self.forward(&mut g, &vars, tokens, mask_position, hooks)?;
        Ok((g.value(out.logits).data().to_vec(), out.trace(&g)))
    }
}

pub fn linear(g: &mut Graph, x: Var, l: &LinearVars) -> Result<Var> {
    let y = g.matmul(x, l.weight)?;
    match l.bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

pub fn layer_norm(g: &mut Graph, x: Var, p: &LayerNormVars) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS)?;
    let y = g.mul(n, p.gain)?;
    match p.bias {
        Some(b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Pretraining hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1500,
            batch_size: 16,
            learning_rate: 3e-3,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

/// Masked-token pretraining: each example masks one uniformly chosen position
/// and predicts the original token there.
pub fn pretrain_mlm(config: ModelConfig, corpus: &[Vec<usize>], hyper: &PretrainConfig) -> Result<BackboneState> {
    if corpus.is_empty() {
        return Err(Error::Data("empty pretraining corpus".into()));
    }
    let mut state = BackboneState::init(config, hyper.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x5eed_0001);
    let mut adam = Adam::new(AdamConfig::with_lr(hyper.learning_rate));
    for _ in 0..hyper.steps {
        let mut g = Graph::new();
        let vars = state.bind(&mut g, true, true);
        let mut losses = Vec::with_capacity(hyper.batch_size);
        for _ in 0..hyper.batch_size {
            let seq = corpus.choose(&mut rng).expect("non-empty corpus");
            let pos = rng.random_range(0..seq.len());
            let mut masked = seq.clone();
            masked[pos] = MASK_TOKEN;
            let out = state.forward(&mut g, &vars, &masked, pos, &NoHooks)?;
            losses.push(g.cross_entropy(out.logits, &[seq[pos]])?);
        }
        let stacked = g.concat(&losses, 0)?;
        let loss = g.mean(stacked);
        let grads = g.backward(loss)?;
        let mut grads = grads.collect(&vars.all_vars())?;
        clip_grad_norm(&mut grads, hyper.grad_clip);
        let refs: Vec<Option<&Tensor>> = grads.iter().map(Some).collect();
        adam.step(&mut state.tensors_mut(), &refs)?;
    }
    Ok(state)
}

/// Fraction of held-out sequences whose masked token is the argmax, masking
/// the position chosen by `rng`.
pub fn masked_accuracy<R: Rng>(state: &BackboneState, corpus: &[Vec<usize>], rng: &mut R) -> Result<f64> {
    let mut correct = 0usize;
    for seq in corpus {
        let pos = rng.random_range(0..seq.len());
        let mut masked = seq.clone();
        masked[pos] = MASK_TOKEN;
        let (logits, _) = state.predict(&masked, pos, &NoHooks)?;
        if argmax(&logits) == seq[pos] {
            correct += 1;
        }
    }
    Ok(correct as f64 / corpus.len() as f64)
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

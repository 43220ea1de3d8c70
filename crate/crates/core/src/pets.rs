//! Parameter-efficient tuning mechanisms attached to a frozen backbone:
//! soft prompts, LoRA on the query and value projections, BitFit and
//! bottleneck adapters.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneState, BackboneVars, ForwardHooks, Projection, Sublayer, FIRST_CONTENT_TOKEN};
use crate::error::{Error, Result};
use crate::snapshot::Snapshot;
use crate::tensor::{Graph, Tensor, Var};

const LORA_INIT_STD: f64 = 0.02;
const ADAPTER_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PetKind {
    Prompt,
    Lora,
    Bitfit,
    Adapter,
}

impl PetKind {
    pub const ALL: [PetKind; 4] = [PetKind::Prompt, PetKind::Lora, PetKind::Bitfit, PetKind::Adapter];

    pub fn name(self) -> &'static str {
        match self {
            PetKind::Prompt => "prompt",
            PetKind::Lora => "lora",
            PetKind::Bitfit => "bitfit",
            PetKind::Adapter => "adapter",
        }
    }
}

impl fmt::Display for PetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PetKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        PetKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown PET kind {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PetConfig {
    pub kind: PetKind,
    pub prompt_len: usize,
    pub lora_rank: usize,
    pub adapter_rank: usize,
}

impl Default for PetConfig {
    fn default() -> Self {
        PetConfig {
            kind: PetKind::Prompt,
            prompt_len: 8,
            lora_rank: 4,
            adapter_rank: 8,
        }
    }
}

impl PetConfig {
    pub fn with_kind(kind: PetKind) -> Self {
        PetConfig { kind, ..Self::default() }
    }

    pub fn validate(&self, hidden_dim: usize) -> Result<()> {
        match self.kind {
            PetKind::Prompt if self.prompt_len == 0 => Err(Error::InvalidConfig("prompt_len must be at least 1".into())),
            PetKind::Lora if self.lora_rank == 0 || self.lora_rank >= hidden_dim => Err(Error::InvalidConfig(format!(
                "lora_rank must be in 1..{hidden_dim}, got {}",
                self.lora_rank
            ))),
            PetKind::Adapter if self.adapter_rank == 0 => Err(Error::InvalidConfig("adapter_rank must be at least 1".into())),
            _ => Ok(()),
        }
    }
}

/// LoRA factors in row layout: the update to `x W` is `x A B` with
/// `A: [in, r]` and `B: [r, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub query_a: Tensor,
    pub query_b: Tensor,
    pub value_a: Tensor,
    pub value_b: Tensor,
}

/// Row layout: `h + relu(h D) U` with `D: [d, r]`, `U: [r, d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterLayer {
    pub attn_down: Tensor,
    pub attn_up: Tensor,
    pub ffn_down: Tensor,
    pub ffn_up: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PetWeights {
    Prompt { prompt: Tensor },
    Lora { layers: Vec<LoraLayer> },
    Bitfit { biases: Vec<Tensor> },
    Adapter { layers: Vec<AdapterLayer> },
}

/// The trainable tensors of one PET.
#[derive(Clone, Debug, PartialEq)]
pub struct PetParams {
    pub config: PetConfig,
    pub weights: PetWeights,
}

impl PetParams {
    /// Fresh parameters. LoRA `B` and adapter up-projections start at zero so
    /// the attached forward pass equals the vanilla one; prompts start as
    /// copies of randomly chosen content-token embeddings.
    pub fn init(backbone: &BackboneState, config: &PetConfig, seed: u64) -> Result<Self> {
        let mc = &backbone.config;
        config.validate(mc.hidden_dim)?;
        let d = mc.hidden_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = match config.kind {
            PetKind::Prompt => {
                let mut data = Vec::with_capacity(config.prompt_len * d);
                for _ in 0..config.prompt_len {
                    let tok = rng.random_range(FIRST_CONTENT_TOKEN..mc.vocab_size);
                    data.extend_from_slice(backbone.token_embedding.row(tok));
                }
                PetWeights::Prompt {
                    prompt: Tensor::new(vec![config.prompt_len, d], data)?,
                }
            }
            PetKind::Lora => {
                let r = config.lora_rank;
                let layers = (0..mc.num_layers)
                    .map(|_| LoraLayer {
                        query_a: Tensor::randn(&[d, r], LORA_INIT_STD, &mut rng),
                        query_b: Tensor::zeros(&[r, d]),
                        value_a: Tensor::randn(&[d, r], LORA_INIT_STD, &mut rng),
                        value_b: Tensor::zeros(&[r, d]),
                    })
                    .collect();
                PetWeights::Lora { layers }
            }
            PetKind::Bitfit => return Ok(bitfit_trainables(backbone)),
            PetKind::Adapter => {
                let r = config.adapter_rank;
                let layers = (0..mc.num_layers)
                    .map(|_| AdapterLayer {
                        attn_down: Tensor::randn(&[d, r], ADAPTER_INIT_STD, &mut rng),
                        attn_up: Tensor::zeros(&[r, d]),
                        ffn_down: Tensor::randn(&[d, r], ADAPTER_INIT_STD, &mut rng),
                        ffn_up: Tensor::zeros(&[r, d]),
                    })
                    .collect();
                PetWeights::Adapter { layers }
            }
        };
        Ok(PetParams {
            config: config.clone(),
            weights,
        })
    }

    pub fn kind(&self) -> PetKind {
        self.config.kind
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        match &self.weights {
            PetWeights::Prompt { prompt } => vec![("prompt".into(), prompt)],
            PetWeights::Lora { layers } => layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        (format!("lora.{i}.query_a"), &l.query_a),
                        (format!("lora.{i}.query_b"), &l.query_b),
                        (format!("lora.{i}.value_a"), &l.value_a),
                        (format!("lora.{i}.value_b"), &l.value_b),
                    ]
                })
                .collect(),
            PetWeights::Bitfit { biases } => biases.iter().enumerate().map(|(i, b)| (format!("bias.{i}"), b)).collect(),
            PetWeights::Adapter { layers } => layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        (format!("adapter.{i}.attn_down"), &l.attn_down),
                        (format!("adapter.{i}.attn_up"), &l.attn_up),
                        (format!("adapter.{i}.ffn_down"), &l.ffn_down),
                        (format!("adapter.{i}.ffn_up"), &l.ffn_up),
                    ]
                })
                .collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.weights {
            PetWeights::Prompt { prompt } => vec![prompt],
            PetWeights::Lora { layers } => layers
                .iter_mut()
                .flat_map(|l| [&mut l.query_a, &mut l.query_b, &mut l.value_a, &mut l.value_b])
                .collect(),
            PetWeights::Bitfit { biases } => biases.iter_mut().collect(),
            PetWeights::Adapter { layers } => layers
                .iter_mut()
                .flat_map(|l| [&mut l.attn_down, &mut l.attn_up, &mut l.ffn_down, &mut l.ffn_up])
                .collect(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Registers the tensors on `g`, in the order of [`PetParams::tensors`].
    pub fn bind(&self, g: &mut Graph, trainable: bool, max_seq_len: usize) -> BoundPet {
        let mut leaf = |t: &Tensor| g.leaf(t.clone(), trainable);
        let vars = match &self.weights {
            PetWeights::Prompt { prompt } => BoundWeights::Prompt(leaf(prompt)),
            PetWeights::Lora { layers } => BoundWeights::Lora(
                layers
                    .iter()
                    .map(|l| [leaf(&l.query_a), leaf(&l.query_b), leaf(&l.value_a), leaf(&l.value_b)])
                    .collect(),
            ),
            PetWeights::Bitfit { biases } => BoundWeights::Bitfit(biases.iter().map(&mut leaf).collect()),
            PetWeights::Adapter { layers } => BoundWeights::Adapter(
                layers
                    .iter()
                    .map(|l| [leaf(&l.attn_down), leaf(&l.attn_up), leaf(&l.ffn_down), leaf(&l.ffn_up)])
                    .collect(),
            ),
        };
        BoundPet { vars, max_seq_len }
    }

    pub fn to_snapshot(&self) -> Snapshot {
        let header = serde_json::to_value(&self.config).expect("config serializes");
        Snapshot::new(
            "pet",
            header,
            self.tensors().into_iter().map(|(n, t)| (n, t.clone())).collect(),
        )
    }

    /// Rebuilds parameters for `backbone` from a snapshot, checking names and shapes.
    pub fn from_snapshot(backbone: &BackboneState, snap: &Snapshot) -> Result<Self> {
        if snap.kind != "pet" {
            return Err(Error::Snapshot(format!("expected a pet snapshot, found {}", snap.kind)));
        }
        let config: PetConfig = snap.header_as()?;
        let mut params = PetParams::init(backbone, &config, 0)?;
        let expected: Vec<(String, Vec<usize>)> =
            params.tensors().into_iter().map(|(n, t)| (n, t.shape().to_vec())).collect();
        if expected.len() != snap.tensors.len() {
            return Err(Error::Snapshot(format!(
                "expected {} pet tensors, found {}",
                expected.len(),
                snap.tensors.len()
            )));
        }
        for ((slot, (name, shape)), (got_name, t)) in params.tensors_mut().into_iter().zip(expected).zip(&snap.tensors) {
            if *got_name != name || t.shape() != shape.as_slice() {
                return Err(Error::Snapshot(format!("pet tensor {got_name} does not match {name} {shape:?}")));
            }
            *slot = t.clone();
        }
        Ok(params)
    }
}

/// BitFit's trainable set: clones of every bias in the backbone.
pub fn bitfit_trainables(state: &BackboneState) -> PetParams {
    PetParams {
        config: PetConfig::with_kind(PetKind::Bitfit),
        weights: PetWeights::Bitfit {
            biases: state.bias_tensors().into_iter().cloned().collect(),
        },
    }
}

#[derive(Clone, Debug)]
enum BoundWeights {
    Prompt(Var),
    /// Per layer `[query_a, query_b, value_a, value_b]`.
    Lora(Vec<[Var; 4]>),
    Bitfit(Vec<Var>),
    /// Per layer `[attn_down, attn_up, ffn_down, ffn_up]`.
    Adapter(Vec<[Var; 4]>),
}

/// PET parameters registered on a graph; acts as the forward hooks.
#[derive(Clone, Debug)]
pub struct BoundPet {
    vars: BoundWeights,
    max_seq_len: usize,
}

impl BoundPet {
    pub fn vars(&self) -> Vec<Var> {
        match &self.vars {
            BoundWeights::Prompt(p) => vec![*p],
            BoundWeights::Lora(layers) | BoundWeights::Adapter(layers) => layers.iter().flatten().copied().collect(),
            BoundWeights::Bitfit(b) => b.clone(),
        }
    }

    /// BitFit replaces the backbone's bias slots; other kinds leave them alone.
    pub fn install(&self, backbone: &mut BackboneVars) -> Result<()> {
        if let BoundWeights::Bitfit(biases) = &self.vars {
            let slots = backbone.bias_slots_mut();
            if slots.len() != biases.len() {
                return Err(Error::shape(
                    "bitfit_install",
                    format!("{} bias slots, {} trainable biases", slots.len(), biases.len()),
                ));
            }
            for (slot, &b) in slots.into_iter().zip(biases) {
                *slot = Some(b);
            }
        }
        Ok(())
    }
}

impl ForwardHooks for BoundPet {
    fn extend_input(&self, g: &mut Graph, h0: Var) -> Result<Var> {
        match &self.vars {
            BoundWeights::Prompt(p) => attach_prompt(g, *p, h0, self.max_seq_len),
            _ => Ok(h0),
        }
    }

    fn projection(&self, g: &mut Graph, layer: usize, which: Projection, input: Var, output: Var) -> Result<Var> {
        let BoundWeights::Lora(layers) = &self.vars else {
            return Ok(output);
        };
        let [qa, qb, va, vb] = layers[layer];
        let (a, b) = match which {
            Projection::Query => (qa, qb),
            Projection::Value => (va, vb),
            _ => return Ok(output),
        };
        let low = g.matmul(input, a)?;
        let delta = g.matmul(low, b)?;
        g.add(output, delta)
    }

    fn sublayer_output(&self, g: &mut Graph, layer: usize, which: Sublayer, output: Var) -> Result<Var> {
        let BoundWeights::Adapter(layers) = &self.vars else {
            return Ok(output);
        };
        let [ad, au, fd, fu] = layers[layer];
        let (down, up) = match which {
            Sublayer::Attention => (ad, au),
            Sublayer::FeedForward => (fd, fu),
        };
        let hidden = g.matmul(output, down)?;
        let hidden = g.relu(hidden);
        let delta = g.matmul(hidden, up)?;
        g.add(output, delta)
    }
}

/// Appends the `[m, d]` prompt rows after the `[N, d]` states.
pub fn attach_prompt(g: &mut Graph, prompt: Var, states: Var, max_seq_len: usize) -> Result<Var> {
    let n = g.value(states).rows();
    let m = g.value(prompt).rows();
    if n + m > max_seq_len {
        return Err(Error::SequenceTooLong {
            len: n + m,
            max: max_seq_len,
        });
    }
    g.concat(&[states, prompt], 0)
}

fn matvec(op: &'static str, m: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    if !m.is_matrix() || m.cols() != x.len() {
        return Err(Error::shape(op, format!("matrix {:?} times vector of length {}", m.shape(), x.len())));
    }
    Ok((0..m.rows()).map(|i| m.row(i).iter().zip(x).map(|(a, b)| a * b).sum()).collect())
}

/// `W x + B (A x)` with `W: [d, k]`, `A: [r, k]`, `B: [d, r]`.
pub fn lora_forward(w: &Tensor, a: &Tensor, b: &Tensor, x: &[f64]) -> Result<Vec<f64>> {
    let base = matvec("lora_forward", w, x)?;
    let low = matvec("lora_forward", a, x)?;
    let delta = matvec("lora_forward", b, &low)?;
    if delta.len() != base.len() {
        return Err(Error::shape("lora_forward", format!("W gives {} rows, B gives {}", base.len(), delta.len())));
    }
    Ok(base.iter().zip(&delta).map(|(p, q)| p + q).collect())
}

/// `W_u relu(W_d h) + h` with `W_d: [r, d]`, `W_u: [d, r]`.
pub fn adapter_forward(h: &[f64], w_down: &Tensor, w_up: &Tensor) -> Result<Vec<f64>> {
    let hidden: Vec<f64> = matvec("adapter_forward", w_down, h)?.into_iter().map(|v| v.max(0.0)).collect();
    let delta = matvec("adapter_forward", w_up, &hidden)?;
    if delta.len() != h.len() {
        return Err(Error::shape("adapter_forward", format!("W_u gives {} rows for input of {}", delta.len(), h.len())));
    }
    Ok(h.iter().zip(&delta).map(|(p, q)| p + q).collect())
}

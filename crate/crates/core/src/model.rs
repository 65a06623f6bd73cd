//! Toy Llama-style decoder: token + learned position embeddings, pre-norm
//! attention and gated FFN blocks, final RMSNorm, LM head.
//!
//! In masked mode the shared gate `M` multiplies the embedding sum and the
//! sparsifiers after `W_O` and `W_down`, so every residual write is masked.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Float, Tape, Tensor, Var};
use crate::error::{Error, Result, TensorError};
use crate::lora::{lora_forward, LoraAdapter, LoraSlot, LoraVars};
use crate::sparsify::{gate, hsm_forward, BinaryMask, HsmVars, HybridSparsifier, UnifiedMask};

pub const DEFAULT_RMS_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

fn default_rms_eps() -> f64 {
    DEFAULT_RMS_EPS
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Guard added under the RMSNorm square root.
    #[serde(default = "default_rms_eps")]
    pub rms_eps: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("model.{name}: must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::config(format!(
                "model.n_heads: d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(self.rms_eps > 0.0) {
            return Err(Error::config("model.rms_eps: must be positive"));
        }
        Ok(())
    }
}

/// Which linear layer of a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linear {
    Q,
    K,
    V,
    O,
    Up,
    Gate,
    Down,
}

impl Linear {
    pub const ALL: [Linear; 7] = [
        Linear::Q,
        Linear::K,
        Linear::V,
        Linear::O,
        Linear::Up,
        Linear::Gate,
        Linear::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Linear::Q => "wq",
            Linear::K => "wk",
            Linear::V => "wv",
            Linear::O => "wo",
            Linear::Up => "w_up",
            Linear::Gate => "w_gate",
            Linear::Down => "w_down",
        }
    }
}

/// Base weights of one block. Linear weights are `[out × in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights<T> {
    pub attn_norm: Tensor<T>,
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
    pub ffn_norm: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_gate: Tensor<T>,
    pub w_down: Tensor<T>,
}

impl<T: Float> BlockWeights<T> {
    pub fn linear(&self, which: Linear) -> &Tensor<T> {
        match which {
            Linear::Q => &self.wq,
            Linear::K => &self.wk,
            Linear::V => &self.wv,
            Linear::O => &self.wo,
            Linear::Up => &self.w_up,
            Linear::Gate => &self.w_gate,
            Linear::Down => &self.w_down,
        }
    }

    pub fn linear_mut(&mut self, which: Linear) -> &mut Tensor<T> {
        match which {
            Linear::Q => &mut self.wq,
            Linear::K => &mut self.wk,
            Linear::V => &mut self.wv,
            Linear::O => &mut self.wo,
            Linear::Up => &mut self.w_up,
            Linear::Gate => &mut self.w_gate,
            Linear::Down => &mut self.w_down,
        }
    }

    pub fn param_count(&self) -> usize {
        self.attn_norm.numel()
            + self.ffn_norm.numel()
            + Linear::ALL.iter().map(|&l| self.linear(l).numel()).sum::<usize>()
    }
}

/// Plain dense decoder weights, shared by the trainable model and the
/// sliced model.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights<T> {
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub blocks: Vec<BlockWeights<T>>,
    pub final_norm: Tensor<T>,
    pub lm_head: Tensor<T>,
}

impl<T: Float> DecoderWeights<T> {
    pub fn init(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut sample = |shape: &[usize]| -> Tensor<T> {
            let n = shape.iter().product();
            Tensor::from_parts(shape.to_vec(), (0..n).map(|_| T::from_f64c(normal.sample(rng))).collect())
        };
        let (d, f, v) = (config.d_model, config.d_ff, config.vocab_size);
        let tok_emb = sample(&[v, d]);
        let pos_emb = sample(&[config.max_seq_len, d]);
        let blocks = (0..config.n_layers)
            .map(|_| BlockWeights {
                attn_norm: Tensor::ones(&[d]),
                wq: sample(&[d, d]),
                wk: sample(&[d, d]),
                wv: sample(&[d, d]),
                wo: sample(&[d, d]),
                ffn_norm: Tensor::ones(&[d]),
                w_up: sample(&[f, d]),
                w_gate: sample(&[f, d]),
                w_down: sample(&[d, f]),
            })
            .collect();
        let lm_head = sample(&[v, d]);
        DecoderWeights {
            tok_emb,
            pos_emb,
            blocks,
            final_norm: Tensor::ones(&[d]),
            lm_head,
        }
    }

    /// Residual-stream width.
    pub fn hidden(&self) -> usize {
        self.tok_emb.shape()[1]
    }

    pub fn vocab_size(&self) -> usize {
        self.tok_emb.shape()[0]
    }

    pub fn max_seq_len(&self) -> usize {
        self.pos_emb.shape()[0]
    }

    pub fn param_count(&self) -> usize {
        self.tok_emb.numel()
            + self.pos_emb.numel()
            + self.blocks.iter().map(BlockWeights::param_count).sum::<usize>()
            + self.final_norm.numel()
            + self.lm_head.numel()
    }

    pub fn bytes(&self) -> usize {
        self.param_count() * T::DTYPE.size()
    }

    /// Every tensor under its checkpoint name.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), &b.attn_norm));
            out.push((format!("blocks.{i}.ffn_norm"), &b.ffn_norm));
            for l in Linear::ALL {
                out.push((format!("blocks.{i}.{}", l.name()), b.linear(l)));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        out
    }

    /// Rebuilds from named tensors, checking every shape against `hidden`,
    /// `attn_width` and the config.
    pub fn from_named(
        config: &ModelConfig,
        hidden: usize,
        attn_width: usize,
        take: &mut dyn FnMut(&str, &[usize]) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let (f, v, s) = (config.d_ff, config.vocab_size, config.max_seq_len);
        let tok_emb = take("tok_emb", &[v, hidden])?;
        let pos_emb = take("pos_emb", &[s, hidden])?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for i in 0..config.n_layers {
            let p = format!("blocks.{i}");
            blocks.push(BlockWeights {
                attn_norm: take(&format!("{p}.attn_norm"), &[hidden])?,
                ffn_norm: take(&format!("{p}.ffn_norm"), &[hidden])?,
                wq: take(&format!("{p}.wq"), &[attn_width, hidden])?,
                wk: take(&format!("{p}.wk"), &[attn_width, hidden])?,
                wv: take(&format!("{p}.wv"), &[attn_width, hidden])?,
                wo: take(&format!("{p}.wo"), &[hidden, attn_width])?,
                w_up: take(&format!("{p}.w_up"), &[f, hidden])?,
                w_gate: take(&format!("{p}.w_gate"), &[f, hidden])?,
                w_down: take(&format!("{p}.w_down"), &[hidden, f])?,
            });
        }
        Ok(DecoderWeights {
            tok_emb,
            pos_emb,
            blocks,
            final_norm: take("final_norm", &[hidden])?,
            lm_head: take("lm_head", &[v, hidden])?,
        })
    }

    /// Mutable access in [`DecoderWeights::named`] order.
    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("tok_emb".to_string(), &mut self.tok_emb),
            ("pos_emb".to_string(), &mut self.pos_emb),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((format!("blocks.{i}.attn_norm"), &mut b.attn_norm));
            out.push((format!("blocks.{i}.ffn_norm"), &mut b.ffn_norm));
            out.push((format!("blocks.{i}.wq"), &mut b.wq));
            out.push((format!("blocks.{i}.wk"), &mut b.wk));
            out.push((format!("blocks.{i}.wv"), &mut b.wv));
            out.push((format!("blocks.{i}.wo"), &mut b.wo));
            out.push((format!("blocks.{i}.w_up"), &mut b.w_up));
            out.push((format!("blocks.{i}.w_gate"), &mut b.w_gate));
            out.push((format!("blocks.{i}.w_down"), &mut b.w_down));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        out
    }

    /// Registers the weights on the tape, as leaves in `named()` order.
    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> (BoundWeights, Vec<(String, Var)>) {
        let mut leaves = Vec::new();
        let mut reg = |name: String, t: &Tensor<T>| {
            let v = tape.leaf(t.clone(), trainable);
            if trainable {
                leaves.push((name, v));
            }
            v
        };
        let tok_emb = reg("tok_emb".into(), &self.tok_emb);
        let pos_emb = reg("pos_emb".into(), &self.pos_emb);
        let blocks = self
            .blocks
            .iter()
            .enumerate()
            .map(|(i, b)| BoundBlock {
                attn_norm: reg(format!("blocks.{i}.attn_norm"), &b.attn_norm),
                ffn_norm: reg(format!("blocks.{i}.ffn_norm"), &b.ffn_norm),
                linears: Linear::ALL.map(|l| reg(format!("blocks.{i}.{}", l.name()), b.linear(l))),
            })
            .collect();
        let final_norm = reg("final_norm".into(), &self.final_norm);
        let lm_head = reg("lm_head".into(), &self.lm_head);
        let bound = BoundWeights {
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            lm_head,
        };
        (bound, leaves)
    }
}

/// Token ids for a `batch × seq` forward pass, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
}

impl TokenBatch {
    pub fn new(tokens: Vec<usize>, batch: usize, seq: usize) -> Result<Self> {
        if batch == 0 || seq == 0 {
            return Err(Error::Input("empty batch".into()));
        }
        if tokens.len() != batch * seq {
            return Err(Error::Input(format!(
                "{} tokens do not form a {batch}x{seq} batch",
                tokens.len()
            )));
        }
        Ok(TokenBatch { tokens, batch, seq })
    }

    pub fn from_rows(rows: &[Vec<usize>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Input("ragged token rows".into()));
        }
        Self::new(rows.concat(), rows.len(), seq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    fn positions(&self) -> Vec<usize> {
        (0..self.batch).flat_map(|_| 0..self.seq).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    /// Bypass mask and sparsifiers entirely.
    Plain,
    /// Apply the shared gate (or its snapped form after merging).
    Masked,
}

/// Handles for activations entering and leaving each sub-block.
#[derive(Debug, Default, Clone)]
pub struct ForwardTrace {
    /// Residual stream after the embedding and after every residual add.
    pub residual: Vec<Var>,
    /// Every RMSNorm output.
    pub normed: Vec<Var>,
}

struct BoundBlock {
    attn_norm: Var,
    ffn_norm: Var,
    linears: [Var; 7],
}

struct BoundWeights {
    tok_emb: Var,
    pos_emb: Var,
    blocks: Vec<BoundBlock>,
    final_norm: Var,
    lm_head: Var,
}

/// Optional trainable machinery layered on the base weights.
#[derive(Default)]
pub(crate) struct Extras<T> {
    pub lora: Vec<[Option<LoraVars<T>>; 7]>,
    pub head_lora: Option<LoraVars<T>>,
    pub hsm: Vec<[Option<HsmVars>; 2]>,
    pub mask: Option<Var>,
}

/// Runs the decoder on the tape and returns logits `[batch·seq × vocab]`.
fn decoder_forward<T: Float>(
    tape: &mut Tape<T>,
    w: &BoundWeights,
    extras: &Extras<T>,
    n_heads: usize,
    rms_eps: f64,
    batch: &TokenBatch,
    mut trace: Option<&mut ForwardTrace>,
) -> Result<Var> {
    let vocab = tape.shape(w.tok_emb)[0];
    let max_len = tape.shape(w.pos_emb)[0];
    if batch.seq > max_len {
        return Err(Error::config(format!(
            "sequence length {} exceeds max_seq_len {max_len}",
            batch.seq
        )));
    }
    if let Some(&bad) = batch.tokens.iter().find(|&&t| t >= vocab) {
        return Err(TensorError::Index {
            what: "vocabulary",
            index: bad,
            bound: vocab,
        }
        .into());
    }
    let eps = T::from_f64c(rms_eps);
    let tok = tape.embedding(w.tok_emb, &batch.tokens)?;
    let pos = tape.embedding(w.pos_emb, &batch.positions())?;
    let mut h = tape.add(tok, pos)?;
    if let Some(m) = extras.mask {
        h = tape.mul(h, m)?;
    }
    let record = |tr: &mut Option<&mut ForwardTrace>, v: Var, normed: bool| {
        if let Some(t) = tr.as_deref_mut() {
            if normed {
                t.normed.push(v)
            } else {
                t.residual.push(v)
            }
        }
    };
    record(&mut trace, h, false);

    for (i, blk) in w.blocks.iter().enumerate() {
        let lora = extras.lora.get(i);
        let lin = |tape: &mut Tape<T>, which: Linear, x: Var| -> Result<Var, TensorError> {
            let idx = which as usize;
            lora_forward(tape, blk.linears[idx], lora.and_then(|l| l[idx]), x)
        };
        let sparsify = |tape: &mut Tape<T>, slot: usize, x: Var| -> Result<Var, TensorError> {
            match (extras.mask, extras.hsm.get(i).and_then(|h| h[slot])) {
                (Some(m), Some(hsm)) => hsm_forward(tape, hsm, x, m),
                (Some(m), None) => tape.mul(x, m),
                (None, _) => Ok(x),
            }
        };

        let a = tape.rmsnorm(h, blk.attn_norm, eps)?;
        record(&mut trace, a, true);
        let q = lin(tape, Linear::Q, a)?;
        let k = lin(tape, Linear::K, a)?;
        let v = lin(tape, Linear::V, a)?;
        let att = tape.causal_attention(q, k, v, batch.batch, batch.seq, n_heads)?;
        let o = lin(tape, Linear::O, att)?;
        let o = sparsify(tape, 0, o)?;
        h = tape.add(h, o)?;
        record(&mut trace, h, false);

        let f = tape.rmsnorm(h, blk.ffn_norm, eps)?;
        record(&mut trace, f, true);
        let up = lin(tape, Linear::Up, f)?;
        let g = lin(tape, Linear::Gate, f)?;
        let g = tape.silu(g);
        let act = tape.mul(g, up)?;
        let down = lin(tape, Linear::Down, act)?;
        let down = sparsify(tape, 1, down)?;
        h = tape.add(h, down)?;
        record(&mut trace, h, false);
    }
    let hn = tape.rmsnorm(h, w.final_norm, eps)?;
    record(&mut trace, hn, true);
    Ok(lora_forward(tape, w.lm_head, extras.head_lora, hn)?)
}

/// Sparsifier state of one block. Merging folds it into `W_O`/`W_down`.
#[derive(Debug, Clone, PartialEq)]
pub enum HsmSlot<T> {
    Active(HybridSparsifier<T>),
    Merged,
}

impl<T> HsmSlot<T> {
    pub fn active(&self) -> Option<&HybridSparsifier<T>> {
        match self {
            HsmSlot::Active(h) => Some(h),
            HsmSlot::Merged => None,
        }
    }
}

/// The two sparsifiers of a block: after `W_O` and after `W_down`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockHsm<T> {
    pub attn: HsmSlot<T>,
    pub ffn: HsmSlot<T>,
}

/// Adapters for the seven block linears (indexed by [`Linear`]).
pub type BlockLora<T> = [LoraSlot<T>; 7];

/// Hyper-parameters of the trainable machinery attached at init.
#[derive(Debug, Clone, PartialEq)]
pub struct PatOptions {
    pub r_hio: usize,
    pub r_lora: usize,
    pub lora_alpha: f64,
    pub s0: usize,
    pub eps_temp: f64,
    pub n_target: usize,
}

impl PatOptions {
    /// Desk-scale defaults for width `d`: HIO rank ≈ 5% of `d`, LoRA rank 8
    /// with alpha = 2·rank, no pruning.
    pub fn defaults(d: usize, s0: usize) -> Self {
        PatOptions {
            r_hio: default_hio_rank(d),
            r_lora: 8.min(d),
            lora_alpha: 16.0,
            s0,
            eps_temp: crate::sparsify::DEFAULT_EPS_TEMP,
            n_target: d,
        }
    }
}

/// `max(4, round(0.05·d))`, held below `d/2`.
pub fn default_hio_rank(d: usize) -> usize {
    let r = ((0.05 * d as f64).round() as usize).max(4);
    r.min(d.saturating_sub(1) / 2).max(1)
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamGroups {
    /// The dense base weights; only used to pretrain a toy base model.
    pub base: bool,
    pub lora: bool,
    pub sparsity: bool,
}

impl ParamGroups {
    /// Everything pruning-aware tuning trains: mask, sparsifiers, LoRA.
    pub const ALL: ParamGroups = ParamGroups {
        base: false,
        lora: true,
        sparsity: true,
    };
    pub const LORA_ONLY: ParamGroups = ParamGroups {
        base: false,
        lora: true,
        sparsity: false,
    };
    pub const BASE_ONLY: ParamGroups = ParamGroups {
        base: true,
        lora: false,
        sparsity: false,
    };
    pub const NONE: ParamGroups = ParamGroups {
        base: false,
        lora: false,
        sparsity: false,
    };
}

/// A model bound to a tape for one forward/backward pass.
pub struct BoundModel<T> {
    weights: BoundWeights,
    extras_lora: Vec<[Option<LoraVars<T>>; 7]>,
    head_lora: Option<LoraVars<T>>,
    hsm: Vec<[Option<HsmVars>; 2]>,
    w_m: Var,
    /// Trainable leaves in [`ModelState::trainable_mut`] order.
    pub trainable: Vec<(String, Var)>,
}

impl<T> BoundModel<T> {
    pub fn w_m(&self) -> Var {
        self.w_m
    }

    pub fn hsm_vars(&self) -> Vec<HsmVars> {
        self.hsm.iter().flat_map(|b| b.iter().flatten().copied()).collect()
    }
}

/// Weights, adapters, sparsifiers and the shared mask of the toy decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub weights: DecoderWeights<T>,
    pub lora: Vec<BlockLora<T>>,
    pub head_lora: LoraSlot<T>,
    pub hsm: Vec<BlockHsm<T>>,
    /// The one mask every sparsifier reads.
    pub mask: UnifiedMask<T>,
    /// Set once sparsifiers are merged; masked mode then uses this 0/1 mask.
    pub snapped: Option<BinaryMask>,
}

impl<T: Float> ModelState<T> {
    /// Seeded init: weights ~ N(0, 0.02²), gains 1, LoRA B = 0, HIO v = 0,
    /// proxy weights 0.
    pub fn init(config: &ModelConfig, opts: &PatOptions, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = DecoderWeights::init(config, &mut rng);
        let mut lora = Vec::with_capacity(config.n_layers);
        for b in &weights.blocks {
            let mut slots = Vec::with_capacity(7);
            for l in Linear::ALL {
                let s = b.linear(l).shape();
                slots.push(LoraSlot::Active(LoraAdapter::init(
                    s[0],
                    s[1],
                    opts.r_lora,
                    opts.lora_alpha,
                    &mut rng,
                )?));
            }
            lora.push(slots.try_into().unwrap_or_else(|_| unreachable!()));
        }
        let head_lora = LoraSlot::Active(LoraAdapter::init(
            config.vocab_size,
            d,
            opts.r_lora.min(config.vocab_size),
            opts.lora_alpha,
            &mut rng,
        )?);
        let mut hsm = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            hsm.push(BlockHsm {
                attn: HsmSlot::Active(HybridSparsifier::init(d, opts.r_hio, &mut rng)?),
                ffn: HsmSlot::Active(HybridSparsifier::init(d, opts.r_hio, &mut rng)?),
            });
        }
        let mask = UnifiedMask::new(d, opts.s0, opts.eps_temp, opts.n_target)?;
        Ok(ModelState {
            config: config.clone(),
            weights,
            lora,
            head_lora,
            hsm,
            mask,
            snapped: None,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    pub fn is_lora_merged(&self) -> bool {
        self.lora.iter().flatten().chain([&self.head_lora]).all(|s| matches!(s, LoraSlot::Merged))
    }

    pub fn is_hsm_merged(&self) -> bool {
        self.hsm
            .iter()
            .all(|b| matches!((&b.attn, &b.ffn), (HsmSlot::Merged, HsmSlot::Merged)))
    }

    /// Registers every tensor on the tape; groups in `groups` become
    /// trainable leaves.
    pub fn bind(&self, tape: &mut Tape<T>, groups: ParamGroups) -> BoundModel<T> {
        let (weights, mut trainable) = self.weights.bind(tape, groups.base);
        let w_m = tape.leaf(self.mask.w_m.clone(), groups.sparsity);
        if groups.sparsity && self.snapped.is_none() {
            trainable.push(("mask.w_m".to_string(), w_m));
        }
        let mut hsm = Vec::with_capacity(self.hsm.len());
        for (i, b) in self.hsm.iter().enumerate() {
            let mut pair = [None, None];
            for (j, (slot, tag)) in [(&b.attn, "hsm_attn"), (&b.ffn, "hsm_ffn")].into_iter().enumerate() {
                if let Some(h) = slot.active() {
                    let vars = h.bind(tape, groups.sparsity);
                    if groups.sparsity {
                        for (n, v) in [("l0", vars.l0), ("v", vars.v), ("l1", vars.l1)] {
                            trainable.push((format!("blocks.{i}.{tag}.{n}"), v));
                        }
                    }
                    pair[j] = Some(vars);
                }
            }
            hsm.push(pair);
        }
        let mut extras_lora = Vec::with_capacity(self.lora.len());
        for (i, slots) in self.lora.iter().enumerate() {
            let mut vars = [None; 7];
            for l in Linear::ALL {
                if let Some(ad) = slots[l as usize].adapter() {
                    let lv = ad.bind(tape, groups.lora);
                    if groups.lora {
                        trainable.push((format!("blocks.{i}.lora.{}.a", l.name()), lv.a));
                        trainable.push((format!("blocks.{i}.lora.{}.b", l.name()), lv.b));
                    }
                    vars[l as usize] = Some(lv);
                }
            }
            extras_lora.push(vars);
        }
        let head_lora = self.head_lora.adapter().map(|ad| {
            let lv = ad.bind(tape, groups.lora);
            if groups.lora {
                trainable.push(("lora.lm_head.a".to_string(), lv.a));
                trainable.push(("lora.lm_head.b".to_string(), lv.b));
            }
            lv
        });
        BoundModel {
            weights,
            extras_lora,
            head_lora,
            hsm,
            w_m,
            trainable,
        }
    }

    /// Trainable tensors in the same order as [`BoundModel::trainable`].
    pub fn trainable_mut(&mut self, groups: ParamGroups) -> Vec<(String, &mut Tensor<T>)> {
        let mut out: Vec<(String, &mut Tensor<T>)> = Vec::new();
        if groups.base {
            out.extend(self.weights.named_mut());
        }
        if groups.sparsity && self.snapped.is_none() {
            out.push(("mask.w_m".to_string(), &mut self.mask.w_m));
        }
        if groups.sparsity {
            for (i, b) in self.hsm.iter_mut().enumerate() {
                for (slot, tag) in [(&mut b.attn, "hsm_attn"), (&mut b.ffn, "hsm_ffn")] {
                    if let HsmSlot::Active(h) = slot {
                        out.push((format!("blocks.{i}.{tag}.l0"), &mut h.l0));
                        out.push((format!("blocks.{i}.{tag}.v"), &mut h.v));
                        out.push((format!("blocks.{i}.{tag}.l1"), &mut h.l1));
                    }
                }
            }
        }
        if groups.lora {
            for (i, slots) in self.lora.iter_mut().enumerate() {
                for (l, slot) in Linear::ALL.into_iter().zip(slots.iter_mut()) {
                    if let Some(ad) = slot.adapter_mut() {
                        out.push((format!("blocks.{i}.lora.{}.a", l.name()), &mut ad.a));
                        out.push((format!("blocks.{i}.lora.{}.b", l.name()), &mut ad.b));
                    }
                }
            }
            if let Some(ad) = self.head_lora.adapter_mut() {
                out.push(("lora.lm_head.a".to_string(), &mut ad.a));
                out.push(("lora.lm_head.b".to_string(), &mut ad.b));
            }
        }
        out
    }

    /// The mask vector used in masked mode at the current step.
    fn mask_var(&self, tape: &mut Tape<T>, bound: &BoundModel<T>) -> Var {
        match &self.snapped {
            Some(bm) => tape.constant(Tensor::vector(bm.to_vector())),
            None => gate(tape, bound.w_m, self.mask.schedule(self.mask.step)),
        }
    }

    /// Forward pass on an existing binding; returns logits `[batch·seq × vocab]`.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundModel<T>,
        batch: &TokenBatch,
        mode: ForwardMode,
        trace: Option<&mut ForwardTrace>,
    ) -> Result<Var> {
        let extras = match mode {
            ForwardMode::Plain => Extras {
                lora: bound.extras_lora.clone(),
                head_lora: bound.head_lora,
                hsm: Vec::new(),
                mask: None,
            },
            ForwardMode::Masked => Extras {
                lora: bound.extras_lora.clone(),
                head_lora: bound.head_lora,
                hsm: bound.hsm.clone(),
                mask: Some(self.mask_var(tape, bound)),
            },
        };
        decoder_forward(
            tape,
            &bound.weights,
            &extras,
            self.config.n_heads,
            self.config.rms_eps,
            batch,
            trace,
        )
    }

    /// Inference forward; logits shaped `[batch × seq × vocab]`.
    pub fn forward(&self, batch: &TokenBatch, mode: ForwardMode) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let bound = self.bind(&mut tape, ParamGroups::NONE);
        let logits = self.forward_bound(&mut tape, &bound, batch, mode, None)?;
        Ok(tape
            .value(logits)
            .reshaped(&[batch.batch, batch.seq, self.config.vocab_size])?)
    }

    /// Base-model parameters (what a dense export would contain).
    pub fn base_param_count(&self) -> usize {
        self.weights.param_count()
    }

    pub fn trainable_param_count(&self) -> usize {
        let lora: usize = self
            .lora
            .iter()
            .flatten()
            .chain([&self.head_lora])
            .filter_map(|s| s.adapter().map(LoraAdapter::param_count))
            .sum();
        let hsm: usize = self
            .hsm
            .iter()
            .flat_map(|b| [&b.attn, &b.ffn])
            .filter_map(|s| s.active().map(HybridSparsifier::param_count))
            .sum();
        lora + hsm + self.mask.width()
    }
}

/// A freestanding dense decoder produced by slicing the hidden dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PrunedModel<T> {
    /// Configuration of the model it was sliced from.
    pub source: ModelConfig,
    pub kept: BinaryMask,
    pub weights: DecoderWeights<T>,
}

impl<T: Float> PrunedModel<T> {
    pub fn d_kept(&self) -> usize {
        self.weights.hidden()
    }

    pub fn param_count(&self) -> usize {
        self.weights.param_count()
    }

    /// Norm epsilon of the sliced model. The mean square now runs over
    /// `d_kept` channels, so epsilon scales by `d / d_kept` along with the
    /// gains to reproduce the full-width norm exactly.
    pub fn rms_eps(&self) -> f64 {
        self.source.rms_eps * self.source.d_model as f64 / self.d_kept() as f64
    }

    pub fn forward_on(&self, tape: &mut Tape<T>, batch: &TokenBatch) -> Result<Var> {
        let (bound, _) = self.weights.bind(tape, false);
        decoder_forward(
            tape,
            &bound,
            &Extras::default(),
            self.source.n_heads,
            self.rms_eps(),
            batch,
            None,
        )
    }

    pub fn forward(&self, batch: &TokenBatch) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let logits = self.forward_on(&mut tape, batch)?;
        Ok(tape
            .value(logits)
            .reshaped(&[batch.batch, batch.seq, self.source.vocab_size])?)
    }
}

/// Dense forward over plain weights (no adapters, no mask).
pub fn dense_forward<T: Float>(
    weights: &DecoderWeights<T>,
    n_heads: usize,
    rms_eps: f64,
    batch: &TokenBatch,
) -> Result<Tensor<T>> {
    let mut tape = Tape::inference();
    let (bound, _) = weights.bind(&mut tape, false);
    let logits = decoder_forward(&mut tape, &bound, &Extras::default(), n_heads, rms_eps, batch, None)?;
    Ok(tape.value(logits).clone())
}

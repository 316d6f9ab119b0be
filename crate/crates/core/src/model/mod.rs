//! The policy: a per-frame encoder, a causal transformer decoder shared by
//! both tasks, a classification head for detection and a language-model
//! head for reasoning.
//!
//! Conditioning on the previous round is expressed as a short token prefix
//! (`COND_*`, `SEP`, previous reasoning) placed in front of the encoded
//! frames. That combined source sequence is what the classifier reads
//! through the decoder layers and what the reasoning decoder cross-attends.

mod forward;
mod infer;
mod vocab;

use std::collections::HashMap;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::datagen::{Label, EP_LEN, FRAME_DIM};
use crate::diffcore::{checkpoint, ParamGroup, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::rng;

pub use forward::{GraphOutputs, TrainItem};
pub use infer::{sample_index, Decoding};
pub use vocab::{
    TokenId, Vocab, BOS, COND_FAILURE, COND_NONE, COND_SUCCESS, EOS, NUM_SPECIALS, PAD, SEP,
};

/// Number of leading decoder layers whose outputs feed the classifier.
pub const CLASSIFIER_TAP_LAYERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub frame_dim: usize,
    pub ep_len: usize,
    pub hidden: usize,
    pub ffn_dim: usize,
    pub decoder_layers: usize,
    pub attn_heads: usize,
    /// Maximum generated tokens per reasoning, EOS included.
    pub max_reasoning_len: usize,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frame_dim: FRAME_DIM,
            ep_len: EP_LEN,
            hidden: 64,
            ffn_dim: 128,
            decoder_layers: 2,
            attn_heads: 2,
            max_reasoning_len: 12,
            dropout: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.attn_heads == 0 || self.hidden % self.attn_heads != 0 {
            return bad(format!("hidden {} not divisible by attn_heads {}", self.hidden, self.attn_heads));
        }
        if self.hidden < 2 || self.ffn_dim == 0 || self.decoder_layers == 0 || self.max_reasoning_len == 0 {
            return bad(format!("degenerate model size {self:?}"));
        }
        if self.frame_dim != FRAME_DIM || self.ep_len != EP_LEN {
            return bad(format!("frames must be {EP_LEN}x{FRAME_DIM}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0,1)", self.dropout));
        }
        Ok(())
    }

    /// Longest conditioning prefix: `COND_*`, `SEP`, then reasoning.
    pub fn max_context_len(&self) -> usize {
        self.max_reasoning_len + 2
    }

    pub fn classifier_taps(&self) -> usize {
        self.decoder_layers.min(CLASSIFIER_TAP_LAYERS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrevDetection {
    None,
    Success,
    Failure,
}

impl From<Label> for PrevDetection {
    fn from(l: Label) -> Self {
        match l {
            Label::Success => PrevDetection::Success,
            Label::Failure => PrevDetection::Failure,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskPrompt {
    Detect,
    Reason,
    Both,
}

/// What the policy is told about the previous round.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditioningContext {
    pub prev_detection: PrevDetection,
    pub prev_reasoning: Option<Vec<TokenId>>,
    pub task_prompt: TaskPrompt,
}

impl ConditioningContext {
    /// Round-0 context: nothing known yet.
    pub fn initial() -> Self {
        Self {
            prev_detection: PrevDetection::None,
            prev_reasoning: None,
            task_prompt: TaskPrompt::Both,
        }
    }

    pub fn from_prediction(label: Label, reasoning: &[TokenId]) -> Self {
        Self {
            prev_detection: label.into(),
            prev_reasoning: Some(reasoning.to_vec()),
            task_prompt: TaskPrompt::Both,
        }
    }

    /// Token prefix seen by both heads. EOS and PAD are stripped from the
    /// previous reasoning, which is truncated to `max_reasoning`.
    pub fn tokens(&self, max_reasoning: usize) -> Vec<TokenId> {
        let cond = match self.prev_detection {
            PrevDetection::None => COND_NONE,
            PrevDetection::Success => COND_SUCCESS,
            PrevDetection::Failure => COND_FAILURE,
        };
        let mut out = vec![cond, SEP];
        if let Some(r) = &self.prev_reasoning {
            out.extend(r.iter().copied().filter(|&t| t != EOS && t != PAD).take(max_reasoning));
        }
        out
    }
}

/// One round's joint prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutput {
    /// Probability of failure.
    pub det_prob: f64,
    pub det_label: Label,
    /// Generated ids, EOS-terminated unless the length cap was hit.
    pub reasoning: Vec<TokenId>,
    /// Per-step token distributions; not serialised.
    #[serde(skip)]
    pub step_dists: Vec<Vec<f64>>,
    pub h_det: f64,
    pub h_reason: f64,
}

impl RoundOutput {
    pub fn new(det_prob: f64, reasoning: Vec<TokenId>, step_dists: Vec<Vec<f64>>) -> Self {
        let h_det = crate::diffcore::kernels::bernoulli_entropy(det_prob);
        let h_reason = mean_token_entropy(&reasoning, &step_dists);
        Self {
            det_prob,
            det_label: label_for(det_prob),
            reasoning,
            step_dists,
            h_det,
            h_reason,
        }
    }

    /// Combined score `H_det + λ·H_reason`.
    pub fn combined(&self, lambda: f64) -> f64 {
        self.h_det + lambda * self.h_reason
    }
}

pub fn label_for(det_prob: f64) -> Label {
    if det_prob >= 0.5 {
        Label::Failure
    } else {
        Label::Success
    }
}

/// Mean entropy of the sampling distributions over emitted tokens,
/// skipping PAD and counting EOS.
pub fn mean_token_entropy(tokens: &[TokenId], dists: &[Vec<f64>]) -> f64 {
    let (sum, n) = tokens
        .iter()
        .zip(dists)
        .filter(|(&t, _)| t != PAD)
        .fold((0.0, 0usize), |(s, n), (_, d)| (s + crate::diffcore::kernels::entropy(d), n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct DenseIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct NormIds {
    pub g: ParamId,
    pub b: ParamId,
}

#[derive(Debug, Clone)]
pub(crate) struct LayerIds {
    pub ln1: NormIds,
    pub q: DenseIds,
    pub k: DenseIds,
    pub v: DenseIds,
    pub o: DenseIds,
    pub ln2: NormIds,
    pub cq: DenseIds,
    pub ck: DenseIds,
    pub cv: DenseIds,
    pub co: DenseIds,
    pub ln3: NormIds,
    pub up: DenseIds,
    pub down: DenseIds,
}

#[derive(Debug, Clone)]
pub(crate) struct ClassifierIds {
    pub cls: ParamId,
    pub proj1: DenseIds,
    pub proj2: DenseIds,
    pub ln: NormIds,
    pub q: DenseIds,
    pub k: DenseIds,
    pub v: DenseIds,
    pub o: DenseIds,
    pub out_ln: NormIds,
    pub mlp1: DenseIds,
    pub mlp2: DenseIds,
    pub mlp3: DenseIds,
}

#[derive(Debug, Clone)]
pub(crate) struct Ids {
    pub enc: DenseIds,
    pub enc_ln: NormIds,
    pub tok: ParamId,
    pub ctx_pos: ParamId,
    pub frame_pos: ParamId,
    pub dec_pos: ParamId,
    pub layers: Vec<LayerIds>,
    pub head_ln: NormIds,
    pub head: DenseIds,
    pub clf: ClassifierIds,
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

type Register<'a> = dyn FnMut(&str, Vec<usize>, ParamGroup, Init) -> Result<ParamId> + 'a;

impl Ids {
    fn build(cfg: &ModelConfig, vocab: usize, reg: &mut Register<'_>) -> Result<Self> {
        let h = cfg.hidden;
        let resid = 0.5 / (h as f64).sqrt();
        let dense = |reg: &mut Register<'_>, name: &str, i: usize, o: usize, g: ParamGroup, std: Option<f64>| -> Result<DenseIds> {
            let init = match std {
                Some(s) => Init::Normal(s),
                None => Init::Normal(1.0 / (i as f64).sqrt()),
            };
            Ok(DenseIds {
                w: reg(&format!("{name}.w"), vec![i, o], g, init)?,
                b: reg(&format!("{name}.b"), vec![o], g, Init::Zeros)?,
            })
        };
        let norm = |reg: &mut Register<'_>, name: &str, g: ParamGroup| -> Result<NormIds> {
            Ok(NormIds {
                g: reg(&format!("{name}.g"), vec![h], g, Init::Ones)?,
                b: reg(&format!("{name}.b"), vec![h], g, Init::Zeros)?,
            })
        };
        let heads = ParamGroup::Heads;
        let enc = dense(reg, "encoder.proj", cfg.frame_dim, h, ParamGroup::Encoder, None)?;
        let enc_ln = norm(reg, "encoder.ln", ParamGroup::Encoder)?;
        let tok = reg("embed.tokens", vec![vocab, h], heads, Init::Normal(1.0))?;
        let ctx_pos = reg("embed.ctx_pos", vec![cfg.max_context_len(), h], heads, Init::Normal(0.1))?;
        let frame_pos = reg("embed.frame_pos", vec![cfg.ep_len, h], heads, Init::Normal(0.1))?;
        let dec_pos = reg("embed.dec_pos", vec![cfg.max_reasoning_len, h], heads, Init::Normal(0.1))?;
        let mut layers = Vec::with_capacity(cfg.decoder_layers);
        for l in 0..cfg.decoder_layers {
            let p = format!("decoder.{l}");
            layers.push(LayerIds {
                ln1: norm(reg, &format!("{p}.ln1"), heads)?,
                q: dense(reg, &format!("{p}.self.q"), h, h, heads, None)?,
                k: dense(reg, &format!("{p}.self.k"), h, h, heads, None)?,
                v: dense(reg, &format!("{p}.self.v"), h, h, heads, None)?,
                o: dense(reg, &format!("{p}.self.o"), h, h, heads, Some(resid))?,
                ln2: norm(reg, &format!("{p}.ln2"), heads)?,
                cq: dense(reg, &format!("{p}.cross.q"), h, h, heads, None)?,
                ck: dense(reg, &format!("{p}.cross.k"), h, h, heads, None)?,
                cv: dense(reg, &format!("{p}.cross.v"), h, h, heads, None)?,
                co: dense(reg, &format!("{p}.cross.o"), h, h, heads, Some(resid))?,
                ln3: norm(reg, &format!("{p}.ln3"), heads)?,
                up: dense(reg, &format!("{p}.ffn.up"), h, cfg.ffn_dim, heads, None)?,
                down: dense(reg, &format!("{p}.ffn.down"), cfg.ffn_dim, h, heads, Some(0.5 / (cfg.ffn_dim as f64).sqrt()))?,
            });
        }
        let head_ln = norm(reg, "lm_head.ln", heads)?;
        let head = dense(reg, "lm_head.out", h, vocab, heads, None)?;
        let half = (h / 2).max(1);
        let clf = ClassifierIds {
            cls: reg("classifier.cls", vec![1, h], heads, Init::Zeros)?,
            proj1: dense(reg, "classifier.proj1", h, h, heads, None)?,
            proj2: dense(reg, "classifier.proj2", h, h, heads, None)?,
            ln: norm(reg, "classifier.ln", heads)?,
            q: dense(reg, "classifier.attn.q", h, h, heads, None)?,
            k: dense(reg, "classifier.attn.k", h, h, heads, None)?,
            v: dense(reg, "classifier.attn.v", h, h, heads, None)?,
            o: dense(reg, "classifier.attn.o", h, h, heads, None)?,
            out_ln: norm(reg, "classifier.out_ln", heads)?,
            mlp1: dense(reg, "classifier.mlp1", h, h, heads, None)?,
            mlp2: dense(reg, "classifier.mlp2", h, half, heads, None)?,
            mlp3: dense(reg, "classifier.mlp3", half, 1, heads, Some(0.0))?,
        };
        Ok(Self {
            enc,
            enc_ln,
            tok,
            ctx_pos,
            frame_pos,
            dec_pos,
            layers,
            head_ln,
            head,
            clf,
        })
    }
}

/// Policy parameters plus the index of where each weight lives.
#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    vocab: Vocab,
    store: ParamStore,
    pub(crate) ids: Ids,
}

impl Model {
    /// Freshly initialised model. The final classifier layer starts at zero,
    /// so the initial detection probability is exactly 0.5.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::standard().clone();
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[0x1417]);
        let ids = Ids::build(&cfg, vocab.len(), &mut |name, shape, group, init| {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Normal(s) if s == 0.0 => vec![0.0; n],
                Init::Normal(s) => {
                    let d = Normal::new(0.0, s).expect("positive std");
                    (0..n).map(|_| d.sample(&mut r)).collect()
                }
            };
            store.add(name, Tensor::new(shape, data)?, group)
        })?;
        Ok(Self { cfg, vocab, store, ids })
    }

    /// Rebuilds a model from named tensors, checking every shape.
    pub fn from_tensors(cfg: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocab::standard().clone();
        let mut pool: HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut store = ParamStore::new();
        let ids = Ids::build(&cfg, vocab.len(), &mut |name, shape, group, _| {
            let t = pool
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            store.add(name, t, group)
        })?;
        if let Some(extra) = pool.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self { cfg, vocab, store, ids })
    }

    pub fn load(cfg: ModelConfig, path: &Path) -> Result<Self> {
        Self::from_tensors(cfg, checkpoint::load(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(&self.store, path)
    }

    pub fn checkpoint_bytes(&self) -> Vec<u8> {
        checkpoint::encode(&self.store)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub(crate) fn w(&self, id: ParamId) -> &[f64] {
        self.store.value(id).data()
    }

    /// Classifier-side token prefix for a context.
    pub fn context_tokens(&self, ctx: &ConditioningContext) -> Vec<TokenId> {
        ctx.tokens(self.cfg.max_reasoning_len)
    }

    pub(crate) fn check_frames(&self, frames: &[f64]) -> Result<()> {
        let want = self.cfg.ep_len * self.cfg.frame_dim;
        if frames.len() != want {
            return Err(Error::shape(
                "encode",
                format!("expected {}x{} frames, got {} values", self.cfg.ep_len, self.cfg.frame_dim, frames.len()),
            ));
        }
        Ok(())
    }
}

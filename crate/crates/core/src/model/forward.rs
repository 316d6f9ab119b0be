//! Differentiable forward pass over a mini-batch.

use std::ops::Range;

use crate::diffcore::{AttnSegment, Graph, ParamId, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{ConditioningContext, DenseIds, LayerIds, Model, NormIds, TokenId, BOS};

/// One training sample for the tape forward pass.
#[derive(Debug, Clone, Copy)]
pub struct TrainItem<'a> {
    pub frames: &'a [f64],
    pub ctx: &'a ConditioningContext,
    /// Reasoning target (EOS-terminated); `None` skips the decoder.
    pub target: Option<&'a [TokenId]>,
}

#[derive(Debug)]
pub struct GraphOutputs {
    /// Failure probability per item, `[B, 1]`.
    pub det_prob: Var,
    /// Next-token distributions for all decoded rows, `[N, V]`.
    pub token_probs: Option<Var>,
    /// Rows of `token_probs` belonging to each item (empty when no target).
    pub target_rows: Vec<Range<usize>>,
    /// Flattened targets aligned with `token_probs` rows.
    pub targets: Vec<TokenId>,
}

/// Lazily materialised parameter leaves, so each weight is copied onto the
/// tape once per graph.
pub(crate) struct Binder<'m> {
    model: &'m Model,
    vars: Vec<Option<Var>>,
}

impl<'m> Binder<'m> {
    pub(crate) fn new(model: &'m Model) -> Self {
        Self {
            model,
            vars: vec![None; model.store().len()],
        }
    }

    pub(crate) fn p(&mut self, g: &mut Graph, id: ParamId) -> Var {
        *self.vars[id.index()].get_or_insert_with(|| g.param(self.model.store(), id))
    }

    fn dense(&mut self, g: &mut Graph, x: Var, d: DenseIds) -> Result<Var> {
        let w = self.p(g, d.w);
        let b = self.p(g, d.b);
        g.dense(x, w, b)
    }

    fn norm(&mut self, g: &mut Graph, x: Var, n: NormIds) -> Result<Var> {
        let gamma = self.p(g, n.g);
        let beta = self.p(g, n.b);
        g.layernorm(x, gamma, beta)
    }
}

struct Drop<'r> {
    p: f64,
    rng: Option<&'r mut Rng>,
}

impl Drop<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(r) if self.p > 0.0 => g.dropout(x, self.p, r),
            _ => x,
        }
    }
}

impl Model {
    #[allow(clippy::too_many_arguments)]
    fn layer_graph(
        &self,
        g: &mut Graph,
        bind: &mut Binder<'_>,
        l: &LayerIds,
        x: Var,
        self_segs: &[AttnSegment],
        cross_segs: &[AttnSegment],
        ck: Var,
        cv: Var,
        drop: &mut Drop<'_>,
    ) -> Result<Var> {
        let heads = self.cfg.attn_heads;
        let a = bind.norm(g, x, l.ln1)?;
        let q = bind.dense(g, a, l.q)?;
        let k = bind.dense(g, a, l.k)?;
        let v = bind.dense(g, a, l.v)?;
        let att = g.attention(q, k, v, self_segs.to_vec(), heads)?;
        let o = bind.dense(g, att, l.o)?;
        let o = drop.apply(g, o);
        let x = g.add(x, o)?;

        let a = bind.norm(g, x, l.ln2)?;
        let cq = bind.dense(g, a, l.cq)?;
        let att = g.attention(cq, ck, cv, cross_segs.to_vec(), heads)?;
        let o = bind.dense(g, att, l.co)?;
        let o = drop.apply(g, o);
        let x = g.add(x, o)?;

        let a = bind.norm(g, x, l.ln3)?;
        let u = bind.dense(g, a, l.up)?;
        let u = g.gelu(u);
        let o = bind.dense(g, u, l.down)?;
        let o = drop.apply(g, o);
        g.add(x, o)
    }

    /// Records the joint forward pass of a batch: the classifier over every
    /// item and teacher-forced decoding for items with a target.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        items: &[TrainItem<'_>],
        dropout_rng: Option<&mut Rng>,
    ) -> Result<GraphOutputs> {
        if items.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let cfg = &self.cfg;
        let (h, e) = (cfg.hidden, cfg.ep_len);
        let vocab = self.vocab.len();
        let mut bind = Binder::new(self);
        let ids = &self.ids;
        let mut drop = Drop {
            p: cfg.dropout,
            rng: dropout_rng,
        };
        for it in items {
            self.check_frames(it.frames)?;
            if let Some(t) = it.target {
                if t.is_empty() || t.len() > cfg.max_reasoning_len {
                    return Err(Error::Precondition(format!(
                        "reasoning target of length {} (max {})",
                        t.len(),
                        cfg.max_reasoning_len
                    )));
                }
                if let Some(&id) = t.iter().find(|&&id| id >= vocab) {
                    return Err(Error::TokenOutOfRange { id, size: vocab });
                }
            }
        }
        let b = items.len();

        // Encoder over all frames at once.
        let frames: Vec<f64> = items.iter().flat_map(|it| it.frames.iter().copied()).collect();
        let fx = g.constant(Tensor::matrix(b * e, cfg.frame_dim, frames)?);
        let enc = bind.dense(g, fx, ids.enc)?;
        let enc = g.gelu(enc);
        let enc = bind.norm(g, enc, ids.enc_ln)?;
        let fpos_table = bind.p(g, ids.frame_pos);
        let fpos_idx: Vec<usize> = (0..b).flat_map(|_| 0..e).collect();
        let fpos = g.embed(fpos_table, &fpos_idx)?;
        let mem = g.add(enc, fpos)?;

        // Conditioning prefix.
        let ctx: Vec<Vec<TokenId>> = items.iter().map(|it| self.context_tokens(it.ctx)).collect();
        let ctx_ids: Vec<usize> = ctx.iter().flatten().copied().collect();
        let ctx_pos: Vec<usize> = ctx.iter().flat_map(|c| 0..c.len()).collect();
        let tok = bind.p(g, ids.tok);
        let ce = g.embed(tok, &ctx_ids)?;
        let cpos_table = bind.p(g, ids.ctx_pos);
        let cp = g.embed(cpos_table, &ctx_pos)?;
        let ctx_emb = g.add(ce, cp)?;

        // Source rows: per item, its prefix then its frames.
        let total_ctx = ctx_ids.len();
        let all = g.concat_rows(&[ctx_emb, mem])?;
        let mut perm = Vec::with_capacity(total_ctx + b * e);
        let mut src_segs = Vec::with_capacity(b);
        let mut coff = 0;
        for (i, c) in ctx.iter().enumerate() {
            let start = perm.len();
            perm.extend(coff..coff + c.len());
            perm.extend(total_ctx + i * e..total_ctx + (i + 1) * e);
            src_segs.push(start..perm.len());
            coff += c.len();
        }
        let src = g.gather_rows(all, perm)?;

        let mut cross_kv = Vec::with_capacity(ids.layers.len());
        for l in &ids.layers {
            let ck = bind.dense(g, src, l.ck)?;
            let cv = bind.dense(g, src, l.cv)?;
            cross_kv.push((ck, cv));
        }

        // Classifier pass: the source itself runs through the decoder.
        let causal: Vec<AttnSegment> = src_segs
            .iter()
            .map(|s| AttnSegment::causal(s.clone(), s.clone()))
            .collect();
        let full: Vec<AttnSegment> = src_segs
            .iter()
            .map(|s| AttnSegment::full(s.clone(), s.clone()))
            .collect();
        let taps = cfg.classifier_taps();
        let mut x = src;
        let mut acc: Option<Var> = None;
        for (li, l) in ids.layers.iter().enumerate() {
            let (ck, cv) = cross_kv[li];
            x = self.layer_graph(g, &mut bind, l, x, &causal, &full, ck, cv, &mut drop)?;
            if li < taps {
                acc = Some(match acc {
                    None => x,
                    Some(a) => g.add(a, x)?,
                });
            }
        }
        let feat = g.scale(acc.expect("at least one layer"), 1.0 / taps as f64);
        let det_prob = self.classifier_graph(g, &mut bind, feat, &src_segs, &mut drop)?;

        // Teacher-forced decoding.
        let mut dec_in = Vec::new();
        let mut dec_pos = Vec::new();
        let mut targets = Vec::new();
        let mut target_rows = Vec::with_capacity(b);
        let mut dec_self = Vec::new();
        let mut dec_cross = Vec::new();
        for (i, it) in items.iter().enumerate() {
            let start = dec_in.len();
            if let Some(t) = it.target {
                dec_in.push(BOS);
                dec_in.extend_from_slice(&t[..t.len() - 1]);
                dec_pos.extend(0..t.len());
                targets.extend_from_slice(t);
                let rows = start..dec_in.len();
                dec_self.push(AttnSegment::causal(rows.clone(), rows.clone()));
                dec_cross.push(AttnSegment::full(rows, src_segs[i].clone()));
            }
            target_rows.push(start..dec_in.len());
        }
        let token_probs = if dec_in.is_empty() {
            None
        } else {
            let te = g.embed(tok, &dec_in)?;
            let dpos_table = bind.p(g, ids.dec_pos);
            let dp = g.embed(dpos_table, &dec_pos)?;
            let mut y = g.add(te, dp)?;
            for (li, l) in ids.layers.iter().enumerate() {
                let (ck, cv) = cross_kv[li];
                y = self.layer_graph(g, &mut bind, l, y, &dec_self, &dec_cross, ck, cv, &mut drop)?;
            }
            let y = bind.norm(g, y, ids.head_ln)?;
            let logits = bind.dense(g, y, ids.head)?;
            Some(g.softmax(logits))
        };
        debug_assert!(h > 0);
        Ok(GraphOutputs {
            det_prob,
            token_probs,
            target_rows,
            targets,
        })
    }

    fn classifier_graph(
        &self,
        g: &mut Graph,
        bind: &mut Binder<'_>,
        feat: Var,
        src_segs: &[Range<usize>],
        drop: &mut Drop<'_>,
    ) -> Result<Var> {
        let c = &self.ids.clf;
        let p = bind.dense(g, feat, c.proj1)?;
        let p = g.gelu(p);
        let p = drop.apply(g, p);
        let p = bind.dense(g, p, c.proj2)?;
        let pf = bind.norm(g, p, c.ln)?;

        let cls = bind.p(g, c.cls);
        let q1 = bind.dense(g, cls, c.q)?;
        let q = g.gather_rows(q1, vec![0; src_segs.len()])?;
        let k = bind.dense(g, pf, c.k)?;
        let v = bind.dense(g, pf, c.v)?;
        let segs = src_segs
            .iter()
            .enumerate()
            .map(|(i, s)| AttnSegment::full(i..i + 1, s.clone()))
            .collect();
        let att = g.attention(q, k, v, segs, self.cfg.attn_heads)?;
        let o = bind.dense(g, att, c.o)?;
        let x = bind.norm(g, o, c.out_ln)?;
        let x = bind.dense(g, x, c.mlp1)?;
        let x = g.gelu(x);
        let x = drop.apply(g, x);
        let x = bind.dense(g, x, c.mlp2)?;
        let x = g.gelu(x);
        let x = drop.apply(g, x);
        let logit = bind.dense(g, x, c.mlp3)?;
        Ok(g.sigmoid(logit))
    }

    /// Teacher-forced next-token distributions (no dropout). Row `i` is the
    /// distribution that should produce `target[i]`.
    pub fn ntp_teacher_forced(
        &self,
        frames: &[f64],
        ctx: &ConditioningContext,
        target: &[TokenId],
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let out = self.forward_graph(
            &mut g,
            &[TrainItem {
                frames,
                ctx,
                target: Some(target),
            }],
            None,
        )?;
        let probs = g.value(out.token_probs.expect("target given"));
        Ok((0..probs.rows()).map(|r| probs.row(r).to_vec()).collect())
    }
}

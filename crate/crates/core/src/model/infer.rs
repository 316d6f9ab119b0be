//! Tape-free inference. Uses the same kernels and the same operation order
//! as the graph forward pass, so teacher-forced distributions from either
//! route agree bit for bit.

use std::ops::Range;

use rand::Rng as _;

use crate::diffcore::kernels::{self, AttnSegment};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

use super::{ConditioningContext, DenseIds, LayerIds, Model, NormIds, RoundOutput, TokenId, BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding<'a> {
    /// Argmax at every step; distributions are recorded as one-hot.
    Greedy,
    /// Sample from `softmax(logits / temperature)`.
    Sample { temperature: f64 },
    /// Feed a fixed token sequence; records the `τ = 1` distributions.
    Forced(&'a [TokenId]),
}

impl Decoding<'_> {
    /// Temperature 0 means greedy.
    pub fn from_temperature(temperature: f64) -> Result<Decoding<'static>> {
        if temperature == 0.0 {
            Ok(Decoding::Greedy)
        } else if temperature > 0.0 && temperature.is_finite() {
            Ok(Decoding::Sample { temperature })
        } else {
            Err(Error::Precondition(format!("temperature {temperature} must be positive or 0")))
        }
    }
}

/// Source sequences (`[context ∥ memory]`) for a batch, plus the
/// per-layer cross-attention keys and values.
struct Source {
    x: Vec<f64>,
    segs: Vec<Range<usize>>,
    ck: Vec<Vec<f64>>,
    cv: Vec<Vec<f64>>,
}

/// Samples an index from a probability vector by inverse CDF.
pub fn sample_index(p: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &pi) in p.iter().enumerate() {
        acc += pi;
        if u < acc {
            return i;
        }
    }
    p.iter().rposition(|&pi| pi > 0.0).unwrap_or(p.len() - 1)
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl Model {
    fn dense_k(&self, x: &[f64], d: DenseIds) -> Vec<f64> {
        let w = self.store().value(d.w);
        let (inp, out) = (w.rows(), w.cols());
        kernels::dense(x, w.data(), self.w(d.b), x.len() / inp, inp, out)
    }

    fn norm_k(&self, x: &[f64], n: NormIds) -> Vec<f64> {
        kernels::layernorm(x, self.w(n.g), self.w(n.b)).0
    }

    fn attn_k(&self, q: &[f64], k: &[f64], v: &[f64], segs: &[AttnSegment]) -> Vec<f64> {
        kernels::attention(q, k, v, self.cfg.hidden, segs, self.cfg.attn_heads).0
    }

    fn ffn_k(&self, l: &LayerIds, x: &[f64]) -> Vec<f64> {
        let a = self.norm_k(x, l.ln3);
        let mut u = self.dense_k(&a, l.up);
        kernels::gelu_inplace(&mut u);
        let o = self.dense_k(&u, l.down);
        add(x, &o)
    }

    fn rows_of(&self, table: &[f64], ids: impl IntoIterator<Item = usize>) -> Vec<f64> {
        let h = self.cfg.hidden;
        ids.into_iter()
            .flat_map(|i| table[i * h..(i + 1) * h].iter().copied())
            .collect()
    }

    /// Per-frame encoding `layernorm(gelu(frames·W + b))`, shape `[EP_LEN, hidden]`.
    pub fn encode(&self, frames: &[f64]) -> Result<Tensor> {
        self.check_frames(frames)?;
        let mut y = self.dense_k(frames, self.ids.enc);
        kernels::gelu_inplace(&mut y);
        let y = self.norm_k(&y, self.ids.enc_ln);
        Tensor::matrix(self.cfg.ep_len, self.cfg.hidden, y)
    }

    fn source(&self, items: &[(&[f64], &ConditioningContext)]) -> Result<Source> {
        let e = self.cfg.ep_len;
        let tok = self.w(self.ids.tok);
        let mut x = Vec::new();
        let mut segs = Vec::with_capacity(items.len());
        let mut rows = 0;
        for (frames, ctx) in items {
            let enc = self.encode(frames)?;
            let fpos = self.rows_of(self.w(self.ids.frame_pos), 0..e);
            let mem = add(enc.data(), &fpos);
            let c = self.context_tokens(ctx);
            let ce = self.rows_of(tok, c.iter().copied());
            let cp = self.rows_of(self.w(self.ids.ctx_pos), 0..c.len());
            x.extend(add(&ce, &cp));
            x.extend(mem);
            segs.push(rows..rows + c.len() + e);
            rows += c.len() + e;
        }
        let mut ck = Vec::with_capacity(self.ids.layers.len());
        let mut cv = Vec::with_capacity(self.ids.layers.len());
        for l in &self.ids.layers {
            ck.push(self.dense_k(&x, l.ck));
            cv.push(self.dense_k(&x, l.cv));
        }
        Ok(Source { x, segs, ck, cv })
    }

    fn classify_source(&self, src: &Source) -> Vec<f64> {
        let causal: Vec<AttnSegment> = src.segs.iter().map(|s| AttnSegment::causal(s.clone(), s.clone())).collect();
        let full: Vec<AttnSegment> = src.segs.iter().map(|s| AttnSegment::full(s.clone(), s.clone())).collect();
        let taps = self.cfg.classifier_taps();
        let mut x = src.x.clone();
        let mut acc: Option<Vec<f64>> = None;
        for (li, l) in self.ids.layers.iter().enumerate() {
            let a = self.norm_k(&x, l.ln1);
            let q = self.dense_k(&a, l.q);
            let k = self.dense_k(&a, l.k);
            let v = self.dense_k(&a, l.v);
            let o = self.dense_k(&self.attn_k(&q, &k, &v, &causal), l.o);
            x = add(&x, &o);
            let a = self.norm_k(&x, l.ln2);
            let cq = self.dense_k(&a, l.cq);
            let o = self.dense_k(&self.attn_k(&cq, &src.ck[li], &src.cv[li], &full), l.co);
            x = add(&x, &o);
            x = self.ffn_k(l, &x);
            if li < taps {
                acc = Some(match acc {
                    None => x.clone(),
                    Some(a) => add(&a, &x),
                });
            }
        }
        let s = 1.0 / taps as f64;
        let feat: Vec<f64> = acc.expect("at least one layer").iter().map(|v| v * s).collect();

        let c = &self.ids.clf;
        let mut p = self.dense_k(&feat, c.proj1);
        kernels::gelu_inplace(&mut p);
        let p = self.dense_k(&p, c.proj2);
        let pf = self.norm_k(&p, c.ln);
        let q1 = self.dense_k(self.w(c.cls), c.q);
        let q: Vec<f64> = (0..src.segs.len()).flat_map(|_| q1.iter().copied()).collect();
        let k = self.dense_k(&pf, c.k);
        let v = self.dense_k(&pf, c.v);
        let segs: Vec<AttnSegment> = src
            .segs
            .iter()
            .enumerate()
            .map(|(i, s)| AttnSegment::full(i..i + 1, s.clone()))
            .collect();
        let o = self.dense_k(&self.attn_k(&q, &k, &v, &segs), c.o);
        let x = self.norm_k(&o, c.out_ln);
        let mut x = self.dense_k(&x, c.mlp1);
        kernels::gelu_inplace(&mut x);
        let mut x = self.dense_k(&x, c.mlp2);
        kernels::gelu_inplace(&mut x);
        let logit = self.dense_k(&x, c.mlp3);
        logit.into_iter().map(kernels::sigmoid).collect()
    }

    /// Incremental decoding of every item in lockstep with per-item
    /// key/value caches.
    fn decode_source(
        &self,
        src: &Source,
        modes: &[Decoding<'_>],
        rngs: &mut [Rng],
    ) -> Vec<(Vec<TokenId>, Vec<Vec<f64>>)> {
        let (h, nl) = (self.cfg.hidden, self.ids.layers.len());
        let n = src.segs.len();
        let vocab = self.vocab.len();
        let mut out: Vec<(Vec<TokenId>, Vec<Vec<f64>>)> = vec![(Vec::new(), Vec::new()); n];
        let mut kc = vec![vec![Vec::<f64>::new(); nl]; n];
        let mut vc = vec![vec![Vec::<f64>::new(); nl]; n];
        let limit = |i: usize| match modes[i] {
            Decoding::Forced(t) => t.len().min(self.cfg.max_reasoning_len),
            _ => self.cfg.max_reasoning_len,
        };
        let mut active: Vec<usize> = (0..n).filter(|&i| limit(i) > 0).collect();
        let tok = self.w(self.ids.tok);
        let dpos = self.w(self.ids.dec_pos);
        let mut t = 0;
        while !active.is_empty() {
            let prev = active.iter().map(|&i| if t == 0 { BOS } else { out[i].0[t - 1] });
            let te = self.rows_of(tok, prev);
            let dp = self.rows_of(dpos, active.iter().map(|_| t));
            let mut x = add(&te, &dp);
            for (li, l) in self.ids.layers.iter().enumerate() {
                let a = self.norm_k(&x, l.ln1);
                let q = self.dense_k(&a, l.q);
                let k = self.dense_k(&a, l.k);
                let v = self.dense_k(&a, l.v);
                let mut att = vec![0.0; active.len() * h];
                for (r, &i) in active.iter().enumerate() {
                    kc[i][li].extend_from_slice(&k[r * h..(r + 1) * h]);
                    vc[i][li].extend_from_slice(&v[r * h..(r + 1) * h]);
                    let seg = [AttnSegment::causal(0..1, 0..t + 1)];
                    let o = self.attn_k(&q[r * h..(r + 1) * h], &kc[i][li], &vc[i][li], &seg);
                    att[r * h..(r + 1) * h].copy_from_slice(&o);
                }
                let o = self.dense_k(&att, l.o);
                x = add(&x, &o);
                let a = self.norm_k(&x, l.ln2);
                let cq = self.dense_k(&a, l.cq);
                let mut att = vec![0.0; active.len() * h];
                for (r, &i) in active.iter().enumerate() {
                    let seg = [AttnSegment::full(0..1, src.segs[i].clone())];
                    let o = self.attn_k(&cq[r * h..(r + 1) * h], &src.ck[li], &src.cv[li], &seg);
                    att[r * h..(r + 1) * h].copy_from_slice(&o);
                }
                let o = self.dense_k(&att, l.co);
                x = add(&x, &o);
                x = self.ffn_k(l, &x);
            }
            let y = self.norm_k(&x, self.ids.head_ln);
            let logits = self.dense_k(&y, self.ids.head);
            for (r, &i) in active.iter().enumerate() {
                let row = &logits[r * vocab..(r + 1) * vocab];
                let (id, dist) = match modes[i] {
                    Decoding::Greedy => {
                        let id = argmax(row);
                        let mut d = vec![0.0; vocab];
                        d[id] = 1.0;
                        (id, d)
                    }
                    Decoding::Sample { temperature } => {
                        let mut d: Vec<f64> = if temperature == 1.0 {
                            row.to_vec()
                        } else {
                            row.iter().map(|z| z / temperature).collect()
                        };
                        kernels::softmax_inplace(&mut d);
                        (sample_index(&d, &mut rngs[i]), d)
                    }
                    Decoding::Forced(target) => {
                        let mut d = row.to_vec();
                        kernels::softmax_inplace(&mut d);
                        (target[t], d)
                    }
                };
                out[i].0.push(id);
                out[i].1.push(dist);
            }
            t += 1;
            active.retain(|&i| {
                let done_eos = !matches!(modes[i], Decoding::Forced(_)) && out[i].0[t - 1] == EOS;
                !done_eos && t < limit(i)
            });
        }
        out
    }

    /// Failure probability for one episode under a context.
    pub fn classify(&self, frames: &[f64], ctx: &ConditioningContext) -> Result<f64> {
        let src = self.source(&[(frames, ctx)])?;
        Ok(self.classify_source(&src)[0])
    }

    /// Autoregressive reasoning from BOS until EOS or the length cap.
    pub fn decode_reasoning(
        &self,
        frames: &[f64],
        ctx: &ConditioningContext,
        decoding: Decoding<'_>,
        rng: &mut Rng,
    ) -> Result<(Vec<TokenId>, Vec<Vec<f64>>)> {
        let src = self.source(&[(frames, ctx)])?;
        let mut out = self.decode_source(&src, &[decoding], std::slice::from_mut(rng));
        Ok(out.pop().expect("one item"))
    }

    /// Joint prediction for one episode.
    pub fn predict_round(
        &self,
        frames: &[f64],
        ctx: &ConditioningContext,
        temperature: f64,
        rng: &mut Rng,
    ) -> Result<RoundOutput> {
        let mut out = self.predict_batch(&[(frames, ctx)], temperature, std::slice::from_mut(rng))?;
        Ok(out.pop().expect("one item"))
    }

    /// Joint predictions for several (episode, context) pairs, one RNG
    /// stream per item. Each item's result is independent of the others.
    pub fn predict_batch(
        &self,
        items: &[(&[f64], &ConditioningContext)],
        temperature: f64,
        rngs: &mut [Rng],
    ) -> Result<Vec<RoundOutput>> {
        if rngs.len() != items.len() {
            return Err(Error::Precondition(format!("{} items but {} rng streams", items.len(), rngs.len())));
        }
        if items.is_empty() {
            return Ok(Vec::new());
        }
        let mode = Decoding::from_temperature(temperature)?;
        let src = self.source(items)?;
        let probs = self.classify_source(&src);
        let decoded = self.decode_source(&src, &vec![mode; items.len()], rngs);
        Ok(probs
            .into_iter()
            .zip(decoded)
            .map(|(p, (toks, dists))| RoundOutput::new(p, toks, dists))
            .collect())
    }
}

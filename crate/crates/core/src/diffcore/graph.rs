use std::ops::Range;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::Rng;

use super::kernels::{self, AttnSegment};
use super::{ParamId, ParamStore, Tensor};

pub(crate) const PROB_FLOOR: f64 = 1e-12;

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        means: Vec<f64>,
        rstds: Vec<f64>,
    },
    Softmax(Var),
    Sigmoid(Var),
    Dropout(Var, Vec<f64>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    MeanPool(Var, Vec<Range<usize>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttnSegment>,
        heads: usize,
        probs: Vec<f64>,
    },
    Sum(Var),
    Bce {
        p: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
    Nll {
        probs: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Tape recording one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn t(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.t(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = rows_cols(self.t(a));
        let (k2, m) = rows_cols(self.t(b));
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{n}x{k}] . [{k2}x{m}]")));
        }
        let out = kernels::matmul(self.t(a).data(), self.t(b).data(), n, k, m);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b)))
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = rows_cols(self.t(x));
        if self.t(bias).len() != c {
            return Err(Error::shape(
                "add_row",
                format!("[{n}x{c}] + bias of {}", self.t(bias).len()),
            ));
        }
        let mut out = self.t(x).data().to_vec();
        kernels::add_row_bias(&mut out, self.t(bias).data());
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::AddRow(x, bias)))
    }

    /// `x·W + b`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.t(a).shape() != self.t(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} + {:?}", self.t(a).shape(), self.t(b).shape()),
            ));
        }
        let data = self
            .t(a)
            .data()
            .iter()
            .zip(self.t(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.t(a).shape().to_vec();
        Ok(self.push(Tensor::new(shape, data)?, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.t(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Scale(x, s))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let t = self.t(x);
        let data = t.data().iter().map(|&v| kernels::gelu(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.t(x);
        let data = t.data().iter().map(|&v| kernels::sigmoid(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Sigmoid(x))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.t(x);
        let data = kernels::softmax_rows(t.data(), t.cols());
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Softmax(x))
    }

    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c) = rows_cols(self.t(x));
        if self.t(gamma).len() != c || self.t(beta).len() != c {
            return Err(Error::shape(
                "layernorm",
                format!("[{n}x{c}] with gain {} / bias {}", self.t(gamma).len(), self.t(beta).len()),
            ));
        }
        let (y, means, rstds) =
            kernels::layernorm(self.t(x).data(), self.t(gamma).data(), self.t(beta).data());
        Ok(self.push(
            Tensor::matrix(n, c, y)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                means,
                rstds,
            },
        ))
    }

    /// Inverted dropout; identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let t = self.t(x);
        let mask: Vec<f64> = (0..t.len())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
            .collect();
        let data = t.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        self.push(value, Op::Dropout(x, mask))
    }

    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let (n, c) = rows_cols(self.t(x));
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("row {bad} of {n}")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let src = self.t(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(Tensor::matrix(idx.len(), c, out)?, Op::GatherRows(x, idx)))
    }

    /// Embedding lookup: rows of `table` selected by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let size = self.t(table).rows();
        if let Some(&id) = ids.iter().find(|&&i| i >= size) {
            return Err(Error::TokenOutOfRange { id, size });
        }
        self.gather_rows(table, ids.to_vec())
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.t(parts[0]).cols();
        let mut out = Vec::new();
        for &p in parts {
            if self.t(p).cols() != c {
                return Err(Error::shape("concat_rows", format!("{} vs {c} columns", self.t(p).cols())));
            }
            out.extend_from_slice(self.t(p).data());
        }
        let rows = out.len() / c;
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::ConcatRows(parts.to_vec())))
    }

    /// Mean over each row range; one output row per segment.
    pub fn mean_pool(&mut self, x: Var, segments: Vec<Range<usize>>) -> Result<Var> {
        let (n, c) = rows_cols(self.t(x));
        let src = self.t(x).data();
        let mut out = vec![0.0; segments.len() * c];
        for (s, seg) in segments.iter().enumerate() {
            if seg.is_empty() || seg.end > n {
                return Err(Error::shape("mean_pool", format!("segment {seg:?} of {n} rows")));
            }
            let inv = 1.0 / seg.len() as f64;
            for r in seg.clone() {
                for j in 0..c {
                    out[s * c + j] += src[r * c + j] * inv;
                }
            }
        }
        let rows = segments.len();
        Ok(self.push(Tensor::matrix(rows, c, out)?, Op::MeanPool(x, segments)))
    }

    /// Segmented multi-head scaled dot-product attention; `q`, `k` and `v`
    /// are already projected.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<AttnSegment>,
        heads: usize,
    ) -> Result<Var> {
        let (nq, d) = rows_cols(self.t(q));
        let (nk, dk) = rows_cols(self.t(k));
        let (nv, dv) = rows_cols(self.t(v));
        if d != dk || d != dv || nk != nv || heads == 0 || d % heads != 0 {
            return Err(Error::shape(
                "attention",
                format!("q [{nq}x{d}], k [{nk}x{dk}], v [{nv}x{dv}], heads {heads}"),
            ));
        }
        for s in &segments {
            if s.q.end > nq || s.k.end > nk || s.k.is_empty() || (s.causal && s.k.len() < s.q.len()) {
                return Err(Error::shape("attention", format!("bad segment {s:?}")));
            }
        }
        let (out, probs) = kernels::attention(
            self.t(q).data(),
            self.t(k).data(),
            self.t(v).data(),
            d,
            &segments,
            heads,
        );
        Ok(self.push(
            Tensor::matrix(nq, d, out)?,
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            },
        ))
    }

    /// Single-segment, non-causal attention of every query over all keys.
    pub fn cross_attention(&mut self, query: Var, keys: Var, values: Var, heads: usize) -> Result<Var> {
        let nq = self.t(query).rows();
        let nk = self.t(keys).rows();
        self.attention(query, keys, values, vec![AttnSegment::full(0..nq, 0..nk)], heads)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.t(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Weighted binary cross-entropy `Σ wᵢ·bce(pᵢ, yᵢ)` with probabilities
    /// clamped to `[1e-12, 1 - 1e-12]`.
    pub fn bce(&mut self, p: Var, targets: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.t(p).len();
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "bce",
                format!("{n} probabilities, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        let loss = self
            .t(p)
            .data()
            .iter()
            .zip(targets)
            .zip(weights)
            .map(|((&p, &y), &w)| w * super::losses::bce(p, y))
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Weighted negative log-likelihood `Σ w_r·(−ln probs[r, target_r])`.
    pub fn nll(&mut self, probs: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (n, v) = rows_cols(self.t(probs));
        if targets.len() != n || weights.len() != n {
            return Err(Error::shape(
                "nll",
                format!("{n} rows, {} targets, {} weights", targets.len(), weights.len()),
            ));
        }
        if let Some(&id) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::TokenOutOfRange { id, size: v });
        }
        let data = self.t(probs).data();
        let loss = targets
            .iter()
            .zip(weights)
            .enumerate()
            .map(|(r, (&t, &w))| -w * data[r * v + t].max(PROB_FLOOR).ln())
            .sum();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Nll {
                probs,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Backward(format!(
                "node {} was never produced by a forward pass",
                loss.0
            )));
        };
        if node.value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        fn acc<'a>(grads: &'a mut [Option<Vec<f64>>], v: Var, len: usize) -> &'a mut [f64] {
            grads[v.0].get_or_insert_with(|| vec![0.0; len])
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (n, k) = rows_cols(self.t(*a));
                    let m = self.t(*b).cols();
                    let da = acc(&mut grads, *a, n * k);
                    kernels::matmul_grad_a(&g, self.t(*b).data(), n, k, m, da);
                    let db = acc(&mut grads, *b, k * m);
                    kernels::matmul_grad_b(self.t(*a).data(), &g, n, k, m, db);
                }
                Op::AddRow(x, b) => {
                    let c = self.t(*b).len();
                    let dx = acc(&mut grads, *x, g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi);
                    let db = acc(&mut grads, *b, c);
                    for row in g.chunks_exact(c) {
                        db.iter_mut().zip(row).for_each(|(d, gi)| *d += gi);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        let d = acc(&mut grads, *v, g.len());
                        d.iter_mut().zip(&g).for_each(|(d, gi)| *d += gi);
                    }
                }
                Op::Scale(x, s) => {
                    let dx = acc(&mut grads, *x, g.len());
                    dx.iter_mut().zip(&g).for_each(|(d, gi)| *d += s * gi);
                }
                Op::Gelu(x) => {
                    let xs = self.t(*x).data();
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, gi), &xv) in dx.iter_mut().zip(&g).zip(xs) {
                        *d += gi * kernels::gelu_grad(xv);
                    }
                }
                Op::Sigmoid(x) => {
                    let ys = node.value.data();
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, gi), &y) in dx.iter_mut().zip(&g).zip(ys) {
                        *d += gi * y * (1.0 - y);
                    }
                }
                Op::Softmax(x) => {
                    let c = node.value.cols();
                    let ys = node.value.data();
                    let dx = acc(&mut grads, *x, g.len());
                    for ((dr, gr), yr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(ys.chunks_exact(c)) {
                        let inner = kernels::dot(gr, yr);
                        for j in 0..c {
                            dr[j] += yr[j] * (gr[j] - inner);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    means,
                    rstds,
                } => {
                    let c = self.t(*gamma).len();
                    let mut dx = vec![0.0; g.len()];
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    kernels::layernorm_backward(
                        self.t(*x).data(),
                        self.t(*gamma).data(),
                        means,
                        rstds,
                        &g,
                        &mut dx,
                        &mut dgamma,
                        &mut dbeta,
                    );
                    for (v, d) in [(*x, dx), (*gamma, dgamma), (*beta, dbeta)] {
                        let t = acc(&mut grads, v, d.len());
                        t.iter_mut().zip(&d).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Dropout(x, mask) => {
                    let dx = acc(&mut grads, *x, g.len());
                    for ((d, gi), m) in dx.iter_mut().zip(&g).zip(mask) {
                        *d += gi * m;
                    }
                }
                Op::GatherRows(x, idx) => {
                    let c = node.value.cols();
                    let len = self.t(*x).len();
                    let dx = acc(&mut grads, *x, len);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            dx[src * c + j] += g[r * c + j];
                        }
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.t(*p).len();
                        let d = acc(&mut grads, *p, len);
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(a, b)| *a += b);
                        off += len;
                    }
                }
                Op::MeanPool(x, segments) => {
                    let c = node.value.cols();
                    let len = self.t(*x).len();
                    let dx = acc(&mut grads, *x, len);
                    for (s, seg) in segments.iter().enumerate() {
                        let inv = 1.0 / seg.len() as f64;
                        for r in seg.clone() {
                            for j in 0..c {
                                dx[r * c + j] += g[s * c + j] * inv;
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    segments,
                    heads,
                    probs,
                } => {
                    let d = self.t(*q).cols();
                    let mut dq = vec![0.0; self.t(*q).len()];
                    let mut dk = vec![0.0; self.t(*k).len()];
                    let mut dv = vec![0.0; self.t(*v).len()];
                    kernels::attention_backward(
                        self.t(*q).data(),
                        self.t(*k).data(),
                        self.t(*v).data(),
                        d,
                        segments,
                        *heads,
                        probs,
                        &g,
                        &mut dq,
                        &mut dk,
                        &mut dv,
                    );
                    for (var, dd) in [(*q, dq), (*k, dk), (*v, dv)] {
                        let t = acc(&mut grads, var, dd.len());
                        t.iter_mut().zip(&dd).for_each(|(a, b)| *a += b);
                    }
                }
                Op::Sum(x) => {
                    let len = self.t(*x).len();
                    let dx = acc(&mut grads, *x, len);
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
                Op::Bce { p, targets, weights } => {
                    let ps = self.t(*p).data();
                    let dp = acc(&mut grads, *p, ps.len());
                    for (i, d) in dp.iter_mut().enumerate() {
                        *d += g[0] * weights[i] * super::losses::bce_grad(ps[i], targets[i]);
                    }
                }
                Op::Nll {
                    probs,
                    targets,
                    weights,
                } => {
                    let v = self.t(*probs).cols();
                    let ps = self.t(*probs).data();
                    let dp = acc(&mut grads, *probs, ps.len());
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let p = ps[r * v + t];
                        if p > PROB_FLOOR {
                            dp[r * v + t] -= g[0] * w / p;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        let params = self
            .nodes
            .iter()
            .enumerate()
            .take(loss.0 + 1)
            .filter_map(|(i, n)| match n.op {
                Op::Param(id) => Some((i, id)),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(usize, ParamId)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, or `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(node, id) in &self.params {
            if let Some(g) = &self.grads[node] {
                store
                    .grad_mut(id)
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, b)| *a += b);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(g: &mut Graph, rows: usize, cols: usize, data: &[f64]) -> Var {
        g.constant(Tensor::matrix(rows, cols, data.to_vec()).unwrap())
    }

    #[test]
    fn linear_sum_gradient_is_input() {
        // loss = sum(x·W) ⇒ dW[p][j] = Σ_i x[i][p]
        let mut g = Graph::new();
        let x = leaf(&mut g, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = leaf(&mut g, 3, 2, &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let y = g.matmul(x, w).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn zero_weight_branch_has_zero_gradient() {
        let mut g = Graph::new();
        let x = leaf(&mut g, 1, 2, &[1.5, -0.5]);
        let w = leaf(&mut g, 2, 1, &[0.0, 0.0]);
        let a = g.matmul(x, w).unwrap();
        let h = g.gelu(a);
        let loss = g.sum(h);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = leaf(&mut g, 1, 2, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(Error::Backward(_))));
    }

    #[test]
    fn backward_before_forward_rejected() {
        let g = Graph::new();
        assert!(matches!(g.backward(Var(0)), Err(Error::Backward(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = leaf(&mut g, 1, 2, &[1.0, 2.0]);
        let b = leaf(&mut g, 3, 1, &[1.0, 2.0, 3.0]);
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("1x2"), "{err}");
    }

    #[test]
    fn cross_attention_single_key_returns_value() {
        let mut g = Graph::new();
        let q = leaf(&mut g, 3, 4, &[0.3, -1.0, 2.0, 0.1, 5.0, 5.0, -5.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let k = leaf(&mut g, 1, 4, &[0.7, 0.2, -0.4, 1.1]);
        let v = leaf(&mut g, 1, 4, &[1.0, -2.0, 3.0, 0.5]);
        let out = g.cross_attention(q, k, v, 2).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(out).row(r), &[1.0, -2.0, 3.0, 0.5]);
        }
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = leaf(&mut g, 1, 2, &[0.0, 0.0]);
        let s = g.softmax(x);
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);
        let z = g.constant(Tensor::scalar(0.0));
        let p = g.sigmoid(z);
        assert_eq!(g.value(p).data(), &[0.5]);
    }
}

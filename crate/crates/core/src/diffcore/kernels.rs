//! Forward and backward kernels on raw row-major slices.
//!
//! Every kernel processes rows independently with a fixed summation order,
//! so the value computed for one row never depends on which other rows
//! share the batch.

use std::ops::Range;

pub const LAYERNORM_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ta.iter().zip(tb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `a[n×k] · b[k×m]`.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    gemm(n, k, m, a, (k, 1), b, (m, 1), &mut out, 0.0);
    out
}

/// `c[n×m] = beta·c + a·b` with explicit (row, column) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(n: usize, k: usize, m: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), c: &mut [f64], beta: f64) {
    if n == 0 || m == 0 {
        return;
    }
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    // SAFETY: the asserted lengths cover every index addressed by the strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `da[n×k] += dc[n×m] · bᵀ`.
pub fn matmul_grad_a(dc: &[f64], b: &[f64], n: usize, k: usize, m: usize, da: &mut [f64]) {
    gemm(n, m, k, dc, (m, 1), b, (1, m), da, 1.0);
}

/// `db[k×m] += aᵀ · dc[n×m]`.
pub fn matmul_grad_b(a: &[f64], dc: &[f64], n: usize, k: usize, m: usize, db: &mut [f64]) {
    gemm(k, n, m, a, (1, k), dc, (m, 1), db, 1.0);
}

pub fn add_row_bias(x: &mut [f64], bias: &[f64]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Dense layer `x·W + b` for `rows` rows.
pub fn dense(x: &[f64], w: &[f64], b: &[f64], rows: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut y = matmul(x, w, rows, inp, out);
    add_row_bias(&mut y, b);
    y
}

#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn gelu_inplace(x: &mut [f64]) {
    for v in x {
        *v = gelu(*v);
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise layer normalisation. Returns the output plus the per-row mean
/// and reciprocal standard deviation needed for the backward pass.
pub fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let c = gamma.len();
    let rows = x.len() / c;
    let mut y = vec![0.0; x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = &x[r * c..(r + 1) * c];
        let mean = xr.iter().sum::<f64>() / c as f64;
        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let rstd = 1.0 / (var + LAYERNORM_EPS).sqrt();
        let yr = &mut y[r * c..(r + 1) * c];
        for j in 0..c {
            yr[j] = (xr[j] - mean) * rstd * gamma[j] + beta[j];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (y, means, rstds)
}

pub fn layernorm_backward(
    x: &[f64],
    gamma: &[f64],
    means: &[f64],
    rstds: &[f64],
    dy: &[f64],
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let c = gamma.len();
    let mut xhat = vec![0.0; c];
    let mut dxhat = vec![0.0; c];
    for (r, (&mean, &rstd)) in means.iter().zip(rstds).enumerate() {
        let xr = &x[r * c..(r + 1) * c];
        let dyr = &dy[r * c..(r + 1) * c];
        for j in 0..c {
            xhat[j] = (xr[j] - mean) * rstd;
            dxhat[j] = dyr[j] * gamma[j];
            dgamma[j] += dyr[j] * xhat[j];
            dbeta[j] += dyr[j];
        }
        let m1 = dxhat.iter().sum::<f64>() / c as f64;
        let m2 = dot(&dxhat, &xhat) / c as f64;
        let dxr = &mut dx[r * c..(r + 1) * c];
        for j in 0..c {
            dxr[j] += rstd * (dxhat[j] - m1 - xhat[j] * m2);
        }
    }
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_inplace(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for row in y.chunks_exact_mut(cols) {
        softmax_inplace(row);
    }
    y
}

/// One attention segment: a block of query rows attending to a block of
/// key/value rows. When `causal`, local query `i` sees local keys
/// `0..=i + (k.len() - q.len())`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnSegment {
    pub q: Range<usize>,
    pub k: Range<usize>,
    pub causal: bool,
}

impl AttnSegment {
    pub fn full(q: Range<usize>, k: Range<usize>) -> Self {
        Self {
            q,
            k,
            causal: false,
        }
    }

    pub fn causal(q: Range<usize>, k: Range<usize>) -> Self {
        Self { q, k, causal: true }
    }

    fn visible(&self, i: usize) -> usize {
        if self.causal {
            (i + 1 + self.k.len() - self.q.len()).min(self.k.len())
        } else {
            self.k.len()
        }
    }

    fn probs_len(&self) -> usize {
        self.q.len() * self.k.len()
    }
}

/// Multi-head scaled dot-product attention over segments. Heads split the
/// `d` columns evenly. Returns the output and the attention probabilities
/// (segment-major, then head, then query row, then key).
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    segments: &[AttnSegment],
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let nq = q.len() / d;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; nq * d];
    let total: usize = segments.iter().map(|s| s.probs_len() * heads).sum();
    let mut probs = vec![0.0; total];
    let mut off = 0;
    for seg in segments {
        let kl = seg.k.len();
        for h in 0..heads {
            let c0 = h * dh;
            for (i, qi) in seg.q.clone().enumerate() {
                let vis = seg.visible(i);
                let prow = &mut probs[off + i * kl..off + i * kl + vis];
                let qrow = &q[qi * d + c0..qi * d + c0 + dh];
                for (j, p) in prow.iter_mut().enumerate() {
                    let kj = seg.k.start + j;
                    *p = dot(qrow, &k[kj * d + c0..kj * d + c0 + dh]) * scale;
                }
                softmax_inplace(prow);
                let orow = &mut out[qi * d + c0..qi * d + c0 + dh];
                for (j, &p) in prow.iter().enumerate() {
                    let vj = seg.k.start + j;
                    axpy(p, &v[vj * d + c0..vj * d + c0 + dh], orow);
                }
            }
            off += seg.probs_len();
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    segments: &[AttnSegment],
    heads: usize,
    probs: &[f64],
    dout: &[f64],
    dq: &mut [f64],
    dk: &mut [f64],
    dv: &mut [f64],
) {
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut off = 0;
    let mut dp = Vec::new();
    for seg in segments {
        let kl = seg.k.len();
        for h in 0..heads {
            let c0 = h * dh;
            for (i, qi) in seg.q.clone().enumerate() {
                let vis = seg.visible(i);
                let prow = &probs[off + i * kl..off + i * kl + vis];
                let dorow = &dout[qi * d + c0..qi * d + c0 + dh];
                dp.clear();
                for (j, &p) in prow.iter().enumerate() {
                    let vj = seg.k.start + j;
                    dp.push(dot(dorow, &v[vj * d + c0..vj * d + c0 + dh]));
                    axpy(p, dorow, &mut dv[vj * d + c0..vj * d + c0 + dh]);
                }
                let inner = dot(prow, &dp);
                for (j, &p) in prow.iter().enumerate() {
                    let ds = p * (dp[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = seg.k.start + j;
                    axpy(ds, &k[kj * d + c0..kj * d + c0 + dh], &mut dq[qi * d + c0..qi * d + c0 + dh]);
                    axpy(ds, &q[qi * d + c0..qi * d + c0 + dh], &mut dk[kj * d + c0..kj * d + c0 + dh]);
                }
            }
            off += seg.probs_len();
        }
    }
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| x * x.ln())
        .sum::<f64>()
}

/// Entropy of a Bernoulli variable with success probability `p`.
pub fn bernoulli_entropy(p: f64) -> f64 {
    entropy(&[p, 1.0 - p])
}

//! Plain slice kernels shared by the tape ops and the cached inference path.

use std::ops::Range;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `c = op(a) · op(b) + beta · c` for row-major buffers.
///
/// `op(a)` is `m×k` and `op(b)` is `k×n`. With `trans_a` the buffer `a` holds
/// a `k×m` matrix; with `trans_b` the buffer `b` holds an `n×k` matrix.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the assertion above guarantees every strided access stays
    // inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major product of an `m×k` and a `k×n` matrix.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    gemm(a, b, &mut out, m, k, n, false, false, 0.0);
    out
}

pub fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        xs.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    let mut total = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in xs.iter_mut() {
        *x /= total;
    }
}

pub fn log_softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in xs.iter_mut() {
        *x -= lse;
    }
}

/// Layer normalization of one row. Returns the inverse standard deviation
/// and writes the normalized (pre-gain) values into `normed`.
pub fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64], out: &mut [f64], normed: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv_std = 1.0 / (var + LAYER_NORM_EPS).sqrt();
    for i in 0..x.len() {
        normed[i] = (x[i] - mean) * inv_std;
        out[i] = normed[i] * gain[i] + bias[i];
    }
    inv_std
}

pub fn layer_norm_rows(x: &[f64], cols: usize, gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    let mut scratch = vec![0.0; cols];
    for (xr, or) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        layer_norm_row(xr, gain, bias, or, &mut scratch);
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// One attention group: a contiguous block of query rows attending over an
/// arbitrary list of key/value rows.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGroup {
    pub queries: Range<usize>,
    pub keys: Vec<usize>,
    /// Query `i` of the group only sees `keys[..=i]`.
    pub causal: bool,
}

impl AttentionGroup {
    pub fn visible(&self, query_offset: usize) -> usize {
        if self.causal {
            (query_offset + 1).min(self.keys.len())
        } else {
            self.keys.len()
        }
    }
}

/// How query rows map onto key/value rows for a batched attention call.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionLayout {
    pub groups: Vec<AttentionGroup>,
}

impl AttentionLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, queries: Range<usize>, keys: Vec<usize>, causal: bool) {
        self.groups.push(AttentionGroup { queries, keys, causal });
    }

    /// Per-example self-attention over row segments.
    pub fn self_attention(segments: &[Range<usize>], causal: bool) -> Self {
        let groups = segments
            .iter()
            .map(|s| AttentionGroup {
                queries: s.clone(),
                keys: s.clone().collect(),
                causal,
            })
            .collect();
        Self { groups }
    }

    /// Number of stored attention probabilities for `heads` heads.
    pub fn prob_len(&self, heads: usize) -> usize {
        self.groups
            .iter()
            .map(|g| g.queries.len() * g.keys.len() * heads)
            .sum()
    }
}

/// Scaled dot-product attention with `heads` heads over column slices of
/// `q`, `k`, `v` (all with `d` columns). Writes the concatenated head outputs
/// into `out` and, when requested, the attention probabilities into `probs`
/// laid out as `[group][query][head][key]`.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    layout: &AttentionLayout,
    out: &mut [f64],
    mut probs: Option<&mut [f64]>,
) {
    let dn = d / heads;
    let scale = 1.0 / (dn as f64).sqrt();
    let mut scores = Vec::new();
    let mut offset = 0;
    for g in &layout.groups {
        let nk = g.keys.len();
        for (qi, row) in g.queries.clone().enumerate() {
            let visible = g.visible(qi);
            for h in 0..heads {
                let cs = h * dn..(h + 1) * dn;
                let qrow = &q[row * d..][cs.clone()];
                scores.clear();
                scores.extend(g.keys[..visible].iter().map(|&kr| {
                    let krow = &k[kr * d..][cs.clone()];
                    dot(qrow, krow) * scale
                }));
                softmax_in_place(&mut scores);
                let orow = &mut out[row * d..][cs.clone()];
                orow.iter_mut().for_each(|o| *o = 0.0);
                for (j, &p) in scores.iter().enumerate() {
                    let vrow = &v[g.keys[j] * d..][cs.clone()];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
                if let Some(pbuf) = probs.as_deref_mut() {
                    let dst = &mut pbuf[offset..offset + nk];
                    dst[..visible].copy_from_slice(&scores);
                    dst[visible..].iter_mut().for_each(|x| *x = 0.0);
                }
                offset += nk;
            }
        }
    }
}

/// Gradients of [`attention_forward`] given the stored probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    layout: &AttentionLayout,
    probs: &[f64],
    grad_out: &[f64],
    grad_q: &mut [f64],
    grad_k: &mut [f64],
    grad_v: &mut [f64],
) {
    let dn = d / heads;
    let scale = 1.0 / (dn as f64).sqrt();
    let mut dp = Vec::new();
    let mut offset = 0;
    for g in &layout.groups {
        let nk = g.keys.len();
        for (qi, row) in g.queries.clone().enumerate() {
            let visible = g.visible(qi);
            for h in 0..heads {
                let cs = h * dn..(h + 1) * dn;
                let p = &probs[offset..offset + visible];
                let go = &grad_out[row * d..][cs.clone()];
                dp.clear();
                dp.extend(g.keys[..visible].iter().map(|&kr| dot(go, &v[kr * d..][cs.clone()])));
                let weighted: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                for j in 0..visible {
                    let kr = g.keys[j];
                    let gv = &mut grad_v[kr * d..][cs.clone()];
                    for (x, &o) in gv.iter_mut().zip(go) {
                        *x += p[j] * o;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds != 0.0 {
                        let krow = &k[kr * d..][cs.clone()];
                        let gq = &mut grad_q[row * d..][cs.clone()];
                        for (x, &kk) in gq.iter_mut().zip(krow) {
                            *x += ds * kk;
                        }
                        let qrow = &q[row * d..][cs.clone()];
                        let gk = &mut grad_k[kr * d..][cs.clone()];
                        for (x, &qq) in gk.iter_mut().zip(qrow) {
                            *x += ds * qq;
                        }
                    }
                }
                offset += nk;
            }
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

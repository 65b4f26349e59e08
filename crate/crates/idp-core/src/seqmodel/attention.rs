//! Stacked causal self-attention blocks.
//!
//! Per layer: A = LayerNorm(H + Dropout(MH(H))), H' = LayerNorm(A +
//! Dropout(PFFN(A))). Multi-head scaled dot-product attention with a
//! causal mask (position i attends to j <= i); the position-wise
//! feed-forward network is GELU(x W1 + b1) W2 + b2 with hidden width d.
//! Heads live in column blocks of the shared d x d projection matrices.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::ckpt::Checkpoint;
use crate::error::Result;
use crate::linalg::{dot, gelu, gelu_grad, Matrix};

use super::LAYER_NORM_EPS;

#[derive(Clone, Debug, PartialEq)]
pub struct AttnLayer {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
}

impl AttnLayer {
    pub const FIELDS: [&'static str; 12] = [
        "wq", "wk", "wv", "wo", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2", "ln1_gain", "ln1_bias",
        "ln2_gain", "ln2_bias",
    ];

    pub fn init(d: usize, std: f64, rng: &mut ChaCha20Rng) -> Self {
        AttnLayer {
            wq: Matrix::randn(d, d, std, rng),
            wk: Matrix::randn(d, d, std, rng),
            wv: Matrix::randn(d, d, std, rng),
            wo: Matrix::randn(d, d, std, rng),
            ffn_w1: Matrix::randn(d, d, std, rng),
            ffn_b1: Matrix::zeros(1, d),
            ffn_w2: Matrix::randn(d, d, std, rng),
            ffn_b2: Matrix::zeros(1, d),
            ln1_gain: Matrix::filled(1, d, 1.0),
            ln1_bias: Matrix::zeros(1, d),
            ln2_gain: Matrix::filled(1, d, 1.0),
            ln2_bias: Matrix::zeros(1, d),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        vec![
            &self.wq,
            &self.wk,
            &self.wv,
            &self.wo,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.ln1_gain,
            &self.ln1_bias,
            &self.ln2_gain,
            &self.ln2_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }

    pub fn from_checkpoint(ck: &Checkpoint, layer: usize, d: usize) -> Result<Self> {
        let get = |field: &str, rows: usize, cols: usize| {
            ck.require_matrix(&format!("encoder.l{layer}.{field}"), rows, cols)
        };
        Ok(AttnLayer {
            wq: get("wq", d, d)?,
            wk: get("wk", d, d)?,
            wv: get("wv", d, d)?,
            wo: get("wo", d, d)?,
            ffn_w1: get("ffn_w1", d, d)?,
            ffn_b1: get("ffn_b1", 1, d)?,
            ffn_w2: get("ffn_w2", d, d)?,
            ffn_b2: get("ffn_b2", 1, d)?,
            ln1_gain: get("ln1_gain", 1, d)?,
            ln1_bias: get("ln1_bias", 1, d)?,
            ln2_gain: get("ln2_gain", 1, d)?,
            ln2_bias: get("ln2_bias", 1, d)?,
        })
    }
}

/// LayerNorm cache: normalized inputs and inverse std per row.
struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Matrix, gain: &Matrix, bias: &Matrix) -> (Matrix, LnCache) {
    let (n, d) = x.shape();
    let mut out = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(istd);
        for j in 0..d {
            let h = (row[j] - mean) * istd;
            xhat.set(i, j, h);
            out.set(i, j, gain.get(0, j) * h + bias.get(0, j));
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Backward through LayerNorm. Returns d_input; accumulates gain/bias
/// gradients.
fn layer_norm_backward(
    d_out: &Matrix,
    cache: &LnCache,
    gain: &Matrix,
    d_gain: &mut Matrix,
    d_bias: &mut Matrix,
) -> Matrix {
    let (n, d) = d_out.shape();
    let mut d_in = Matrix::zeros(n, d);
    for i in 0..n {
        let dy = d_out.row(i);
        let xh = cache.xhat.row(i);
        let istd = cache.inv_std[i];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            let dxh = dy[j] * gain.get(0, j);
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
            d_gain.row_mut(0)[j] += dy[j] * xh[j];
            d_bias.row_mut(0)[j] += dy[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let out = d_in.row_mut(i);
        for j in 0..d {
            let dxh = dy[j] * gain.get(0, j);
            out[j] = istd * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
    d_in
}

/// Inverted dropout mask: entries are 0 or 1/(1-p).
fn dropout_mask(n: usize, d: usize, p: f64, rng: &mut ChaCha20Rng) -> Matrix {
    let keep = 1.0 / (1.0 - p);
    let mut m = Matrix::zeros(n, d);
    for v in m.as_mut_slice() {
        *v = if rng.gen::<f64>() < p { 0.0 } else { keep };
    }
    m
}

fn apply_mask(x: &Matrix, mask: Option<&Matrix>) -> Matrix {
    match mask {
        None => x.clone(),
        Some(m) => {
            let mut out = x.clone();
            for (o, k) in out.as_mut_slice().iter_mut().zip(m.as_slice()) {
                *o *= k;
            }
            out
        }
    }
}

struct LayerCache {
    input: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Per head: n x n row-softmaxed causal attention weights.
    attn: Vec<Matrix>,
    concat: Matrix,
    mask1: Option<Matrix>,
    ln1: LnCache,
    a: Matrix,
    ffn_pre: Matrix,
    ffn_act: Matrix,
    mask2: Option<Matrix>,
    ln2: LnCache,
}

pub(crate) struct AttnCache {
    layers: Vec<LayerCache>,
    heads: usize,
}

/// Causal multi-head attention for one layer; returns (concat output,
/// per-head weights). Attention rows are softmaxed over positions <= i.
fn multi_head(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    heads: usize,
) -> (Matrix, Vec<Matrix>) {
    let (n, d) = q.shape();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut concat = Matrix::zeros(n, d);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let c0 = h * dh;
        let mut attn = Matrix::zeros(n, n);
        for i in 0..n {
            // causal scores for j <= i, max-subtracted softmax
            let qi = &q.row(i)[c0..c0 + dh];
            let mut max = f64::NEG_INFINITY;
            let mut scores = Vec::with_capacity(i + 1);
            for j in 0..=i {
                let s = scale * dot(qi, &k.row(j)[c0..c0 + dh]);
                max = max.max(s);
                scores.push(s);
            }
            let mut sum = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s;
            }
            let arow = attn.row_mut(i);
            for (j, s) in scores.iter().enumerate() {
                arow[j] = s / sum;
            }
            // weighted sum of value rows
            let out = &mut concat.row_mut(i)[c0..c0 + dh];
            for j in 0..=i {
                let w = attn.get(i, j);
                let vj = &v.row(j)[c0..c0 + dh];
                for (o, &x) in out.iter_mut().zip(vj) {
                    *o += w * x;
                }
            }
        }
        attns.push(attn);
    }
    (concat, attns)
}

fn ffn_forward(a: &Matrix, layer: &AttnLayer) -> (Matrix, Matrix, Matrix) {
    let (n, d) = a.shape();
    let mut pre = a.matmul(&layer.ffn_w1);
    for i in 0..n {
        let row = pre.row_mut(i);
        for j in 0..d {
            row[j] += layer.ffn_b1.get(0, j);
        }
    }
    let mut act = pre.clone();
    for x in act.as_mut_slice() {
        *x = gelu(*x);
    }
    let mut out = act.matmul(&layer.ffn_w2);
    for i in 0..n {
        let row = out.row_mut(i);
        for j in 0..d {
            row[j] += layer.ffn_b2.get(0, j);
        }
    }
    (pre, act, out)
}

fn layer_forward(
    layer: &AttnLayer,
    input: &Matrix,
    heads: usize,
    dropout: f64,
    rng: Option<&mut ChaCha20Rng>,
) -> (Matrix, LayerCache) {
    let q = input.matmul(&layer.wq);
    let k = input.matmul(&layer.wk);
    let v = input.matmul(&layer.wv);
    let (concat, attn) = multi_head(&q, &k, &v, heads);
    let mh = concat.matmul(&layer.wo);

    let (n, d) = input.shape();
    let (mask1, mask2, _) = match rng {
        Some(r) if dropout > 0.0 => {
            let m1 = dropout_mask(n, d, dropout, r);
            let m2 = dropout_mask(n, d, dropout, r);
            (Some(m1), Some(m2), ())
        }
        _ => (None, None, ()),
    };

    let mh_dropped = apply_mask(&mh, mask1.as_ref());
    let mut r1 = input.clone();
    r1.add_scaled(&mh_dropped, 1.0);
    let (a, ln1) = layer_norm(&r1, &layer.ln1_gain, &layer.ln1_bias);

    let (ffn_pre, ffn_act, ffn_out) = ffn_forward(&a, layer);
    let ffn_dropped = apply_mask(&ffn_out, mask2.as_ref());
    let mut r2 = a.clone();
    r2.add_scaled(&ffn_dropped, 1.0);
    let (out, ln2) = layer_norm(&r2, &layer.ln2_gain, &layer.ln2_bias);

    let cache = LayerCache {
        input: input.clone(),
        q,
        k,
        v,
        attn,
        concat,
        mask1,
        ln1,
        a,
        ffn_pre,
        ffn_act,
        mask2,
        ln2,
    };
    (out, cache)
}

/// Training-mode forward: keeps every intermediate needed by backward.
pub(crate) fn forward_train(
    layers: &[AttnLayer],
    h0: &Matrix,
    heads: usize,
    dropout: f64,
    mut rng: Option<&mut ChaCha20Rng>,
) -> (Matrix, AttnCache) {
    let mut h = h0.clone();
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (next, cache) = layer_forward(layer, &h, heads, dropout, rng.as_deref_mut());
        caches.push(cache);
        h = next;
    }
    (
        h,
        AttnCache {
            layers: caches,
            heads,
        },
    )
}

/// Inference-mode forward: no dropout, no caches.
pub(crate) fn forward_infer(layers: &[AttnLayer], h0: &Matrix, heads: usize) -> Matrix {
    let mut h = h0.clone();
    for layer in layers {
        let (next, _) = layer_forward(layer, &h, heads, 0.0, None);
        h = next;
    }
    h
}

/// Backward through the stack. `d_out` holds dLoss/d(final outputs);
/// gradients accumulate into `grads` (same layout as `layers`). Returns
/// dLoss/d(h0).
pub(crate) fn backward(
    layers: &[AttnLayer],
    cache: &AttnCache,
    d_out: &Matrix,
    grads: &mut [AttnLayer],
) -> Matrix {
    let heads = cache.heads;
    let mut d_next = d_out.clone();
    for (l, layer) in layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let g = &mut grads[l];
        let (n, d) = lc.input.shape();
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // LN2
        let d_r2 = layer_norm_backward(&d_next, &lc.ln2, &layer.ln2_gain, &mut g.ln2_gain, &mut g.ln2_bias);
        // residual: r2 = a + dropout(ffn_out)
        let mut d_a = d_r2.clone();
        let d_ffn_out = apply_mask(&d_r2, lc.mask2.as_ref());

        // FFN backward: out = act * w2 + b2; act = gelu(pre); pre = a * w1 + b1
        for i in 0..n {
            let dout_row = d_ffn_out.row(i);
            for j in 0..d {
                g.ffn_b2.row_mut(0)[j] += dout_row[j];
            }
        }
        // g.ffn_w2 += act^T d_ffn_out ; d_act = d_ffn_out w2^T
        let mut d_act = Matrix::zeros(n, d);
        for i in 0..n {
            let act_row = lc.ffn_act.row(i);
            let dout_row = d_ffn_out.row(i);
            for r in 0..d {
                let a_ir = act_row[r];
                if a_ir != 0.0 {
                    let w2g = g.ffn_w2.row_mut(r);
                    for c in 0..d {
                        w2g[c] += a_ir * dout_row[c];
                    }
                }
                d_act.row_mut(i)[r] = dot(dout_row, layer.ffn_w2.row(r));
            }
        }
        // through gelu
        let mut d_pre = d_act;
        for (dp, &pre) in d_pre.as_mut_slice().iter_mut().zip(lc.ffn_pre.as_slice()) {
            *dp *= gelu_grad(pre);
        }
        // pre = a w1 + b1
        for i in 0..n {
            let dpre_row = d_pre.row(i);
            let a_row = lc.a.row(i);
            for j in 0..d {
                g.ffn_b1.row_mut(0)[j] += dpre_row[j];
            }
            for r in 0..d {
                let a_ir = a_row[r];
                let w1g = g.ffn_w1.row_mut(r);
                for c in 0..d {
                    w1g[c] += a_ir * dpre_row[c];
                }
                d_a.row_mut(i)[r] += dot(dpre_row, layer.ffn_w1.row(r));
            }
        }

        // LN1
        let d_r1 = layer_norm_backward(&d_a, &lc.ln1, &layer.ln1_gain, &mut g.ln1_gain, &mut g.ln1_bias);
        // residual: r1 = input + dropout(mh)
        let mut d_input = d_r1.clone();
        let d_mh = apply_mask(&d_r1, lc.mask1.as_ref());

        // mh = concat * wo
        let mut d_concat = Matrix::zeros(n, d);
        for i in 0..n {
            let dmh_row = d_mh.row(i);
            let concat_row = lc.concat.row(i);
            for r in 0..d {
                let c_ir = concat_row[r];
                let wog = g.wo.row_mut(r);
                for c in 0..d {
                    wog[c] += c_ir * dmh_row[c];
                }
                d_concat.row_mut(i)[r] = dot(dmh_row, layer.wo.row(r));
            }
        }

        // attention heads
        let mut d_q = Matrix::zeros(n, d);
        let mut d_k = Matrix::zeros(n, d);
        let mut d_v = Matrix::zeros(n, d);
        for h in 0..heads {
            let c0 = h * dh;
            let attn = &cache.layers[l].attn[h];
            for i in 0..n {
                let d_o = &d_concat.row(i)[c0..c0 + dh];
                // d_attn and softmax backward over j <= i
                let mut d_attn = vec![0.0; i + 1];
                for (j, da) in d_attn.iter_mut().enumerate() {
                    *da = dot(d_o, &lc.v.row(j)[c0..c0 + dh]);
                }
                // d_v
                for j in 0..=i {
                    let w = attn.get(i, j);
                    if w != 0.0 {
                        let dvj = &mut d_v.row_mut(j)[c0..c0 + dh];
                        for (dv, &x) in dvj.iter_mut().zip(d_o) {
                            *dv += w * x;
                        }
                    }
                }
                let row_dot: f64 = (0..=i).map(|j| attn.get(i, j) * d_attn[j]).sum();
                // d_scores -> d_q, d_k
                let qi: Vec<f64> = q_slice(&lc.q, i, c0, dh);
                for j in 0..=i {
                    let ds = attn.get(i, j) * (d_attn[j] - row_dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.k.row(j)[c0..c0 + dh];
                    let dqi = &mut d_q.row_mut(i)[c0..c0 + dh];
                    for (dq, &x) in dqi.iter_mut().zip(kj) {
                        *dq += ds * x;
                    }
                    let dkj = &mut d_k.row_mut(j)[c0..c0 + dh];
                    for (dk, &x) in dkj.iter_mut().zip(&qi) {
                        *dk += ds * x;
                    }
                }
            }
        }

        // q = input wq etc.
        accumulate_linear(&lc.input, &d_q, layer, &layer.wq, &mut g.wq, &mut d_input);
        accumulate_linear(&lc.input, &d_k, layer, &layer.wk, &mut g.wk, &mut d_input);
        accumulate_linear(&lc.input, &d_v, layer, &layer.wv, &mut g.wv, &mut d_input);

        d_next = d_input;
    }
    d_next
}

fn q_slice(q: &Matrix, i: usize, c0: usize, dh: usize) -> Vec<f64> {
    q.row(i)[c0..c0 + dh].to_vec()
}

/// For y = x * w: accumulate dW += x^T dy and d_x += dy w^T.
fn accumulate_linear(
    x: &Matrix,
    dy: &Matrix,
    _layer: &AttnLayer,
    w: &Matrix,
    dw: &mut Matrix,
    dx: &mut Matrix,
) {
    let (n, d) = x.shape();
    for i in 0..n {
        let dy_row = dy.row(i);
        let x_row = x.row(i);
        for r in 0..d {
            let x_ir = x_row[r];
            if x_ir != 0.0 {
                let dw_row = dw.row_mut(r);
                for c in 0..d {
                    dw_row[c] += x_ir * dy_row[c];
                }
            }
            dx.row_mut(i)[r] += dot(dy_row, w.row(r));
        }
    }
}

//! Forward pass recording every intermediate the backward pass needs.

use super::ModelParams;
use crate::error::{Error, Result};
use crate::tensor::{mm, mm_a_bt, Element, Tensor};

pub(crate) const LN_EPS: f64 = 1e-5;

pub(crate) fn gelu<T: Element>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let u = c * (x + k * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

pub(crate) fn gelu_prime<T: Element>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let k = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let u = c * (x + k * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

/// Per-row LayerNorm statistics plus the normalized-and-affine output.
#[derive(Debug, Clone)]
pub(crate) struct LnCache<T> {
    pub mean: Vec<T>,
    pub invstd: Vec<T>,
    pub out: Vec<T>,
}

pub(crate) fn layer_norm<T: Element>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    rows: usize,
    d: usize,
) -> LnCache<T> {
    let mut out = vec![T::zero(); rows * d];
    let mut mean = vec![T::zero(); rows];
    let mut invstd = vec![T::zero(); rows];
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let mut mu = T::zero();
        for &v in xr {
            mu += v;
        }
        mu = mu * inv_d;
        let mut var = T::zero();
        for &v in xr {
            let c = v - mu;
            var += c * c;
        }
        var = var * inv_d;
        let inv = (var + eps).sqrt().recip();
        let o = &mut out[r * d..(r + 1) * d];
        for j in 0..d {
            o[j] = (xr[j] - mu) * inv * gamma[j] + beta[j];
        }
        mean[r] = mu;
        invstd[r] = inv;
    }
    LnCache { mean, invstd, out }
}

/// `out[r, :] = x[r, :]·W + b` for `W: din×dout`.
pub(crate) fn linear<T: Element>(
    out: &mut [T],
    x: &[T],
    w: &[T],
    b: &[T],
    rows: usize,
    din: usize,
    dout: usize,
) {
    mm(out, x, w, rows, din, dout, false);
    for r in 0..rows {
        let o = &mut out[r * dout..(r + 1) * dout];
        for (oj, &bj) in o.iter_mut().zip(b) {
            *oj += bj;
        }
    }
}

/// `(B, L, h·hd)` row-major to head-major `(B, h, L, hd)`.
pub(crate) fn split_heads<T: Copy>(
    src: &[T],
    dst: &mut [T],
    batch: usize,
    len: usize,
    heads: usize,
    hd: usize,
) {
    let d = heads * hd;
    for b in 0..batch {
        for t in 0..len {
            for h in 0..heads {
                let s = (b * len + t) * d + h * hd;
                let o = ((b * heads + h) * len + t) * hd;
                dst[o..o + hd].copy_from_slice(&src[s..s + hd]);
            }
        }
    }
}

/// Inverse of [`split_heads`].
pub(crate) fn merge_heads<T: Copy>(
    src: &[T],
    dst: &mut [T],
    batch: usize,
    len: usize,
    heads: usize,
    hd: usize,
) {
    let d = heads * hd;
    for b in 0..batch {
        for t in 0..len {
            for h in 0..heads {
                let s = ((b * heads + h) * len + t) * hd;
                let o = (b * len + t) * d + h * hd;
                dst[o..o + hd].copy_from_slice(&src[s..s + hd]);
            }
        }
    }
}

/// Intermediates of one transformer block.
pub(crate) struct LayerTrace<T> {
    /// Block input `(B, L, d)`.
    pub x_in: Vec<T>,
    pub ln1: LnCache<T>,
    /// Head-major projections `(B, h, L, hd)`.
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Attention weights `(B, h, L, L)`; rows past the causal frontier are 0.
    pub probs: Vec<T>,
    /// Merged attention context `(B, L, d)`, the input of the W_o matmul.
    pub ctx: Vec<T>,
    /// After the attention residual.
    pub x_mid: Vec<T>,
    pub ln2: LnCache<T>,
    /// Feed-forward pre-activation `(B, L, ffn)`.
    pub ff_pre: Vec<T>,
    /// GELU output `(B, L, ffn)`.
    pub ff_act: Vec<T>,
}

/// Everything the backward pass needs, plus the logits.
pub struct ForwardTrace<T> {
    pub(crate) batch: usize,
    pub(crate) len: usize,
    pub(crate) layers: Vec<LayerTrace<T>>,
    /// Output of the last block.
    pub(crate) x_last: Vec<T>,
    pub(crate) ln_f: LnCache<T>,
    pub logits: Tensor<T>,
}

/// Runs the model over already-embedded (and optionally noised) inputs.
/// Positional embeddings are added here, so noise applies to token
/// embeddings only. Causal: position `t` attends to positions `≤ t` only.
///
/// Padding rows are computed like any other position; causality keeps them
/// out of every real position's receptive field because padding sits at the
/// end of each sequence, and the loss mask drops their predictions.
pub fn forward<T: Element>(
    params: &ModelParams<T>,
    x_emb: &Tensor<T>,
    lengths: &[usize],
) -> Result<ForwardTrace<T>> {
    let cfg = &params.config;
    let shape = x_emb.shape();
    if shape.len() != 3 || shape[2] != cfg.embed_dim {
        return Err(Error::ShapeMismatch {
            context: "forward input",
            expected: vec![lengths.len(), cfg.max_seq_len, cfg.embed_dim],
            got: shape.to_vec(),
        });
    }
    let (batch, len, d) = (shape[0], shape[1], shape[2]);
    if batch != lengths.len() {
        return Err(Error::ShapeMismatch {
            context: "forward lengths",
            expected: vec![batch],
            got: vec![lengths.len()],
        });
    }
    if len > cfg.max_seq_len {
        return Err(Error::invalid(format!(
            "sequence length {len} exceeds max_seq_len {}",
            cfg.max_seq_len
        )));
    }
    if lengths.iter().any(|&l| l == 0 || l > len) {
        return Err(Error::invalid("each sequence length must be in 1..=L_max"));
    }

    let rows = batch * len;
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let ffn = cfg.ffn_dim;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());

    // Token embeddings + positional embeddings.
    let mut x0 = x_emb.data().to_vec();
    let pos = params.embed_pos.data();
    for b in 0..batch {
        for t in 0..len {
            let o = (b * len + t) * d;
            for j in 0..d {
                x0[o + j] += pos[t * d + j];
            }
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut x = x0;
    let mut qkv_flat = vec![T::zero(); rows * d];
    for layer in &params.layers {
        let x_in = x;
        let ln1 = layer_norm(&x_in, layer.ln1_gamma.data(), layer.ln1_beta.data(), rows, d);

        let mut q = vec![T::zero(); rows * d];
        let mut k = vec![T::zero(); rows * d];
        let mut v = vec![T::zero(); rows * d];
        linear(&mut qkv_flat, &ln1.out, layer.w_q.data(), layer.b_q.data(), rows, d, d);
        split_heads(&qkv_flat, &mut q, batch, len, heads, hd);
        linear(&mut qkv_flat, &ln1.out, layer.w_k.data(), layer.b_k.data(), rows, d, d);
        split_heads(&qkv_flat, &mut k, batch, len, heads, hd);
        linear(&mut qkv_flat, &ln1.out, layer.w_v.data(), layer.b_v.data(), rows, d, d);
        split_heads(&qkv_flat, &mut v, batch, len, heads, hd);

        let mut probs = vec![T::zero(); batch * heads * len * len];
        let mut ctx_h = vec![T::zero(); rows * d];
        let mut scores = vec![T::zero(); len * len];
        for b in 0..batch {
            for h in 0..heads {
                let off = ((b * heads + h) * len) * hd;
                let q_bh = &q[off..off + len * hd];
                let k_bh = &k[off..off + len * hd];
                let v_bh = &v[off..off + len * hd];
                mm_a_bt(&mut scores, q_bh, k_bh, len, hd, len, false);
                let p_off = ((b * heads + h) * len) * len;
                for t in 0..len {
                    let row = &mut scores[t * len..t * len + t + 1];
                    let mut max = T::neg_infinity();
                    for s in row.iter_mut() {
                        *s = *s * scale;
                        if *s > max {
                            max = *s;
                        }
                    }
                    let mut sum = T::zero();
                    for s in row.iter_mut() {
                        *s = (*s - max).exp();
                        sum += *s;
                    }
                    let inv = sum.recip();
                    let p_row = &mut probs[p_off + t * len..p_off + (t + 1) * len];
                    for s in 0..=t {
                        p_row[s] = row[s] * inv;
                    }
                }
                let p_bh = &probs[p_off..p_off + len * len];
                mm(&mut ctx_h[off..off + len * hd], p_bh, v_bh, len, len, hd, false);
            }
        }
        let mut ctx = vec![T::zero(); rows * d];
        merge_heads(&ctx_h, &mut ctx, batch, len, heads, hd);

        let mut attn_out = vec![T::zero(); rows * d];
        linear(&mut attn_out, &ctx, layer.w_o.data(), layer.b_o.data(), rows, d, d);
        let mut x_mid = x_in.clone();
        for (xm, &a) in x_mid.iter_mut().zip(&attn_out) {
            *xm += a;
        }

        let ln2 = layer_norm(&x_mid, layer.ln2_gamma.data(), layer.ln2_beta.data(), rows, d);
        let mut ff_pre = vec![T::zero(); rows * ffn];
        linear(&mut ff_pre, &ln2.out, layer.w_ff1.data(), layer.b_ff1.data(), rows, d, ffn);
        let ff_act: Vec<T> = ff_pre.iter().map(|&p| gelu(p)).collect();
        let mut ff_out = vec![T::zero(); rows * d];
        linear(&mut ff_out, &ff_act, layer.w_ff2.data(), layer.b_ff2.data(), rows, ffn, d);

        let mut x_out = x_mid.clone();
        for (xo, &f) in x_out.iter_mut().zip(&ff_out) {
            *xo += f;
        }

        layers.push(LayerTrace {
            x_in,
            ln1,
            q,
            k,
            v,
            probs,
            ctx,
            x_mid,
            ln2,
            ff_pre,
            ff_act,
        });
        x = x_out;
    }

    let x_last = x;
    let ln_f = layer_norm(
        &x_last,
        params.final_norm_gamma.data(),
        params.final_norm_beta.data(),
        rows,
        d,
    );

    let vsz = cfg.vocab_size;
    let mut logits = Tensor::zeros(&[batch, len, vsz]);
    match &params.head_w {
        Some(w) => linear(logits.data_mut(), &ln_f.out, w.data(), params.head_b.data(), rows, d, vsz),
        None => {
            // Tied head: logits = nf · Eᵀ + b.
            mm_a_bt(logits.data_mut(), &ln_f.out, params.embed_tokens.data(), rows, d, vsz, false);
            let data = logits.data_mut();
            let hb = params.head_b.data();
            for r in 0..rows {
                for (o, &b) in data[r * vsz..(r + 1) * vsz].iter_mut().zip(hb) {
                    *o += b;
                }
            }
        }
    }

    if logits.data().iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid(
            "non-finite activations in forward pass logits",
        ));
    }

    Ok(ForwardTrace {
        batch,
        len,
        layers,
        x_last,
        ln_f,
        logits,
    })
}

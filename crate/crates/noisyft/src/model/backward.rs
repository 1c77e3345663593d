//! Hand-assembled reverse-mode pass mirroring [`super::forward`].
//!
//! Gradients accumulate (`+=`) into each parameter's grad buffer so that
//! gradient-accumulation training can sum several micro-batches before an
//! optimizer step. Callers zero grads at the start of each accumulation
//! group.

use super::forward::{gelu_prime, merge_heads, split_heads, ForwardTrace, LnCache};
use super::{Batch, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{mm, mm_a_bt, mm_at_b, Element, Tensor};

/// `dst[j] += Σ_r src[r, j]`.
fn add_colsum<T: Element>(dst: &mut [T], src: &[T], rows: usize, d: usize) {
    for r in 0..rows {
        let row = &src[r * d..(r + 1) * d];
        for (o, &v) in dst.iter_mut().zip(row) {
            *o += v;
        }
    }
}

/// LayerNorm backward for all rows. Adds parameter grads into
/// `dgamma`/`dbeta` and writes (or adds, with `acc`) input grads into `dx`.
fn ln_backward<T: Element>(
    x: &[T],
    cache: &LnCache<T>,
    gamma: &[T],
    dy: &[T],
    rows: usize,
    d: usize,
    dx: &mut [T],
    dgamma: &mut [T],
    dbeta: &mut [T],
    acc: bool,
) {
    let inv_d = T::one() / T::from_f64(d as f64);
    for r in 0..rows {
        let xr = &x[r * d..(r + 1) * d];
        let dyr = &dy[r * d..(r + 1) * d];
        let mu = cache.mean[r];
        let inv = cache.invstd[r];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..d {
            let xhat = (xr[j] - mu) * inv;
            let dxhat = dyr[j] * gamma[j];
            m1 += dxhat;
            m2 += dxhat * xhat;
            dgamma[j] += dyr[j] * xhat;
            dbeta[j] += dyr[j];
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let dxr = &mut dx[r * d..(r + 1) * d];
        for j in 0..d {
            let xhat = (xr[j] - mu) * inv;
            let dxhat = dyr[j] * gamma[j];
            let v = inv * (dxhat - m1 - xhat * m2);
            if acc {
                dxr[j] += v;
            } else {
                dxr[j] = v;
            }
        }
    }
}

/// Backpropagates `dlogits` through the recorded forward pass, accumulating
/// parameter gradients. Frozen blocks are handled by the optimizer, not
/// here: every gradient is materialized.
pub fn backward<T: Element>(
    params: &mut ModelParams<T>,
    batch: &Batch,
    trace: &ForwardTrace<T>,
    dlogits: &Tensor<T>,
) -> Result<()> {
    let cfg = params.config.clone();
    let (bsz, len, d) = (trace.batch, trace.len, cfg.embed_dim);
    let vsz = cfg.vocab_size;
    let rows = bsz * len;
    if dlogits.shape() != [bsz, len, vsz] {
        return Err(Error::ShapeMismatch {
            context: "backward dlogits",
            expected: vec![bsz, len, vsz],
            got: dlogits.shape().to_vec(),
        });
    }
    if batch.batch_size() != bsz || batch.max_len != len {
        return Err(Error::ShapeMismatch {
            context: "backward batch",
            expected: vec![bsz, len],
            got: vec![batch.batch_size(), batch.max_len],
        });
    }
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let ffn = cfg.ffn_dim;
    let scale = T::from_f64(1.0 / (hd as f64).sqrt());
    let dl = dlogits.data();

    // LM head.
    add_colsum(params.head_b.grad_mut(), dl, rows, vsz);
    let mut dnf = vec![T::zero(); rows * d];
    match &mut params.head_w {
        Some(w) => {
            mm_at_b(w.grad_mut(), &trace.ln_f.out, dl, rows, d, vsz, true);
            mm_a_bt(&mut dnf, dl, w.data(), rows, vsz, d, false);
        }
        None => {
            mm_at_b(params.embed_tokens.grad_mut(), dl, &trace.ln_f.out, rows, vsz, d, true);
            mm(&mut dnf, dl, params.embed_tokens.data(), rows, vsz, d, false);
        }
    }

    // Final norm.
    let mut dx = vec![T::zero(); rows * d];
    {
        let gamma = params.final_norm_gamma.data().to_vec();
        ln_backward(
            &trace.x_last,
            &trace.ln_f,
            &gamma,
            &dnf,
            rows,
            d,
            &mut dx,
            params.final_norm_gamma.grad_mut(),
            params.final_norm_beta.grad_mut(),
            false,
        );
    }

    // Blocks in reverse.
    for (layer, lt) in params.layers.iter_mut().zip(trace.layers.iter()).rev() {
        // Feed-forward branch: x_out = x_mid + ff2(gelu(ff1(ln2(x_mid)))).
        add_colsum(layer.b_ff2.grad_mut(), &dx, rows, d);
        mm_at_b(layer.w_ff2.grad_mut(), &lt.ff_act, &dx, rows, ffn, d, true);
        let mut da = vec![T::zero(); rows * ffn];
        mm_a_bt(&mut da, &dx, layer.w_ff2.data(), rows, d, ffn, false);
        for (dp, &pre) in da.iter_mut().zip(&lt.ff_pre) {
            *dp = *dp * gelu_prime(pre);
        }
        let dpre = da;
        add_colsum(layer.b_ff1.grad_mut(), &dpre, rows, ffn);
        mm_at_b(layer.w_ff1.grad_mut(), &lt.ln2.out, &dpre, rows, d, ffn, true);
        let mut dn2 = vec![T::zero(); rows * d];
        mm_a_bt(&mut dn2, &dpre, layer.w_ff1.data(), rows, ffn, d, false);

        // dx currently holds d(x_out); the residual passes it through to
        // x_mid, and ln2's input grad adds on top.
        let mut dx_mid = dx;
        {
            let gamma = layer.ln2_gamma.data().to_vec();
            ln_backward(
                &lt.x_mid,
                &lt.ln2,
                &gamma,
                &dn2,
                rows,
                d,
                &mut dx_mid,
                layer.ln2_gamma.grad_mut(),
                layer.ln2_beta.grad_mut(),
                true,
            );
        }

        // Attention branch: x_mid = x_in + W_o(ctx) + b_o.
        add_colsum(layer.b_o.grad_mut(), &dx_mid, rows, d);
        mm_at_b(layer.w_o.grad_mut(), &lt.ctx, &dx_mid, rows, d, d, true);
        let mut dctx = vec![T::zero(); rows * d];
        mm_a_bt(&mut dctx, &dx_mid, layer.w_o.data(), rows, d, d, false);

        let mut dctx_h = vec![T::zero(); rows * d];
        split_heads(&dctx, &mut dctx_h, bsz, len, heads, hd);
        let mut dq_h = vec![T::zero(); rows * d];
        let mut dk_h = vec![T::zero(); rows * d];
        let mut dv_h = vec![T::zero(); rows * d];
        let mut dprobs = vec![T::zero(); len * len];
        let mut dscores = vec![T::zero(); len * len];
        for b in 0..bsz {
            for h in 0..heads {
                let off = ((b * heads + h) * len) * hd;
                let p_off = ((b * heads + h) * len) * len;
                let q_bh = &lt.q[off..off + len * hd];
                let k_bh = &lt.k[off..off + len * hd];
                let v_bh = &lt.v[off..off + len * hd];
                let p_bh = &lt.probs[p_off..p_off + len * len];
                let dctx_bh = &dctx_h[off..off + len * hd];

                mm_a_bt(&mut dprobs, dctx_bh, v_bh, len, hd, len, false);
                mm_at_b(&mut dv_h[off..off + len * hd], p_bh, dctx_bh, len, len, hd, false);

                for t in 0..len {
                    let p_row = &p_bh[t * len..t * len + t + 1];
                    let dp_row = &dprobs[t * len..t * len + t + 1];
                    let mut dot = T::zero();
                    for (&p, &dp) in p_row.iter().zip(dp_row) {
                        dot += p * dp;
                    }
                    let ds_row = &mut dscores[t * len..(t + 1) * len];
                    for s in 0..=t {
                        ds_row[s] = p_row[s] * (dp_row[s] - dot) * scale;
                    }
                    for s in ds_row.iter_mut().skip(t + 1) {
                        *s = T::zero();
                    }
                }
                mm(&mut dq_h[off..off + len * hd], &dscores, k_bh, len, len, hd, false);
                mm_at_b(&mut dk_h[off..off + len * hd], &dscores, q_bh, len, len, hd, false);
            }
        }

        let mut dq = vec![T::zero(); rows * d];
        let mut dk = vec![T::zero(); rows * d];
        let mut dv = vec![T::zero(); rows * d];
        merge_heads(&dq_h, &mut dq, bsz, len, heads, hd);
        merge_heads(&dk_h, &mut dk, bsz, len, heads, hd);
        merge_heads(&dv_h, &mut dv, bsz, len, heads, hd);

        add_colsum(layer.b_q.grad_mut(), &dq, rows, d);
        add_colsum(layer.b_k.grad_mut(), &dk, rows, d);
        add_colsum(layer.b_v.grad_mut(), &dv, rows, d);
        mm_at_b(layer.w_q.grad_mut(), &lt.ln1.out, &dq, rows, d, d, true);
        mm_at_b(layer.w_k.grad_mut(), &lt.ln1.out, &dk, rows, d, d, true);
        mm_at_b(layer.w_v.grad_mut(), &lt.ln1.out, &dv, rows, d, d, true);
        let mut dn1 = vec![T::zero(); rows * d];
        mm_a_bt(&mut dn1, &dq, layer.w_q.data(), rows, d, d, false);
        mm_a_bt(&mut dn1, &dk, layer.w_k.data(), rows, d, d, true);
        mm_a_bt(&mut dn1, &dv, layer.w_v.data(), rows, d, d, true);

        // Residual: d(x_in) = d(x_mid) + ln1 input grad.
        let mut dx_in = dx_mid;
        {
            let gamma = layer.ln1_gamma.data().to_vec();
            ln_backward(
                &lt.x_in,
                &lt.ln1,
                &gamma,
                &dn1,
                rows,
                d,
                &mut dx_in,
                layer.ln1_gamma.grad_mut(),
                layer.ln1_beta.grad_mut(),
                true,
            );
        }
        dx = dx_in;
    }

    // Embeddings: x0 = E[ids] + P[t].
    {
        let dpos = params.embed_pos.grad_mut();
        for b in 0..bsz {
            for t in 0..len {
                let src = &dx[(b * len + t) * d..(b * len + t + 1) * d];
                let dst = &mut dpos[t * d..(t + 1) * d];
                for (o, &v) in dst.iter_mut().zip(src) {
                    *o += v;
                }
            }
        }
    }
    {
        let demb = params.embed_tokens.grad_mut();
        for (pos, &id) in batch.token_ids.iter().enumerate() {
            let src = &dx[pos * d..(pos + 1) * d];
            let dst = &mut demb[id as usize * d..(id as usize + 1) * d];
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok(())
}

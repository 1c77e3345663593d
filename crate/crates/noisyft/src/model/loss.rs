//! Masked next-token cross-entropy.
//!
//! The loss is the mean negative log-likelihood over positions whose loss
//! mask is true; all other positions (padding, and prompt tokens under
//! response-only masking) contribute nothing to value or gradient.

use super::{Batch, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Sum-form loss pieces plus the unscaled logit gradients.
///
/// `dlogits_unscaled` holds `softmax − onehot(target)` at masked positions
/// and zero elsewhere; dividing by a token count turns the sum-form loss
/// into a mean. Keeping the scale out lets gradient accumulation divide by
/// the total masked count of a whole accumulation group.
pub struct CrossEntropyGrad<T> {
    pub sum_loss: f64,
    pub count: usize,
    pub dlogits_unscaled: Tensor<T>,
}

fn check_shapes<T: Element>(logits: &Tensor<T>, batch: &Batch, vocab: usize) -> Result<()> {
    let want = [batch.batch_size(), batch.max_len, vocab];
    if logits.shape() != want {
        return Err(Error::ShapeMismatch {
            context: "cross entropy logits",
            expected: want.to_vec(),
            got: logits.shape().to_vec(),
        });
    }
    Ok(())
}

fn per_position<T: Element, F: FnMut(usize, f64, f64)>(
    logits: &Tensor<T>,
    batch: &Batch,
    vocab: usize,
    mut on_masked: F,
) -> Result<(f64, usize)> {
    let data = logits.data();
    let mut sum = 0.0;
    let mut count = 0usize;
    for (pos, (&masked, &target)) in batch.loss_mask.iter().zip(&batch.targets).enumerate() {
        if !masked {
            continue;
        }
        if target as usize >= vocab {
            return Err(Error::invalid(format!(
                "target id {target} out of range for vocab size {vocab}"
            )));
        }
        let row = &data[pos * vocab..(pos + 1) * vocab];
        let mut max = f64::NEG_INFINITY;
        for &x in row {
            let v = x.to_f64();
            if v > max {
                max = v;
            }
        }
        let mut z = 0.0;
        for &x in row {
            z += (x.to_f64() - max).exp();
        }
        let lse = max + z.ln();
        sum += lse - row[target as usize].to_f64();
        count += 1;
        on_masked(pos, lse, 0.0);
    }
    if count == 0 {
        return Err(Error::invalid(
            "loss mask selects no positions (all-false mask)",
        ));
    }
    Ok((sum, count))
}

/// Sum of masked negative log-likelihoods and the masked-position count.
pub fn masked_cross_entropy_sum<T: Element>(
    logits: &Tensor<T>,
    batch: &Batch,
) -> Result<(f64, usize)> {
    let vocab = logits.shape().last().copied().unwrap_or(0);
    check_shapes(logits, batch, vocab)?;
    per_position(logits, batch, vocab, |_, _, _| {})
}

/// Mean negative log-likelihood over masked positions.
pub fn masked_cross_entropy<T: Element>(logits: &Tensor<T>, batch: &Batch) -> Result<f64> {
    let (sum, count) = masked_cross_entropy_sum(logits, batch)?;
    Ok(sum / count as f64)
}

/// Sum-form loss plus unscaled gradients (see [`CrossEntropyGrad`]).
pub fn masked_cross_entropy_grad<T: Element>(
    logits: &Tensor<T>,
    batch: &Batch,
) -> Result<CrossEntropyGrad<T>> {
    let vocab = logits.shape().last().copied().unwrap_or(0);
    check_shapes(logits, batch, vocab)?;
    let mut dlogits = Tensor::zeros(logits.shape());
    let src = logits.data().to_vec();
    let dst = dlogits.data_mut();
    let targets = batch.targets.clone();
    let (sum, count) = per_position(logits, batch, vocab, |pos, lse, _| {
        let row = &src[pos * vocab..(pos + 1) * vocab];
        let out = &mut dst[pos * vocab..(pos + 1) * vocab];
        for (o, &x) in out.iter_mut().zip(row) {
            *o = T::from_f64((x.to_f64() - lse).exp());
        }
        let t = targets[pos] as usize;
        out[t] = out[t] - T::one();
    })?;
    Ok(CrossEntropyGrad {
        sum_loss: sum,
        count,
        dlogits_unscaled: dlogits,
    })
}

/// Convenience wrapper: one clean forward pass plus mean masked loss.
pub fn forward_loss<T: Element>(params: &ModelParams<T>, batch: &Batch) -> Result<f64> {
    let x = super::embed_lookup(params, batch)?;
    let trace = super::forward(params, &x, &batch.lengths)?;
    masked_cross_entropy(&trace.logits, batch)
}

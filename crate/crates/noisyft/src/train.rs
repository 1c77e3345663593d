//! The noisy-embedding training step and its noise-free evaluation twin.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{
    backward, embed_lookup, forward, masked_cross_entropy_grad, masked_cross_entropy_sum, Batch,
    ModelParams,
};
use crate::noise::{apply_noise, NoiseSpec};
use crate::optim::{FreezeSpec, OptState};
use crate::tensor::Element;

/// Forward/backward over one micro-batch with noised embeddings,
/// accumulating gradients scaled by `loss_scale` (use `1/total_masked_count`
/// of the accumulation group). Does not touch the optimizer. Returns the
/// unscaled `(sum_loss, masked_count)` of this micro-batch, computed on the
/// noised forward pass.
pub fn accumulate_grads<T: Element, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    batch: &Batch,
    noise_spec: &NoiseSpec,
    noise_rng: &mut R,
    loss_scale: f64,
) -> Result<(f64, usize)> {
    let x = embed_lookup(params, batch)?;
    let x = apply_noise(&x, &batch.lengths, noise_spec, noise_rng)?;
    let trace = forward(params, &x, &batch.lengths)?;
    let ce = masked_cross_entropy_grad(&trace.logits, batch)?;
    let mut dlogits = ce.dlogits_unscaled;
    let s = T::from_f64(loss_scale);
    for v in dlogits.data_mut() {
        *v = *v * s;
    }
    backward(params, batch, &trace, &dlogits)?;
    Ok((ce.sum_loss, ce.count))
}

/// One full optimizer step on one batch: embed → noise → forward → masked
/// cross-entropy → backward → Adam, respecting the freeze spec. Returns the
/// noised-forward mean loss. A non-finite loss aborts with diagnostics
/// instead of being skipped.
pub fn train_step<T: Element, R: Rng + ?Sized>(
    params: &mut ModelParams<T>,
    opt: &mut OptState<T>,
    batch: &Batch,
    noise_spec: &NoiseSpec,
    freeze: &FreezeSpec,
    noise_rng: &mut R,
) -> Result<f64> {
    params.zero_grads();
    let count = batch.masked_count();
    if count == 0 {
        return Err(Error::invalid(
            "loss mask selects no positions (all-false mask)",
        ));
    }
    let (sum_loss, _) =
        accumulate_grads(params, batch, noise_spec, noise_rng, 1.0 / count as f64)?;
    let loss = sum_loss / count as f64;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: opt.step,
            value: loss,
            last_checkpoint: None,
        });
    }
    opt.apply_step(params, freeze)?;
    Ok(loss)
}

/// Token-weighted mean noise-free loss over a batched dataset: total masked
/// negative log-likelihood divided by total masked count. Never applies
/// noise and never consumes any RNG.
pub fn eval_loss<T: Element>(params: &ModelParams<T>, batches: &[Batch]) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::invalid("eval_loss requires a nonempty dataset"));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for batch in batches {
        let x = embed_lookup(params, batch)?;
        let trace = forward(params, &x, &batch.lengths)?;
        let (s, c) = masked_cross_entropy_sum(&trace.logits, batch)?;
        sum += s;
        count += c;
    }
    Ok(sum / count as f64)
}

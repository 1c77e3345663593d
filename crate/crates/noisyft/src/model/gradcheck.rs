//! Central finite-difference oracle for the hand-written backward pass.
//!
//! The oracle only ever calls the forward path, so it stays independent of
//! the code it checks. Always run it in `f64`.

use rand::Rng;

use super::loss::forward_loss;
use super::{embed_lookup, forward, masked_cross_entropy_grad, Batch, ModelParams};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinates compared against the oracle.
    pub checked: usize,
    /// Coordinates skipped because both gradients were below threshold.
    pub skipped: usize,
}

/// Compares analytic gradients against central finite differences on
/// `samples` randomly chosen parameter coordinates. Coordinates where both
/// gradients are below `1e-10` in magnitude are skipped (relative error is
/// meaningless there). Parameters are restored before returning.
pub fn finite_difference_check<R: Rng + ?Sized>(
    params: &mut ModelParams<f64>,
    batch: &Batch,
    samples: usize,
    rng: &mut R,
) -> Result<GradCheckReport> {
    params.zero_grads();
    let x = embed_lookup(params, batch)?;
    let trace = forward(params, &x, &batch.lengths)?;
    let ce = masked_cross_entropy_grad(&trace.logits, batch)?;
    let inv_count = 1.0 / ce.count as f64;
    let mut dlogits = ce.dlogits_unscaled;
    for v in dlogits.data_mut() {
        *v *= inv_count;
    }
    super::backward(params, batch, &trace, &dlogits)?;

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    let mut sizes: Vec<usize> = Vec::new();
    params.visit(|_, _, t: &Tensor<f64>| {
        analytic.push(t.grad().map(|g| g.to_vec()).unwrap_or_default());
        sizes.push(t.numel());
    });
    let total: usize = sizes.iter().sum();

    let mut max_rel: f64 = 0.0;
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let h = 1e-5;
    for _ in 0..samples {
        let flat = rng.random_range(0..total);
        let mut remaining = flat;
        let mut tensor_idx = 0;
        for (i, &sz) in sizes.iter().enumerate() {
            if remaining < sz {
                tensor_idx = i;
                break;
            }
            remaining -= sz;
        }
        let offset = remaining;

        let nudge = |params: &mut ModelParams<f64>, delta: f64| {
            let mut i = 0;
            params.visit_mut(|_, _, t| {
                if i == tensor_idx {
                    t.data_mut()[offset] += delta;
                }
                i += 1;
            });
        };

        nudge(params, h);
        let loss_plus = forward_loss(params, batch)?;
        nudge(params, -2.0 * h);
        let loss_minus = forward_loss(params, batch)?;
        nudge(params, h);

        let fd = (loss_plus - loss_minus) / (2.0 * h);
        let an = analytic[tensor_idx]
            .get(offset)
            .copied()
            .unwrap_or(0.0);
        let denom = an.abs().max(fd.abs());
        if denom < 1e-10 {
            skipped += 1;
            continue;
        }
        let rel = (an - fd).abs() / denom;
        max_rel = max_rel.max(rel);
        checked += 1;
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        checked,
        skipped,
    })
}

//! Scaled random embedding perturbations.
//!
//! A noise sample for a sequence of true length `L` in embedding dimension
//! `d` is an `L×d` matrix of i.i.d. draws scaled by `alpha / sqrt(L·d)`.
//! With uniform draws in [-1, 1) the expected Euclidean norm of the scaled
//! matrix is approximately `alpha / sqrt(3)` independent of `L` and `d`.
//!
//! RNG consumption order is fixed and documented: sequence-major, i.e. for
//! each sequence `b` in batch order, for each position `t < L_b`, for each
//! dimension `j`, exactly one draw. Padding positions (`t ≥ L_b`) consume
//! nothing and carry exactly zero noise. `alpha = 0` consumes no randomness
//! at all.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Noise distribution before scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NoiseDistribution {
    /// Entries uniform in [-1, 1).
    #[default]
    Uniform,
    /// Entries standard normal.
    Gaussian,
}

/// Base noise scale, distribution, and the seed of the dedicated noise
/// stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub alpha: f64,
    #[serde(default)]
    pub distribution: NoiseDistribution,
    #[serde(default)]
    pub seed: u64,
}

impl Default for NoiseSpec {
    /// Noise-free: alpha 0 draws nothing and changes nothing.
    fn default() -> Self {
        NoiseSpec::uniform(0.0, 0)
    }
}

impl NoiseSpec {
    pub fn uniform(alpha: f64, seed: u64) -> Self {
        NoiseSpec {
            alpha,
            distribution: NoiseDistribution::Uniform,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid(format!(
                "noise alpha must be finite and non-negative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// The per-entry scale factor `alpha / sqrt(L·d)`.
pub fn noise_scale(alpha: f64, seq_len: usize, dim: usize) -> Result<f64> {
    if seq_len == 0 || dim == 0 {
        return Err(Error::invalid(format!(
            "noise_scale requires L ≥ 1 and d ≥ 1, got L={seq_len}, d={dim}"
        )));
    }
    if !(alpha >= 0.0 && alpha.is_finite()) {
        return Err(Error::invalid(format!(
            "noise_scale requires finite alpha ≥ 0, got {alpha}"
        )));
    }
    Ok(alpha / ((seq_len as f64) * (dim as f64)).sqrt())
}

/// Expected Euclidean norm of a scaled uniform noise matrix, `alpha/sqrt(3)`.
pub fn expected_noise_norm(alpha: f64) -> f64 {
    alpha / 3f64.sqrt()
}

fn check_lengths(batch: usize, max_len: usize, lengths: &[usize]) -> Result<()> {
    if lengths.len() != batch {
        return Err(Error::ShapeMismatch {
            context: "noise lengths",
            expected: vec![batch],
            got: vec![lengths.len()],
        });
    }
    for (b, &l) in lengths.iter().enumerate() {
        if l == 0 || l > max_len {
            return Err(Error::invalid(format!(
                "sequence {b} has length {l}, want 1 ≤ length ≤ {max_len}"
            )));
        }
    }
    Ok(())
}

/// Fills one sequence row block (`len × dim` contiguous entries) with raw
/// draws, one RNG word per entry, position-then-dimension order.
fn fill_raw_draws<T: Element, R: Rng + ?Sized>(
    dist: NoiseDistribution,
    rng: &mut R,
    out: &mut [T],
) {
    match dist {
        NoiseDistribution::Uniform => T::fill_uniform_pm1(rng, out),
        NoiseDistribution::Gaussian => {
            for o in out.iter_mut() {
                *o = T::std_normal(rng);
            }
        }
    }
}

/// Writes scaled noise for a whole batch into `out` (`batch × max_len × dim`
/// row-major). Padding entries are set to exactly zero. With `alpha = 0`
/// the buffer is zeroed and no randomness is consumed.
pub fn sample_scaled_noise_into<T: Element, R: Rng + ?Sized>(
    out: &mut [T],
    batch: usize,
    max_len: usize,
    dim: usize,
    lengths: &[usize],
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<()> {
    spec.validate()?;
    check_lengths(batch, max_len, lengths)?;
    if dim == 0 {
        return Err(Error::invalid("noise dimension must be ≥ 1"));
    }
    if out.len() != batch * max_len * dim {
        return Err(Error::ShapeMismatch {
            context: "sample_scaled_noise_into buffer",
            expected: vec![batch, max_len, dim],
            got: vec![out.len()],
        });
    }
    if spec.alpha == 0.0 {
        out.fill(T::zero());
        return Ok(());
    }
    let row = max_len * dim;
    for (b, &len) in lengths.iter().enumerate() {
        let scale = T::from_f64(spec.alpha / ((len as f64) * (dim as f64)).sqrt());
        let block = &mut out[b * row..(b + 1) * row];
        let (live, pad) = block.split_at_mut(len * dim);
        fill_raw_draws(spec.distribution, rng, live);
        for v in live.iter_mut() {
            *v = scale * *v;
        }
        pad.fill(T::zero());
    }
    Ok(())
}

/// Samples a `B × max_len × d` tensor of scaled noise; rows beyond each
/// sequence's true length are exactly zero.
pub fn sample_scaled_noise<T: Element, R: Rng + ?Sized>(
    batch: usize,
    max_len: usize,
    dim: usize,
    lengths: &[usize],
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(&[batch, max_len, dim]);
    sample_scaled_noise_into(out.data_mut(), batch, max_len, dim, lengths, spec, rng)?;
    Ok(out)
}

/// Returns `embeddings + noise` without mutating the input. With
/// `alpha = 0` the result is bit-for-bit identical to the input and no
/// randomness is consumed.
pub fn apply_noise<T: Element, R: Rng + ?Sized>(
    embeddings: &Tensor<T>,
    lengths: &[usize],
    spec: &NoiseSpec,
    rng: &mut R,
) -> Result<Tensor<T>> {
    spec.validate()?;
    let shape = embeddings.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch {
            context: "apply_noise embeddings",
            expected: vec![3],
            got: shape.to_vec(),
        });
    }
    let (batch, max_len, dim) = (shape[0], shape[1], shape[2]);
    check_lengths(batch, max_len, lengths)?;
    let mut out = embeddings.clone();
    if spec.alpha == 0.0 {
        return Ok(out);
    }
    let row = max_len * dim;
    let data = out.data_mut();
    let mut draws = vec![T::zero(); dim];
    for (b, &len) in lengths.iter().enumerate() {
        let scale = T::from_f64(spec.alpha / ((len as f64) * (dim as f64)).sqrt());
        for t in 0..len {
            fill_raw_draws(spec.distribution, rng, &mut draws);
            let row_slice = &mut data[b * row + t * dim..b * row + (t + 1) * dim];
            for (x, &eps) in row_slice.iter_mut().zip(&draws) {
                *x = *x + scale * eps;
            }
        }
    }
    Ok(out)
}

/// Euclidean norm of one sequence's noise rows, accumulated in `f64`.
pub fn frobenius_norm<T: Element>(values: &[T]) -> f64 {
    values
        .iter()
        .map(|&x| {
            let v = x.to_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

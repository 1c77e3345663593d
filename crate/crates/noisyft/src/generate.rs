//! Decoding: greedy and nucleus (top-p) sampling with repetition penalty
//! and EOS blocking.
//!
//! Per emitted token the logit pipeline is: repetition penalty over the
//! unique previously *generated* ids (prompt tokens are exempt), then EOS
//! blocking while fewer than `min_new_tokens` tokens have been emitted,
//! then temperature, truncation, and selection. Selection works on `f64`
//! copies of the logits regardless of the model element type. Greedy mode
//! consumes no randomness.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{embed_lookup, forward, Batch, ModelParams};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    #[default]
    Greedy,
    TopP,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub mode: DecodeMode,
    pub temperature: f64,
    pub top_p: f64,
    pub repetition_penalty: f64,
    pub max_new_tokens: usize,
    pub min_new_tokens: usize,
    pub eos_id: u32,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            mode: DecodeMode::Greedy,
            temperature: 1.0,
            top_p: 1.0,
            repetition_penalty: 1.2,
            max_new_tokens: 64,
            min_new_tokens: 0,
            eos_id: crate::vocab::EOS_ID,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid(format!(
                "temperature must be finite and > 0, got {}",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::invalid(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if !(self.repetition_penalty >= 1.0 && self.repetition_penalty.is_finite()) {
            return Err(Error::invalid(format!(
                "repetition_penalty must be ≥ 1, got {}",
                self.repetition_penalty
            )));
        }
        if self.min_new_tokens > self.max_new_tokens {
            return Err(Error::invalid(format!(
                "min_new_tokens {} exceeds max_new_tokens {}",
                self.min_new_tokens, self.max_new_tokens
            )));
        }
        Ok(())
    }
}

/// CTRL-style repetition penalty: for every id in `history`, a positive
/// logit is divided by `penalty` and a non-positive one multiplied by it.
/// Each unique id is adjusted exactly once.
pub fn adjust_logits_repetition_penalty(
    logits_row: &mut [f64],
    history: impl IntoIterator<Item = u32>,
    penalty: f64,
) {
    let unique: BTreeSet<u32> = history.into_iter().collect();
    for id in unique {
        if let Some(l) = logits_row.get_mut(id as usize) {
            if *l > 0.0 {
                *l /= penalty;
            } else {
                *l *= penalty;
            }
        }
    }
}

/// Lowest-id argmax.
fn argmax(row: &[f64]) -> u32 {
    let mut best = 0usize;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in row.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best as u32
}

/// Temperature softmax, nucleus truncation, renormalized inverse-CDF draw.
fn sample_top_p<R: Rng + ?Sized>(
    row: &[f64],
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> u32 {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<(u32, f64)> = row
        .iter()
        .enumerate()
        .map(|(i, &l)| (i as u32, ((l - max) / temperature).exp()))
        .collect();
    let z: f64 = probs.iter().map(|(_, p)| p).sum();
    for (_, p) in probs.iter_mut() {
        *p /= z;
    }
    // Highest probability first; ties by lowest id.
    probs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let mut cut = probs.len();
    let mut cum = 0.0;
    for (i, (_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= top_p - 1e-12 {
            cut = i + 1;
            break;
        }
    }
    let nucleus = &probs[..cut];
    let mass: f64 = nucleus.iter().map(|(_, p)| p).sum();
    let u: f64 = rng.random::<f64>() * mass;
    let mut acc = 0.0;
    for &(id, p) in nucleus {
        acc += p;
        if u < acc {
            return id;
        }
    }
    nucleus[nucleus.len() - 1].0
}

/// Generates up to `max_new_tokens` ids after `prompt_ids`, stopping early
/// at EOS once `min_new_tokens` tokens have been emitted. The returned ids
/// never include EOS. If the rolling context outgrows `max_seq_len`, the
/// oldest tokens are dropped from the model's view.
pub fn generate<T: Element, R: Rng + ?Sized>(
    params: &ModelParams<T>,
    prompt_ids: &[u32],
    gen: &GenerationConfig,
    rng: &mut R,
) -> Result<Vec<u32>> {
    gen.validate()?;
    let max_ctx = params.config.max_seq_len;
    if prompt_ids.is_empty() {
        return Err(Error::invalid("prompt must be nonempty"));
    }
    if prompt_ids.len() >= max_ctx {
        return Err(Error::invalid(format!(
            "prompt length {} must be below max_seq_len {max_ctx}",
            prompt_ids.len()
        )));
    }
    if gen.eos_id as usize >= params.config.vocab_size {
        return Err(Error::invalid(format!(
            "eos id {} out of range for vocab size {}",
            gen.eos_id, params.config.vocab_size
        )));
    }

    let mut generated: Vec<u32> = Vec::new();
    let mut context: Vec<u32> = prompt_ids.to_vec();
    while generated.len() < gen.max_new_tokens {
        let window = if context.len() > max_ctx {
            &context[context.len() - max_ctx..]
        } else {
            &context[..]
        };
        let len = window.len();
        let batch = Batch {
            token_ids: window.to_vec(),
            lengths: vec![len],
            loss_mask: vec![false; len],
            targets: vec![0; len],
            max_len: len,
        };
        let x = embed_lookup(params, &batch)?;
        let trace = forward(params, &x, &batch.lengths)?;
        let vsz = params.config.vocab_size;
        let mut row: Vec<f64> = trace.logits.data()[(len - 1) * vsz..len * vsz]
            .iter()
            .map(|&v| v.to_f64())
            .collect();

        adjust_logits_repetition_penalty(
            &mut row,
            generated.iter().copied(),
            gen.repetition_penalty,
        );
        if generated.len() < gen.min_new_tokens {
            row[gen.eos_id as usize] = f64::NEG_INFINITY;
        }

        let next = match gen.mode {
            DecodeMode::Greedy => argmax(&row),
            DecodeMode::TopP => sample_top_p(&row, gen.temperature, gen.top_p, rng),
        };
        if next == gen.eos_id {
            break;
        }
        generated.push(next);
        context.push(next);
    }
    Ok(generated)
}

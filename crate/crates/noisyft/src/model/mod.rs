//! Tiny decoder-only transformer language model.
//!
//! Pre-norm blocks (LayerNorm → causal multi-head attention → residual,
//! LayerNorm → GELU feed-forward → residual), learned absolute positional
//! embeddings added inside [`forward::forward`], and an optionally weight-tied
//! LM head. Everything is generic over the element type: `f32` for
//! experiments, `f64` for gradient oracles and tests.

mod backward;
mod forward;
pub mod gradcheck;
mod loss;

pub use backward::backward;
pub use forward::{forward, ForwardTrace};
pub use loss::{
    forward_loss, masked_cross_entropy, masked_cross_entropy_grad, masked_cross_entropy_sum,
    CrossEntropyGrad,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Shape of the model. `vocab_size = 0` is a placeholder meaning "derive
/// from the corpus"; it must be materialized before `init_model`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub max_seq_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    #[serde(default)]
    pub tie_lm_head: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::invalid(format!(
                "vocab_size must be ≥ 2 (need an EOS id), got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.max_seq_len == 0 || self.n_layers == 0 || self.ffn_dim == 0
        {
            return Err(Error::invalid(
                "embed_dim, max_seq_len, n_layers, and ffn_dim must all be ≥ 1",
            ));
        }
        if self.n_heads == 0 || self.embed_dim % self.n_heads != 0 {
            return Err(Error::invalid(format!(
                "embed_dim {} must be divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// One transformer block's weights.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub w_q: Tensor<T>,
    pub b_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub b_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub b_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_o: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub w_ff1: Tensor<T>,
    pub b_ff1: Tensor<T>,
    pub w_ff2: Tensor<T>,
    pub b_ff2: Tensor<T>,
}

/// All model weights. With `tie_lm_head` the head reuses `embed_tokens`
/// transposed and `head_w` is `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub embed_tokens: Tensor<T>,
    pub embed_pos: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm_gamma: Tensor<T>,
    pub final_norm_beta: Tensor<T>,
    pub head_w: Option<Tensor<T>>,
    pub head_b: Tensor<T>,
}

/// Coarse parameter grouping used by freezing and reporting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    /// Token and positional embedding tables.
    Embed,
    /// Everything inside the transformer blocks.
    Attention,
    /// Final norm plus LM-head weights.
    Head,
}

/// All-zero parameter set with the right shapes, the target of checkpoint
/// loads.
pub fn empty_model<T: Element>(config: &ModelConfig) -> Result<ModelParams<T>> {
    config.validate()?;
    let d = config.embed_dim;
    let v = config.vocab_size;
    let f = config.ffn_dim;
    let layers = (0..config.n_layers)
        .map(|_| LayerParams {
            ln1_gamma: Tensor::zeros(&[d]),
            ln1_beta: Tensor::zeros(&[d]),
            w_q: Tensor::zeros(&[d, d]),
            b_q: Tensor::zeros(&[d]),
            w_k: Tensor::zeros(&[d, d]),
            b_k: Tensor::zeros(&[d]),
            w_v: Tensor::zeros(&[d, d]),
            b_v: Tensor::zeros(&[d]),
            w_o: Tensor::zeros(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::zeros(&[d]),
            ln2_beta: Tensor::zeros(&[d]),
            w_ff1: Tensor::zeros(&[d, f]),
            b_ff1: Tensor::zeros(&[f]),
            w_ff2: Tensor::zeros(&[f, d]),
            b_ff2: Tensor::zeros(&[d]),
        })
        .collect();
    Ok(ModelParams {
        config: config.clone(),
        embed_tokens: Tensor::zeros(&[v, d]),
        embed_pos: Tensor::zeros(&[config.max_seq_len, d]),
        layers,
        final_norm_gamma: Tensor::zeros(&[d]),
        final_norm_beta: Tensor::zeros(&[d]),
        head_w: if config.tie_lm_head {
            None
        } else {
            Some(Tensor::zeros(&[d, v]))
        },
        head_b: Tensor::zeros(&[v]),
    })
}

/// Initializes weights from N(0, 0.02²), biases and norm betas to zero,
/// norm gammas to one. Draw order equals parameter visit order, one draw
/// per weight entry; bias/gamma/beta tensors consume no randomness.
pub fn init_model<T: Element, R: Rng + ?Sized>(
    config: &ModelConfig,
    rng: &mut R,
) -> Result<ModelParams<T>> {
    config.validate()?;
    let d = config.embed_dim;
    let v = config.vocab_size;
    let f = config.ffn_dim;

    let mut normal = |shape: &[usize]| -> Tensor<T> {
        let mut t = Tensor::zeros(shape);
        for x in t.data_mut() {
            *x = T::std_normal(rng) * T::from_f64(0.02);
        }
        t
    };

    let embed_tokens = normal(&[v, d]);
    let embed_pos = normal(&[config.max_seq_len, d]);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_gamma: Tensor::from_vec(&[d], vec![T::one(); d])?,
            ln1_beta: Tensor::zeros(&[d]),
            w_q: normal(&[d, d]),
            b_q: Tensor::zeros(&[d]),
            w_k: normal(&[d, d]),
            b_k: Tensor::zeros(&[d]),
            w_v: normal(&[d, d]),
            b_v: Tensor::zeros(&[d]),
            w_o: normal(&[d, d]),
            b_o: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::from_vec(&[d], vec![T::one(); d])?,
            ln2_beta: Tensor::zeros(&[d]),
            w_ff1: normal(&[d, f]),
            b_ff1: Tensor::zeros(&[f]),
            w_ff2: normal(&[f, d]),
            b_ff2: Tensor::zeros(&[d]),
        });
    }
    let final_norm_gamma = Tensor::from_vec(&[d], vec![T::one(); d])?;
    let final_norm_beta = Tensor::zeros(&[d]);
    let head_w = if config.tie_lm_head {
        None
    } else {
        Some(normal(&[d, v]))
    };
    let head_b = Tensor::zeros(&[v]);

    Ok(ModelParams {
        config: config.clone(),
        embed_tokens,
        embed_pos,
        layers,
        final_norm_gamma,
        final_norm_beta,
        head_w,
        head_b,
    })
}

impl<T: Element> ModelParams<T> {
    /// Visits every parameter tensor in the fixed, documented order:
    /// embeddings, then each layer's tensors, then final norm and head.
    /// This order defines checkpoint layout, optimizer state layout, and
    /// initialization draw order.
    pub fn visit<'a>(&'a self, mut f: impl FnMut(String, ParamBlock, &'a Tensor<T>)) {
        f("embed.tokens".into(), ParamBlock::Embed, &self.embed_tokens);
        f("embed.pos".into(), ParamBlock::Embed, &self.embed_pos);
        for (i, l) in self.layers.iter().enumerate() {
            let b = ParamBlock::Attention;
            f(format!("layers.{i}.ln1.gamma"), b, &l.ln1_gamma);
            f(format!("layers.{i}.ln1.beta"), b, &l.ln1_beta);
            f(format!("layers.{i}.attn.wq"), b, &l.w_q);
            f(format!("layers.{i}.attn.bq"), b, &l.b_q);
            f(format!("layers.{i}.attn.wk"), b, &l.w_k);
            f(format!("layers.{i}.attn.bk"), b, &l.b_k);
            f(format!("layers.{i}.attn.wv"), b, &l.w_v);
            f(format!("layers.{i}.attn.bv"), b, &l.b_v);
            f(format!("layers.{i}.attn.wo"), b, &l.w_o);
            f(format!("layers.{i}.attn.bo"), b, &l.b_o);
            f(format!("layers.{i}.ln2.gamma"), b, &l.ln2_gamma);
            f(format!("layers.{i}.ln2.beta"), b, &l.ln2_beta);
            f(format!("layers.{i}.ffn.w1"), b, &l.w_ff1);
            f(format!("layers.{i}.ffn.b1"), b, &l.b_ff1);
            f(format!("layers.{i}.ffn.w2"), b, &l.w_ff2);
            f(format!("layers.{i}.ffn.b2"), b, &l.b_ff2);
        }
        f("final_norm.gamma".into(), ParamBlock::Head, &self.final_norm_gamma);
        f("final_norm.beta".into(), ParamBlock::Head, &self.final_norm_beta);
        if let Some(w) = &self.head_w {
            f("head.weight".into(), ParamBlock::Head, w);
        }
        f("head.bias".into(), ParamBlock::Head, &self.head_b);
    }

    /// Mutable variant of [`ModelParams::visit`], same order.
    pub fn visit_mut(&mut self, mut f: impl FnMut(String, ParamBlock, &mut Tensor<T>)) {
        f("embed.tokens".into(), ParamBlock::Embed, &mut self.embed_tokens);
        f("embed.pos".into(), ParamBlock::Embed, &mut self.embed_pos);
        for (i, l) in self.layers.iter_mut().enumerate() {
            let b = ParamBlock::Attention;
            f(format!("layers.{i}.ln1.gamma"), b, &mut l.ln1_gamma);
            f(format!("layers.{i}.ln1.beta"), b, &mut l.ln1_beta);
            f(format!("layers.{i}.attn.wq"), b, &mut l.w_q);
            f(format!("layers.{i}.attn.bq"), b, &mut l.b_q);
            f(format!("layers.{i}.attn.wk"), b, &mut l.w_k);
            f(format!("layers.{i}.attn.bk"), b, &mut l.b_k);
            f(format!("layers.{i}.attn.wv"), b, &mut l.w_v);
            f(format!("layers.{i}.attn.bv"), b, &mut l.b_v);
            f(format!("layers.{i}.attn.wo"), b, &mut l.w_o);
            f(format!("layers.{i}.attn.bo"), b, &mut l.b_o);
            f(format!("layers.{i}.ln2.gamma"), b, &mut l.ln2_gamma);
            f(format!("layers.{i}.ln2.beta"), b, &mut l.ln2_beta);
            f(format!("layers.{i}.ffn.w1"), b, &mut l.w_ff1);
            f(format!("layers.{i}.ffn.b1"), b, &mut l.b_ff1);
            f(format!("layers.{i}.ffn.w2"), b, &mut l.w_ff2);
            f(format!("layers.{i}.ffn.b2"), b, &mut l.b_ff2);
        }
        f("final_norm.gamma".into(), ParamBlock::Head, &mut self.final_norm_gamma);
        f("final_norm.beta".into(), ParamBlock::Head, &mut self.final_norm_beta);
        if let Some(w) = &mut self.head_w {
            f("head.weight".into(), ParamBlock::Head, w);
        }
        f("head.bias".into(), ParamBlock::Head, &mut self.head_b);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|_, _, t| n += t.numel());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_mut(|_, _, t| t.zero_grad());
    }

    /// Casts all weights into another element type; gradients are dropped.
    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            embed_tokens: self.embed_tokens.cast(),
            embed_pos: self.embed_pos.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: l.ln1_gamma.cast(),
                    ln1_beta: l.ln1_beta.cast(),
                    w_q: l.w_q.cast(),
                    b_q: l.b_q.cast(),
                    w_k: l.w_k.cast(),
                    b_k: l.b_k.cast(),
                    w_v: l.w_v.cast(),
                    b_v: l.b_v.cast(),
                    w_o: l.w_o.cast(),
                    b_o: l.b_o.cast(),
                    ln2_gamma: l.ln2_gamma.cast(),
                    ln2_beta: l.ln2_beta.cast(),
                    w_ff1: l.w_ff1.cast(),
                    b_ff1: l.b_ff1.cast(),
                    w_ff2: l.w_ff2.cast(),
                    b_ff2: l.b_ff2.cast(),
                })
                .collect(),
            final_norm_gamma: self.final_norm_gamma.cast(),
            final_norm_beta: self.final_norm_beta.cast(),
            head_w: self.head_w.as_ref().map(|w| w.cast()),
            head_b: self.head_b.cast(),
        }
    }
}

/// A padded batch of token sequences with next-token targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// `B × L_max` input ids, padded with `pad_id` past each length.
    pub token_ids: Vec<u32>,
    /// True (unpadded) length of each sequence.
    pub lengths: Vec<usize>,
    /// `B × L_max`; true where the next-token prediction enters the loss.
    pub loss_mask: Vec<bool>,
    /// `B × L_max` next-token target ids; ignored where the mask is false.
    pub targets: Vec<u32>,
    pub max_len: usize,
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let b = self.lengths.len();
        let n = b * self.max_len;
        if self.token_ids.len() != n || self.loss_mask.len() != n || self.targets.len() != n {
            return Err(Error::ShapeMismatch {
                context: "Batch buffers",
                expected: vec![b, self.max_len],
                got: vec![self.token_ids.len(), self.loss_mask.len(), self.targets.len()],
            });
        }
        for (i, &len) in self.lengths.iter().enumerate() {
            if len == 0 || len > self.max_len {
                return Err(Error::invalid(format!(
                    "sequence {i} has invalid length {len} (max_len {})",
                    self.max_len
                )));
            }
            for t in len..self.max_len {
                if self.loss_mask[i * self.max_len + t] {
                    return Err(Error::invalid(format!(
                        "loss mask true at padding position ({i}, {t})"
                    )));
                }
            }
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::invalid(format!(
                "token id {id} out of range for vocab size {vocab_size}"
            )));
        }
        Ok(())
    }

    pub fn masked_count(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Looks up token embeddings: row `(b, t)` of the result is
/// `E[token_ids[b, t]]`. Padding positions map to `E[pad_id]` and are
/// excluded from the loss downstream.
pub fn embed_lookup<T: Element>(params: &ModelParams<T>, batch: &Batch) -> Result<Tensor<T>> {
    batch.validate(params.config.vocab_size)?;
    let d = params.config.embed_dim;
    let b = batch.batch_size();
    let l = batch.max_len;
    if l > params.config.max_seq_len {
        return Err(Error::invalid(format!(
            "batch max_len {l} exceeds model max_seq_len {}",
            params.config.max_seq_len
        )));
    }
    let mut out = Tensor::zeros(&[b, l, d]);
    let e = params.embed_tokens.data();
    let data = out.data_mut();
    for (pos, &id) in batch.token_ids.iter().enumerate() {
        let row = id as usize * d;
        data[pos * d..(pos + 1) * d].copy_from_slice(&e[row..row + d]);
    }
    Ok(out)
}

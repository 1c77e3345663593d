//! Adam with decoupled weight decay and block-level parameter freezing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, ParamBlock};
use crate::tensor::Element;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Which parameter blocks stay untouched by optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FreezeSpec {
    pub freeze_embed: bool,
    pub freeze_lm_head: bool,
    pub freeze_attention_blocks: bool,
}

impl FreezeSpec {
    pub fn is_frozen(&self, block: ParamBlock) -> bool {
        match block {
            ParamBlock::Embed => self.freeze_embed,
            ParamBlock::Attention => self.freeze_attention_blocks,
            ParamBlock::Head => self.freeze_lm_head,
        }
    }
}

/// Adam first/second moments, laid out in parameter visit order.
#[derive(Debug, Clone)]
pub struct OptState<T> {
    pub config: OptimizerConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Element> OptState<T> {
    pub fn new<U: Element>(params: &ModelParams<U>, config: OptimizerConfig) -> Self {
        let mut m = Vec::new();
        params.visit(|_, _, t| m.push(vec![T::zero(); t.numel()]));
        let v = m.clone();
        OptState {
            config,
            step: 0,
            m,
            v,
        }
    }

    /// One Adam update from the gradients currently stored on `params`.
    ///
    /// Frozen blocks are skipped entirely: no weight change and no moment
    /// update, so freezing behaves like pausing those parameters. Tensors
    /// without an allocated gradient are treated the same way.
    pub fn apply_step(&mut self, params: &mut ModelParams<T>, freeze: &FreezeSpec) -> Result<()> {
        let n_tensors = self.m.len();
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let lr = T::from_f64(c.learning_rate);
        let b1 = T::from_f64(c.beta1);
        let b2 = T::from_f64(c.beta2);
        let one_m_b1 = T::from_f64(1.0 - c.beta1);
        let one_m_b2 = T::from_f64(1.0 - c.beta2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let eps = T::from_f64(c.epsilon);
        let wd = T::from_f64(c.weight_decay);

        let mut idx = 0usize;
        let mut mismatch = None;
        params.visit_mut(|name, block, tensor| {
            if idx >= n_tensors {
                mismatch = Some(name);
                return;
            }
            let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
            idx += 1;
            if m.len() != tensor.numel() {
                mismatch = Some(name);
                return;
            }
            if freeze.is_frozen(block) {
                return;
            }
            let (data, grad) = tensor.data_and_grad_mut();
            let Some(grad) = grad else { return };
            for j in 0..data.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + one_m_b1 * g;
                v[j] = b2 * v[j] + one_m_b2 * g * g;
                let mhat = m[j] * inv_bc1;
                let vhat = v[j] * inv_bc2;
                data[j] = data[j] - lr * (mhat / (vhat.sqrt() + eps) + wd * data[j]);
            }
        });
        if let Some(name) = mismatch {
            return Err(Error::invalid(format!(
                "optimizer state does not match parameter layout at {name}"
            )));
        }
        if idx != n_tensors {
            return Err(Error::invalid(
                "optimizer state has more tensors than the model",
            ));
        }
        Ok(())
    }
}

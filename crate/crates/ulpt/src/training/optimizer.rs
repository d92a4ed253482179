//! Plain gradient descent and AdamW over named parameter blocks.
//!
//! The trainer hands each trainable block (low-dimensional prompts, scale,
//! shift, optionally the projection) to the optimizer separately; moment
//! buffers are keyed per block. Every update reports how many elements it
//! touched so the trainer can cross-check the advertised trainable
//! parameter count against what is actually being optimized.

use crate::error::{Result, UlptError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Identifies one trainable tensor of the parameterization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum BlockId {
    Z,
    Scale,
    Shift,
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Gd,
    AdamW,
}

/// Optimizer hyperparameters. The AdamW defaults follow common practice for
/// prompt training: beta1 0.9, beta2 0.999, epsilon 1e-8, no weight decay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl OptimizerConfig {
    pub fn gd() -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::Gd,
            beta1: 0.0,
            beta2: 0.0,
            epsilon: 0.0,
            weight_decay: 0.0,
        }
    }

    pub fn adamw() -> OptimizerConfig {
        OptimizerConfig {
            kind: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == OptimizerKind::AdamW {
            if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
                return Err(UlptError::Config(format!(
                    "adamw betas must lie in [0, 1), got {} and {}",
                    self.beta1, self.beta2
                )));
            }
            if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
                return Err(UlptError::Config(format!(
                    "adamw epsilon must be positive, got {}",
                    self.epsilon
                )));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(UlptError::Config(format!(
                "weight decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// Stateful optimizer instance for one run.
#[derive(Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    /// Completed update steps; drives AdamW bias correction.
    t: u64,
    /// First and second moment buffers per block (AdamW only).
    moments: BTreeMap<BlockId, (Vec<f64>, Vec<f64>)>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Result<Optimizer> {
        config.validate()?;
        Ok(Optimizer {
            config,
            t: 0,
            moments: BTreeMap::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.config.kind
    }

    /// Marks the start of one training step (all blocks updated at the same
    /// bias-correction time).
    pub fn advance(&mut self) {
        self.t += 1;
    }

    /// Applies one update to a block, returning the number of elements
    /// touched. `advance` must have been called for the current step.
    pub fn update_block(
        &mut self,
        id: BlockId,
        lr: f64,
        params: &mut [f64],
        grads: &[f64],
    ) -> usize {
        debug_assert_eq!(params.len(), grads.len());
        debug_assert!(self.t > 0, "advance() before update_block()");
        match self.config.kind {
            OptimizerKind::Gd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    *p -= lr * g;
                }
            }
            OptimizerKind::AdamW => {
                let (m, v) = self
                    .moments
                    .entry(id)
                    .or_insert_with(|| (vec![0.0; params.len()], vec![0.0; params.len()]));
                let b1 = self.config.beta1;
                let b2 = self.config.beta2;
                let bias1 = 1.0 - b1.powi(self.t as i32);
                let bias2 = 1.0 - b2.powi(self.t as i32);
                let wd = self.config.weight_decay;
                for i in 0..params.len() {
                    m[i] = b1 * m[i] + (1.0 - b1) * grads[i];
                    v[i] = b2 * v[i] + (1.0 - b2) * grads[i] * grads[i];
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    params[i] -=
                        lr * (m_hat / (v_hat.sqrt() + self.config.epsilon) + wd * params[i]);
                }
            }
        }
        params.len()
    }
}

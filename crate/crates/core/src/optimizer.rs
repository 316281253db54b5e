//! AdamW with decoupled weight decay and global-norm clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SaeError};
use crate::model::{renormalize_decoder, Gradients, SaeParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 1e-5,
            clip_norm: 1.0,
        }
    }
}

/// First and second moments for one parameter block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }
}

/// One AdamW update of a flat block. `t` is the step number after
/// incrementing (first step is 1).
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    moments: &mut Moments,
    t: u64,
    cfg: &AdamWConfig,
    decay: bool,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    let wd = if decay { cfg.weight_decay } else { 0.0 };
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(moments.m.iter_mut())
        .zip(moments.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.epsilon) + wd * *p);
    }
}

/// Scales all gradients so their global L2 norm is at most `clip_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, clip_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if clip_norm > 0.0 && norm > clip_norm {
        grads.scale(clip_norm / norm);
    }
    norm
}

/// `base_lr · √(n / n_ref)`
pub fn scaled_lr(base_lr: f64, n: usize, n_ref: usize) -> f64 {
    base_lr * (n as f64 / n_ref as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub config: AdamWConfig,
    pub t: u64,
    pub w_enc: Moments,
    pub b_enc: Moments,
    pub w_dec: Moments,
    pub b_pre: Moments,
}

impl AdamWState {
    pub fn new(config: AdamWConfig, params: &SaeParams) -> Self {
        Self {
            config,
            t: 0,
            w_enc: Moments::zeros(params.w_enc.len()),
            b_enc: Moments::zeros(params.b_enc.len()),
            w_dec: Moments::zeros(params.w_dec.len()),
            b_pre: Moments::zeros(params.b_pre.len()),
        }
    }

    /// Updates all four blocks, then restores unit-norm decoder rows.
    /// Only the encoder weights are decayed.
    pub fn step(&mut self, params: &mut SaeParams, grads: &Gradients) -> Result<()> {
        if grads.w_enc.dim() != params.w_enc.dim() || grads.w_dec.dim() != params.w_dec.dim() {
            return Err(SaeError::ShapeMismatch {
                context: "adamw step",
                expected: params.w_enc.dim(),
                actual: grads.w_enc.dim(),
            });
        }
        self.t += 1;
        let cfg = &self.config;
        let blocks = [
            (
                params.w_enc.as_slice_mut(),
                grads.w_enc.as_slice(),
                &mut self.w_enc,
                true,
            ),
            (
                params.b_enc.as_slice_mut(),
                grads.b_enc.as_slice(),
                &mut self.b_enc,
                false,
            ),
            (
                params.w_dec.as_slice_mut(),
                grads.w_dec.as_slice(),
                &mut self.w_dec,
                false,
            ),
            (
                params.b_pre.as_slice_mut(),
                grads.b_pre.as_slice(),
                &mut self.b_pre,
                false,
            ),
        ];
        for (p, g, mom, decay) in blocks {
            let (p, g) = p
                .zip(g)
                .ok_or_else(|| SaeError::invalid("parameter blocks must be contiguous"))?;
            adamw_update(p, g, mom, self.t, cfg, decay);
        }
        renormalize_decoder(params)
    }

    /// Moment blocks in checkpoint order: W_enc, b_enc, W_dec, b_pre.
    pub fn blocks(&self) -> [&Moments; 4] {
        [&self.w_enc, &self.b_enc, &self.w_dec, &self.b_pre]
    }
}

//! Adam with decoupled weight decay, the warmup/decay schedule and global
//! gradient clipping.

use crate::error::{Error, Result};
use crate::neuralnet::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &[&Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }
}

/// One bias-corrected Adam update, then `p -= weight_decay · lr_t · p`.
pub fn adam_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    lr_t: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
    let decay = (cfg.weight_decay * lr_t) as f32;
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("parameter {} shape {:?} vs gradient {:?}", i, p.shape(), g.shape())));
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi as f64 / bc1;
            let v_hat = *vi as f64 / bc2;
            *w -= (lr_t * m_hat / (v_hat.sqrt() + cfg.eps)) as f32;
            *w -= decay * *w;
        }
    }
    Ok(())
}

/// Number of warmup iterations: `ceil(warmup_frac · iterations)`.
pub fn warmup_iters(iterations: usize, warmup_frac: f64) -> usize {
    ((warmup_frac * iterations as f64).ceil() as usize).max(1)
}

/// Linear warmup from 0 to `lr`, then linear decay to 0 at the last
/// iteration.
pub fn lr_at(iter: usize, iterations: usize, lr: f64, warmup_frac: f64) -> f64 {
    let warm = warmup_iters(iterations, warmup_frac);
    if iter < warm {
        return lr * iter as f64 / warm as f64;
    }
    let last = iterations.saturating_sub(1);
    if last <= warm {
        return lr;
    }
    lr * (last.saturating_sub(iter)) as f64 / (last - warm) as f64
}

/// Global L2 norm of all gradients.
pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().map(Tensor::l2_norm_sq).sum::<f64>().sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let k = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= k;
            }
        }
    }
    norm
}

//! AdamW with decoupled weight decay and global gradient-norm clipping.
//! Gates and norm parameters are excluded from decay.

use super::TrainConfig;
use crate::autodiff::{Scalar, Tensor};
use crate::error::Result;
use crate::model::{validate_grads_shape, Params};

#[derive(Clone)]
pub struct OptState<S> {
    pub step: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> OptState<S> {
    pub fn new(params: &Params<S>) -> OptState<S> {
        let zeros = |_: ()| -> Vec<Tensor<S>> {
            params
                .values
                .iter()
                .map(|t| Tensor::zeros(t.rows(), t.cols()))
                .collect()
        };
        OptState {
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }
}

/// Scale all gradients so the global L2 norm is at most `max_norm`; returns
/// the pre-clip norm.
pub fn clip_gradients<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm: f64 = grads.iter().map(|g| g.sq_norm()).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = S::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            g.scale_assign(scale);
        }
    }
    norm
}

/// One AdamW update with bias-corrected moments.
pub fn adamw_step<S: Scalar>(
    params: &mut Params<S>,
    grads: &[Tensor<S>],
    state: &mut OptState<S>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    validate_grads_shape(params, grads)?;
    state.step += 1;
    let t = state.step as i32;
    let beta1 = S::from_f64(cfg.beta1);
    let beta2 = S::from_f64(cfg.beta2);
    let one_m_b1 = S::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = S::from_f64(1.0 - cfg.beta2);
    let bc1 = S::from_f64(1.0 - cfg.beta1.powi(t));
    let bc2 = S::from_f64(1.0 - cfg.beta2.powi(t));
    let eps = S::from_f64(cfg.adam_eps);
    let lr_s = S::from_f64(lr);
    let decay_factor = S::from_f64(1.0 - lr * cfg.weight_decay);

    let schema = params.schema.clone();
    for (i, grad) in grads.iter().enumerate() {
        let p = params.values[i].as_mut_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        let g = grad.as_slice();
        let decay = schema.specs[i].decay && cfg.weight_decay > 0.0;
        for j in 0..p.len() {
            m[j] = beta1 * m[j] + one_m_b1 * g[j];
            v[j] = beta2 * v[j] + one_m_b2 * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            if decay {
                p[j] *= decay_factor;
            }
            p[j] -= lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

use std::collections::HashMap;

use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam with bias-corrected moments. Only parameters that receive a
/// gradient, and are trainable, are touched.
#[derive(Clone, Debug, Default)]
pub struct Adam<S> {
    step: u64,
    moments: HashMap<ParamId, (Vec<S>, Vec<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new() -> Self {
        Self {
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn update(&mut self, params: &mut ParamStore<S>, grads: &[(ParamId, Tensor<S>)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (S::of(ADAM_BETA1), S::of(ADAM_BETA2));
        let c1 = S::of(1.0 - ADAM_BETA1.powi(t));
        let c2 = S::of(1.0 - ADAM_BETA2.powi(t));
        let (lr, eps) = (S::of(lr), S::of(ADAM_EPS));
        for (id, g) in grads {
            if !params.get(*id).trainable {
                continue;
            }
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(*id)
                .or_insert_with(|| (vec![S::zero(); n], vec![S::zero(); n]));
            let value = params.value_mut(*id).data_mut();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = b1 * m[i] + (S::one() - b1) * gi;
                v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                value[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn global_norm<S: Scalar>(grads: &[(ParamId, Tensor<S>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&x| x.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping. `max_norm == 0` disables clipping.
pub fn clip_global_norm<S: Scalar>(grads: &mut [(ParamId, Tensor<S>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let k = S::of(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= k;
            }
        }
    }
    norm
}

/// `lr_ref · lr_ref_images / n_primary · decay^epoch`.
pub fn lr_at(epoch: usize, n_primary: usize, lr_ref: f64, lr_ref_images: usize, decay: f64) -> f64 {
    lr_ref * lr_ref_images as f64 / n_primary.max(1) as f64 * decay.powi(epoch as i32)
}

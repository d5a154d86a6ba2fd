//! AdamW with decoupled weight decay and global gradient-norm clipping.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Tensor, TensorMut};

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    /// First and second moments per trainable tensor name.
    pub state: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            state: BTreeMap::new(),
        }
    }

    /// Applies one update. `params` and `grads` must list the same tensors
    /// in the same order; only those tensors get optimizer state.
    pub fn update(&mut self, params: Vec<TensorMut<'_>>, grads: &[Tensor<'_>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (p, g) in params.into_iter().zip(grads) {
            if p.name != g.name || p.data.len() != g.data.len() {
                return Err(Error::shape(format!(
                    "gradient {} does not match parameter {}",
                    g.name, p.name
                )));
            }
            let (m, v) = self
                .state
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; g.data.len()], vec![0.0; g.data.len()]));
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p.data[i] *= 1.0 - self.lr * self.weight_decay;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

pub fn global_norm(grads: &[Tensor<'_>]) -> f64 {
    grads
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient so the global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: Vec<TensorMut<'_>>, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|t| t.data.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for t in grads {
            t.data.iter_mut().for_each(|g| *g *= scale);
        }
    }
    norm
}

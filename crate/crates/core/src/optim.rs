//! AdamW with decoupled weight decay.

use crate::autograd::Gradients;
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Debug, Clone)]
pub struct Moments<T> {
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    /// Indexed by parameter id; created on a parameter's first update.
    pub moments: Vec<Option<Moments<T>>>,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig, num_params: usize) -> Self {
        Self { cfg, t: 0, moments: vec![None; num_params] }
    }

    /// One update at learning rate `lr`. Parameters that are frozen or
    /// received no gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) {
        self.t += 1;
        let c = self.cfg;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = T::of(1.0 - c.beta1.powi(self.t as i32));
        let bc2 = T::of(1.0 - c.beta2.powi(self.t as i32));
        let (lr_t, eps) = (T::of(lr), T::of(c.eps));
        let decay = T::of(lr * c.weight_decay);
        for (id, g) in grads.iter() {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            let mom = self.moments[id.index()]
                .get_or_insert_with(|| Moments { m: Tensor::zeros(g.shape()), v: Tensor::zeros(g.shape()) });
            let (m, v) = (mom.m.data_mut(), mom.v.data_mut());
            let decays = p.decay;
            for (i, (w, &gi)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let mut next = *w - lr_t * mhat / (vhat.sqrt() + eps);
                if decays {
                    next -= decay * *w;
                }
                *w = next;
            }
        }
    }
}

//! AdamW with decoupled weight decay.

use misra::params::{ParamId, ParamStore};
use misra::{Scalar, Tensor};

use crate::error::{HarnessError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<F> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Number of completed updates.
    pub step: u64,
    /// First moments, one per trainable parameter in store order.
    pub m: Vec<Tensor<F>>,
    /// Second moments.
    pub v: Vec<Tensor<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(store: &ParamStore<F>, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor<F>> =
            store.trainable_ids().iter().map(|&id| Tensor::zeros(store.value(id).shape())).collect();
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One update from `(id, grad)` pairs in trainable store order.
    pub fn update(&mut self, store: &mut ParamStore<F>, grads: &[(ParamId, Tensor<F>)]) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(HarnessError::Config(format!(
                "optimizer tracks {} tensors, got {} gradients",
                self.m.len(),
                grads.len()
            )));
        }
        for (i, (id, g)) in grads.iter().enumerate() {
            if g.shape() != store.value(*id).shape() || g.shape() != self.m[i].shape() {
                return Err(HarnessError::Config(format!(
                    "gradient shape {:?} does not match parameter {:?}",
                    g.shape(),
                    store.get(*id).name
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (lr, wd, eps) = (self.lr, self.weight_decay, self.eps);
        for (i, (id, g)) in grads.iter().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let theta = store.value_mut(*id).data_mut();
            for j in 0..theta.len() {
                let gj = g.data()[j].as_f64();
                let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
                m[j] = F::lit(mj);
                v[j] = F::lit(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                let th = theta[j].as_f64();
                theta[j] = F::lit(th - lr * (mhat / (vhat.sqrt() + eps) + wd * th));
            }
        }
        Ok(())
    }
}

/// Global L2 norm of a gradient set.
pub fn global_norm<F: Scalar>(grads: &[(ParamId, Tensor<F>)]) -> f64 {
    grads.iter().flat_map(|(_, g)| g.data().iter()).map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
}

/// Rescales to `max_norm` when the global norm exceeds it; returns the pre-clip norm.
pub fn clip_global_norm<F: Scalar>(grads: &mut [(ParamId, Tensor<F>)], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = F::lit(max_norm / norm);
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

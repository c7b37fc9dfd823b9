//! Adam and AdamW over a parameter store.

use std::collections::BTreeMap;

use crate::error::Result;
use crate::graph::ParamStoreBase;
use crate::scalar::Scalar;
use crate::tensor::TensorBase;

/// Adam with optional decoupled weight decay (AdamW when `weight_decay > 0`).
pub struct AdamBase<S: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, TensorBase<S>>,
    v: BTreeMap<String, TensorBase<S>>,
}

impl<S: Scalar> AdamBase<S> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay: 0.0,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update. Parameters without a gradient entry are untouched.
    pub fn step(&mut self, params: &mut ParamStoreBase<S>, grads: &BTreeMap<String, TensorBase<S>>) -> Result<()> {
        self.step += 1;
        let b1 = S::of(self.beta1);
        let b2 = S::of(self.beta2);
        let one = S::one();
        let bc1 = S::of(1.0 - self.beta1.powi(self.step as i32));
        let bc2 = S::of(1.0 - self.beta2.powi(self.step as i32));
        let lr = S::of(self.lr);
        let eps = S::of(self.eps);
        let wd = S::of(self.weight_decay);
        for (name, grad) in grads {
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| TensorBase::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| TensorBase::zeros(grad.shape()));
            let p = params.get_mut(name)?;
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..grad.numel() {
                let g = grad.data()[i];
                md[i] = b1 * md[i] + (one - b1) * g;
                vd[i] = b2 * vd[i] + (one - b2) * g * g;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                let mut upd = mhat / (vhat.sqrt() + eps);
                if self.weight_decay > 0.0 {
                    upd += wd * pd[i];
                }
                pd[i] -= lr * upd;
            }
        }
        Ok(())
    }
}

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Scalar, Tensor};

/// Learning-rate schedule over epochs `0..=T`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Schedule {
    /// `lr_0 * (1 + cos(pi * t / T)) / 2`
    Cosine { base_lr: f64, epochs: usize },
    /// `lr_0 * factor^floor(t / period)`
    Step { base_lr: f64, factor: f64, period: usize },
}

impl Schedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        match *self {
            Schedule::Cosine { base_lr, epochs } => {
                if epochs == 0 {
                    return base_lr;
                }
                let t = epoch.min(epochs) as f64 / epochs as f64;
                base_lr * (1.0 + (std::f64::consts::PI * t).cos()) / 2.0
            }
            Schedule::Step { base_lr, factor, period } => {
                base_lr * factor.powi((epoch / period.max(1)) as i32)
            }
        }
    }
}

/// Momentum buffers and hyperparameters of SGD with coupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub buffers: Vec<Tensor<T>>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr: f64,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        OptimizerState {
            buffers: store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect(),
            momentum,
            weight_decay,
            lr: 0.0,
            step: 0,
        }
    }

    /// `v <- mu v + (g + wd p)`, `p <- p - lr v`. Batch-norm scales and shifts get no decay.
    /// Parameters without a gradient are treated as having a zero gradient.
    pub fn sgd_step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if store.is_frozen() {
            return Err(Error::usage("refusing to update a frozen parameter store"));
        }
        if self.buffers.len() != store.len() {
            return Err(Error::usage(format!(
                "optimizer has {} buffers for {} parameters",
                self.buffers.len(),
                store.len()
            )));
        }
        if !(lr >= 0.0 && lr.is_finite()) {
            return Err(Error::usage(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        for (id, p) in store.iter() {
            if let Some(g) = grads.get(id) {
                if let Some(i) = g.data().iter().position(|v| !v.as_f64().is_finite()) {
                    return Err(Error::Numerical(format!(
                        "non-finite gradient in parameter {} at element {i} (step {})",
                        p.name, self.step
                    )));
                }
            }
        }
        let mu = T::of(self.momentum);
        let step = T::of(lr);
        for (id, p) in store.iter_mut() {
            let wd = if p.kind.is_batch_norm() { T::zero() } else { T::of(self.weight_decay) };
            let v = &mut self.buffers[id.0];
            let g = grads.get(id);
            for (k, (vk, pk)) in v.data_mut().iter_mut().zip(p.value.data_mut()).enumerate() {
                let gk = g.map_or(T::zero(), |g| g.data()[k]);
                *vk = mu * *vk + gk + wd * *pk;
                *pk = *pk - step * *vk;
            }
        }
        self.lr = lr;
        self.step += 1;
        Ok(())
    }
}

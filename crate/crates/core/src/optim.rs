//! Momentum SGD with coupled weight decay.

use std::collections::BTreeMap;

use semimoe_autograd::Tensor;

use crate::config::LrSchedule;
use crate::nn::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Velocity per parameter; created on the parameter's first update.
    pub buffers: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: BTreeMap::new(),
        }
    }

    /// Updates every parameter named in `grads`; the rest are left untouched.
    ///
    /// `d = g + wd·p`, `v = μ·v + d`, `p -= lr·v`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) {
        for (name, g) in grads {
            let p = store.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            assert_eq!(p.shape(), g.shape(), "gradient shape mismatch for {name}");
            let wd = self.weight_decay;
            let mu = self.momentum;
            let buf = self
                .buffers
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for ((v, &gi), pi) in buf.data_mut().iter_mut().zip(g.data()).zip(p.data_mut().iter_mut()) {
                let d = gi + wd * *pi;
                *v = mu * *v + d;
                *pi -= lr * *v;
            }
        }
    }
}

/// Learning rate at iteration `it` of `total`.
pub fn learning_rate(base: f64, schedule: LrSchedule, it: usize, total: usize) -> f64 {
    match schedule {
        LrSchedule::Constant => base,
        LrSchedule::Poly => base * (1.0 - it as f64 / total.max(1) as f64).max(0.0).powf(0.9),
    }
}

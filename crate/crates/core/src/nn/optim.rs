use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd { momentum: 0.9 }
    }
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First-order optimizer over every tensor of a [`ParamStore`], with global
/// gradient-norm clipping applied before each step.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub clip_norm: Option<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, clip_norm: Option<f64>) -> Self {
        Optimizer { kind, lr, clip_norm, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Apply one update from the store's gradient slots. Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore) -> f64 {
        let norm = store.grad_norm();
        if let Some(c) = self.clip_norm {
            if norm > c {
                store.scale_grads(c / norm);
            }
        }
        if self.m.is_empty() {
            self.m = store.ids().map(|id| Tensor::zeros(store.value(id).rows, store.value(id).cols)).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let lr = self.lr;
        let t = self.t as f64;
        for (((w, g), m), v) in store.values_and_grads().zip(&mut self.m).zip(&mut self.v) {
            match self.kind {
                OptimizerKind::Sgd { momentum } => {
                    for ((w, &g), m) in w.data.iter_mut().zip(&g.data).zip(&mut m.data) {
                        *m = momentum * *m + g;
                        *w -= lr * *m;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (c1, c2) = (1.0 - beta1.powf(t), 1.0 - beta2.powf(t));
                    for (((w, &g), m), v) in w.data.iter_mut().zip(&g.data).zip(&mut m.data).zip(&mut v.data) {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            }
        }
        norm
    }
}

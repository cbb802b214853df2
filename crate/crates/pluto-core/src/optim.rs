//! Optimizers for pretraining: SGD with momentum and AdamW, both with
//! linear-warmup + cosine-decay scheduling.

use crate::autodiff::Gradients;
use crate::error::Result;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "algo")]
pub enum OptAlgo {
    Sgd { momentum: f64 },
    AdamW,
}

/// Everything a training loop needs to know about its optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerSpec {
    #[serde(flatten)]
    pub algo: OptAlgo,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_epochs: usize,
}

impl OptimizerSpec {
    pub fn adamw(lr: f64, epochs: usize) -> Self {
        OptimizerSpec {
            algo: OptAlgo::AdamW,
            lr,
            weight_decay: 0.0,
            epochs,
            batch_size: 16,
            warmup_epochs: epochs.min(10) / 2,
        }
    }

    pub fn sgd(lr: f64, momentum: f64, epochs: usize) -> Self {
        OptimizerSpec {
            algo: OptAlgo::Sgd { momentum },
            lr,
            weight_decay: 0.0,
            epochs,
            batch_size: 16,
            warmup_epochs: epochs.min(10) / 2,
        }
    }

    /// Warmup then cosine decay, evaluated per epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        if self.epochs == 0 {
            return self.lr;
        }
        if self.warmup_epochs > 0 && epoch < self.warmup_epochs {
            return self.lr * (epoch + 1) as f64 / self.warmup_epochs as f64;
        }
        let span = (self.epochs - self.warmup_epochs).max(1) as f64;
        let t = (epoch - self.warmup_epochs) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Stateful optimizer over named parameters.
pub struct Optimizer {
    algo: OptAlgo,
    weight_decay: f64,
    slots: HashMap<String, Slot>,
    steps: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Optimizer {
    pub fn new(spec: &OptimizerSpec) -> Self {
        Optimizer {
            algo: spec.algo,
            weight_decay: spec.weight_decay,
            slots: HashMap::new(),
            steps: 0,
        }
    }

    /// One update over `(name, parameter)` pairs with gradients looked up by
    /// name. Parameters without a gradient entry are left untouched.
    pub fn step(
        &mut self,
        params: &mut [(String, &mut Tensor)],
        grads: &Gradients,
        lr: f64,
    ) -> Result<()> {
        self.steps += 1;
        for (name, tensor) in params.iter_mut() {
            let grad = match grads.get(name) {
                Ok(g) => g,
                Err(_) => continue,
            };
            let n = tensor.numel();
            let slot = self.slots.entry(name.clone()).or_insert_with(|| Slot {
                m: vec![0.0; n],
                v: vec![0.0; n],
            });
            let g = grad.data();
            let p = tensor.data_mut();
            match self.algo {
                OptAlgo::Sgd { momentum } => {
                    for i in 0..n {
                        slot.m[i] = momentum * slot.m[i] + g[i];
                        p[i] -= lr * (slot.m[i] + self.weight_decay * p[i]);
                    }
                }
                OptAlgo::AdamW => {
                    let bc1 = 1.0 - ADAM_BETA1.powi(self.steps as i32);
                    let bc2 = 1.0 - ADAM_BETA2.powi(self.steps as i32);
                    for i in 0..n {
                        slot.m[i] = ADAM_BETA1 * slot.m[i] + (1.0 - ADAM_BETA1) * g[i];
                        slot.v[i] = ADAM_BETA2 * slot.v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let mhat = slot.m[i] / bc1;
                        let vhat = slot.v[i] / bc2;
                        // decoupled weight decay
                        p[i] -= lr * self.weight_decay * p[i];
                        p[i] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::GradContext;

    fn quadratic_grad(x: &Tensor) -> Gradients {
        let mut ctx = GradContext::new();
        let id = ctx.watch("x", x.to_row_matrix()).unwrap();
        let sq = ctx.mul_elem(id, id).unwrap();
        let loss = ctx.sum_all(sq);
        ctx.gradient(loss).unwrap()
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let mut x = Tensor::vector(vec![4.0, -3.0]);
        let spec = OptimizerSpec::sgd(0.1, 0.0, 1);
        let mut opt = Optimizer::new(&spec);
        for _ in 0..50 {
            let grads = quadratic_grad(&x);
            let mut params = vec![("x".to_string(), &mut x)];
            opt.step(&mut params, &grads, 0.1).unwrap();
        }
        assert!(x.l2_norm() < 1e-3, "x = {:?}", x.data());
    }

    #[test]
    fn adamw_descends_a_quadratic() {
        let mut x = Tensor::vector(vec![4.0, -3.0]);
        let spec = OptimizerSpec::adamw(0.2, 1);
        let mut opt = Optimizer::new(&spec);
        for _ in 0..200 {
            let grads = quadratic_grad(&x);
            let mut params = vec![("x".to_string(), &mut x)];
            opt.step(&mut params, &grads, 0.2).unwrap();
        }
        assert!(x.l2_norm() < 1e-2, "x = {:?}", x.data());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let spec = OptimizerSpec {
            algo: OptAlgo::AdamW,
            lr: 1.0,
            weight_decay: 0.0,
            epochs: 20,
            batch_size: 8,
            warmup_epochs: 5,
        };
        assert!(spec.lr_at_epoch(0) < spec.lr_at_epoch(4));
        assert!((spec.lr_at_epoch(4) - 1.0).abs() < 1e-12);
        assert!(spec.lr_at_epoch(19) < 0.1);
    }
}

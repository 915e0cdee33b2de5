//! First-order optimizers over lists of tensors.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Optimizer<T: Real = f32> {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(kind: OptimizerKind, lr: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Config(alloc::format!("learning rate {lr} must be > 0")));
        }
        Ok(Self {
            kind,
            lr,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update; `params[i]` pairs with `grads[i]` on every call.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(alloc::format!(
                "{} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.v = self.m.clone();
        }
        self.steps += 1;
        let lr = T::c(self.lr);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() || self.m[i].len() != p.numel() {
                return Err(Error::Dimension {
                    op: "optimizer step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &gi) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * gi;
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let (b1, b2) = (T::c(beta1), T::c(beta2));
                    let one = T::one();
                    let c1 = one - T::c(beta1).powi(self.steps as i32);
                    let c2 = one - T::c(beta2).powi(self.steps as i32);
                    let eps = T::c(eps);
                    let (m, v) = (&mut self.m[i], &mut self.v[i]);
                    for (j, (w, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (one - b1) * gi;
                        v[j] = b2 * v[j] + (one - b2) * gi * gi;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

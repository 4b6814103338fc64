use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

/// Adam with the usual bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64, steps: u64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr, steps: 0 },
        }
    }

    pub fn steps_taken(&self) -> u64 {
        match self {
            Optimizer::Adam(a) => a.steps_taken(),
            Optimizer::Sgd { steps, .. } => *steps,
        }
    }

    /// Drops accumulated state (moments and step count).
    pub fn reset(&mut self) {
        match self {
            Optimizer::Adam(a) => *a = Adam::new(a.lr),
            Optimizer::Sgd { steps, .. } => *steps = 0,
        }
    }

    /// Applies one update. `grads` must line up with `params` one-to-one.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer step got {} gradients for {} parameters",
                grads.len(),
                params.len()
            )));
        }
        for (p, g) in params.tensors().iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::dim("optimizer step", p.shape(), g.shape()));
            }
        }
        match self {
            Optimizer::Sgd { lr, steps } => {
                for (p, g) in params.tensors_mut().iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= *lr * d;
                    }
                }
                *steps += 1;
            }
            Optimizer::Adam(a) => {
                if a.m.is_empty() {
                    a.m = params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
                    a.v = a.m.clone();
                }
                a.step += 1;
                let bc1 = 1.0 - a.beta1.powi(a.step as i32);
                let bc2 = 1.0 - a.beta2.powi(a.step as i32);
                for ((p, g), (m, v)) in params
                    .tensors_mut()
                    .iter_mut()
                    .zip(grads)
                    .zip(a.m.iter_mut().zip(a.v.iter_mut()))
                {
                    for (((w, &d), mi), vi) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mi = a.beta1 * *mi + (1.0 - a.beta1) * d;
                        *vi = a.beta2 * *vi + (1.0 - a.beta2) * d * d;
                        let mhat = *mi / bc1;
                        let vhat = *vi / bc2;
                        *w -= a.lr * mhat / (vhat.sqrt() + a.eps);
                    }
                }
            }
        }
        Ok(())
    }
}

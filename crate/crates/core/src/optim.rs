//! First-order optimizers over an explicit subset of model parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::Gradients;
use crate::model::{MoeModel, ParamId};
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    first: Matrix,
    second: Matrix,
}

/// Updates exactly the parameters it was constructed with; every other tensor
/// of the model is left untouched.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    steps: u64,
    params: Vec<ParamId>,
    moments: BTreeMap<ParamId, Moments>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, model: &MoeModel, params: Vec<ParamId>) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::arg(format!("learning rate must be positive, got {lr}")));
        }
        let mut moments = BTreeMap::new();
        for &id in &params {
            let m = model
                .param(id)
                .ok_or_else(|| Error::arg(format!("model has no parameter {id}")))?;
            if kind == OptimizerKind::Adam {
                moments.insert(
                    id,
                    Moments {
                        first: Matrix::zeros(m.rows(), m.cols()),
                        second: Matrix::zeros(m.rows(), m.cols()),
                    },
                );
            }
        }
        Ok(Self {
            kind,
            lr,
            steps: 0,
            params,
            moments,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Parameters that carry optimizer state (empty for SGD).
    pub fn state_params(&self) -> Vec<ParamId> {
        self.moments.keys().copied().collect()
    }

    pub fn step(&mut self, model: &mut MoeModel, grads: &Gradients) -> Result<()> {
        self.steps += 1;
        let t = self.steps as i32;
        for &id in &self.params {
            let g = grads
                .get(id)
                .ok_or_else(|| Error::Internal(format!("no gradient for {id}")))?;
            let w = model
                .param_mut(id)
                .ok_or_else(|| Error::Internal(format!("no parameter {id}")))?;
            match self.kind {
                OptimizerKind::Sgd => w.axpy(-self.lr, g),
                OptimizerKind::Adam => {
                    let mom = self.moments.get_mut(&id).expect("adam state for every param");
                    let bc1 = 1.0 - BETA1.powi(t);
                    let bc2 = 1.0 - BETA2.powi(t);
                    let (m1, m2) = (mom.first.data_mut(), mom.second.data_mut());
                    for (((wi, &gi), a), b) in w.data_mut().iter_mut().zip(g.data()).zip(m1).zip(m2) {
                        *a = BETA1 * *a + (1.0 - BETA1) * gi;
                        *b = BETA2 * *b + (1.0 - BETA2) * gi * gi;
                        let mhat = *a / bc1;
                        let vhat = *b / bc2;
                        *wi -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}

//! Teacher pre-training with next-token cross-entropy.

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{self, Gradients, Objective};
use crate::model::{MoeModel, Sequence};
use crate::optim::{Optimizer, OptimizerKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            learning_rate: 1e-2,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
}

/// Trains every parameter of `model` on `corpus`. Batches are consecutive
/// windows of `batch_size` sequences, wrapping around the corpus.
pub fn train_teacher(
    model: &MoeModel,
    corpus: &[Sequence],
    config: &TeacherTrainConfig,
) -> Result<(MoeModel, Vec<TrainRecord>)> {
    if corpus.is_empty() {
        return Err(Error::arg("empty training corpus"));
    }
    if config.batch_size == 0 {
        return Err(Error::arg("batch_size must be positive"));
    }
    for s in corpus {
        s.validate(Some(model.config.vocab_size))?;
    }
    let mut model = model.clone();
    if config.steps == 0 {
        return Ok((model, Vec::new()));
    }
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, &model, model.param_ids())?;
    let mut history = Vec::with_capacity(config.steps);
    let objective = Objective::CrossEntropy { epsilon: 1e-8 };
    for step in 0..config.steps {
        let batch: Vec<&Sequence> = (0..config.batch_size)
            .map(|i| &corpus[(step * config.batch_size + i) % corpus.len()])
            .collect();
        let results = batch
            .par_iter()
            .map(|seq| grad::backward(&model, seq, objective))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.after_updates(step))?;
        let mut grads = Gradients::zeros_like(&model);
        let mut loss = 0.0;
        for (l, g) in &results {
            loss += l;
            grads.add_assign(g);
        }
        let n = batch.len() as f64;
        loss /= n;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite training loss at step {step}")));
        }
        grads.scale(1.0 / n);
        opt.step(&mut model, &grads)?;
        debug!("teacher step {step} loss {loss:.6e}");
        history.push(TrainRecord { step, loss });
    }
    info!(
        "teacher training: {} steps, final loss {:.6e}",
        config.steps,
        history.last().map_or(f64::NAN, |r| r.loss)
    );
    Ok((model, history))
}

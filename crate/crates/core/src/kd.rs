//! Router knowledge distillation.
//!
//! The student's expert and backbone parameters are frozen; only the router
//! matrices are optimized to pull the student's temperature-softened
//! next-token distribution toward the teacher's:
//!
//! ```text
//! N_x   = Σ_{t=1}^{L-1} m_{t+1} + ε
//! L_RKD = τ² / N_x · Σ_t m_{t+1} · KL(softmax(z_T/τ) ‖ softmax(z_S/τ))
//! ```

use log::{debug, info};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grad::{self, Gradients, Objective};
use crate::model::{MoeModel, ParamId, Sequence};
use crate::optim::{Optimizer, OptimizerKind};
use crate::tensor::{self, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub max_seq_len: usize,
    pub max_samples: usize,
    pub epsilon: f64,
    pub optimizer: OptimizerKind,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            learning_rate: 5e-5,
            epochs: 1,
            batch_size: 2,
            grad_accum: 4,
            max_seq_len: 512,
            max_samples: 3000,
            epsilon: 1e-8,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::arg("temperature must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::arg("learning_rate must be positive"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::arg("epsilon must be positive"));
        }
        if self.batch_size == 0 || self.grad_accum == 0 || self.max_seq_len == 0 || self.max_samples == 0 {
            return Err(Error::arg(
                "batch_size, grad_accum, max_seq_len and max_samples must be positive",
            ));
        }
        Ok(())
    }
}

/// Returns `(loss, N_x)`.
pub(crate) fn kd_loss_parts(
    teacher_logits: &Matrix,
    student_logits: &Matrix,
    mask: &[u8],
    temperature: f64,
    epsilon: f64,
) -> Result<(f64, f64)> {
    if teacher_logits.shape() != student_logits.shape() {
        return Err(Error::arg(format!(
            "logit shapes differ: {:?} vs {:?}",
            teacher_logits.shape(),
            student_logits.shape()
        )));
    }
    if mask.len() != student_logits.rows() {
        return Err(Error::arg(format!(
            "mask length {} does not match {} positions",
            mask.len(),
            student_logits.rows()
        )));
    }
    if mask.iter().any(|&m| m > 1) {
        return Err(Error::arg("mask entries must be 0 or 1"));
    }
    if !(temperature > 0.0) || !(epsilon > 0.0) {
        return Err(Error::arg("temperature and epsilon must be positive"));
    }
    let len = mask.len();
    if len < 2 {
        return Ok((0.0, epsilon));
    }
    let n = mask[1..].iter().map(|&m| m as f64).sum::<f64>() + epsilon;
    let mut sum = 0.0;
    for t in 0..len - 1 {
        if mask[t + 1] == 0 {
            continue;
        }
        let p_t = tensor::softmax(teacher_logits.row(t), temperature)?;
        let p_s = tensor::softmax(student_logits.row(t), temperature)?;
        sum += tensor::kl_divergence(&p_t, &p_s)?;
    }
    Ok((temperature * temperature * sum / n, n))
}

/// Masked, temperature-scaled token-level KL from teacher to student for one
/// sequence. Row `t` of each logit matrix predicts token `t + 1`.
pub fn kd_loss(
    teacher_logits: &Matrix,
    student_logits: &Matrix,
    mask: &[u8],
    temperature: f64,
    epsilon: f64,
) -> Result<f64> {
    Ok(kd_loss_parts(teacher_logits, student_logits, mask, temperature, epsilon)?.0)
}

/// Mean per-sequence KD loss of `student` against `teacher` over `corpus`.
pub fn evaluate_kd_loss(
    teacher: &MoeModel,
    student: &MoeModel,
    corpus: &[Sequence],
    temperature: f64,
    epsilon: f64,
) -> Result<f64> {
    check_compatible(teacher, student)?;
    if corpus.is_empty() {
        return Err(Error::arg("empty evaluation corpus"));
    }
    let losses = corpus
        .par_iter()
        .map(|seq| {
            let zt = teacher.logits(&seq.tokens)?;
            let zs = student.logits(&seq.tokens)?;
            kd_loss(&zt, &zs, &seq.mask, temperature, epsilon)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

fn check_compatible(teacher: &MoeModel, student: &MoeModel) -> Result<()> {
    if teacher.config.vocab_size != student.config.vocab_size {
        return Err(Error::arg(format!(
            "vocabulary mismatch: teacher {} vs student {}",
            teacher.config.vocab_size, student.config.vocab_size
        )));
    }
    if teacher.config.d_model != student.config.d_model {
        return Err(Error::arg(format!(
            "d_model mismatch: teacher {} vs student {}",
            teacher.config.d_model, student.config.d_model
        )));
    }
    Ok(())
}

/// Closed-form router-gradient reference for a standalone softmax router:
/// per-logit `(g_S − g_T)/τ` and its outer product with the router input `x`.
pub fn router_grad_formula(
    g_teacher: &[f64],
    g_student: &[f64],
    x: &[f64],
    temperature: f64,
) -> Result<(Vec<f64>, Matrix)> {
    if g_teacher.len() != g_student.len() {
        return Err(Error::arg(format!(
            "routing distributions have lengths {} and {}",
            g_teacher.len(),
            g_student.len()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::arg("temperature must be positive"));
    }
    let per_logit: Vec<f64> = g_student
        .iter()
        .zip(g_teacher)
        .map(|(s, t)| (s - t) / temperature)
        .collect();
    let mut outer = Matrix::zeros(per_logit.len(), x.len());
    outer.add_outer(1.0, &per_logit, x);
    Ok((per_logit, outer))
}

/// Share of parameters that live in router matrices.
pub fn count_router_fraction(model: &MoeModel) -> Result<f64> {
    let router = model.router_parameter_count();
    if router == 0 {
        return Err(Error::input("model has no router parameters"));
    }
    Ok(router as f64 / model.parameter_count() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub kd_loss: f64,
    pub lr: f64,
}

/// Optimizer state (router matrices only) plus running loss statistics.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub step: usize,
    pub optimizer: Optimizer,
    pub loss_sum: f64,
    pub last_loss: f64,
}

impl TrainState {
    pub fn mean_loss(&self) -> f64 {
        if self.step == 0 {
            0.0
        } else {
            self.loss_sum / self.step as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct Calibration {
    pub student: MoeModel,
    pub history: Vec<StepRecord>,
    pub state: TrainState,
}

fn router_ids(model: &MoeModel) -> Vec<ParamId> {
    (0..model.n_layers()).map(|layer| ParamId::Router { layer }).collect()
}

/// Calibrates the student's routers against the teacher.
///
/// Samples are the first `max_samples` sequences of `corpus`, truncated to
/// `max_seq_len`, visited in order. One optimizer step consumes
/// `batch_size × grad_accum` sequences; its gradient is the mean of the
/// per-sequence gradients of that window.
pub fn calibrate_router(
    teacher: &MoeModel,
    student: &MoeModel,
    corpus: &[Sequence],
    config: &KdConfig,
) -> Result<Calibration> {
    config.validate()?;
    check_compatible(teacher, student)?;
    if corpus.is_empty() {
        return Err(Error::arg("empty calibration corpus"));
    }
    let samples: Vec<Sequence> = corpus
        .iter()
        .take(config.max_samples)
        .map(|s| s.truncated(config.max_seq_len))
        .collect();
    for s in &samples {
        s.validate(Some(student.config.vocab_size))?;
    }

    let mut model = student.clone();
    let optimizer = Optimizer::new(config.optimizer, config.learning_rate, &model, router_ids(&model))?;
    let mut state = TrainState {
        step: 0,
        optimizer,
        loss_sum: 0.0,
        last_loss: 0.0,
    };
    let mut history = Vec::new();
    let window = config.batch_size * config.grad_accum;

    for epoch in 0..config.epochs {
        for chunk in samples.chunks(window) {
            let mut grads = Gradients::zeros_like(&model);
            let mut loss_sum = 0.0;
            for micro in chunk.chunks(config.batch_size) {
                let results = micro
                    .par_iter()
                    .map(|seq| {
                        let zt = teacher.logits(&seq.tokens)?;
                        grad::backward(
                            &model,
                            seq,
                            Objective::Distill {
                                teacher_logits: &zt,
                                temperature: config.temperature,
                                epsilon: config.epsilon,
                            },
                        )
                    })
                    .collect::<Result<Vec<_>>>()
                    .map_err(|e| e.after_updates(state.step))?;
                for (loss, g) in &results {
                    loss_sum += loss;
                    grads.add_assign(g);
                }
            }
            let n = chunk.len() as f64;
            let loss = loss_sum / n;
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite KD loss at step {} (epoch {epoch})",
                    state.step
                )));
            }
            grads.scale(1.0 / n);
            state.optimizer.step(&mut model, &grads)?;
            history.push(StepRecord {
                step: state.step,
                kd_loss: loss,
                lr: config.learning_rate,
            });
            state.step += 1;
            state.loss_sum += loss;
            state.last_loss = loss;
            debug!("kd step {} loss {loss:.6e}", state.step);
        }
    }
    info!(
        "router calibration: {} steps, mean loss {:.6e}, last {:.6e}",
        state.step,
        state.mean_loss(),
        state.last_loss
    );
    Ok(Calibration {
        student: model,
        history,
        state,
    })
}

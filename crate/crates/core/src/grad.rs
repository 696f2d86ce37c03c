//! Reverse-mode differentiation of sequence losses through the MoE model.
//!
//! Gradients are propagated from the output logits through the head, every
//! MoE block (residual path, selected experts and their renormalized gate
//! weights) and into the embedding rows. The discrete top-k choice is held
//! fixed: only the gate weights of selected experts carry gradient back to
//! the router, so router rows of unselected experts receive none from that
//! token.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::{sigmoid, MoeModel, ParamId, PositionCache, Sequence};
use crate::tensor::{self, Matrix};

/// Gradient store keyed by parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    tensors: BTreeMap<ParamId, Matrix>,
}

impl Gradients {
    pub fn zeros_like(model: &MoeModel) -> Self {
        let tensors = model
            .param_ids()
            .into_iter()
            .filter_map(|id| model.param(id).map(|m| (id, Matrix::zeros(m.rows(), m.cols()))))
            .collect();
        Self { tensors }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.tensors.get(&id)
    }

    fn slot(&mut self, id: ParamId) -> Result<&mut Matrix> {
        self.tensors
            .get_mut(&id)
            .ok_or_else(|| Error::Internal(format!("no gradient slot for {id}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.tensors.iter().map(|(k, v)| (*k, v))
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (id, g) in &mut self.tensors {
            if let Some(o) = other.tensors.get(id) {
                g.axpy(1.0, o);
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.tensors.values_mut().for_each(|g| g.scale(alpha));
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|m| m.data().iter())
            .fold(0.0f64, |a, v| a.max(v.abs()))
    }
}

/// Sequence-level loss to differentiate.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Masked next-token cross-entropy, averaged over counted targets.
    CrossEntropy { epsilon: f64 },
    /// Masked temperature-scaled KL from teacher to student next-token
    /// distributions, normalized by `Σ m_{t+1} + ε` and scaled by `τ²`.
    Distill {
        teacher_logits: &'a Matrix,
        temperature: f64,
        epsilon: f64,
    },
}

/// Loss value and `∂L/∂z_t` for every position.
fn loss_and_logit_grads(seq: &Sequence, logits: &Matrix, objective: Objective<'_>) -> Result<(f64, Matrix)> {
    let len = seq.len();
    let mut dlogits = Matrix::zeros(len, logits.cols());
    if len < 2 {
        return Ok((0.0, dlogits));
    }
    match objective {
        Objective::CrossEntropy { epsilon } => {
            let n: f64 = seq.mask[1..].iter().map(|&m| m as f64).sum::<f64>() + epsilon;
            let mut loss = 0.0;
            for t in 0..len - 1 {
                if seq.mask[t + 1] == 0 {
                    continue;
                }
                let target = seq.tokens[t + 1] as usize;
                let p = tensor::softmax(logits.row(t), 1.0)?;
                loss -= p[target].max(tensor::KL_FLOOR).ln();
                let row = dlogits.row_mut(t);
                for (d, &pi) in row.iter_mut().zip(p.iter()) {
                    *d = pi / n;
                }
                row[target] -= 1.0 / n;
            }
            Ok((loss / n, dlogits))
        }
        Objective::Distill {
            teacher_logits,
            temperature,
            epsilon,
        } => {
            let (loss, _) = crate::kd::kd_loss_parts(teacher_logits, logits, &seq.mask, temperature, epsilon)?;
            let n: f64 = seq.mask[1..].iter().map(|&m| m as f64).sum::<f64>() + epsilon;
            for t in 0..len - 1 {
                if seq.mask[t + 1] == 0 {
                    continue;
                }
                let pt = tensor::softmax(teacher_logits.row(t), temperature)?;
                let ps = tensor::softmax(logits.row(t), temperature)?;
                let scale = temperature / n;
                for ((d, s), q) in dlogits.row_mut(t).iter_mut().zip(ps.iter()).zip(pt.iter()) {
                    *d = scale * (s - q);
                }
            }
            Ok((loss, dlogits))
        }
    }
}

fn backward_position(model: &MoeModel, cache: &PositionCache, dlogit: &[f64], grads: &mut Gradients) -> Result<()> {
    grads
        .slot(ParamId::OutputHead)?
        .add_outer(1.0, dlogit, &cache.final_hidden);
    let mut dh = model.output_head.matvec_t(dlogit);

    for (l, lc) in cache.layers.iter().enumerate().rev() {
        let layer = &model.layers[l];
        let x = &lc.routing.input;
        // residual path
        let mut dx = dh.clone();
        let sel = &lc.routing.selected;
        let weights = &lc.routing.weights;

        let mut dweights = Vec::with_capacity(sel.len());
        for ((&i, &w), act) in sel.iter().zip(weights).zip(&lc.experts) {
            dweights.push(tensor::dot(&dh, &act.out));
            let expert = &layer.experts[i];
            grads
                .slot(ParamId::ExpertOut { layer: l, expert: i })?
                .add_outer(w, &dh, &act.act);
            let mut dpre = expert.w_out.matvec_t(&dh);
            for (d, &p) in dpre.iter_mut().zip(&act.pre) {
                let s = sigmoid(p);
                *d *= w * s * (1.0 + p * (1.0 - s));
            }
            grads
                .slot(ParamId::ExpertIn { layer: l, expert: i })?
                .add_outer(1.0, &dpre, x);
            tensor::axpy(1.0, &expert.w_in.matvec_t(&dpre), &mut dx);
        }

        // g̃_i = g_i / G over S, G = Σ_S g_j; then g = softmax(z).
        let scores = &lc.routing.scores;
        let mass: f64 = sel.iter().map(|&i| scores[i]).sum();
        let centered: f64 = dweights.iter().zip(weights).map(|(d, w)| d * w).sum();
        let mut dscores = vec![0.0; scores.len()];
        for (p, &i) in sel.iter().enumerate() {
            dscores[i] = (dweights[p] - centered) / mass;
        }
        let inner: f64 = dscores.iter().zip(scores.iter()).map(|(d, g)| d * g).sum();
        let dz: Vec<f64> = dscores
            .iter()
            .zip(scores.iter())
            .map(|(d, g)| g * (d - inner))
            .collect();
        grads.slot(ParamId::Router { layer: l })?.add_outer(1.0, &dz, x);
        tensor::axpy(1.0, &layer.router.w.matvec_t(&dz), &mut dx);

        dh = dx;
    }

    let emb = grads.slot(ParamId::Embedding)?;
    tensor::axpy(1.0, &dh, emb.row_mut(cache.token));
    Ok(())
}

/// Loss and full parameter gradients for one sequence.
pub fn backward(model: &MoeModel, seq: &Sequence, objective: Objective<'_>) -> Result<(f64, Gradients)> {
    seq.validate(Some(model.config.vocab_size))?;
    let (logits, caches) = model.forward_cached(&seq.tokens)?;
    if let Objective::Distill { teacher_logits, .. } = objective {
        if teacher_logits.shape() != logits.shape() {
            return Err(Error::arg(format!(
                "teacher logits {:?} do not align with student logits {:?}",
                teacher_logits.shape(),
                logits.shape()
            )));
        }
    }
    let (loss, dlogits) = loss_and_logit_grads(seq, &logits, objective)?;
    let mut grads = Gradients::zeros_like(model);
    for (t, cache) in caches.iter().enumerate() {
        let d = dlogits.row(t);
        if d.iter().all(|&v| v == 0.0) {
            continue;
        }
        backward_position(model, cache, d, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Loss of one sequence without gradients (same arithmetic as [`backward`]).
pub fn sequence_loss(model: &MoeModel, seq: &Sequence, objective: Objective<'_>) -> Result<f64> {
    seq.validate(Some(model.config.vocab_size))?;
    let logits = model.logits(&seq.tokens)?;
    Ok(loss_and_logit_grads(seq, &logits, objective)?.0)
}

//! Seeded end-to-end recovery experiment: train a teacher, prune it, and
//! measure how much router-only distillation restores.

use serde::{Deserialize, Serialize};

use crate::compression::{prune_experts, CompressionMap};
use crate::data::{generate_corpus, split_corpus, CorpusConfig};
use crate::diagnostics::{topk_overlap, unmasked_trace};
use crate::error::Result;
use crate::kd::{calibrate_router, evaluate_kd_loss, KdConfig, StepRecord};
use crate::model::{ModelConfig, MoeModel, Sequence};
use crate::train::{train_teacher, TeacherTrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub teacher: TeacherTrainConfig,
    pub kd: KdConfig,
    pub retention: f64,
    pub calib_fraction: f64,
}

impl RecoveryConfig {
    /// 4 layers, d_model 32, vocabulary 64, 600 sequences of 32 tokens split
    /// 500 / 100, teacher trained for 1000 steps, pruned to 62.5 %, and
    /// calibrated with the default distillation settings capped at 500 samples.
    pub fn standard(n_experts: usize, top_k: usize, d_ff: usize, seed: u64) -> Self {
        Self {
            model: ModelConfig {
                vocab_size: 64,
                d_model: 32,
                d_ff,
                n_layers: 4,
                n_experts,
                top_k,
                seed,
            },
            corpus: CorpusConfig {
                vocab_size: 64,
                seq_len: 32,
                n_sequences: 600,
                markov_order: 1,
                seed: seed.wrapping_add(1_000),
                pad_fraction: 0.125,
            },
            teacher: TeacherTrainConfig::default(),
            kd: KdConfig {
                max_samples: 500,
                ..KdConfig::default()
            },
            retention: 0.625,
            calib_fraction: 500.0 / 600.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RecoveryOutcome {
    pub teacher: MoeModel,
    pub pruned: MoeModel,
    pub calibrated: MoeModel,
    pub map: CompressionMap,
    pub held_out: Vec<Sequence>,
    /// Held-out masked KL to the teacher.
    pub kl_before: f64,
    pub kl_after: f64,
    /// Held-out per-layer top-k overlap with the teacher.
    pub overlap_before: Vec<f64>,
    pub overlap_after: Vec<f64>,
    pub history: Vec<StepRecord>,
}

impl RecoveryOutcome {
    /// `(before − after) / before`.
    pub fn relative_improvement(&self) -> f64 {
        (self.kl_before - self.kl_after) / self.kl_before
    }

    pub fn mean_overlap_before(&self) -> f64 {
        self.overlap_before.iter().sum::<f64>() / self.overlap_before.len() as f64
    }

    pub fn mean_overlap_after(&self) -> f64 {
        self.overlap_after.iter().sum::<f64>() / self.overlap_after.len() as f64
    }
}

pub fn run_recovery(config: &RecoveryConfig) -> Result<RecoveryOutcome> {
    let corpus = generate_corpus(&config.corpus)?;
    let (calib, held_out) = split_corpus(&corpus.sequences, config.calib_fraction)?;
    let init = MoeModel::init(config.model.clone())?;
    let (teacher, _) = train_teacher(&init, &calib, &config.teacher)?;
    let (pruned, map) = prune_experts(&teacher, config.retention, &calib)?;
    let map = CompressionMap::Prune(map);
    let run = calibrate_router(&teacher, &pruned, &calib, &config.kd)?;

    let eps = config.kd.epsilon;
    let tau = config.kd.temperature;
    let kl_before = evaluate_kd_loss(&teacher, &pruned, &held_out, tau, eps)?;
    let kl_after = evaluate_kd_loss(&teacher, &run.student, &held_out, tau, eps)?;
    let t_trace = unmasked_trace(&teacher, &held_out)?;
    let overlap_before = topk_overlap(&t_trace, &unmasked_trace(&pruned, &held_out)?, Some(&map))?;
    let overlap_after = topk_overlap(&t_trace, &unmasked_trace(&run.student, &held_out)?, Some(&map))?;
    Ok(RecoveryOutcome {
        teacher,
        pruned,
        calibrated: run.student,
        map,
        held_out,
        kl_before,
        kl_after,
        overlap_before,
        overlap_after,
        history: run.history,
    })
}

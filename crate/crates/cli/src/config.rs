use std::fs;
use std::path::{Path, PathBuf};

use moelab::compression::retained_count;
use moelab::data::CorpusConfig;
use moelab::experiment::RecoveryConfig;
use moelab::kd::KdConfig;
use moelab::model::ModelConfig;
use moelab::train::TeacherTrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Prune,
    Edit,
    Merge,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Prune => "prune",
            Method::Edit => "edit",
            Method::Merge => "merge",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub method: Method,
    pub retention: f64,
    pub rank_ratio: f64,
    /// Clusters per layer for merging; defaults to the pruning retained count.
    pub target: Option<usize>,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            method: Method::Prune,
            retention: 0.625,
            rank_ratio: 0.5,
            target: None,
        }
    }
}

impl CompressionConfig {
    pub fn merge_target(&self, n_experts: usize) -> usize {
        self.target.unwrap_or_else(|| retained_count(n_experts, self.retention))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub corpus: CorpusConfig,
    pub teacher: TeacherTrainConfig,
    pub kd: KdConfig,
    pub compression: CompressionConfig,
    pub calib_fraction: f64,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let standard = RecoveryConfig::standard(32, 4, 16, 0);
        Self {
            model: standard.model,
            corpus: standard.corpus,
            teacher: standard.teacher,
            kd: KdConfig::default(),
            compression: CompressionConfig::default(),
            calib_fraction: standard.calib_fraction,
            output_dir: PathBuf::from("run"),
        }
    }
}

impl RunConfig {
    /// Reads `path`, or returns the defaults when no path is given.
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Seeds the model and, offset by 1000, the corpus.
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.corpus.seed = seed.wrapping_add(1_000);
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.validate()?;
        self.corpus.validate()?;
        self.kd.validate()?;
        if self.corpus.vocab_size != self.model.vocab_size {
            return Err(CliError::Config(format!(
                "corpus vocab_size {} differs from model vocab_size {}",
                self.corpus.vocab_size, self.model.vocab_size
            )));
        }
        if !(self.calib_fraction > 0.0 && self.calib_fraction < 1.0) {
            return Err(CliError::Config(
                "calib_fraction must lie strictly between 0 and 1".into(),
            ));
        }
        Ok(())
    }
}

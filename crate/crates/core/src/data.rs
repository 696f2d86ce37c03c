//! Synthetic Markov-chain corpora.
//!
//! Each corpus is drawn from a seeded random Markov chain of order 1 or 2.
//! Transition rows are Dirichlet draws with a small concentration so that the
//! next-token distribution is peaked and learnable. The trailing
//! `pad_fraction` of every sequence is padding (token 0, mask 0).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Sequence;

/// Dirichlet concentration of each transition row.
const TRANSITION_CONCENTRATION: f64 = 0.3;

pub const PAD_TOKEN: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_sequences: usize,
    pub markov_order: usize,
    pub seed: u64,
    pub pad_fraction: f64,
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::arg("vocab_size must be at least 2"));
        }
        if self.seq_len < 2 {
            return Err(Error::arg("seq_len must be at least 2"));
        }
        if self.n_sequences == 0 {
            return Err(Error::arg("n_sequences must be at least 1"));
        }
        if !(1..=2).contains(&self.markov_order) {
            return Err(Error::arg("markov_order must be 1 or 2"));
        }
        if !(0.0..0.5).contains(&self.pad_fraction) {
            return Err(Error::arg("pad_fraction must lie in [0, 0.5)"));
        }
        Ok(())
    }

    /// Number of padded positions at the end of every sequence.
    pub fn pad_len(&self) -> usize {
        (self.pad_fraction * self.seq_len as f64).floor() as usize
    }
}

/// The planted chain. Row `c` of `transitions` is the next-token
/// distribution for context `c` (the previous token, or `prev2 · V + prev1`
/// for order 2).
#[derive(Debug, Clone)]
pub struct MarkovSource {
    pub order: usize,
    pub vocab_size: usize,
    pub transitions: Vec<Vec<f64>>,
}

impl MarkovSource {
    fn sample_rows(rng: &mut ChaCha8Rng, contexts: usize, vocab: usize) -> Vec<Vec<f64>> {
        let gamma = Gamma::new(TRANSITION_CONCENTRATION, 1.0).expect("valid gamma");
        (0..contexts)
            .map(|_| {
                let mut row: Vec<f64> = (0..vocab).map(|_| gamma.sample(rng)).collect();
                let sum: f64 = row.iter().sum();
                if sum > 0.0 {
                    row.iter_mut().for_each(|v| *v /= sum);
                } else {
                    row = vec![1.0 / vocab as f64; vocab];
                }
                row
            })
            .collect()
    }

    fn context(&self, prev2: u32, prev1: u32) -> usize {
        if self.order == 1 {
            prev1 as usize
        } else {
            prev2 as usize * self.vocab_size + prev1 as usize
        }
    }

    pub fn next_distribution(&self, prev2: u32, prev1: u32) -> &[f64] {
        &self.transitions[self.context(prev2, prev1)]
    }
}

fn sample_categorical(rng: &mut ChaCha8Rng, probs: &[f64]) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (probs.len() - 1) as u32
}

/// A generated corpus together with the chain that produced it.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub source: MarkovSource,
    pub sequences: Vec<Sequence>,
}

pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    config.validate()?;
    let v = config.vocab_size;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let contexts = if config.markov_order == 1 { v } else { v * v };
    let source = MarkovSource {
        order: config.markov_order,
        vocab_size: v,
        transitions: MarkovSource::sample_rows(&mut rng, contexts, v),
    };
    let pad = config.pad_len();
    let real = config.seq_len - pad;
    let sequences = (0..config.n_sequences)
        .map(|_| {
            let mut tokens = Vec::with_capacity(config.seq_len);
            for t in 0..real {
                let tok = if t < config.markov_order {
                    rng.random_range(0..v as u32)
                } else {
                    let prev2 = if t >= 2 { tokens[t - 2] } else { 0 };
                    sample_categorical(&mut rng, source.next_distribution(prev2, tokens[t - 1]))
                };
                tokens.push(tok);
            }
            tokens.resize(config.seq_len, PAD_TOKEN);
            let mut mask = vec![1u8; real];
            mask.resize(config.seq_len, 0);
            Sequence { tokens, mask }
        })
        .collect();
    Ok(Corpus { source, sequences })
}

/// Prefix split: the first `round(calib_fraction · n)` sequences form the
/// calibration set, the rest are held out.
pub fn split_corpus(corpus: &[Sequence], calib_fraction: f64) -> Result<(Vec<Sequence>, Vec<Sequence>)> {
    if !(calib_fraction > 0.0 && calib_fraction < 1.0) {
        return Err(Error::arg("calib_fraction must lie strictly between 0 and 1"));
    }
    let n_calib = (calib_fraction * corpus.len() as f64).round() as usize;
    if n_calib == 0 || n_calib >= corpus.len() {
        return Err(Error::arg(format!(
            "split of {} sequences at {calib_fraction} leaves one side empty",
            corpus.len()
        )));
    }
    Ok((corpus[..n_calib].to_vec(), corpus[n_calib..].to_vec()))
}

pub fn write_jsonl(sequences: &[Sequence], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in sequences {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<Sequence>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq: Sequence =
            serde_json::from_str(&line).map_err(|e| Error::input(format!("corpus line {}: {e}", i + 1)))?;
        seq.validate(None)?;
        out.push(seq);
    }
    Ok(out)
}

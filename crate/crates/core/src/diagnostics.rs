//! Layer-wise routing diagnostics: L1 distance between gate distributions,
//! top-k overlap, gate entropy and the size of the routing space.
//!
//! Comparisons across a compression map need a common index space:
//!
//! * pruning: teacher scores are restricted to the retained experts and
//!   renormalized; the teacher's top-k is taken over that restriction;
//! * merging: teacher scores are summed per cluster and the teacher's
//!   selection is projected through `φ`; overlap is `|φ(S) ∩ S_merge| / |φ(S)|`;
//! * editing (or no map): indices coincide.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::compression::{CompressionMap, LayerCorrespondence};
use crate::error::{Error, Result};
use crate::model::{LayerRouting, MoeModel, RoutingTrace, Sequence};
use crate::tensor;

/// `C(e, k)` computed exactly with the multiplicative formula.
pub fn routing_space_size(e: u64, k: u64) -> Result<u128> {
    if k > e {
        return Err(Error::arg(format!("cannot choose {k} of {e} experts")));
    }
    let k = k.min(e - k) as u128;
    let n = e as u128;
    let mut c: u128 = 1;
    for i in 1..=k {
        // c · (n − k + i) / i, reduced first so the product stays small
        let num = n - k + i;
        let g = gcd(c, i);
        let (c_red, i_red) = (c / g, i / g);
        let num_red = num / i_red;
        c = c_red
            .checked_mul(num_red)
            .ok_or_else(|| Error::Numerical(format!("C({e}, {k}) overflows u128")))?;
    }
    Ok(c)
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>()
}

/// Teacher scores and selection expressed in the student's index space.
fn align_teacher(a: &LayerRouting, corr: LayerCorrespondence<'_>, student_k: usize) -> Result<(Vec<f64>, Vec<usize>)> {
    match corr {
        LayerCorrespondence::Identity => Ok((a.scores.to_vec(), a.selected.clone())),
        LayerCorrespondence::Prune { retained } => {
            let restricted: Vec<f64> = retained.iter().map(|&i| a.scores[i]).collect();
            let mass: f64 = restricted.iter().sum();
            let scores: Vec<f64> = restricted.iter().map(|v| v / mass).collect();
            let sel = tensor::top_k(&scores, student_k.min(scores.len()))?;
            Ok((scores, sel))
        }
        LayerCorrespondence::Merge { phi } => {
            let m = phi.iter().max().map_or(0, |&c| c + 1);
            let mut scores = vec![0.0; m];
            for (i, &g) in a.scores.iter().enumerate() {
                scores[phi[i]] += g;
            }
            let mut sel: Vec<usize> = a.selected.iter().map(|&i| phi[i]).collect();
            sel.sort_unstable();
            sel.dedup();
            Ok((scores, sel))
        }
    }
}

fn check_aligned(a: &RoutingTrace, b: &RoutingTrace) -> Result<()> {
    if a.n_layers() != b.n_layers() {
        return Err(Error::arg(format!(
            "traces have {} and {} layers",
            a.n_layers(),
            b.n_layers()
        )));
    }
    for (l, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        if la.len() != lb.len() {
            return Err(Error::arg(format!(
                "layer {l}: traces cover {} and {} tokens",
                la.len(),
                lb.len()
            )));
        }
    }
    Ok(())
}

fn corr_of(map: Option<&CompressionMap>, l: usize) -> LayerCorrespondence<'_> {
    map.map_or(LayerCorrespondence::Identity, |m| m.layer(l))
}

fn layer_mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        values.sum::<f64>() / n as f64
    }
}

/// Mean L1 distance between the gate distributions of `a` (reference) and
/// `b` (student), per layer.
pub fn routing_l1(a: &RoutingTrace, b: &RoutingTrace, map: Option<&CompressionMap>) -> Result<Vec<f64>> {
    check_aligned(a, b)?;
    a.layers
        .iter()
        .zip(&b.layers)
        .enumerate()
        .map(|(l, (la, lb))| {
            let d = la
                .iter()
                .zip(lb)
                .map(|(ra, rb)| {
                    let (scores, _) = align_teacher(ra, corr_of(map, l), rb.selected.len())?;
                    tensor::l1_distance(&scores, &rb.scores)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(layer_mean(d.into_iter(), la.len()))
        })
        .collect()
}

/// Mean share of the reference selection that the student also selects.
pub fn topk_overlap(a: &RoutingTrace, b: &RoutingTrace, map: Option<&CompressionMap>) -> Result<Vec<f64>> {
    check_aligned(a, b)?;
    a.layers
        .iter()
        .zip(&b.layers)
        .enumerate()
        .map(|(l, (la, lb))| {
            let o = la
                .iter()
                .zip(lb)
                .map(|(ra, rb)| {
                    let (_, sel) = align_teacher(ra, corr_of(map, l), rb.selected.len())?;
                    let hit = sel.iter().filter(|i| rb.selected.contains(i)).count();
                    Ok(hit as f64 / sel.len() as f64)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(layer_mean(o.into_iter(), la.len()))
        })
        .collect()
}

/// Mean gate entropy per layer.
pub fn routing_entropy(trace: &RoutingTrace) -> Vec<f64> {
    trace
        .layers
        .iter()
        .map(|l| layer_mean(l.iter().map(|r| entropy(&r.scores)), l.len()))
        .collect()
}

/// Routing trace over the unmasked positions of `corpus`, in corpus order.
pub fn unmasked_trace(model: &MoeModel, corpus: &[Sequence]) -> Result<RoutingTrace> {
    let parts = corpus
        .par_iter()
        .map(|seq| {
            seq.validate(Some(model.config.vocab_size))?;
            let tokens: Vec<u32> = seq
                .tokens
                .iter()
                .zip(&seq.mask)
                .filter(|(_, &m)| m == 1)
                .map(|(&t, _)| t)
                .collect();
            Ok(model.forward_tokens(&tokens)?.1)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut trace = RoutingTrace {
        layers: vec![Vec::new(); model.n_layers()],
    };
    for p in parts {
        for (dst, src) in trace.layers.iter_mut().zip(p.layers) {
            dst.extend(src);
        }
    }
    Ok(trace)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub layer: usize,
    pub mean_l1: f64,
    pub overlap_ratio: f64,
    /// Mean entropy of the reference model's gates.
    pub mean_entropy: f64,
    pub token_count: usize,
}

pub fn layer_reports(
    reference: &RoutingTrace,
    student: &RoutingTrace,
    map: Option<&CompressionMap>,
) -> Result<Vec<LayerReport>> {
    let l1 = routing_l1(reference, student, map)?;
    let overlap = topk_overlap(reference, student, map)?;
    let ent = routing_entropy(reference);
    Ok((0..reference.n_layers())
        .map(|layer| LayerReport {
            layer,
            mean_l1: l1[layer],
            overlap_ratio: overlap[layer],
            mean_entropy: ent[layer],
            token_count: reference.layers[layer].len(),
        })
        .collect())
}

/// Text form used in every report file: 17 significant digits, so parsing
/// gives back the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_metric(path: &Path, reports: &[LayerReport], f: impl Fn(&LayerReport) -> f64) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "layer,value,token_count")?;
    for r in reports {
        writeln!(w, "{},{},{}", r.layer, format_value(f(r)), r.token_count)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `l1.csv`, `overlap.csv`, `entropy.csv` and `summary.json` into `dir`.
pub fn emit_report(reports: &[LayerReport], dir: impl AsRef<Path>, metadata: &serde_json::Value) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    write_metric(&dir.join("l1.csv"), reports, |r| r.mean_l1)?;
    write_metric(&dir.join("overlap.csv"), reports, |r| r.overlap_ratio)?;
    write_metric(&dir.join("entropy.csv"), reports, |r| r.mean_entropy)?;
    let summary = serde_json::json!({
        "metadata": metadata,
        "layers": reports.len(),
        "mean_l1": mean(reports.iter().map(|r| r.mean_l1)),
        "mean_overlap": mean(reports.iter().map(|r| r.overlap_ratio)),
        "mean_entropy": mean(reports.iter().map(|r| r.mean_entropy)),
    });
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    fs::write(dir.join("summary.json"), text)?;
    Ok(())
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    if v.is_empty() {
        None
    } else {
        Some(v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Reads one metric CSV back as `(layer, value, token_count)` rows.
pub fn read_metric_csv(path: impl AsRef<Path>) -> Result<Vec<(usize, f64, usize)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some("layer,value,token_count") {
        return Err(Error::input(format!("{}: unexpected header", path.display())));
    }
    lines
        .map(|line| {
            let bad = || Error::input(format!("{}: malformed row {line:?}", path.display()));
            let mut parts = line.split(',');
            let layer = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let value = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let count = parts.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            Ok((layer, value, count))
        })
        .collect()
}

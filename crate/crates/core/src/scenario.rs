//! Scenario taxonomy and output-discrepancy decompositions.
//!
//! Given the experts `S` the original router selects for an input `x` and
//! the experts `S′` the compressed router selects for the same `x`, every
//! (token, layer) pair falls into one scenario. The difference of the two MoE
//! outputs splits exactly into three terms over the shared set `T`, the
//! dropped set `D` and the newly activated set `R`:
//!
//! ```text
//! y_orig − y_comp = weight_shift + information_loss − substitution_noise
//! ```
//!
//! For merging, the sets live in cluster space: `C = φ(S)`, `T = C ∩ S_merge`,
//! `D = C \ S_merge`, `R = S_merge \ C`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::compression::{CompressionMap, LayerCorrespondence};
use crate::error::{Error, Result};
use crate::model::{Expert, LayerRouting, MoeModel, Sequence};
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Outcome {
    Best,
    Common,
    Worst,
}

impl Outcome {
    const ALL: [Outcome; 3] = [Outcome::Best, Outcome::Common, Outcome::Worst];

    fn name(self) -> &'static str {
        match self {
            Outcome::Best => "best",
            Outcome::Common => "common",
            Outcome::Worst => "worst",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Paradigm {
    Prune,
    Edit,
    Merge,
}

impl Paradigm {
    pub fn of(map: Option<&CompressionMap>) -> Paradigm {
        match map {
            Some(CompressionMap::Prune(_)) => Paradigm::Prune,
            Some(CompressionMap::Merge(_)) => Paradigm::Merge,
            Some(CompressionMap::Edit(_)) | None => Paradigm::Edit,
        }
    }
}

/// One cell of the taxonomy. Merge labels carry the capacity case:
/// 1 when `|φ(S)| = 1`, 2 when `1 < |φ(S)| ≤ k_merge`, 3 otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ScenarioLabel {
    Prune(Outcome),
    Edit(Outcome),
    Merge { case: u8, outcome: Outcome },
}

impl ScenarioLabel {
    pub fn paradigm(&self) -> Paradigm {
        match self {
            ScenarioLabel::Prune(_) => Paradigm::Prune,
            ScenarioLabel::Edit(_) => Paradigm::Edit,
            ScenarioLabel::Merge { .. } => Paradigm::Merge,
        }
    }

    pub fn outcome(&self) -> Outcome {
        match *self {
            ScenarioLabel::Prune(o) | ScenarioLabel::Edit(o) => o,
            ScenarioLabel::Merge { outcome, .. } => outcome,
        }
    }

    /// Every label of a paradigm in report order.
    pub fn all(paradigm: Paradigm) -> Vec<ScenarioLabel> {
        match paradigm {
            Paradigm::Prune => Outcome::ALL.iter().map(|&o| ScenarioLabel::Prune(o)).collect(),
            Paradigm::Edit => Outcome::ALL.iter().map(|&o| ScenarioLabel::Edit(o)).collect(),
            Paradigm::Merge => (1..=3)
                .flat_map(|case| {
                    Outcome::ALL
                        .iter()
                        .map(move |&outcome| ScenarioLabel::Merge { case, outcome })
                })
                .collect(),
        }
    }
}

impl fmt::Display for ScenarioLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScenarioLabel::Prune(o) => write!(f, "prune.{}", o.name()),
            ScenarioLabel::Edit(o) => write!(f, "edit.{}", o.name()),
            ScenarioLabel::Merge { case, outcome } => write!(f, "merge.{case}.{}", outcome.name()),
        }
    }
}

impl FromStr for ScenarioLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Paradigm::Prune, Paradigm::Edit, Paradigm::Merge]
            .into_iter()
            .flat_map(ScenarioLabel::all)
            .find(|l| l.to_string() == s)
            .ok_or_else(|| Error::input(format!("unknown scenario label {s:?}")))
    }
}

impl Serialize for ScenarioLabel {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScenarioLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn set(v: &[usize]) -> BTreeSet<usize> {
    v.iter().copied().collect()
}

fn three_way(best: bool, worst: bool) -> Outcome {
    if best {
        Outcome::Best
    } else if worst {
        Outcome::Worst
    } else {
        Outcome::Common
    }
}

/// `S′` does not influence the label; it is accepted so that callers pass the
/// complete comparison.
pub fn classify_prune(s: &[usize], retained: &[usize], _s_pruned: &[usize]) -> ScenarioLabel {
    let p = set(retained);
    let best = s.iter().all(|i| p.contains(i));
    let worst = s.iter().all(|i| !p.contains(i));
    ScenarioLabel::Prune(three_way(best, worst))
}

pub fn classify_edit(s: &[usize], s_edit: &[usize]) -> ScenarioLabel {
    let (a, b) = (set(s), set(s_edit));
    ScenarioLabel::Edit(three_way(a == b, a.is_disjoint(&b)))
}

/// Projected set `φ(S)`.
pub fn project(s: &[usize], phi: &[usize]) -> Result<BTreeSet<usize>> {
    s.iter()
        .map(|&i| {
            phi.get(i)
                .copied()
                .ok_or_else(|| Error::arg(format!("phi is undefined for expert {i}")))
        })
        .collect()
}

pub fn classify_merge(s: &[usize], phi: &[usize], s_merge: &[usize], k_merge: usize) -> Result<ScenarioLabel> {
    let c = project(s, phi)?;
    let m = set(s_merge);
    if m.len() != k_merge {
        return Err(Error::arg(format!(
            "merged selection has {} clusters, expected k_merge = {k_merge}",
            m.len()
        )));
    }
    let disjoint = c.is_disjoint(&m);
    let (case, outcome) = if c.len() == 1 {
        let star = *c.iter().next().expect("one cluster");
        (1, three_way(m.len() == 1 && m.contains(&star), !m.contains(&star)))
    } else if c.len() <= k_merge {
        (2, three_way(m == c, disjoint))
    } else {
        (3, three_way(m.is_subset(&c), disjoint))
    };
    Ok(ScenarioLabel::Merge { case, outcome })
}

/// Exact split of one layer's output difference under a shared input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscrepancyDecomposition {
    pub label: ScenarioLabel,
    /// `‖y_orig − y_comp‖₂`.
    pub total: f64,
    /// `y_orig − y_comp` as produced by the two forward passes.
    pub difference: Vec<f64>,
    pub weight_shift: Vec<f64>,
    pub information_loss: Vec<f64>,
    pub substitution_noise: Vec<f64>,
    /// Shared, dropped and newly activated sets. Original expert indices for
    /// pruning and editing, cluster indices for merging.
    pub shared: Vec<usize>,
    pub dropped: Vec<usize>,
    pub substituted: Vec<usize>,
}

impl DiscrepancyDecomposition {
    pub fn recombined(&self) -> Vec<f64> {
        self.weight_shift
            .iter()
            .zip(&self.information_loss)
            .zip(&self.substitution_noise)
            .map(|((w, i), s)| w + i - s)
            .collect()
    }

    /// `|total − ‖weight_shift + information_loss − substitution_noise‖|`.
    pub fn residual(&self) -> f64 {
        (self.total - tensor::norm(&self.recombined())).abs()
    }

    /// Norm of the vector residual `(y_orig − y_comp) − recombined`.
    pub fn vector_residual(&self) -> f64 {
        let r: Vec<f64> = self
            .difference
            .iter()
            .zip(self.recombined())
            .map(|(d, c)| d - c)
            .collect();
        tensor::norm(&r)
    }
}

fn check_same_input(a: &LayerRouting, b: &LayerRouting) -> Result<()> {
    if a.input != b.input {
        return Err(Error::arg(
            "routing records were computed from different layer inputs; the decomposition needs a shared input",
        ));
    }
    if a.output.len() != b.output.len() {
        return Err(Error::arg("routing records have different widths"));
    }
    Ok(())
}

fn expert_out(experts: &[Expert], i: usize, x: &[f64]) -> Result<Vec<f64>> {
    experts
        .get(i)
        .map(|e| e.forward(x))
        .ok_or_else(|| Error::arg(format!("expert {i} does not exist")))
}

fn difference(a: &LayerRouting, b: &LayerRouting) -> Vec<f64> {
    a.output.iter().zip(&b.output).map(|(x, y)| x - y).collect()
}

/// Pruning: `experts` are the original experts and `retained[j]` is the
/// original index of student expert `j`.
pub fn decompose_prune(
    orig: &LayerRouting,
    pruned: &LayerRouting,
    experts: &[Expert],
    retained: &[usize],
) -> Result<DiscrepancyDecomposition> {
    check_same_input(orig, pruned)?;
    let x = &orig.input;
    let d = x.len();
    let mapped: Vec<usize> = pruned
        .selected
        .iter()
        .map(|&j| {
            retained
                .get(j)
                .copied()
                .ok_or_else(|| Error::arg(format!("student expert {j} is not in the retained set")))
        })
        .collect::<Result<_>>()?;
    let s = set(&orig.selected);
    let sp = set(&mapped);
    let mut ws = vec![0.0; d];
    let mut info = vec![0.0; d];
    let mut subst = vec![0.0; d];
    let mut shared = Vec::new();
    let mut dropped = Vec::new();
    for (&i, &g) in orig.selected.iter().zip(&orig.weights) {
        let e = expert_out(experts, i, x)?;
        if let Some(p) = mapped.iter().position(|&m| m == i) {
            tensor::axpy(g - pruned.weights[p], &e, &mut ws);
            shared.push(i);
        } else {
            tensor::axpy(g, &e, &mut info);
            dropped.push(i);
        }
    }
    let mut substituted = Vec::new();
    for (&i, &g) in mapped.iter().zip(&pruned.weights) {
        if !s.contains(&i) {
            tensor::axpy(g, &expert_out(experts, i, x)?, &mut subst);
            substituted.push(i);
        }
    }
    substituted.sort_unstable();
    let diff = difference(orig, pruned);
    Ok(DiscrepancyDecomposition {
        label: classify_prune(&orig.selected, retained, &sp.into_iter().collect::<Vec<_>>()),
        total: tensor::norm(&diff),
        difference: diff,
        weight_shift: ws,
        information_loss: info,
        substitution_noise: subst,
        shared,
        dropped,
        substituted,
    })
}

/// Editing: `experts` are the originals `E_i`, `edited` the replacements `X_i`.
pub fn decompose_edit(
    orig: &LayerRouting,
    edit: &LayerRouting,
    experts: &[Expert],
    edited: &[Expert],
) -> Result<DiscrepancyDecomposition> {
    check_same_input(orig, edit)?;
    let x = &orig.input;
    let d = x.len();
    let s = set(&orig.selected);
    let mut ws = vec![0.0; d];
    let mut info = vec![0.0; d];
    let mut subst = vec![0.0; d];
    let mut shared = Vec::new();
    let mut dropped = Vec::new();
    for (&i, &g) in orig.selected.iter().zip(&orig.weights) {
        let e = expert_out(experts, i, x)?;
        if let Some(ge) = edit.weight_of(i) {
            tensor::axpy(g, &e, &mut ws);
            tensor::axpy(-ge, &expert_out(edited, i, x)?, &mut ws);
            shared.push(i);
        } else {
            tensor::axpy(g, &e, &mut info);
            dropped.push(i);
        }
    }
    let mut substituted = Vec::new();
    for (&i, &g) in edit.selected.iter().zip(&edit.weights) {
        if !s.contains(&i) {
            tensor::axpy(g, &expert_out(edited, i, x)?, &mut subst);
            substituted.push(i);
        }
    }
    let diff = difference(orig, edit);
    Ok(DiscrepancyDecomposition {
        label: classify_edit(&orig.selected, &edit.selected),
        total: tensor::norm(&diff),
        difference: diff,
        weight_shift: ws,
        information_loss: info,
        substitution_noise: subst,
        shared,
        dropped,
        substituted,
    })
}

/// Merging: `experts` are the originals, `merged` the cluster experts `M_c`.
pub fn decompose_merge(
    orig: &LayerRouting,
    merge: &LayerRouting,
    experts: &[Expert],
    merged: &[Expert],
    phi: &[usize],
    k_merge: usize,
) -> Result<DiscrepancyDecomposition> {
    check_same_input(orig, merge)?;
    let x = &orig.input;
    let d = x.len();
    let label = classify_merge(&orig.selected, phi, &merge.selected, k_merge)?;
    let c = project(&orig.selected, phi)?;
    let m = set(&merge.selected);
    let mut ws = vec![0.0; d];
    let mut info = vec![0.0; d];
    let mut subst = vec![0.0; d];
    for (&i, &g) in orig.selected.iter().zip(&orig.weights) {
        let e = expert_out(experts, i, x)?;
        if m.contains(&phi[i]) {
            tensor::axpy(g, &e, &mut ws);
        } else {
            tensor::axpy(g, &e, &mut info);
        }
    }
    for (&cl, &g) in merge.selected.iter().zip(&merge.weights) {
        let out = expert_out(merged, cl, x)?;
        if c.contains(&cl) {
            tensor::axpy(-g, &out, &mut ws);
        } else {
            tensor::axpy(g, &out, &mut subst);
        }
    }
    let diff = difference(orig, merge);
    Ok(DiscrepancyDecomposition {
        label,
        total: tensor::norm(&diff),
        difference: diff,
        weight_shift: ws,
        information_loss: info,
        substitution_noise: subst,
        shared: c.intersection(&m).copied().collect(),
        dropped: c.difference(&m).copied().collect(),
        substituted: m.difference(&c).copied().collect(),
    })
}

/// Classifies one layer comparison under the map's correspondence.
pub fn classify_layer(
    corr: LayerCorrespondence<'_>,
    k_merge: usize,
    orig: &[usize],
    comp: &[usize],
) -> Result<ScenarioLabel> {
    Ok(match corr {
        LayerCorrespondence::Identity => classify_edit(orig, comp),
        LayerCorrespondence::Prune { retained } => {
            let mapped: Vec<usize> = comp.iter().map(|&j| retained[j]).collect();
            classify_prune(orig, retained, &mapped)
        }
        LayerCorrespondence::Merge { phi } => classify_merge(orig, phi, comp, k_merge)?,
    })
}

fn k_merge_of(map: Option<&CompressionMap>, comp: &MoeModel) -> usize {
    match map {
        Some(CompressionMap::Merge(m)) => m.k_merge,
        _ => comp.config.top_k,
    }
}

/// One classified (sequence, position, layer) comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub sequence: usize,
    pub position: usize,
    pub layer: usize,
    pub label: ScenarioLabel,
}

fn check_pair(orig: &MoeModel, comp: &MoeModel, map: Option<&CompressionMap>) -> Result<()> {
    match map {
        Some(m) => m.validate(orig, comp),
        None => {
            if orig.expert_counts() != comp.expert_counts() || orig.config.d_model != comp.config.d_model {
                return Err(Error::input("models differ in shape and no compression map was given"));
            }
            Ok(())
        }
    }
}

/// Labels every unmasked (token, layer) pair. Both models see the original
/// model's layer input, so each comparison is local to its layer.
pub fn classify_tokens(
    orig: &MoeModel,
    comp: &MoeModel,
    map: Option<&CompressionMap>,
    corpus: &[Sequence],
) -> Result<Vec<TokenRecord>> {
    check_pair(orig, comp, map)?;
    let k_merge = k_merge_of(map, comp);
    let per_seq = corpus
        .par_iter()
        .enumerate()
        .map(|(si, seq)| {
            seq.validate(Some(orig.config.vocab_size))?;
            let (_, trace) = orig.forward_tokens(&seq.tokens)?;
            let mut out = Vec::new();
            for (t, &m) in seq.mask.iter().enumerate() {
                if m == 0 {
                    continue;
                }
                for (l, layer) in trace.layers.iter().enumerate() {
                    let r = &layer[t];
                    let (_, sel, _) = comp.layers[l].route(&r.input, comp.top_k_at(l))?;
                    let corr = map.map_or(LayerCorrespondence::Identity, |m| m.layer(l));
                    out.push(TokenRecord {
                        sequence: si,
                        position: t,
                        layer: l,
                        label: classify_layer(corr, k_merge, &r.selected, &sel)?,
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_seq.into_iter().flatten().collect())
}

/// Scenario frequencies per layer, in [`ScenarioLabel::all`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Census {
    pub paradigm: Paradigm,
    pub labels: Vec<ScenarioLabel>,
    /// `counts[layer][label index]`
    pub counts: Vec<Vec<usize>>,
}

impl Census {
    pub fn from_records(paradigm: Paradigm, n_layers: usize, records: &[TokenRecord]) -> Result<Census> {
        let labels = ScenarioLabel::all(paradigm);
        let mut counts = vec![vec![0; labels.len()]; n_layers];
        for r in records {
            let idx = labels
                .iter()
                .position(|l| *l == r.label)
                .ok_or_else(|| Error::Internal(format!("label {} outside paradigm {paradigm:?}", r.label)))?;
            counts[r.layer][idx] += 1;
        }
        Ok(Census {
            paradigm,
            labels,
            counts,
        })
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    /// Share of all comparisons carrying `outcome`, pooled over layers and cases.
    pub fn outcome_fraction(&self, outcome: Outcome) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let hit: usize = self
            .counts
            .iter()
            .map(|row| {
                row.iter()
                    .zip(&self.labels)
                    .filter(|(_, l)| l.outcome() == outcome)
                    .map(|(c, _)| c)
                    .sum::<usize>()
            })
            .sum();
        hit as f64 / total as f64
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "layer,scenario,count")?;
        for (l, row) in self.counts.iter().enumerate() {
            for (label, c) in self.labels.iter().zip(row) {
                writeln!(w, "{l},{label},{c}")?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn scenario_census(
    orig: &MoeModel,
    comp: &MoeModel,
    map: Option<&CompressionMap>,
    corpus: &[Sequence],
) -> Result<Census> {
    let records = classify_tokens(orig, comp, map, corpus)?;
    Census::from_records(Paradigm::of(map), orig.n_layers(), &records)
}

pub fn write_records_jsonl(records: &[TokenRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Same-input decomposition of one (token, layer) comparison.
pub fn decompose_layer(
    orig: &MoeModel,
    comp: &MoeModel,
    map: Option<&CompressionMap>,
    layer: usize,
    x: &[f64],
) -> Result<DiscrepancyDecomposition> {
    let (_, a) = orig.layers[layer].forward(x, orig.top_k_at(layer))?;
    let (_, b) = comp.layers[layer].forward(x, comp.top_k_at(layer))?;
    let oe = &orig.layers[layer].experts;
    let ce = &comp.layers[layer].experts;
    match map.map_or(LayerCorrespondence::Identity, |m| m.layer(layer)) {
        LayerCorrespondence::Identity => decompose_edit(&a, &b, oe, ce),
        LayerCorrespondence::Prune { retained } => decompose_prune(&a, &b, oe, retained),
        LayerCorrespondence::Merge { phi } => decompose_merge(&a, &b, oe, ce, phi, k_merge_of(map, comp)),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpotCheck {
    pub sequence: usize,
    pub position: usize,
    pub layer: usize,
    pub label: ScenarioLabel,
    pub total: f64,
    pub weight_shift_norm: f64,
    pub information_loss_norm: f64,
    pub substitution_noise_norm: f64,
    pub residual: f64,
}

/// Decomposes `n` seeded random (unmasked token, layer) comparisons, with
/// layer inputs taken from the original model's forward pass.
pub fn spot_check(
    orig: &MoeModel,
    comp: &MoeModel,
    map: Option<&CompressionMap>,
    corpus: &[Sequence],
    n: usize,
    seed: u64,
) -> Result<Vec<SpotCheck>> {
    check_pair(orig, comp, map)?;
    let candidates: Vec<(usize, usize)> = corpus
        .iter()
        .enumerate()
        .flat_map(|(si, s)| {
            s.mask
                .iter()
                .enumerate()
                .filter(|(_, &m)| m == 1)
                .map(move |(t, _)| (si, t))
        })
        .collect();
    if candidates.is_empty() {
        return Err(Error::arg("corpus has no unmasked tokens"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<(usize, usize, usize)> = (0..n)
        .map(|_| {
            let (si, t) = candidates[rng.random_range(0..candidates.len())];
            (si, t, rng.random_range(0..orig.n_layers()))
        })
        .collect();
    picks
        .par_iter()
        .map(|&(si, t, l)| {
            let seq = &corpus[si];
            // positions are independent, so the token alone reproduces its trace
            let (_, trace) = orig.forward_tokens(&seq.tokens[t..=t])?;
            let x = &trace.layers[l][0].input;
            let dec = decompose_layer(orig, comp, map, l, x)?;
            Ok(SpotCheck {
                sequence: si,
                position: t,
                layer: l,
                label: dec.label,
                total: dec.total,
                weight_shift_norm: tensor::norm(&dec.weight_shift),
                information_loss_norm: tensor::norm(&dec.information_loss),
                substitution_noise_norm: tensor::norm(&dec.substitution_noise),
                residual: dec.residual().max(dec.vector_residual()),
            })
        })
        .collect()
}

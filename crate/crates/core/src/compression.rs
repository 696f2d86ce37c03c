//! Expert pruning, editing and merging.
//!
//! Each operation takes an immutable model and returns a compressed student
//! together with a map relating the student's experts to the original ones.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Expert, MoeLayer, MoeModel, Router, Sequence};
use crate::tensor::{self, Matrix};

/// Per-layer pruning record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneLayer {
    /// Retained original expert indices, ascending.
    pub retained: Vec<usize>,
    /// Original index → student index (`None` for dropped experts).
    pub remap: Vec<Option<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneMap {
    pub layers: Vec<PruneLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub rank: usize,
    pub w_in_error: f64,
    pub w_out_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditLayer {
    pub experts: Vec<EditRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMap {
    pub layers: Vec<EditLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeLayer {
    /// Original expert → cluster.
    pub phi: Vec<usize>,
    /// Members of every cluster, ascending; clusters ordered by smallest member.
    pub clusters: Vec<Vec<usize>>,
    /// Convex weights used to average member parameters, aligned with `clusters`.
    pub coefficients: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeMap {
    pub k_merge: usize,
    pub layers: Vec<MergeLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum CompressionMap {
    Prune(PruneMap),
    Edit(EditMap),
    Merge(MergeMap),
}

/// How one layer of a student relates to the same layer of its original.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LayerCorrespondence<'a> {
    /// Same expert indices on both sides (editing, or no compression).
    Identity,
    /// Student expert `j` is original expert `retained[j]`.
    Prune { retained: &'a [usize] },
    /// Original expert `i` became student expert `phi[i]`.
    Merge { phi: &'a [usize] },
}

impl CompressionMap {
    pub fn method(&self) -> &'static str {
        match self {
            CompressionMap::Prune(_) => "prune",
            CompressionMap::Edit(_) => "edit",
            CompressionMap::Merge(_) => "merge",
        }
    }

    pub fn n_layers(&self) -> usize {
        match self {
            CompressionMap::Prune(m) => m.layers.len(),
            CompressionMap::Edit(m) => m.layers.len(),
            CompressionMap::Merge(m) => m.layers.len(),
        }
    }

    pub fn layer(&self, l: usize) -> LayerCorrespondence<'_> {
        match self {
            CompressionMap::Prune(m) => LayerCorrespondence::Prune {
                retained: &m.layers[l].retained,
            },
            CompressionMap::Edit(_) => LayerCorrespondence::Identity,
            CompressionMap::Merge(m) => LayerCorrespondence::Merge { phi: &m.layers[l].phi },
        }
    }

    /// Checks that the map is internally consistent and relates `original`
    /// to `student`.
    pub fn validate(&self, original: &MoeModel, student: &MoeModel) -> Result<()> {
        let bad = |msg: String| Err(Error::input(msg));
        if original.config.vocab_size != student.config.vocab_size || original.config.d_model != student.config.d_model
        {
            return bad("original and student models have different vocabulary or width".into());
        }
        let n = original.n_layers();
        if student.n_layers() != n || self.n_layers() != n {
            return bad(format!(
                "layer counts differ: original {n}, student {}, map {}",
                student.n_layers(),
                self.n_layers()
            ));
        }
        for l in 0..n {
            let e = original.layers[l].n_experts();
            let s = student.layers[l].n_experts();
            match self {
                CompressionMap::Prune(m) => {
                    let p = &m.layers[l];
                    if p.retained.len() != s || p.remap.len() != e {
                        return bad(format!("layer {l}: prune map sizes do not match the models"));
                    }
                    if p.retained.windows(2).any(|w| w[0] >= w[1]) || p.retained.iter().any(|&i| i >= e) {
                        return bad(format!("layer {l}: retained set must be ascending indices below {e}"));
                    }
                    for (i, r) in p.remap.iter().enumerate() {
                        let expected = p.retained.iter().position(|&x| x == i);
                        if *r != expected {
                            return bad(format!("layer {l}: remap of expert {i} is inconsistent"));
                        }
                    }
                }
                CompressionMap::Edit(m) => {
                    if e != s || m.layers[l].experts.len() != e {
                        return bad(format!("layer {l}: editing must keep {e} experts"));
                    }
                }
                CompressionMap::Merge(m) => {
                    let g = &m.layers[l];
                    if g.phi.len() != e || g.clusters.len() != s || g.coefficients.len() != s {
                        return bad(format!("layer {l}: merge map sizes do not match the models"));
                    }
                    for (c, members) in g.clusters.iter().enumerate() {
                        if members.is_empty() {
                            return bad(format!("layer {l}: cluster {c} is empty"));
                        }
                        if members.iter().any(|&i| i >= e || g.phi[i] != c) {
                            return bad(format!("layer {l}: cluster {c} disagrees with phi"));
                        }
                    }
                    let total: usize = g.clusters.iter().map(Vec::len).sum();
                    if total != e {
                        return bad(format!("layer {l}: clusters cover {total} of {e} experts"));
                    }
                    if m.k_merge != original.config.top_k.min(s) {
                        return bad(format!(
                            "layer {l}: k_merge {} inconsistent with {s} clusters",
                            m.k_merge
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Per-layer, per-expert saliency: the mean of `g̃_i(x) · ‖E_i(x)‖₂` over
/// the unmasked calibration tokens that route to expert `i` (0 if none do).
pub fn expert_saliency(model: &MoeModel, calib: &[Sequence]) -> Result<Vec<Vec<f64>>> {
    if calib.iter().all(|s| s.mask.iter().all(|&m| m == 0)) {
        return Err(Error::arg("calibration set has no unmasked tokens"));
    }
    let counts = model.expert_counts();
    let partials = calib
        .par_iter()
        .map(|seq| {
            seq.validate(Some(model.config.vocab_size))?;
            let mut sums: Vec<Vec<f64>> = counts.iter().map(|&e| vec![0.0; e]).collect();
            let mut hits: Vec<Vec<usize>> = counts.iter().map(|&e| vec![0; e]).collect();
            let (_, caches) = model.forward_cached(&seq.tokens)?;
            for (cache, &m) in caches.iter().zip(&seq.mask) {
                if m == 0 {
                    continue;
                }
                for (l, lc) in cache.layers.iter().enumerate() {
                    for ((&i, &w), act) in lc.routing.selected.iter().zip(&lc.routing.weights).zip(&lc.experts) {
                        sums[l][i] += w * tensor::norm(&act.out);
                        hits[l][i] += 1;
                    }
                }
            }
            Ok((sums, hits))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sums: Vec<Vec<f64>> = counts.iter().map(|&e| vec![0.0; e]).collect();
    let mut hits: Vec<Vec<usize>> = counts.iter().map(|&e| vec![0; e]).collect();
    for (s, h) in partials {
        for l in 0..sums.len() {
            for i in 0..sums[l].len() {
                sums[l][i] += s[l][i];
                hits[l][i] += h[l][i];
            }
        }
    }
    Ok(sums
        .into_iter()
        .zip(hits)
        .map(|(s, h)| {
            s.into_iter()
                .zip(h)
                .map(|(v, n)| if n == 0 { 0.0 } else { v / n as f64 })
                .collect()
        })
        .collect())
}

/// Number of experts kept out of `n` at `retention`, `⌈retention · n⌉`.
pub fn retained_count(n: usize, retention: f64) -> usize {
    // guard against 0.625 · 8 landing a hair above 5
    ((retention * n as f64) - 1e-9).ceil().max(0.0) as usize
}

/// Keeps the `⌈retention · E⌉` most salient experts in every layer.
pub fn prune_experts(model: &MoeModel, retention: f64, calib: &[Sequence]) -> Result<(MoeModel, PruneMap)> {
    if !(retention > 0.0 && retention <= 1.0) {
        return Err(Error::arg(format!("retention must lie in (0, 1], got {retention}")));
    }
    let k = model.config.top_k;
    for (l, layer) in model.layers.iter().enumerate() {
        let keep = retained_count(layer.n_experts(), retention);
        if keep < k {
            return Err(Error::arg(format!(
                "retention {retention} keeps {keep} experts in layer {l}, fewer than top_k = {k}"
            )));
        }
    }
    let saliency = expert_saliency(model, calib)?;
    let mut student = model.clone();
    let mut layers = Vec::with_capacity(model.n_layers());
    for (l, layer) in model.layers.iter().enumerate() {
        let e = layer.n_experts();
        let keep = retained_count(e, retention);
        let mut order: Vec<usize> = (0..e).collect();
        order.sort_by(|&a, &b| saliency[l][b].total_cmp(&saliency[l][a]).then(a.cmp(&b)));
        let mut retained = order[..keep].to_vec();
        retained.sort_unstable();
        let mut remap = vec![None; e];
        for (j, &i) in retained.iter().enumerate() {
            remap[i] = Some(j);
        }
        let router = Matrix::from_fn(keep, layer.router.w.cols(), |j, c| layer.router.w.get(retained[j], c));
        student.layers[l] = MoeLayer {
            router: Router { w: router },
            experts: retained.iter().map(|&i| layer.experts[i].clone()).collect(),
        };
        layers.push(PruneLayer { retained, remap });
    }
    Ok((student, PruneMap { layers }))
}

/// Rank used for a matrix whose smaller side is `min_dim`.
pub fn edit_rank(rank_ratio: f64, min_dim: usize) -> usize {
    ((rank_ratio * min_dim as f64 + 1e-9).floor() as usize).clamp(1, min_dim)
}

fn low_rank(w: &Matrix, r: usize) -> Result<(Matrix, f64)> {
    let approx = tensor::truncated_svd(w, r)?.reconstruct();
    let err = w.sub(&approx)?.frobenius_norm();
    Ok((approx, err))
}

/// Replaces every expert matrix by its rank-`r` truncated SVD, with
/// `r = max(1, ⌊rank_ratio · min(d_model, d_ff)⌋)`.
pub fn edit_experts(model: &MoeModel, rank_ratio: f64) -> Result<(MoeModel, EditMap)> {
    if !(rank_ratio > 0.0 && rank_ratio <= 1.0) {
        return Err(Error::arg(format!("rank_ratio must lie in (0, 1], got {rank_ratio}")));
    }
    let r = edit_rank(rank_ratio, model.config.d_model.min(model.config.d_ff));
    let mut student = model.clone();
    let mut layers = Vec::with_capacity(model.n_layers());
    for (l, layer) in model.layers.iter().enumerate() {
        let edited = layer
            .experts
            .par_iter()
            .map(|e| {
                let (w_in, w_in_error) = low_rank(&e.w_in, r)?;
                let (w_out, w_out_error) = low_rank(&e.w_out, r)?;
                Ok((
                    Expert { w_in, w_out },
                    EditRecord {
                        rank: r,
                        w_in_error,
                        w_out_error,
                    },
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        let (experts, records): (Vec<_>, Vec<_>) = edited.into_iter().unzip();
        student.layers[l].experts = experts;
        layers.push(EditLayer { experts: records });
    }
    Ok((student, EditMap { layers }))
}

/// Average-linkage agglomerative clustering of `points` under Euclidean
/// distance, stopped at `target` clusters. Ties merge the pair with the
/// smallest (first, second) smallest-member labels. Returns clusters ordered
/// by smallest member, members ascending.
pub fn average_linkage(points: &[Vec<f64>], target: usize) -> Result<Vec<Vec<usize>>> {
    let n = points.len();
    if target == 0 || target > n {
        return Err(Error::arg(format!("cannot form {target} clusters from {n} points")));
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    // Active clusters are keyed by their smallest member.
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    let mut active = n;
    while active > target {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if members[a].is_none() {
                continue;
            }
            for b in a + 1..n {
                if members[b].is_none() {
                    continue;
                }
                if best.is_none_or(|(d, _, _)| dist[a][b] < d) {
                    best = Some((dist[a][b], a, b));
                }
            }
        }
        let (_, a, b) = best.expect("at least two active clusters");
        let mb = members[b].take().expect("active");
        let na = members[a].as_ref().expect("active").len() as f64;
        let nb = mb.len() as f64;
        for c in 0..n {
            if c == a || members[c].is_none() {
                continue;
            }
            let d = (na * dist[a][c] + nb * dist[b][c]) / (na + nb);
            dist[a][c] = d;
            dist[c][a] = d;
        }
        let ma = members[a].as_mut().expect("active");
        ma.extend(mb);
        ma.sort_unstable();
        active -= 1;
    }
    Ok(members.into_iter().flatten().collect())
}

/// Mean output of every expert over the unmasked calibration tokens, taking
/// each layer's input from the model's own forward pass.
pub fn mean_expert_outputs(model: &MoeModel, calib: &[Sequence]) -> Result<Vec<Vec<Vec<f64>>>> {
    let d = model.config.d_model;
    let counts = model.expert_counts();
    let partials = calib
        .par_iter()
        .map(|seq| {
            seq.validate(Some(model.config.vocab_size))?;
            let (_, trace) = model.forward_tokens(&seq.tokens)?;
            let mut sums: Vec<Vec<Vec<f64>>> = counts.iter().map(|&e| vec![vec![0.0; d]; e]).collect();
            let mut n = 0usize;
            for (t, &m) in seq.mask.iter().enumerate() {
                if m == 0 {
                    continue;
                }
                n += 1;
                for (l, layer) in model.layers.iter().enumerate() {
                    let x = &trace.layers[l][t].input;
                    for (i, e) in layer.experts.iter().enumerate() {
                        tensor::axpy(1.0, &e.forward(x), &mut sums[l][i]);
                    }
                }
            }
            Ok((sums, n))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut total: Vec<Vec<Vec<f64>>> = counts.iter().map(|&e| vec![vec![0.0; d]; e]).collect();
    let mut n = 0usize;
    for (s, c) in partials {
        n += c;
        for (tl, sl) in total.iter_mut().zip(&s) {
            for (te, se) in tl.iter_mut().zip(sl) {
                tensor::axpy(1.0, se, te);
            }
        }
    }
    if n == 0 {
        return Err(Error::arg("calibration set has no unmasked tokens"));
    }
    for v in total.iter_mut().flatten() {
        v.iter_mut().for_each(|x| *x /= n as f64);
    }
    Ok(total)
}

fn convex_weights(members: &[usize], saliency: &[f64]) -> Vec<f64> {
    let total: f64 = members.iter().map(|&i| saliency[i]).sum();
    if total > 0.0 {
        members.iter().map(|&i| saliency[i] / total).collect()
    } else {
        vec![1.0 / members.len() as f64; members.len()]
    }
}

/// Clusters every layer's experts into `target` groups by their mean outputs
/// and replaces each group with one saliency-weighted average expert. The
/// merged router row is the mean of its members' rows.
pub fn merge_experts(model: &MoeModel, target: usize, calib: &[Sequence]) -> Result<(MoeModel, MergeMap)> {
    for (l, layer) in model.layers.iter().enumerate() {
        if target == 0 || target > layer.n_experts() {
            return Err(Error::arg(format!(
                "target count {target} out of range 1..={} at layer {l}",
                layer.n_experts()
            )));
        }
    }
    let saliency = expert_saliency(model, calib)?;
    let means = mean_expert_outputs(model, calib)?;
    let mut student = model.clone();
    let mut layers = Vec::with_capacity(model.n_layers());
    for (l, layer) in model.layers.iter().enumerate() {
        let clusters = average_linkage(&means[l], target)?;
        let mut phi = vec![0; layer.n_experts()];
        let mut experts = Vec::with_capacity(target);
        let mut coefficients = Vec::with_capacity(target);
        let d = layer.router.w.cols();
        let mut router = Matrix::zeros(target, d);
        for (c, members) in clusters.iter().enumerate() {
            let alpha = convex_weights(members, &saliency[l]);
            let first = &layer.experts[members[0]];
            let mut w_in = Matrix::zeros(first.w_in.rows(), first.w_in.cols());
            let mut w_out = Matrix::zeros(first.w_out.rows(), first.w_out.cols());
            for (&i, &a) in members.iter().zip(&alpha) {
                phi[i] = c;
                w_in.axpy(a, &layer.experts[i].w_in);
                w_out.axpy(a, &layer.experts[i].w_out);
                tensor::axpy(1.0 / members.len() as f64, layer.router.w.row(i), router.row_mut(c));
            }
            experts.push(Expert { w_in, w_out });
            coefficients.push(alpha);
        }
        student.layers[l] = MoeLayer {
            router: Router { w: router },
            experts,
        };
        layers.push(MergeLayer {
            phi,
            clusters,
            coefficients,
        });
    }
    let k_merge = model.config.top_k.min(target);
    Ok((student, MergeMap { k_merge, layers }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(e: usize, k: usize, seed: u64) -> MoeModel {
        MoeModel::init(ModelConfig {
            vocab_size: 12,
            d_model: 6,
            d_ff: 4,
            n_layers: 2,
            n_experts: e,
            top_k: k,
            seed,
        })
        .unwrap()
    }

    fn calib(n: usize, len: usize, seed: u64) -> Vec<Sequence> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Sequence::unmasked((0..len).map(|_| rng.random_range(0..12)).collect()))
            .collect()
    }

    fn saliency_oracle(m: &MoeModel, calib: &[Sequence]) -> Vec<Vec<f64>> {
        let mut sum: Vec<Vec<f64>> = m.expert_counts().iter().map(|&e| vec![0.0; e]).collect();
        let mut cnt: Vec<Vec<f64>> = sum.clone();
        for s in calib {
            for &tok in &s.tokens {
                let mut h = m.embedding.row(tok as usize).to_vec();
                for (l, layer) in m.layers.iter().enumerate() {
                    let logits = layer.router.w.matvec(&h);
                    let g = tensor::softmax(&logits, 1.0).unwrap();
                    let sel = tensor::top_k(&g, m.top_k_at(l)).unwrap();
                    let mass: f64 = sel.iter().map(|&i| g[i]).sum();
                    let mut y = vec![0.0; h.len()];
                    for &i in &sel {
                        let out = layer.experts[i].forward(&h);
                        sum[l][i] += g[i] / mass * tensor::norm(&out);
                        cnt[l][i] += 1.0;
                        tensor::axpy(g[i] / mass, &out, &mut y);
                    }
                    tensor::axpy(1.0, &y, &mut h);
                }
            }
        }
        sum.iter()
            .zip(&cnt)
            .map(|(s, c)| {
                s.iter()
                    .zip(c)
                    .map(|(a, b)| if *b == 0.0 { 0.0 } else { a / b })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn saliency_matches_enumeration() {
        let m = model(6, 2, 3);
        let c = calib(4, 4, 1);
        let got = expert_saliency(&m, &c).unwrap();
        let want = saliency_oracle(&m, &c);
        for (g, w) in got.iter().flatten().zip(want.iter().flatten()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn saliency_edge_cases() {
        let mut m = model(4, 2, 3);
        m.layers[0].experts[1].w_out = Matrix::zeros(6, 4);
        let c = calib(8, 6, 2);
        assert_eq!(expert_saliency(&m, &c).unwrap()[0][1], 0.0);
        assert!(expert_saliency(&m, &[]).is_err());

        // Two identical experts behind identical router rows.
        let mut m = model(3, 2, 4);
        let layer = &mut m.layers[0];
        layer.experts.truncate(2);
        layer.experts[1] = layer.experts[0].clone();
        let row = layer.router.w.row(0).to_vec();
        layer.router.w = Matrix::from_rows(&[&row, &row]).unwrap();
        let s = expert_saliency(&m, &c).unwrap();
        assert!((s[0][0] - s[0][1]).abs() < 1e-9);
    }

    #[test]
    fn prune_counts_and_identity() {
        let m = model(8, 2, 5);
        let c = calib(6, 5, 3);
        let (s, map) = prune_experts(&m, 0.625, &c).unwrap();
        assert_eq!(s.expert_counts(), vec![5, 5]);
        CompressionMap::Prune(map.clone()).validate(&m, &s).unwrap();
        for (l, pl) in map.layers.iter().enumerate() {
            for (j, &i) in pl.retained.iter().enumerate() {
                assert_eq!(s.layers[l].experts[j], m.layers[l].experts[i]);
                assert_eq!(s.layers[l].router.w.row(j), m.layers[l].router.w.row(i));
            }
        }
        let (same, map) = prune_experts(&m, 1.0, &c).unwrap();
        assert_eq!(same, m);
        assert_eq!(map.layers[0].retained, (0..8).collect::<Vec<_>>());
        assert!(prune_experts(&m, 0.1, &c).is_err());
    }

    #[test]
    fn prune_keeps_most_salient() {
        let m = model(16, 2, 8);
        let c = calib(10, 6, 4);
        let (_, map) = prune_experts(&m, 0.625, &c).unwrap();
        let sal = saliency_oracle(&m, &c);
        for (l, pl) in map.layers.iter().enumerate() {
            let mut idx: Vec<usize> = (0..16).collect();
            idx.sort_by(|&a, &b| sal[l][b].partial_cmp(&sal[l][a]).unwrap().then(a.cmp(&b)));
            let mut want = idx[..10].to_vec();
            want.sort_unstable();
            assert_eq!(pl.retained, want);
        }
    }

    #[test]
    fn retained_count_rounding() {
        assert_eq!(retained_count(8, 0.625), 5);
        assert_eq!(retained_count(128, 0.625), 80);
        assert_eq!(retained_count(32, 0.625), 20);
        assert_eq!(retained_count(4, 0.625), 3);
        assert_eq!(retained_count(10, 1.0), 10);
    }

    #[test]
    fn full_rank_edit_is_lossless() {
        let m = model(4, 2, 6);
        let (s, map) = edit_experts(&m, 1.0).unwrap();
        for rec in map.layers.iter().flat_map(|l| &l.experts) {
            assert_eq!(rec.rank, 4);
            assert!(rec.w_in_error < 1e-8 && rec.w_out_error < 1e-8);
        }
        let toks = [1u32, 5, 7, 11];
        let a = m.logits(&toks).unwrap();
        let b = s.logits(&toks).unwrap();
        assert!(a.sub(&b).unwrap().data().iter().all(|v| v.abs() < 1e-6));
        for l in 0..2 {
            assert_eq!(s.layers[l].router, m.layers[l].router);
        }
    }

    #[test]
    fn rank_one_experts_recovered() {
        let mut m = model(3, 1, 7);
        for layer in &mut m.layers {
            for (i, e) in layer.experts.iter_mut().enumerate() {
                let u: Vec<f64> = (0..4).map(|a| (a + i) as f64 * 0.3 - 0.5).collect();
                let v: Vec<f64> = (0..6).map(|b| 0.2 * b as f64 + 0.1).collect();
                e.w_in = Matrix::zeros(4, 6);
                e.w_in.add_outer(1.0, &u, &v);
                e.w_out = e.w_in.transpose();
            }
        }
        let (s, map) = edit_experts(&m, 0.25).unwrap();
        assert_eq!(map.layers[0].experts[0].rank, 1);
        for (a, b) in m.layers.iter().zip(&s.layers) {
            for (x, y) in a.experts.iter().zip(&b.experts) {
                assert!(x.w_in.sub(&y.w_in).unwrap().frobenius_norm() < 1e-8);
                assert!(x.w_out.sub(&y.w_out).unwrap().frobenius_norm() < 1e-8);
            }
        }
        assert!(edit_experts(&m, 0.0).is_err());
        assert!(edit_experts(&m, 1.5).is_err());
    }

    fn linkage_oracle(points: &[Vec<f64>], target: usize) -> Vec<Vec<usize>> {
        let d = |a: usize, b: usize| {
            points[a]
                .iter()
                .zip(&points[b])
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut clusters: Vec<Vec<usize>> = (0..points.len()).map(|i| vec![i]).collect();
        while clusters.len() > target {
            let mut best = (f64::INFINITY, 0, 0);
            for a in 0..clusters.len() {
                for b in a + 1..clusters.len() {
                    let mut s = 0.0;
                    for &i in &clusters[a] {
                        for &j in &clusters[b] {
                            s += d(i, j);
                        }
                    }
                    let avg = s / (clusters[a].len() * clusters[b].len()) as f64;
                    if avg < best.0 {
                        best = (avg, a, b);
                    }
                }
            }
            let moved = clusters.remove(best.2);
            clusters[best.1].extend(moved);
            clusters[best.1].sort_unstable();
        }
        clusters.sort_by_key(|c| c[0]);
        clusters
    }

    #[test]
    fn linkage_matches_from_scratch_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for trial in 0..50 {
            let n = 3 + trial % 8;
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            for target in 1..=n {
                assert_eq!(
                    average_linkage(&points, target).unwrap(),
                    linkage_oracle(&points, target)
                );
            }
        }
    }

    #[test]
    fn merge_on_seeded_model_matches_oracle() {
        let m = model(8, 2, 21);
        let c = calib(8, 6, 5);
        let (s, map) = merge_experts(&m, 5, &c).unwrap();
        CompressionMap::Merge(map.clone()).validate(&m, &s).unwrap();
        let means = mean_expert_outputs(&m, &c).unwrap();
        for (l, ml) in map.layers.iter().enumerate() {
            assert_eq!(ml.clusters, linkage_oracle(&means[l], 5));
            let mut seen = ml.phi.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen, (0..5).collect::<Vec<_>>());
            for alpha in &ml.coefficients {
                assert!(alpha.iter().all(|&a| a >= 0.0));
                assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert_eq!(map.k_merge, 2);
    }

    #[test]
    fn merge_identity_and_duplicates() {
        let m = model(6, 2, 22);
        let c = calib(6, 5, 6);
        let (s, map) = merge_experts(&m, 6, &c).unwrap();
        assert_eq!(map.layers[0].phi, (0..6).collect::<Vec<_>>());
        let toks = [0u32, 3, 9];
        let a = m.logits(&toks).unwrap();
        let b = s.logits(&toks).unwrap();
        assert!(a.sub(&b).unwrap().data().iter().all(|v| v.abs() < 1e-9));

        let mut dup = m.clone();
        dup.layers[1].experts[4] = dup.layers[1].experts[1].clone();
        let (_, map) = merge_experts(&dup, 5, &c).unwrap();
        assert_eq!(map.layers[1].phi[1], map.layers[1].phi[4]);
        assert!(merge_experts(&m, 0, &c).is_err());
        assert!(merge_experts(&m, 7, &c).is_err());
    }

    #[test]
    fn inputs_untouched_and_map_json_tagged() {
        let m = model(6, 2, 23);
        let before = m.clone();
        let c = calib(4, 4, 7);
        let (_, pm) = prune_experts(&m, 0.5, &c).unwrap();
        let (_, em) = edit_experts(&m, 0.5).unwrap();
        let (_, mm) = merge_experts(&m, 3, &c).unwrap();
        assert_eq!(m, before);
        for map in [
            CompressionMap::Prune(pm),
            CompressionMap::Edit(em),
            CompressionMap::Merge(mm),
        ] {
            let v: serde_json::Value = serde_json::to_value(&map).unwrap();
            assert_eq!(v["method"], map.method());
            let back: CompressionMap = serde_json::from_value(v).unwrap();
            assert_eq!(back, map);
        }
    }
}

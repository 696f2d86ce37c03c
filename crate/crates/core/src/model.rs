//! The toy MoE language model.
//!
//! A model is an embedding table, a stack of MoE-FFN blocks with residual
//! connections, and an output head. There is no attention, so every position
//! is computed independently from its own token.
//!
//! Per block, for input `x`:
//!
//! ```text
//! g  = softmax(W_router · x)
//! S  = top_k(g, min(k, E))
//! g̃_i = g_i / Σ_{j∈S} g_j           (i ∈ S)
//! y  = Σ_{i∈S} g̃_i · E_i(x)          (recorded in the trace)
//! h' = x + y
//! ```

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, Matrix, ProbVector};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_layers: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_layers", self.n_layers),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::arg(format!("{name} must be at least 1")));
            }
        }
        if self.top_k >= self.n_experts {
            return Err(Error::arg(format!(
                "top_k ({}) must be smaller than n_experts ({})",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }
}

/// SiLU feed-forward expert: `E(x) = W_out · silu(W_in · x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// d_ff × d_model
    pub w_in: Matrix,
    /// d_model × d_ff
    pub w_out: Matrix,
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[inline]
pub(crate) fn silu(v: f64) -> f64 {
    v * sigmoid(v)
}

/// Intermediates of one expert evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct ExpertActivation {
    pub pre: Vec<f64>,
    pub act: Vec<f64>,
    pub out: Vec<f64>,
}

impl Expert {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        self.forward_cached(x).out
    }

    pub(crate) fn forward_cached(&self, x: &[f64]) -> ExpertActivation {
        let pre = self.w_in.matvec(x);
        let act: Vec<f64> = pre.iter().map(|&v| silu(v)).collect();
        let out = self.w_out.matvec(&act);
        ExpertActivation { pre, act, out }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Router {
    /// E × d_model
    pub w: Matrix,
}

/// Routing record of one token at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRouting {
    /// Softmax gate scores over the layer's current experts.
    pub scores: ProbVector,
    /// Selected experts, ascending.
    pub selected: Vec<usize>,
    /// Renormalized gate weights, aligned with `selected`.
    pub weights: Vec<f64>,
    /// Layer input `x`.
    pub input: Vec<f64>,
    /// MoE term `Σ g̃_i E_i(x)` before the residual add.
    pub output: Vec<f64>,
}

impl LayerRouting {
    /// Renormalized weight of expert `i`, or `None` when not selected.
    pub fn weight_of(&self, i: usize) -> Option<f64> {
        self.selected.iter().position(|&s| s == i).map(|p| self.weights[p])
    }
}

/// Per-layer, per-token routing records. `layers[l][t]`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoutingTrace {
    pub layers: Vec<Vec<LayerRouting>>,
}

impl RoutingTrace {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.len())
    }

    pub(crate) fn with_layers(n: usize) -> Self {
        Self {
            layers: vec![Vec::new(); n],
        }
    }

    pub(crate) fn extend(&mut self, other: RoutingTrace) {
        for (dst, src) in self.layers.iter_mut().zip(other.layers) {
            dst.extend(src);
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerCache {
    pub routing: LayerRouting,
    /// One activation per selected expert, aligned with `routing.selected`.
    pub experts: Vec<ExpertActivation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub router: Router,
    pub experts: Vec<Expert>,
}

impl MoeLayer {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    /// Gate scores, selection and renormalized weights for `x`.
    pub fn route(&self, x: &[f64], top_k: usize) -> Result<(ProbVector, Vec<usize>, Vec<f64>)> {
        let d = self.router.w.cols();
        if x.len() != d {
            return Err(Error::arg(format!("layer input has length {}, expected {d}", x.len())));
        }
        let logits = self.router.w.matvec(x);
        let scores = tensor::softmax(&logits, 1.0)?;
        let k = top_k.min(self.n_experts());
        let selected = tensor::top_k(&scores, k)?;
        let mass: f64 = selected.iter().map(|&i| scores[i]).sum();
        let weights = selected.iter().map(|&i| scores[i] / mass).collect();
        Ok((scores, selected, weights))
    }

    pub(crate) fn forward_cached(&self, x: &[f64], top_k: usize) -> Result<LayerCache> {
        let (scores, selected, weights) = self.route(x, top_k)?;
        let mut output = vec![0.0; x.len()];
        let mut experts = Vec::with_capacity(selected.len());
        for (&i, &w) in selected.iter().zip(&weights) {
            let act = self.experts[i].forward_cached(x);
            tensor::axpy(w, &act.out, &mut output);
            experts.push(act);
        }
        Ok(LayerCache {
            routing: LayerRouting {
                scores,
                selected,
                weights,
                input: x.to_vec(),
                output,
            },
            experts,
        })
    }

    /// Returns the residual output `x + y` and the routing record.
    pub fn forward(&self, x: &[f64], top_k: usize) -> Result<(Vec<f64>, LayerRouting)> {
        let cache = self.forward_cached(x, top_k)?;
        let mut h = x.to_vec();
        tensor::axpy(1.0, &cache.routing.output, &mut h);
        Ok((h, cache.routing))
    }
}

/// Addresses one parameter tensor of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamId {
    Embedding,
    Router { layer: usize },
    ExpertIn { layer: usize, expert: usize },
    ExpertOut { layer: usize, expert: usize },
    OutputHead,
}

impl ParamId {
    pub fn is_router(&self) -> bool {
        matches!(self, ParamId::Router { .. })
    }

    pub fn parse(name: &str) -> Option<ParamId> {
        match name {
            "embedding" => return Some(ParamId::Embedding),
            "output_head" => return Some(ParamId::OutputHead),
            _ => {}
        }
        let parts: Vec<&str> = name.split('.').collect();
        match parts.as_slice() {
            ["layers", l, "router"] => Some(ParamId::Router { layer: l.parse().ok()? }),
            ["layers", l, "experts", e, "w_in"] => Some(ParamId::ExpertIn {
                layer: l.parse().ok()?,
                expert: e.parse().ok()?,
            }),
            ["layers", l, "experts", e, "w_out"] => Some(ParamId::ExpertOut {
                layer: l.parse().ok()?,
                expert: e.parse().ok()?,
            }),
            _ => None,
        }
    }
}

impl fmt::Display for ParamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ParamId::Embedding => write!(f, "embedding"),
            ParamId::OutputHead => write!(f, "output_head"),
            ParamId::Router { layer } => write!(f, "layers.{layer}.router"),
            ParamId::ExpertIn { layer, expert } => write!(f, "layers.{layer}.experts.{expert}.w_in"),
            ParamId::ExpertOut { layer, expert } => {
                write!(f, "layers.{layer}.experts.{expert}.w_out")
            }
        }
    }
}

/// One token sequence with its loss mask (1 = real token, 0 = padding).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sequence {
    pub tokens: Vec<u32>,
    pub mask: Vec<u8>,
}

impl Sequence {
    pub fn new(tokens: Vec<u32>, mask: Vec<u8>) -> Result<Self> {
        let s = Self { tokens, mask };
        s.validate(None)?;
        Ok(s)
    }

    pub fn unmasked(tokens: Vec<u32>) -> Self {
        let mask = vec![1; tokens.len()];
        Self { tokens, mask }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: Option<usize>) -> Result<()> {
        if self.mask.len() != self.tokens.len() {
            return Err(Error::input(format!(
                "mask length {} differs from sequence length {}",
                self.mask.len(),
                self.tokens.len()
            )));
        }
        if self.mask.iter().any(|&m| m > 1) {
            return Err(Error::input("mask entries must be 0 or 1"));
        }
        if let Some(v) = vocab_size {
            if let Some(t) = self.tokens.iter().find(|&&t| t as usize >= v) {
                return Err(Error::input(format!("token id {t} out of range for vocabulary {v}")));
            }
        }
        Ok(())
    }

    /// Keeps at most `max_len` leading positions.
    pub fn truncated(&self, max_len: usize) -> Sequence {
        let n = self.tokens.len().min(max_len);
        Sequence {
            tokens: self.tokens[..n].to_vec(),
            mask: self.mask[..n].to_vec(),
        }
    }
}

pub type TokenBatch = [Sequence];

/// Output of [`MoeModel::forward`]: logits per sequence and a trace over all
/// positions of all sequences, in sequence order.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<Matrix>,
    pub trace: RoutingTrace,
}

#[derive(Debug, Clone)]
pub(crate) struct PositionCache {
    pub token: usize,
    pub layers: Vec<LayerCache>,
    pub final_hidden: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    pub config: ModelConfig,
    /// vocab × d_model
    pub embedding: Matrix,
    pub layers: Vec<MoeLayer>,
    /// vocab × d_model
    pub output_head: Matrix,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let bound = 1.0 / (cols as f64).sqrt();
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

impl MoeModel {
    /// Seeded initialization, uniform in `±1/√fan_in` for every matrix.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (v, d, f) = (config.vocab_size, config.d_model, config.d_ff);
        let embedding = uniform_matrix(&mut rng, v, d);
        let layers = (0..config.n_layers)
            .map(|_| {
                let router = Router {
                    w: uniform_matrix(&mut rng, config.n_experts, d),
                };
                let experts = (0..config.n_experts)
                    .map(|_| Expert {
                        w_in: uniform_matrix(&mut rng, f, d),
                        w_out: uniform_matrix(&mut rng, d, f),
                    })
                    .collect();
                MoeLayer { router, experts }
            })
            .collect();
        let output_head = uniform_matrix(&mut rng, v, d);
        Ok(Self {
            config,
            embedding,
            layers,
            output_head,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Experts per layer, reflecting any pruning or merging.
    pub fn expert_counts(&self) -> Vec<usize> {
        self.layers.iter().map(MoeLayer::n_experts).collect()
    }

    /// Effective selection size at `layer`: `min(k, current expert count)`.
    pub fn top_k_at(&self, layer: usize) -> usize {
        self.config.top_k.min(self.layers[layer].n_experts())
    }

    /// Checks every structural invariant (shapes, router rows == expert count).
    pub fn validate(&self) -> Result<()> {
        let c = &self.config;
        let bad = |what: String| Err(Error::input(what));
        if self.embedding.shape() != (c.vocab_size, c.d_model) {
            return bad(format!("embedding shape {:?}", self.embedding.shape()));
        }
        if self.output_head.shape() != (c.vocab_size, c.d_model) {
            return bad(format!("output head shape {:?}", self.output_head.shape()));
        }
        if self.layers.len() != c.n_layers {
            return bad(format!("{} layers, config says {}", self.layers.len(), c.n_layers));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.experts.is_empty() {
                return bad(format!("layer {l} has no experts"));
            }
            if layer.router.w.shape() != (layer.experts.len(), c.d_model) {
                return bad(format!(
                    "layer {l}: router shape {:?} for {} experts",
                    layer.router.w.shape(),
                    layer.experts.len()
                ));
            }
            for (i, e) in layer.experts.iter().enumerate() {
                if e.w_in.shape() != (c.d_ff, c.d_model) || e.w_out.shape() != (c.d_model, c.d_ff) {
                    return bad(format!("layer {l} expert {i}: inconsistent shapes"));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn forward_position(&self, token: usize) -> Result<PositionCache> {
        if token >= self.config.vocab_size {
            return Err(Error::input(format!(
                "token id {token} out of range for vocabulary {}",
                self.config.vocab_size
            )));
        }
        let mut h = self.embedding.row(token).to_vec();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let cache = layer.forward_cached(&h, self.top_k_at(l))?;
            tensor::axpy(1.0, &cache.routing.output, &mut h);
            layers.push(cache);
        }
        Ok(PositionCache {
            token,
            layers,
            final_hidden: h,
        })
    }

    /// Logits (len × vocab) and per-position caches for one token sequence.
    pub(crate) fn forward_cached(&self, tokens: &[u32]) -> Result<(Matrix, Vec<PositionCache>)> {
        let v = self.config.vocab_size;
        let mut logits = Matrix::zeros(tokens.len(), v);
        let mut caches = Vec::with_capacity(tokens.len());
        for (t, &tok) in tokens.iter().enumerate() {
            let cache = self.forward_position(tok as usize)?;
            logits
                .row_mut(t)
                .copy_from_slice(&self.output_head.matvec(&cache.final_hidden));
            caches.push(cache);
        }
        Ok((logits, caches))
    }

    /// Logits and routing trace for one sequence of token ids.
    pub fn forward_tokens(&self, tokens: &[u32]) -> Result<(Matrix, RoutingTrace)> {
        let (logits, caches) = self.forward_cached(tokens)?;
        let mut trace = RoutingTrace::with_layers(self.layers.len());
        for cache in caches {
            for (l, lc) in cache.layers.into_iter().enumerate() {
                trace.layers[l].push(lc.routing);
            }
        }
        Ok((logits, trace))
    }

    /// Logits only; skips trace assembly.
    pub fn logits(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.forward_cached(tokens)?.0)
    }

    /// Forward over a batch. The trace lists every position of every sequence.
    pub fn forward(&self, batch: &TokenBatch) -> Result<ForwardOutput> {
        let mut trace = RoutingTrace::with_layers(self.layers.len());
        let mut logits = Vec::with_capacity(batch.len());
        for seq in batch {
            seq.validate(Some(self.config.vocab_size))?;
            let (z, t) = self.forward_tokens(&seq.tokens)?;
            logits.push(z);
            trace.extend(t);
        }
        Ok(ForwardOutput { logits, trace })
    }

    /// Every parameter tensor id, in checkpoint order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![ParamId::Embedding];
        for (layer, l) in self.layers.iter().enumerate() {
            ids.push(ParamId::Router { layer });
            for expert in 0..l.n_experts() {
                ids.push(ParamId::ExpertIn { layer, expert });
                ids.push(ParamId::ExpertOut { layer, expert });
            }
        }
        ids.push(ParamId::OutputHead);
        ids
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        match id {
            ParamId::Embedding => Some(&self.embedding),
            ParamId::OutputHead => Some(&self.output_head),
            ParamId::Router { layer } => self.layers.get(layer).map(|l| &l.router.w),
            ParamId::ExpertIn { layer, expert } => self.layers.get(layer)?.experts.get(expert).map(|e| &e.w_in),
            ParamId::ExpertOut { layer, expert } => self.layers.get(layer)?.experts.get(expert).map(|e| &e.w_out),
        }
    }

    pub fn param_mut(&mut self, id: ParamId) -> Option<&mut Matrix> {
        match id {
            ParamId::Embedding => Some(&mut self.embedding),
            ParamId::OutputHead => Some(&mut self.output_head),
            ParamId::Router { layer } => self.layers.get_mut(layer).map(|l| &mut l.router.w),
            ParamId::ExpertIn { layer, expert } => {
                self.layers.get_mut(layer)?.experts.get_mut(expert).map(|e| &mut e.w_in)
            }
            ParamId::ExpertOut { layer, expert } => self
                .layers
                .get_mut(layer)?
                .experts
                .get_mut(expert)
                .map(|e| &mut e.w_out),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.param_ids()
            .into_iter()
            .filter_map(|id| self.param(id))
            .map(|m| m.data().len())
            .sum()
    }

    pub fn router_parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.router.w.data().len()).sum()
    }
}

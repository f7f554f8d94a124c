//! Modality embedding networks: a transformer encoder over code sequences,
//! two-layer perceptrons over the tabular modalities, Hadamard-weighted
//! fusion with a final projection, and the linear pre-training head.
//!
//! Builders append nodes to a caller-owned [`Graph`] so the towers
//! compose into the pre-training loss or the full GP objective.

mod pretrain;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

pub use pretrain::{pretrain, PretrainConfig, PretrainOutcome};

use crate::autodiff::{AdError, Graph, NodeId};
use crate::data::PAD_ID;
use crate::model::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("sequence {index} has no content tokens")]
    NoContentTokens { index: usize },
    #[error("transformer config invalid: {msg}")]
    BadConfig { msg: String },
    #[error("missing parameter `{name}`")]
    MissingParam { name: String },
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Transformer encoder hyperparameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TransformerConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub max_len: usize,
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<(), EmbeddingError> {
        if self.n_blocks == 0 {
            return Err(EmbeddingError::BadConfig {
                msg: "need at least one transformer block".into(),
            });
        }
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(EmbeddingError::BadConfig {
                msg: format!(
                    "model_dim {} not divisible by n_heads {}",
                    self.model_dim, self.n_heads
                ),
            });
        }
        if self.max_len == 0 {
            return Err(EmbeddingError::BadConfig {
                msg: "max_len must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Everything the embedding stack needs to size its parameters.
#[derive(Debug, Clone)]
pub struct EmbeddingConfig {
    pub transformer: TransformerConfig,
    pub vocab_size: usize,
    /// Output dimension of the EHR tower (`h^d`).
    pub ehr_dim: usize,
    pub demo_input_dim: usize,
    pub loc_input_dim: usize,
    pub tabular_hidden_dim: usize,
    /// Output dimension of each tabular tower (`h^s`, `h^g`).
    pub tabular_embed_dim: usize,
    /// Dimension of the fused latent after the final projection.
    pub fused_dim: usize,
    pub use_demographics: bool,
    pub use_location: bool,
}

impl EmbeddingConfig {
    /// Width of the fused concatenation before the final projection.
    pub fn concat_dim(&self) -> usize {
        let mut dim = self.ehr_dim;
        if self.use_demographics {
            dim += self.tabular_embed_dim;
        }
        if self.use_location {
            dim += self.tabular_embed_dim;
        }
        dim
    }
}

/// One tokenized sequence as the graph builders consume it.
#[derive(Debug, Clone)]
pub struct SequenceInput {
    pub token_ids: Vec<usize>,
    pub content_len: usize,
}

impl SequenceInput {
    pub fn from_padded(codes: &[u32], content_len: usize) -> Self {
        Self {
            token_ids: codes.iter().map(|&c| c as usize).collect(),
            content_len,
        }
    }
}

// ---- initialization ---------------------------------------------------------

fn xavier<S: Scalar>(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor<S> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| S::of(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new_unchecked(vec![rows, cols], data)
}

fn small_normal<S: Scalar>(rng: &mut ChaCha20Rng, rows: usize, cols: usize) -> Tensor<S> {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            S::of(0.02 * e)
        })
        .collect();
    Tensor::new_unchecked(vec![rows, cols], data)
}

/// Insert every embedding parameter into the store. Fusion weights start at
/// one so fusion begins as plain concatenation.
pub fn init_embedding_params<S: Scalar>(
    store: &mut ParamStore<S>,
    cfg: &EmbeddingConfig,
    rng: &mut ChaCha20Rng,
) {
    let t = &cfg.transformer;
    let d = t.model_dim;
    store.insert("ehr.token_embed", small_normal(rng, cfg.vocab_size, d));
    for b in 0..t.n_blocks {
        for proj in ["wq", "wk", "wv", "wo"] {
            store.insert(format!("ehr.b{b}.{proj}"), xavier(rng, d, d));
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            store.insert(format!("ehr.b{b}.{bias}"), Tensor::zeros(&[d]));
        }
        for ln in ["ln1", "ln2"] {
            store.insert(format!("ehr.b{b}.{ln}.gain"), Tensor::filled(&[d], S::one()));
            store.insert(format!("ehr.b{b}.{ln}.bias"), Tensor::zeros(&[d]));
        }
        store.insert(
            format!("ehr.b{b}.ffn.w1"),
            xavier(rng, d, t.feedforward_dim),
        );
        store.insert(format!("ehr.b{b}.ffn.b1"), Tensor::zeros(&[t.feedforward_dim]));
        store.insert(
            format!("ehr.b{b}.ffn.w2"),
            xavier(rng, t.feedforward_dim, d),
        );
        store.insert(format!("ehr.b{b}.ffn.b2"), Tensor::zeros(&[d]));
    }
    store.insert("ehr.proj.w", xavier(rng, d, cfg.ehr_dim));
    store.insert("ehr.proj.b", Tensor::zeros(&[cfg.ehr_dim]));

    fn tabular<S: Scalar>(
        store: &mut ParamStore<S>,
        cfg: &EmbeddingConfig,
        prefix: &str,
        input_dim: usize,
        rng: &mut ChaCha20Rng,
    ) {
        store.insert(
            format!("{prefix}.w1"),
            xavier(rng, input_dim, cfg.tabular_hidden_dim),
        );
        store.insert(
            format!("{prefix}.b1"),
            Tensor::zeros(&[cfg.tabular_hidden_dim]),
        );
        store.insert(
            format!("{prefix}.w2"),
            xavier(rng, cfg.tabular_hidden_dim, cfg.tabular_embed_dim),
        );
        store.insert(
            format!("{prefix}.b2"),
            Tensor::zeros(&[cfg.tabular_embed_dim]),
        );
    }
    if cfg.use_demographics {
        tabular(store, cfg, "demo", cfg.demo_input_dim, rng);
        store.insert(
            "fuse.ws",
            Tensor::filled(&[cfg.tabular_embed_dim], S::one()),
        );
    }
    if cfg.use_location {
        tabular(store, cfg, "loc", cfg.loc_input_dim, rng);
        store.insert(
            "fuse.wg",
            Tensor::filled(&[cfg.tabular_embed_dim], S::one()),
        );
    }
    store.insert("fuse.wd", Tensor::filled(&[cfg.ehr_dim], S::one()));
    store.insert(
        "fuse.proj.w",
        xavier(rng, cfg.concat_dim(), cfg.fused_dim),
    );
    store.insert("fuse.proj.b", Tensor::zeros(&[cfg.fused_dim]));
    store.insert("head.w", xavier(rng, cfg.fused_dim, 2));
    store.insert("head.b", Tensor::zeros(&[2]));
}

/// Sinusoidal positional encodings for a `[max_len, model_dim]` block.
pub fn positional_encoding<S: Scalar>(max_len: usize, model_dim: usize) -> Tensor<S> {
    let mut out = Tensor::zeros(&[max_len, model_dim]);
    for pos in 0..max_len {
        for i in 0..model_dim {
            let exponent = (2 * (i / 2)) as f64 / model_dim as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            let value = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            out.set(pos, i, S::of(value));
        }
    }
    out
}

// ---- graph builders ----------------------------------------------------------

/// Linear layer `x W + b` with parameters fetched from the store.
fn linear<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    x: NodeId,
    w_name: &str,
    b_name: &str,
) -> Result<NodeId, EmbeddingError> {
    let w = store.param_node(g, w_name)?;
    let b = store.param_node(g, b_name)?;
    let xw = g.matmul(x, w)?;
    Ok(g.add_row_vec(xw, b)?)
}

/// Layer norm followed by its learned affine (gain and bias nodes must
/// already be registered).
fn layer_norm_affine<S: Scalar>(
    g: &mut Graph<S>,
    x: NodeId,
    gain: NodeId,
    bias: NodeId,
) -> Result<NodeId, EmbeddingError> {
    let normed = g.layer_norm_rows(x)?;
    let scaled = g.mul_row_vec(normed, gain)?;
    Ok(g.add_row_vec(scaled, bias)?)
}

/// EHR tower over a batch of sequences: token embeddings + positional
/// encodings, `n_blocks` of (attention, add & norm, feed-forward,
/// add & norm) with padding masked out of attention, masked mean pooling,
/// and a linear projection to the `h^d` dimension. Returns `[N, ehr_dim]`.
pub fn build_ehr_tower<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    cfg: &EmbeddingConfig,
    sequences: &[SequenceInput],
) -> Result<NodeId, EmbeddingError> {
    let t = &cfg.transformer;
    t.validate()?;
    let table = store.param_node(g, "ehr.token_embed")?;
    let pos = g.constant(positional_encoding(t.max_len, t.model_dim));

    struct BlockParams {
        wq: NodeId,
        bq: NodeId,
        wk: NodeId,
        bk: NodeId,
        wv: NodeId,
        bv: NodeId,
        wo: NodeId,
        bo: NodeId,
        ln1_gain: NodeId,
        ln1_bias: NodeId,
        ln2_gain: NodeId,
        ln2_bias: NodeId,
        ffn_w1: NodeId,
        ffn_b1: NodeId,
        ffn_w2: NodeId,
        ffn_b2: NodeId,
    }
    let mut blocks = Vec::with_capacity(t.n_blocks);
    for b in 0..t.n_blocks {
        let p = |g: &mut Graph<S>, name: &str| store.param_node(g, &format!("ehr.b{b}.{name}"));
        blocks.push(BlockParams {
            wq: p(g, "wq")?,
            bq: p(g, "bq")?,
            wk: p(g, "wk")?,
            bk: p(g, "bk")?,
            wv: p(g, "wv")?,
            bv: p(g, "bv")?,
            wo: p(g, "wo")?,
            bo: p(g, "bo")?,
            ln1_gain: p(g, "ln1.gain")?,
            ln1_bias: p(g, "ln1.bias")?,
            ln2_gain: p(g, "ln2.gain")?,
            ln2_bias: p(g, "ln2.bias")?,
            ffn_w1: p(g, "ffn.w1")?,
            ffn_b1: p(g, "ffn.b1")?,
            ffn_w2: p(g, "ffn.w2")?,
            ffn_b2: p(g, "ffn.b2")?,
        });
    }

    let mut pooled = Vec::with_capacity(sequences.len());
    for (index, seq) in sequences.iter().enumerate() {
        if seq.content_len == 0 {
            return Err(EmbeddingError::NoContentTokens { index });
        }
        debug_assert_eq!(seq.token_ids.len(), t.max_len);
        debug_assert!(seq.token_ids[..seq.content_len]
            .iter()
            .all(|&id| id != PAD_ID as usize));
        let emb = g.gather_rows(table, seq.token_ids.clone())?;
        let mut x = g.add(emb, pos)?;
        for p in &blocks {
            let q = {
                let m = g.matmul(x, p.wq)?;
                g.add_row_vec(m, p.bq)?
            };
            let k = {
                let m = g.matmul(x, p.wk)?;
                g.add_row_vec(m, p.bk)?
            };
            let v = {
                let m = g.matmul(x, p.wv)?;
                g.add_row_vec(m, p.bv)?
            };
            let attn = g.attention(q, k, v, t.n_heads, seq.content_len)?;
            let proj = {
                let m = g.matmul(attn, p.wo)?;
                g.add_row_vec(m, p.bo)?
            };
            let res1 = g.add(x, proj)?;
            let x1 = layer_norm_affine(g, res1, p.ln1_gain, p.ln1_bias)?;
            let hidden = {
                let m = g.matmul(x1, p.ffn_w1)?;
                let m = g.add_row_vec(m, p.ffn_b1)?;
                g.relu(m)?
            };
            let ffn = {
                let m = g.matmul(hidden, p.ffn_w2)?;
                g.add_row_vec(m, p.ffn_b2)?
            };
            let res2 = g.add(x1, ffn)?;
            x = layer_norm_affine(g, res2, p.ln2_gain, p.ln2_bias)?;
        }
        // Mean over content positions only.
        let mut mask = Tensor::zeros(&[1, t.max_len]);
        let inv = S::one() / S::of(seq.content_len as f64);
        for j in 0..seq.content_len {
            mask.set(0, j, inv);
        }
        let mask = g.constant(mask);
        pooled.push(g.matmul(mask, x)?);
    }
    let stacked = g.concat_rows(&pooled)?;
    linear(g, store, stacked, "ehr.proj.w", "ehr.proj.b")
}

/// Two fully-connected layers with a ReLU between them: `[N, in] -> [N, out]`.
pub fn build_tabular_tower<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    prefix: &str,
    input: NodeId,
) -> Result<NodeId, EmbeddingError> {
    let hidden = linear(g, store, input, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
    let activated = g.relu(hidden)?;
    linear(
        g,
        store,
        activated,
        &format!("{prefix}.w2"),
        &format!("{prefix}.b2"),
    )
}

/// Hadamard-scale each modality by its fusion weight and concatenate in
/// fixed (d, s, g) order, then project to the fused dimension.
pub fn build_fusion<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    parts: &[(NodeId, &str)],
) -> Result<NodeId, EmbeddingError> {
    let mut scaled = Vec::with_capacity(parts.len());
    for &(node, weight_name) in parts {
        let w = store.param_node(g, weight_name)?;
        scaled.push(g.mul_row_vec(node, w)?);
    }
    let cat = g.concat_cols(&scaled)?;
    linear(g, store, cat, "fuse.proj.w", "fuse.proj.b")
}

/// Linear classification head over fused latents: `[N, fused] -> [N, 2]`.
pub fn build_head<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    latents: NodeId,
) -> Result<NodeId, EmbeddingError> {
    linear(g, store, latents, "head.w", "head.b")
}

// ---- single-input numeric wrappers --------------------------------------------

/// Per-modality Hadamard fusion weights.
#[derive(Debug, Clone)]
pub struct FusionWeights<S> {
    pub w_d: Vec<S>,
    pub w_s: Vec<S>,
    pub w_g: Vec<S>,
}

/// `h^d ∘ W_d ⊕ h^s ∘ W_s ⊕ h^g ∘ W_g`: elementwise products concatenated
/// in fixed (d, s, g) order. The learned projection to the fused dimension
/// is applied separately.
pub fn fuse_vectors<S: Scalar>(
    h_d: &[S],
    h_s: &[S],
    h_g: &[S],
    weights: &FusionWeights<S>,
) -> Result<Vec<S>, EmbeddingError> {
    for (h, w, name) in [
        (h_d, &weights.w_d, "d"),
        (h_s, &weights.w_s, "s"),
        (h_g, &weights.w_g, "g"),
    ] {
        if h.len() != w.len() {
            return Err(EmbeddingError::BadConfig {
                msg: format!(
                    "modality `{name}`: embedding dim {} != weight dim {}",
                    h.len(),
                    w.len()
                ),
            });
        }
    }
    let mut out = Vec::with_capacity(h_d.len() + h_s.len() + h_g.len());
    for (h, w) in [(h_d, &weights.w_d), (h_s, &weights.w_s), (h_g, &weights.w_g)] {
        out.extend(h.iter().zip(w).map(|(&a, &b)| a * b));
    }
    Ok(out)
}

/// EHR tower over a single sequence; returns the `h^d` vector.
pub fn embed_ehr<S: Scalar>(
    store: &ParamStore<S>,
    cfg: &EmbeddingConfig,
    sequence: &SequenceInput,
) -> Result<Vec<S>, EmbeddingError> {
    let mut g = Graph::new();
    let out = build_ehr_tower(&mut g, store, cfg, std::slice::from_ref(sequence))?;
    let eval = g.evaluate(&std::collections::BTreeMap::new())?;
    Ok(eval.value(out).row(0).to_vec())
}

/// Tabular tower over a single feature vector; returns `h^s` or `h^g`.
pub fn embed_tabular<S: Scalar>(
    store: &ParamStore<S>,
    prefix: &str,
    features: &[S],
) -> Result<Vec<S>, EmbeddingError> {
    let mut g = Graph::new();
    let input = g.constant(Tensor::new_unchecked(
        vec![1, features.len()],
        features.to_vec(),
    ));
    let out = build_tabular_tower(&mut g, store, prefix, input)?;
    let eval = g.evaluate(&std::collections::BTreeMap::new())?;
    Ok(eval.value(out).row(0).to_vec())
}

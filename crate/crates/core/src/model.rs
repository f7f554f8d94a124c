//! Model assembly: a named parameter store plus the configuration that wires
//! the embedding towers, the ARD kernel and the variational GP head into one
//! differentiable objective.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AdError, Graph, NodeId};
use crate::data::Cohort;
use crate::embeddings::{
    self, EmbeddingConfig, EmbeddingError, SequenceInput, TransformerConfig,
};
use crate::kernel::{self, KernelError, LengthScales};
use crate::rng::{stream_rng, Stream};
use crate::scalar::Scalar;
use crate::svgp::{
    self, ElboConfig, ElboEstimate, ElboNodes, MeanNodes, SvgpError, VariationalMean,
    VariationalState,
};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error(transparent)]
    Svgp(#[from] SvgpError),
    #[error("configuration invalid: {msg}")]
    BadConfig { msg: String },
    #[error("batch dimension mismatch: {msg}")]
    DimMismatch { msg: String },
    #[error("model has not been trained")]
    Untrained,
}

/// Named trainable tensors. Iteration order is the parameter name order, so
/// everything built on top of it is deterministic.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, AdError> {
        self.map.get(name).ok_or_else(|| AdError::UnknownParam {
            name: name.to_string(),
        })
    }

    pub fn set(&mut self, name: &str, value: Tensor<S>) -> Result<(), AdError> {
        match self.map.get_mut(name) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(AdError::UnknownParam {
                name: name.to_string(),
            }),
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Register the stored tensor as a graph parameter under its name.
    pub fn param_node(&self, g: &mut Graph<S>, name: &str) -> Result<NodeId, AdError> {
        let value = self.get(name)?.clone();
        g.param(name.to_string(), value)
    }

    /// Copy graph-side parameter values back into the store (used by tests
    /// and the finite-difference harness; the optimizer writes directly).
    pub fn absorb_from(&mut self, graph: &Graph<S>) -> Result<(), AdError> {
        let names: Vec<String> = graph.param_names().map(str::to_string).collect();
        for name in names {
            let value = graph.param_value(&name)?.clone();
            self.set(&name, value)?;
        }
        Ok(())
    }
}

/// Full model hyperparameters; serialized into checkpoints so a loaded model
/// rebuilds the exact same parameter shapes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub feedforward_dim: usize,
    pub ehr_dim: usize,
    pub demo_input_dim: usize,
    pub loc_input_dim: usize,
    pub tabular_hidden_dim: usize,
    pub tabular_embed_dim: usize,
    pub fused_dim: usize,
    pub inducing_count: usize,
    pub use_demographics: bool,
    pub use_location: bool,
    /// Free per-inducing-point variational mean instead of `Z alpha`.
    pub free_mean: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size < 2 {
            return Err(ModelError::BadConfig {
                msg: "vocab_size must include the reserved ids".into(),
            });
        }
        if self.inducing_count == 0 {
            return Err(ModelError::BadConfig {
                msg: "need at least one inducing point".into(),
            });
        }
        if self.fused_dim == 0 {
            return Err(ModelError::BadConfig {
                msg: "fused_dim must be positive".into(),
            });
        }
        self.embedding_config()
            .transformer
            .validate()
            .map_err(ModelError::from)
    }

    pub fn embedding_config(&self) -> EmbeddingConfig {
        EmbeddingConfig {
            transformer: TransformerConfig {
                n_blocks: self.n_blocks,
                n_heads: self.n_heads,
                model_dim: self.model_dim,
                feedforward_dim: self.feedforward_dim,
                max_len: self.max_len,
            },
            vocab_size: self.vocab_size,
            ehr_dim: self.ehr_dim,
            demo_input_dim: self.demo_input_dim,
            loc_input_dim: self.loc_input_dim,
            tabular_hidden_dim: self.tabular_hidden_dim,
            tabular_embed_dim: self.tabular_embed_dim,
            fused_dim: self.fused_dim,
            use_demographics: self.use_demographics,
            use_location: self.use_location,
        }
    }
}

/// Materialized view of one batch, ready for the graph builders.
pub struct BatchData<S> {
    pub sequences: Vec<SequenceInput>,
    pub demographics: Option<Tensor<S>>,
    pub location: Option<Tensor<S>>,
    pub labels: Vec<u8>,
    pub patient_ids: Vec<String>,
}

/// The trainable model: embedding weights, fusion weights, kernel
/// lengthscales, inducing points and variational parameters, all in one
/// named store.
#[derive(Debug, Clone)]
pub struct RiskModel<S> {
    pub config: ModelConfig,
    pub params: ParamStore<S>,
    pub svi_trained: bool,
}

impl<S: Scalar> RiskModel<S> {
    /// Fresh model with deterministic initialization.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let mut params = ParamStore::new();
        embeddings::init_embedding_params(&mut params, &config.embedding_config(), &mut rng);
        params.insert("kernel.log_l", Tensor::zeros(&[config.fused_dim]));
        params.insert(
            "svgp.z",
            normal_tensor(&mut rng, &[config.inducing_count, config.fused_dim]),
        );
        if config.free_mean {
            params.insert("svgp.m", Tensor::zeros(&[config.inducing_count, 1]));
        } else {
            params.insert("svgp.alpha", Tensor::zeros(&[config.fused_dim, 1]));
        }
        params.insert("svgp.log_sigma2", Tensor::scalar(S::zero()));
        Ok(Self {
            config,
            params,
            svi_trained: false,
        })
    }

    /// Assemble the graph inputs for a set of cohort indices.
    pub fn batch_data(
        &self,
        cohort: &Cohort<S>,
        indices: &[usize],
    ) -> Result<BatchData<S>, ModelError> {
        if cohort.max_len != self.config.max_len {
            return Err(ModelError::DimMismatch {
                msg: format!(
                    "cohort max_len {} != model max_len {}",
                    cohort.max_len, self.config.max_len
                ),
            });
        }
        if cohort.vocab_size > self.config.vocab_size {
            return Err(ModelError::DimMismatch {
                msg: format!(
                    "cohort vocabulary {} exceeds model vocabulary {}",
                    cohort.vocab_size, self.config.vocab_size
                ),
            });
        }
        let mut sequences = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        let mut patient_ids = Vec::with_capacity(indices.len());
        let mut demo_rows = Vec::with_capacity(indices.len());
        let mut loc_rows = Vec::with_capacity(indices.len());
        for &i in indices {
            let seq = &cohort.sequences[i];
            sequences.push(SequenceInput::from_padded(&seq.codes, seq.content_len));
            labels.push(seq.label);
            patient_ids.push(seq.patient_id.clone());
            let feats = &cohort.features[i];
            if self.config.use_demographics {
                if feats.demographics.len() != self.config.demo_input_dim {
                    return Err(ModelError::DimMismatch {
                        msg: format!(
                            "demographics dim {} != configured {}",
                            feats.demographics.len(),
                            self.config.demo_input_dim
                        ),
                    });
                }
                demo_rows.push(feats.demographics.clone());
            }
            if self.config.use_location {
                if feats.location.len() != self.config.loc_input_dim {
                    return Err(ModelError::DimMismatch {
                        msg: format!(
                            "location dim {} != configured {}",
                            feats.location.len(),
                            self.config.loc_input_dim
                        ),
                    });
                }
                loc_rows.push(feats.location.clone());
            }
        }
        Ok(BatchData {
            sequences,
            demographics: self
                .config
                .use_demographics
                .then(|| Tensor::from_rows(&demo_rows)),
            location: self.config.use_location.then(|| Tensor::from_rows(&loc_rows)),
            labels,
            patient_ids,
        })
    }

    /// Append the fused-latent computation for a batch to the graph and
    /// return the `[N, fused_dim]` node.
    ///
    /// The projected fused vector is standardized per row and scaled to unit
    /// norm, which keeps latent distances inside the RBF kernel's active
    /// range for unit lengthscales regardless of how the towers scale their
    /// outputs during training.
    pub fn build_latents(
        &self,
        g: &mut Graph<S>,
        batch: &BatchData<S>,
    ) -> Result<NodeId, ModelError> {
        let cfg = self.config.embedding_config();
        let h_d = embeddings::build_ehr_tower(g, &self.params, &cfg, &batch.sequences)?;
        let mut parts: Vec<(NodeId, &str)> = vec![(h_d, "fuse.wd")];
        if let Some(demo) = &batch.demographics {
            let input = g.constant(demo.clone());
            let h_s = embeddings::build_tabular_tower(g, &self.params, "demo", input)?;
            parts.push((h_s, "fuse.ws"));
        }
        if let Some(loc) = &batch.location {
            let input = g.constant(loc.clone());
            let h_g = embeddings::build_tabular_tower(g, &self.params, "loc", input)?;
            parts.push((h_g, "fuse.wg"));
        }
        let fused = embeddings::build_fusion(g, &self.params, &parts)?;
        let normed = g.layer_norm_rows(fused)?;
        let unit = g.scale(normed, S::one() / S::of(self.config.fused_dim as f64).sqrt())?;
        g.label(unit, "fuse.latents");
        Ok(unit)
    }

    /// Fused latent vectors for a set of patients, `[N, fused_dim]`.
    pub fn latents(&self, cohort: &Cohort<S>, indices: &[usize]) -> Result<Tensor<S>, ModelError> {
        let batch = self.batch_data(cohort, indices)?;
        let mut g = Graph::new();
        let node = self.build_latents(&mut g, &batch)?;
        let eval = g.evaluate(&BTreeMap::new())?;
        Ok(eval.value(node).clone())
    }

    /// Cross-entropy pre-training loss graph over a batch.
    pub fn pretrain_loss_graph(
        &self,
        cohort: &Cohort<S>,
        indices: &[usize],
    ) -> Result<(Graph<S>, NodeId), ModelError> {
        let batch = self.batch_data(cohort, indices)?;
        let mut g = Graph::new();
        let latents = self.build_latents(&mut g, &batch)?;
        let logits = embeddings::build_head(&mut g, &self.params, latents)?;
        let labels = batch.labels.iter().map(|&y| y as usize).collect();
        let loss = g.cross_entropy_mean(logits, labels)?;
        g.label(loss, "pretrain.loss");
        g.output("loss", loss)?;
        Ok((g, loss))
    }

    /// Class-1 probability under the pre-training head (the plain
    /// fully-connected classifier variant).
    pub fn head_probabilities(
        &self,
        cohort: &Cohort<S>,
        indices: &[usize],
    ) -> Result<Vec<S>, ModelError> {
        let batch = self.batch_data(cohort, indices)?;
        let mut g = Graph::new();
        let latents = self.build_latents(&mut g, &batch)?;
        let logits = embeddings::build_head(&mut g, &self.params, latents)?;
        let probs = g.softmax_rows(logits)?;
        let eval = g.evaluate(&BTreeMap::new())?;
        let p = eval.value(probs);
        Ok((0..p.rows()).map(|i| p.at(i, 1)).collect())
    }

    /// Build the full differentiable ELBO for a batch: embeddings through
    /// kernel through variational parameters.
    pub fn elbo_graph(
        &self,
        cohort: &Cohort<S>,
        indices: &[usize],
        config: ElboConfig,
    ) -> Result<(Graph<S>, ElboNodes), ModelError> {
        let batch = self.batch_data(cohort, indices)?;
        let jitter = kernel::choose_jitter(self.params.get("svgp.z")?, &self.lengthscales()?)?;
        let mut g = Graph::new();
        let latents = self.build_latents(&mut g, &batch)?;
        let z = self.params.param_node(&mut g, "svgp.z")?;
        let log_l = self.params.param_node(&mut g, "kernel.log_l")?;
        let mean = if self.config.free_mean {
            MeanNodes::Free(self.params.param_node(&mut g, "svgp.m")?)
        } else {
            MeanNodes::Alpha(self.params.param_node(&mut g, "svgp.alpha")?)
        };
        let log_sigma2 = self.params.param_node(&mut g, "svgp.log_sigma2")?;
        let nodes = svgp::build_elbo_graph(
            &mut g,
            latents,
            &batch.labels,
            z,
            log_l,
            mean,
            log_sigma2,
            jitter,
            config,
        )?;
        g.output("elbo", nodes.elbo)?;
        g.output("likelihood", nodes.likelihood)?;
        g.output("kl", nodes.kl)?;
        Ok((g, nodes))
    }

    /// Monte-Carlo ELBO estimate for a batch (numeric route; agrees with the
    /// graph route for the same seed).
    pub fn elbo_batch(
        &self,
        cohort: &Cohort<S>,
        indices: &[usize],
        config: ElboConfig,
    ) -> Result<ElboEstimate<S>, ModelError> {
        let latents = self.latents(cohort, indices)?;
        let labels: Vec<u8> = indices.iter().map(|&i| cohort.sequences[i].label).collect();
        let state = self.variational_state()?;
        let ls = self.lengthscales()?;
        Ok(svgp::elbo_on_latents(&latents, &labels, &state, &ls, config)?)
    }

    pub fn lengthscales(&self) -> Result<LengthScales<S>, ModelError> {
        let log_l = self.params.get("kernel.log_l")?;
        Ok(LengthScales::from_log_values(log_l.data().to_vec()))
    }

    pub fn variational_state(&self) -> Result<VariationalState<S>, ModelError> {
        let z = self.params.get("svgp.z")?.clone();
        let mean = if self.config.free_mean {
            VariationalMean::Free(self.params.get("svgp.m")?.clone())
        } else {
            VariationalMean::ZAlpha(self.params.get("svgp.alpha")?.clone())
        };
        let log_sigma2 = self.params.get("svgp.log_sigma2")?.scalar_value();
        Ok(VariationalState {
            z,
            mean,
            log_sigma2,
        })
    }

    /// Re-seat the inducing points on k-means centroids of the given latent
    /// rows (random subsample with jitter when there are fewer rows than
    /// inducing points).
    pub fn init_inducing_from_latents(
        &mut self,
        latents: &Tensor<S>,
        seed: u64,
    ) -> Result<(), ModelError> {
        let m = self.config.inducing_count;
        let mut rng = stream_rng(seed, Stream::Init, 1);
        let z = if latents.rows() >= m {
            kmeans_centroids(latents, m, 25, &mut rng)
        } else {
            let mut rows = Vec::with_capacity(m);
            for i in 0..m {
                let src = if i < latents.rows() {
                    i
                } else {
                    rng.random_range(0..latents.rows())
                };
                let mut row = latents.row(src).to_vec();
                if i >= latents.rows() {
                    for x in &mut row {
                        let e: f64 = StandardNormal.sample(&mut rng);
                        *x = *x + S::of(0.01 * e);
                    }
                }
                rows.push(row);
            }
            Tensor::from_rows(&rows)
        };
        self.params.set("svgp.z", z)?;
        Ok(())
    }

    /// Parameters the SVI loop optimizes: everything except the pre-training
    /// head, which is kept only as the standalone classifier variant.
    pub fn svi_param_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !n.starts_with("head."))
            .map(str::to_string)
            .collect()
    }
}

fn normal_tensor<S: Scalar>(rng: &mut ChaCha20Rng, shape: &[usize]) -> Tensor<S> {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| {
            let e: f64 = StandardNormal.sample(rng);
            S::of(e)
        })
        .collect();
    Tensor::new_unchecked(shape.to_vec(), data)
}

/// Plain Lloyd iterations from a random distinct-point initialization.
/// Empty clusters keep their previous centroid.
fn kmeans_centroids<S: Scalar>(
    points: &Tensor<S>,
    k: usize,
    iters: usize,
    rng: &mut ChaCha20Rng,
) -> Tensor<S> {
    let n = points.rows();
    let d = points.cols();
    let mut order: Vec<usize> = (0..n).collect();
    use rand::seq::SliceRandom;
    order.shuffle(rng);
    let mut centroids: Vec<Vec<S>> = order[..k].iter().map(|&i| points.row(i).to_vec()).collect();
    let mut assignment = vec![0usize; n];
    for _ in 0..iters {
        let mut moved = false;
        for i in 0..n {
            let row = points.row(i);
            let mut best = 0;
            let mut best_d = S::infinity();
            for (c, centroid) in centroids.iter().enumerate() {
                let mut dist = S::zero();
                for (&a, &b) in row.iter().zip(centroid) {
                    let diff = a - b;
                    dist = dist + diff * diff;
                }
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            if assignment[i] != best {
                assignment[i] = best;
                moved = true;
            }
        }
        let mut sums = vec![vec![S::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignment[i]] += 1;
            for (s, &v) in sums[assignment[i]].iter_mut().zip(points.row(i)) {
                *s = *s + v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = S::one() / S::of(counts[c] as f64);
                for (dst, &s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *dst = s * inv;
                }
            }
        }
        if !moved {
            break;
        }
    }
    Tensor::from_rows(&centroids)
}

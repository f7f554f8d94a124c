//! Training orchestration: pre-training handoff, Adam with bias correction,
//! gradient clipping, the stochastic variational inference loop, convergence
//! tracking and divergence detection.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autodiff::{AdError, GradientMap};
use crate::data::Cohort;
use crate::embeddings::{self, EmbeddingError, PretrainConfig};
use crate::metrics::{self, MetricsError};
use crate::model::{ModelError, ParamStore, RiskModel};
use crate::predict::{self, PredictError};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::scalar::Scalar;
use crate::svgp::{ElboConfig, SvgpError};
use crate::tensor::Tensor;

/// Sample count for per-epoch validation metrics; the final evaluation uses
/// the configured `b_eval` instead.
const B_VAL_METRICS: usize = 64;

/// Subsample cap for the k-means inducing-point initialization.
const KMEANS_SUBSAMPLE: usize = 2048;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Svgp(#[from] SvgpError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Predict(#[from] PredictError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cohort has no `{which}` split")]
    MissingSplit { which: &'static str },
    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },
    #[error("training diverged at epoch {epoch}: ELBO {current} fell below initial {initial} by 10x its magnitude")]
    Diverged {
        epoch: usize,
        initial: f64,
        current: f64,
        report: Box<TrainReport>,
    },
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Epochs without relative validation-ELBO improvement before stopping.
    pub patience: usize,
    /// Monte-Carlo samples per training step.
    pub b_train: usize,
    /// Monte-Carlo samples at evaluation time.
    pub b_eval: usize,
    pub pretrain_epochs: usize,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    /// Relative validation-ELBO improvement that resets patience.
    pub min_rel_improvement: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 50,
            patience: 5,
            b_train: 8,
            b_eval: 512,
            pretrain_epochs: 10,
            grad_clip: 10.0,
            min_rel_improvement: 1e-4,
            seed: 7,
        }
    }
}

/// Whether a step ascends or descends the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

/// First/second-moment accumulators for Adam, keyed like the parameters.
#[derive(Debug, Clone, Default)]
pub struct AdamState<S> {
    pub m: BTreeMap<String, Tensor<S>>,
    pub v: BTreeMap<String, Tensor<S>>,
    pub t: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new() -> Self {
        Self {
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One bias-corrected Adam update over every gradient entry.
    pub fn step(
        &mut self,
        params: &mut ParamStore<S>,
        grads: &GradientMap<S>,
        config: &TrainConfig,
        direction: Direction,
    ) -> Result<(), TrainError> {
        self.t += 1;
        let b1 = S::of(config.beta1);
        let b2 = S::of(config.beta2);
        let eps = S::of(config.epsilon);
        let lr = S::of(config.learning_rate);
        let corr1 = S::one() - S::of(config.beta1.powi(self.t as i32));
        let corr2 = S::one() - S::of(config.beta2.powi(self.t as i32));
        for (name, grad) in grads {
            if !grad.all_finite() {
                return Err(TrainError::NonFiniteGradient {
                    param: name.clone(),
                });
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let mut value = params.get(name)?.clone();
            for ((p, (mi, vi)), &g) in value
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
                .zip(grad.data())
            {
                *mi = b1 * *mi + (S::one() - b1) * g;
                *vi = b2 * *vi + (S::one() - b2) * g * g;
                let m_hat = *mi / corr1;
                let v_hat = *vi / corr2;
                let delta = lr * m_hat / (v_hat.sqrt() + eps);
                *p = match direction {
                    Direction::Maximize => *p + delta,
                    Direction::Minimize => *p - delta,
                };
            }
            params.set(name, value)?;
        }
        Ok(())
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<S: Scalar>(grads: &mut GradientMap<S>, max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for grad in grads.values() {
        for &g in grad.data() {
            let g = g.as_f64();
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = S::of(max_norm / norm);
        for grad in grads.values_mut() {
            for g in grad.data_mut() {
                *g = *g * scale;
            }
        }
    }
    norm
}

/// One row of the training log.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub elbo: f64,
    pub val_f1: f64,
    pub val_kappa: f64,
    pub val_prauc: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum StoppingReason {
    /// Validation ELBO failed to improve for `patience` epochs.
    Converged { at_epoch: usize },
    MaxEpochs,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub stopping: StoppingReason,
    /// Epoch whose parameters the returned model carries.
    pub best_epoch: Option<usize>,
}

/// Pre-train the embedding towers, seat the inducing points on k-means
/// centroids of the pre-trained latents, then run stochastic gradient
/// ascent on the ELBO until validation convergence or the epoch budget.
///
/// The model is left holding the best-validation parameters.
pub fn fit<S: Scalar>(
    model: &mut RiskModel<S>,
    cohort: &Cohort<S>,
    config: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    let train_idx = cohort.split_indices(crate::data::Split::Train);
    if train_idx.is_empty() {
        return Err(TrainError::MissingSplit { which: "train" });
    }
    if config.pretrain_epochs > 0 {
        let pretrain_cfg = PretrainConfig {
            epochs: config.pretrain_epochs,
            batch_size: config.batch_size,
            learning_rate: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            epsilon: config.epsilon,
            seed: config.seed,
        };
        embeddings::pretrain(model, cohort, &train_idx, &pretrain_cfg)?;
    }
    if !model.svi_trained {
        let mut subsample = train_idx.clone();
        let mut rng = stream_rng(config.seed, Stream::Init, 7);
        subsample.shuffle(&mut rng);
        subsample.truncate(KMEANS_SUBSAMPLE);
        let latents = model.latents(cohort, &subsample)?;
        model.init_inducing_from_latents(&latents, config.seed)?;
    }
    if config.max_epochs == 0 {
        return Ok(TrainReport {
            epochs: Vec::new(),
            stopping: StoppingReason::MaxEpochs,
            best_epoch: None,
        });
    }
    let val_idx = cohort.split_indices(crate::data::Split::Val);
    if val_idx.is_empty() {
        return Err(TrainError::MissingSplit { which: "val" });
    }

    model.svi_trained = true;
    let mut adam = AdamState::new();
    let mut report = TrainReport {
        epochs: Vec::new(),
        stopping: StoppingReason::MaxEpochs,
        best_epoch: None,
    };
    let mut best_val = f64::NEG_INFINITY;
    let mut best_params: Option<ParamStore<S>> = None;
    let mut stale = 0usize;
    let mut initial_elbo: Option<f64> = None;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let epoch_elbo = run_svi_epoch(model, &mut adam, cohort, &train_idx, config, epoch)?;
        let initial = *initial_elbo.get_or_insert(epoch_elbo);
        if epoch_elbo < initial - 10.0 * initial.abs().max(1.0) {
            return Err(TrainError::Diverged {
                epoch,
                initial,
                current: epoch_elbo,
                report: Box::new(report),
            });
        }

        // Fixed-noise validation ELBO keeps epochs comparable.
        let val_elbo = model
            .elbo_batch(
                cohort,
                &val_idx,
                ElboConfig {
                    n_samples: config.b_train.max(8),
                    total_count: val_idx.len(),
                    seed: derive_seed(config.seed, Stream::ValSampling, 0),
                },
            )?
            .value
            .as_f64();

        let preds = predict::predict(
            model,
            cohort,
            &val_idx,
            B_VAL_METRICS,
            derive_seed(config.seed, Stream::ValSampling, 1),
        )?;
        let labels: Vec<u8> = val_idx.iter().map(|&i| cohort.sequences[i].label).collect();
        let hard: Vec<u8> = preds.iter().map(|p| p.label_pred).collect();
        let scores: Vec<S> = preds.iter().map(|p| p.dist.mean).collect();
        let eval = metrics::evaluate_all(&labels, &hard, &scores)?;

        report.epochs.push(EpochRecord {
            epoch,
            elbo: epoch_elbo,
            val_f1: eval.f1,
            val_kappa: eval.kappa,
            val_prauc: eval.pr_auc,
            seconds: started.elapsed().as_secs_f64(),
        });

        let improved = val_elbo > best_val + config.min_rel_improvement * best_val.abs().max(1.0);
        if improved || best_params.is_none() {
            best_val = val_elbo;
            best_params = Some(model.params.clone());
            report.best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                report.stopping = StoppingReason::Converged { at_epoch: epoch };
                break;
            }
        }
    }
    if let Some(params) = best_params {
        model.params = params;
    }
    Ok(report)
}

/// One full pass over the shuffled training set; returns the mean per-batch
/// ELBO. Exposed so mid-training checkpoint resumption can be verified to
/// continue the exact seed stream.
pub fn run_svi_epoch<S: Scalar>(
    model: &mut RiskModel<S>,
    adam: &mut AdamState<S>,
    cohort: &Cohort<S>,
    train_idx: &[usize],
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    let mut order = train_idx.to_vec();
    let mut rng = stream_rng(config.seed, Stream::Shuffle, epoch as u64);
    order.shuffle(&mut rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for (batch_index, chunk) in order.chunks(config.batch_size).enumerate() {
        let elbo_config = ElboConfig {
            n_samples: config.b_train,
            total_count: train_idx.len(),
            seed: derive_seed(
                config.seed,
                Stream::McSampling,
                ((epoch as u64) << 32) | batch_index as u64,
            ),
        };
        let (graph, nodes) = model.elbo_graph(cohort, chunk, elbo_config)?;
        let eval = graph.evaluate(&BTreeMap::new())?;
        let elbo = eval.value(nodes.elbo).scalar_value().as_f64();
        let mut grads = graph.gradient_from_eval(&eval, nodes.elbo)?;
        clip_global_norm(&mut grads, config.grad_clip);
        adam.step(&mut model.params, &grads, config, Direction::Maximize)?;
        total += elbo;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

//! Supervised pre-training of the embedding towers: a linear head over the
//! fused latents, cross-entropy loss, Adam over minibatches. The trained
//! head doubles as the plain fully-connected classifier variant.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::data::Cohort;
use crate::model::RiskModel;
use crate::rng::stream_rng;
use crate::scalar::Scalar;
use crate::train::{AdamState, Direction, TrainConfig, TrainError};

#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 256,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Minimize cross-entropy of the linear head over minibatches. With zero
/// epochs the model is untouched.
pub fn pretrain<S: Scalar>(
    model: &mut RiskModel<S>,
    cohort: &Cohort<S>,
    train_idx: &[usize],
    config: &PretrainConfig,
) -> Result<PretrainOutcome, TrainError> {
    let adam_cfg = TrainConfig {
        learning_rate: config.learning_rate,
        beta1: config.beta1,
        beta2: config.beta2,
        epsilon: config.epsilon,
        ..TrainConfig::default()
    };
    let mut adam = AdamState::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    for epoch in 1..=config.epochs {
        let mut order = train_idx.to_vec();
        // offset substream so SVI epochs reuse the plain epoch indices
        let mut rng = stream_rng(config.seed, crate::rng::Stream::Shuffle, (1 << 40) | epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (graph, loss) = model.pretrain_loss_graph(cohort, chunk)?;
            let eval = graph.evaluate(&BTreeMap::new())?;
            total += eval.value(loss).scalar_value().as_f64();
            let grads = graph.gradient_from_eval(&eval, loss)?;
            adam.step(&mut model.params, &grads, &adam_cfg, Direction::Minimize)?;
            batches += 1;
        }
        epoch_losses.push(total / batches.max(1) as f64);
    }
    Ok(PretrainOutcome { epoch_losses })
}

//! Self-describing JSON checkpoint container: model configuration, named
//! tensors, and optional optimizer state for mid-training resumption.
//! Write/read round-trips are exact (f64 values survive JSON bit-for-bit).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelConfig, ModelError, ParamStore, RiskModel};
use crate::scalar::Scalar;
use crate::tensor::{Tensor, TensorError};
use crate::train::AdamState;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported checkpoint format version {found} (expected {FORMAT_VERSION})")]
    Version { found: u32 },
    #[error("tensor `{name}` is malformed: {source}")]
    Tensor {
        name: String,
        #[source]
        source: TensorError,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Shape plus row-major values, serialized through `f64`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorData {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_tensor<S: Scalar>(t: &Tensor<S>) -> Self {
        Self {
            shape: t.shape().to_vec(),
            data: t.data().iter().map(|v| v.as_f64()).collect(),
        }
    }

    pub fn to_tensor<S: Scalar>(&self, name: &str) -> Result<Tensor<S>, CheckpointError> {
        Tensor::from_vec(
            self.shape.clone(),
            self.data.iter().map(|&v| S::of(v)).collect(),
        )
        .map_err(|source| CheckpointError::Tensor {
            name: name.to_string(),
            source,
        })
    }
}

/// Optimizer state for exact training resumption.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainState {
    pub adam_m: BTreeMap<String, TensorData>,
    pub adam_v: BTreeMap<String, TensorData>,
    pub adam_t: u64,
    /// The next epoch index the seed streams would use.
    pub next_epoch: usize,
}

impl TrainState {
    pub fn from_adam<S: Scalar>(adam: &AdamState<S>, next_epoch: usize) -> Self {
        let pack = |map: &BTreeMap<String, Tensor<S>>| {
            map.iter()
                .map(|(k, v)| (k.clone(), TensorData::from_tensor(v)))
                .collect()
        };
        Self {
            adam_m: pack(&adam.m),
            adam_v: pack(&adam.v),
            adam_t: adam.t,
            next_epoch,
        }
    }

    pub fn to_adam<S: Scalar>(&self) -> Result<AdamState<S>, CheckpointError> {
        let unpack = |map: &BTreeMap<String, TensorData>| {
            map.iter()
                .map(|(k, v)| Ok((k.clone(), v.to_tensor::<S>(k)?)))
                .collect::<Result<BTreeMap<_, _>, CheckpointError>>()
        };
        Ok(AdamState {
            m: unpack(&self.adam_m)?,
            v: unpack(&self.adam_v)?,
            t: self.adam_t,
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub svi_trained: bool,
    pub tensors: BTreeMap<String, TensorData>,
    pub train_state: Option<TrainState>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(model: &RiskModel<S>, train_state: Option<TrainState>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            config: model.config.clone(),
            svi_trained: model.svi_trained,
            tensors: model
                .params
                .iter()
                .map(|(name, tensor)| (name.to_string(), TensorData::from_tensor(tensor)))
                .collect(),
            train_state,
        }
    }

    pub fn to_model<S: Scalar>(&self) -> Result<RiskModel<S>, CheckpointError> {
        if self.format_version != FORMAT_VERSION {
            return Err(CheckpointError::Version {
                found: self.format_version,
            });
        }
        self.config.validate()?;
        let mut params = ParamStore::new();
        for (name, data) in &self.tensors {
            params.insert(name.clone(), data.to_tensor::<S>(name)?);
        }
        Ok(RiskModel {
            config: self.config.clone(),
            params,
            svi_trained: self.svi_trained,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let json = serde_json::to_string(self)?;
        std::fs::write(path, json).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let raw = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Ok(serde_json::from_str(&raw)?)
    }
}
